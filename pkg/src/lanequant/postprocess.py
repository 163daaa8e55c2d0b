"""Decode keypoint head outputs into lane polylines."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

CONF, LOCAL, ROOT = "conf", "local_off", "root_off"


@dataclass
class Lane:
    """Polyline in pixel coordinates, ordered bottom to top (descending y)."""

    points: np.ndarray  # (k, 2) columns x, y

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def xs(self) -> np.ndarray:
        return self.points[:, 0]

    @property
    def ys(self) -> np.ndarray:
        return self.points[:, 1]

    def to_list(self) -> list[list[float]]:
        return [[float(x), float(y)] for x, y in self.points]

    @classmethod
    def from_list(cls, pts) -> "Lane":
        lane = cls(np.asarray(pts, dtype=np.float64))
        order = np.argsort(-lane.ys, kind="stable")
        return cls(lane.points[order])

    def __eq__(self, other) -> bool:
        return isinstance(other, Lane) and np.array_equal(self.points, other.points)


@dataclass(frozen=True)
class DecodeConfig:
    threshold: float = 0.5
    stride: int = 4
    cluster_radius: float = 8.0


def _as_map(heads) -> Mapping[str, np.ndarray]:
    # accepts a HeadOutput or a plain mapping of arrays / tensors
    if hasattr(heads, "arrays"):
        heads = heads.arrays()
    out = {}
    for k, v in heads.items():
        v = getattr(v, "value", v)
        v = np.asarray(v, dtype=np.float64)
        if v.ndim == 4:
            if v.shape[0] != 1:
                raise ValueError(f"decode works on one image; head {k!r} has batch {v.shape[0]}")
            v = v[0]
        out[k] = v
    return out


def decode(heads, threshold: float = 0.5, stride: int = 4, cluster_radius: float = 8.0) -> list[Lane]:
    """Threshold, offset, cluster by predicted root, and order into lanes.

    Keypoints are visited in descending confidence (ties: lower row, then
    lower col). Each joins the nearest existing cluster whose centroid of
    predicted roots lies within ``cluster_radius`` px, else starts a new one.
    A lane keeps the most confident point per grid row; lanes with fewer than
    two points are dropped.
    """
    h = _as_map(heads)
    conf = h[CONF].reshape(h[CONF].shape[-2:])
    local, root = h[LOCAL], h[ROOT]
    if local.shape[-2:] != conf.shape or root.shape[-2:] != conf.shape:
        raise ValueError("heads are not on a common grid")
    rows, cols = np.nonzero(conf >= threshold)
    if rows.size == 0:
        return []
    scores = conf[rows, cols]
    order = np.lexsort((cols, rows, -scores))
    rows, cols, scores = rows[order], cols[order], scores[order]
    kx = (cols + local[0, rows, cols]) * stride
    ky = (rows + local[1, rows, cols]) * stride
    rx = kx + root[0, rows, cols] * stride
    ry = ky + root[1, rows, cols] * stride

    centroids: list[np.ndarray] = []
    sums: list[np.ndarray] = []
    counts: list[int] = []
    members: list[list[int]] = []
    r2 = cluster_radius * cluster_radius
    for i in range(rows.size):
        p = np.array((rx[i], ry[i]))
        best, best_d = -1, r2
        for j, c in enumerate(centroids):
            d = (c[0] - p[0]) ** 2 + (c[1] - p[1]) ** 2
            if d <= best_d:
                if best < 0 or d < best_d:
                    best, best_d = j, d
        if best < 0:
            centroids.append(p.copy())
            sums.append(p.copy())
            counts.append(1)
            members.append([i])
        else:
            sums[best] += p
            counts[best] += 1
            centroids[best] = sums[best] / counts[best]
            members[best].append(i)

    lanes = []
    for idx in members:
        seen_rows: set[int] = set()
        keep = []
        for i in idx:  # already in descending confidence
            if rows[i] in seen_rows:
                continue
            seen_rows.add(int(rows[i]))
            keep.append(i)
        pts = np.stack([kx[keep], ky[keep]], axis=1)
        pts = pts[np.argsort(-pts[:, 1], kind="stable")]
        # strictly decreasing y
        if len(pts) > 1:
            pts = pts[np.concatenate(([True], np.diff(pts[:, 1]) < 0))]
        if len(pts) >= 2:
            lanes.append(Lane(pts))
    return lanes


def decode_with_replaced_head(fp_heads, head_id: str, replacement, threshold: float = 0.5,
                              stride: int = 4, cluster_radius: float = 8.0) -> list[Lane]:
    """Decode full-precision heads with one head swapped for ``replacement``."""
    h = dict(_as_map(fp_heads))
    if head_id not in h:
        raise KeyError(f"unknown head {head_id!r}; have {sorted(h)}")
    rep = np.asarray(getattr(replacement, "value", replacement), dtype=np.float64)
    if rep.ndim == 4:
        rep = rep[0]
    if rep.shape != h[head_id].shape:
        raise ValueError(f"replacement shape {rep.shape} != head {head_id!r} shape {h[head_id].shape}")
    h[head_id] = rep
    return decode(h, threshold, stride, cluster_radius)
