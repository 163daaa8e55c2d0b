"""Synthetic lane scenes with exact keypoint ground truth.

Coordinates are continuous pixel coordinates where pixel ``(r, c)`` is
centred on ``(x=c, y=r)``. Lanes are quadratics in ``y`` measured from the
bottom keypoint row. Keypoints sit on grid rows ``y = stride * row``; grid
cell ``(row, col)`` has its decode reference at ``(stride*col, stride*row)``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .postprocess import Lane

SPLIT_IDS = {"train": 0, "val": 1, "test": 2}


class InfeasibleParams(ValueError):
    pass


@dataclass(frozen=True)
class SceneParams:
    size: int = 64
    stride: int = 4
    min_lanes: int = 2
    max_lanes: int = 4
    min_sep: float = 14.0
    margin: float = 2.0
    slope: float = 0.45
    curvature: float = 0.004
    top_range: tuple[int, int] = (0, 24)
    stroke_width: float = 2.0
    intensity: float = 0.9
    noise_sigma: float = 0.05
    # vertical brightness ramp (top, bottom); gives the net a cue for absolute row
    background: tuple[float, float] = (0.0, 0.35)

    @property
    def grid(self) -> int:
        return self.size // self.stride

    @property
    def bottom_y(self) -> float:
        return float(self.stride * (self.grid - 1))

    def check(self) -> None:
        usable = self.size - 1 - 2 * self.margin
        if self.min_lanes < 1 or self.max_lanes < self.min_lanes:
            raise InfeasibleParams("lane count range is empty")
        if (self.min_lanes - 1) * self.min_sep > usable:
            raise InfeasibleParams(
                f"cannot place {self.min_lanes} lanes {self.min_sep}px apart in {usable:.1f}px"
            )
        if self.size % self.stride:
            raise InfeasibleParams("image size must be a multiple of the stride")


@dataclass
class LaneCurve:
    """``x(y) = x0 + slope*d + curvature*d**2`` with ``d = y - y_ref``."""

    x0: float
    slope: float
    curvature: float
    y_top: float
    y_ref: float = 60.0

    def x_at(self, y):
        d = np.asarray(y, dtype=np.float64) - self.y_ref
        return self.x0 + self.slope * d + self.curvature * d * d


@dataclass
class SyntheticScene:
    image: np.ndarray  # (1, size, size)
    lanes: list[Lane]
    curves: list[LaneCurve]
    index: int = 0
    collisions: int = 0


@dataclass
class GridTargets:
    mask: np.ndarray  # (1, g, g) 0/1
    local: np.ndarray  # (2, g, g) cell units
    root: np.ndarray  # (2, g, g) cell units
    collisions: int = 0


def scene_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, SPLIT_IDS[split], index]))


def _sample_curves(rng: np.random.Generator, p: SceneParams) -> list[LaneCurve]:
    n = int(rng.integers(p.min_lanes, p.max_lanes + 1))
    lo, hi = p.margin, p.size - 1 - p.margin
    rows_y = np.arange(0, p.size, dtype=np.float64)
    for _ in range(200):
        curves = []
        for _ in range(n):
            top = float(p.stride * rng.integers(p.top_range[0] // p.stride, p.top_range[1] // p.stride + 1))
            c = LaneCurve(
                x0=float(rng.uniform(lo, hi)),
                slope=float(rng.uniform(-p.slope, p.slope)),
                curvature=float(rng.uniform(-p.curvature, p.curvature)),
                y_top=top,
                y_ref=p.bottom_y,
            )
            curves.append(c)
        ok = True
        for c in curves:
            ys = rows_y[rows_y >= c.y_top]
            xs = c.x_at(ys)
            if xs.min() < lo or xs.max() > hi:
                ok = False
                break
        if not ok:
            continue
        for i in range(n):
            for j in range(i + 1, n):
                ys = rows_y[rows_y >= max(curves[i].y_top, curves[j].y_top)]
                if np.min(np.abs(curves[i].x_at(ys) - curves[j].x_at(ys))) < p.min_sep:
                    ok = False
        if ok:
            return sorted(curves, key=lambda c: c.x0)
    # fall back to fewer lanes rather than loop forever on a tight draw
    if n > p.min_lanes:
        return _sample_curves(rng, SceneParams(**{**asdict(p), "max_lanes": n - 1}))
    raise InfeasibleParams("could not place lanes within 200 draws")


def render(curves: list[LaneCurve], p: SceneParams, rng: np.random.Generator | None) -> np.ndarray:
    size = p.size
    ys = np.arange(size, dtype=np.float64)
    cols = np.arange(size, dtype=np.float64)
    top, bottom = p.background
    img = np.repeat((top + (bottom - top) * ys / (size - 1))[:, None], size, axis=1)
    cover = np.zeros((size, size))
    half = p.stroke_width / 2.0
    for c in curves:
        xc = c.x_at(ys)[:, None]
        # area of each pixel [col-.5, col+.5] covered by the stroke
        left = np.maximum(cols[None, :] - 0.5, xc - half)
        right = np.minimum(cols[None, :] + 0.5, xc + half)
        cov = np.clip(right - left, 0.0, 1.0)
        cov[ys < c.y_top] = 0.0
        cover = np.maximum(cover, cov)
    img = img + cover * (p.intensity - img)
    if rng is not None and p.noise_sigma > 0:
        img = img + rng.normal(0.0, p.noise_sigma, img.shape)
    return np.clip(img, 0.0, 1.0)[None]


def keypoints(curve: LaneCurve, p: SceneParams) -> Lane:
    rows = np.arange(p.grid - 1, -1, -1)
    ys = (p.stride * rows).astype(np.float64)
    ys = ys[ys >= curve.y_top]
    return Lane(np.stack([curve.x_at(ys), ys], axis=1))


def make_scene(seed: int, split: str, index: int, params: SceneParams | None = None,
               noise: bool = True) -> SyntheticScene:
    p = params or SceneParams()
    rng = scene_rng(seed, split, index)
    curves = _sample_curves(rng, p)
    image = render(curves, p, rng if noise else None)
    lanes = [keypoints(c, p) for c in curves]
    return SyntheticScene(image=image, lanes=lanes, curves=curves, index=index)


def generate(seed: int, count: int, params: SceneParams | None = None, split: str = "train",
             start: int = 0) -> list[SyntheticScene]:
    """Deterministic scenes ``start .. start+count-1`` of ``split``."""
    p = params or SceneParams()
    p.check()
    return [make_scene(seed, split, i, p) for i in range(start, start + count)]


def to_targets(lanes: list[Lane], stride: int = 4, grid: int = 16) -> GridTargets:
    """Encode lanes as per-cell confidence / local offset / root offset targets.

    The local offset is measured from the cell's decode reference
    ``(stride*col, stride*row)``, so it lies in ``[-0.5, 0.5)`` cells. The root
    offset points from the keypoint to its lane's bottom-most point.
    """
    mask = np.zeros((1, grid, grid))
    local = np.zeros((2, grid, grid))
    root = np.zeros((2, grid, grid))
    owner_dist = np.full((grid, grid), np.inf)
    collisions = 0
    for lane in lanes:
        pts = lane.points
        start = pts[np.argmax(pts[:, 1])]
        for x, y in pts:
            col = int(np.floor(x / stride + 0.5))
            row = int(np.floor(y / stride + 0.5))
            if not (0 <= row < grid and 0 <= col < grid):
                continue
            dx, dy = x / stride - col, y / stride - row
            d = float(np.hypot(dx, dy))
            if mask[0, row, col]:
                collisions += 1
                if d >= owner_dist[row, col]:
                    continue
            owner_dist[row, col] = d
            mask[0, row, col] = 1.0
            local[:, row, col] = (dx, dy)
            root[:, row, col] = ((start[0] - x) / stride, (start[1] - y) / stride)
    return GridTargets(mask, local, root, collisions)


# ---------------------------------------------------------------- dataset io


def _lanes_json(lanes: list[Lane]) -> list:
    return [lane.to_list() for lane in lanes]


def save_dataset(root: str | Path, splits: dict[str, list[SyntheticScene]], seed: int,
                 params: SceneParams, meta: dict | None = None) -> Path:
    """Write one raw little-endian float64 image file per split plus ``manifest.json``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {"seed": seed, "params": asdict(params), "splits": {}, **(meta or {})}
    for name, scenes in splits.items():
        images = np.stack([s.image for s in scenes]).astype("<f8")
        fname = f"{name}.f64"
        images.tofile(root / fname)
        entries = []
        for s in scenes:
            t = to_targets(s.lanes, params.stride, params.grid)
            rows, cols = np.nonzero(t.mask[0])
            cells = [
                [int(r), int(c), *map(float, t.local[:, r, c]), *map(float, t.root[:, r, c])]
                for r, c in zip(rows, cols)
            ]
            entries.append({"index": s.index, "lanes": _lanes_json(s.lanes), "cells": cells,
                            "collisions": t.collisions})
        manifest["splits"][name] = {"file": fname, "shape": list(images.shape), "scenes": entries}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return root / "manifest.json"


@dataclass
class Dataset:
    images: np.ndarray  # (N, 1, H, W)
    lanes: list[list[Lane]]

    def __len__(self) -> int:
        return len(self.images)

    def targets(self, stride: int = 4, grid: int = 16) -> list[GridTargets]:
        return [to_targets(ls, stride, grid) for ls in self.lanes]


def load_manifest(root: str | Path) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(str(path))
    return json.loads(path.read_text())


def load_split(root: str | Path, split: str) -> Dataset:
    root = Path(root)
    manifest = load_manifest(root)
    info = manifest["splits"][split]
    images = np.fromfile(root / info["file"], dtype="<f8").reshape(info["shape"])
    lanes = [[Lane.from_list(l) for l in e["lanes"]] for e in info["scenes"]]
    return Dataset(images.astype(np.float64), lanes)


def load_images(root: str | Path, split: str) -> np.ndarray:
    """Images only; the calibration and tuning paths never see labels."""
    root = Path(root)
    info = load_manifest(root)["splits"][split]
    return np.fromfile(root / info["file"], dtype="<f8").reshape(info["shape"]).astype(np.float64)
