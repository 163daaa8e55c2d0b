"""Lane Distortion Score and a rasterized-IoU F1 evaluator."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .postprocess import Lane

CANVAS = (64, 64)
LANE_WIDTH = 8.0


@dataclass(frozen=True)
class DistortionConfig:
    v: float = 1.0
    pair_iou: float = 0.3
    height_tol: float = 1.0
    width: float = LANE_WIDTH
    canvas: tuple[int, int] = CANVAS

    def __post_init__(self):
        if not self.v > 0:
            raise ValueError("penalty v must be positive")
        if not 0.0 < self.pair_iou < 1.0:
            raise ValueError("pair_iou must lie in (0, 1)")


@dataclass
class MatchResult:
    matched: list[tuple[int, int]]
    n_mismatch: int
    b: float

    @property
    def ok(self) -> bool:
        return bool(self.matched)


@dataclass
class ScoreReport:
    score: float
    matched: int = 0
    mismatched: int = 0
    pairs: list[tuple[int, int]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"score": self.score, "matched": self.matched, "mismatched": self.mismatched,
                "pairs": [list(p) for p in self.pairs]}


@lru_cache(maxsize=8)
def _pixel_centres(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:h, 0:w]
    return xs.astype(np.float64).ravel(), ys.astype(np.float64).ravel()


def rasterize(lane: Lane, width: float = LANE_WIDTH, canvas: tuple[int, int] = CANVAS) -> np.ndarray:
    """Boolean mask of pixel centres within ``width/2`` of the polyline."""
    h, w = canvas
    px, py = _pixel_centres(h, w)
    pts = lane.points
    best = np.full(px.shape, np.inf)
    if len(pts) == 1:
        best = (px - pts[0, 0]) ** 2 + (py - pts[0, 1]) ** 2
    for (x0, y0), (x1, y1) in zip(pts[:-1], pts[1:]):
        dx, dy = x1 - x0, y1 - y0
        den = dx * dx + dy * dy
        t = np.zeros_like(px) if den == 0 else np.clip(((px - x0) * dx + (py - y0) * dy) / den, 0.0, 1.0)
        d2 = (px - x0 - t * dx) ** 2 + (py - y0 - t * dy) ** 2
        np.minimum(best, d2, out=best)
    return (best <= (width / 2.0) ** 2).reshape(h, w)


def iou_matrix(set_a: list[Lane], set_b: list[Lane], width: float = LANE_WIDTH,
               canvas: tuple[int, int] = CANVAS) -> np.ndarray:
    if not set_a or not set_b:
        return np.zeros((len(set_a), len(set_b)))
    ma = np.stack([rasterize(l, width, canvas).ravel() for l in set_a]).astype(np.float64)
    mb = np.stack([rasterize(l, width, canvas).ravel() for l in set_b]).astype(np.float64)
    inter = ma @ mb.T
    union = ma.sum(1)[:, None] + mb.sum(1)[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1), 0.0)


def greedy_pairs(iou: np.ndarray, thresh: float) -> list[tuple[int, int]]:
    """Highest-IoU-first one-to-one pairing; ties resolve by row then column."""
    if iou.size == 0:
        return []
    flat = [(-iou[i, j], i, j) for i in range(iou.shape[0]) for j in range(iou.shape[1])
            if iou[i, j] >= thresh]
    flat.sort()
    used_a, used_b, pairs = set(), set(), []
    for _, i, j in flat:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j))
    return sorted(pairs)


def pair_lanes(set_a: list[Lane], set_b: list[Lane], cfg: DistortionConfig = DistortionConfig()
               ) -> tuple[list[tuple[int, int]], list[int], list[int]]:
    """Pair lanes across two sets; returns ``(pairs, unpaired_a, unpaired_b)`` as indices."""
    iou = iou_matrix(set_a, set_b, cfg.width, cfg.canvas)
    pairs = greedy_pairs(iou, cfg.pair_iou)
    pa = {i for i, _ in pairs}
    pb = {j for _, j in pairs}
    return pairs, [i for i in range(len(set_a)) if i not in pa], [j for j in range(len(set_b)) if j not in pb]


def match_points(lane_a: Lane, lane_b: Lane, cfg: DistortionConfig = DistortionConfig()) -> MatchResult:
    """Sweep both lanes from the bottom, matching points whose heights differ by at most ``height_tol``.

    ``b`` is the vertical extent of the matched region (mean height of each
    pair), floored at ``height_tol`` so a single match still normalises.
    """
    ya, yb = lane_a.ys.tolist(), lane_b.ys.tolist()
    i = j = 0
    matched: list[tuple[int, int]] = []
    while i < len(ya) and j < len(yb):
        if abs(ya[i] - yb[j]) <= cfg.height_tol:
            matched.append((i, j))
            i += 1
            j += 1
        elif ya[i] > yb[j]:
            i += 1
        else:
            j += 1
    n = len(ya) + len(yb) - 2 * len(matched)
    if not matched:
        return MatchResult([], n, 0.0)
    mids = [(ya[a] + yb[b]) / 2.0 for a, b in matched]
    return MatchResult(matched, n, max(max(mids) - min(mids), cfg.height_tol))


def score_report(fp_lanes: list[Lane], perturbed: list[Lane],
                 cfg: DistortionConfig = DistortionConfig()) -> ScoreReport:
    pairs, ua, ub = pair_lanes(fp_lanes, perturbed, cfg)
    total, n_matched, n_miss = 0.0, 0, 0
    for i, j in pairs:
        a, b = fp_lanes[i], perturbed[j]
        m = match_points(a, b, cfg)
        if not m.ok:
            n_miss += len(a) + len(b)
            continue
        d = sum(float(np.hypot(*(a.points[p] - b.points[q]))) for p, q in m.matched)
        total += d / m.b
        n_matched += len(m.matched)
        n_miss += m.n_mismatch
    n_miss += sum(len(fp_lanes[i]) for i in ua) + sum(len(perturbed[j]) for j in ub)
    return ScoreReport(total + n_miss * cfg.v, n_matched, n_miss, pairs)


def lane_distortion_score(fp_lanes: list[Lane], perturbed: list[Lane],
                          cfg: DistortionConfig = DistortionConfig()) -> float:
    """Sum over paired lanes of matched drift / bounding length, plus ``v`` per mismatched point."""
    return score_report(fp_lanes, perturbed, cfg).score


@dataclass
class F1Result:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int


def _f1_from_counts(tp: int, fp: int, fn: int) -> F1Result:
    if tp + fp + fn == 0:
        return F1Result(1.0, 1.0, 1.0, 0, 0, 0)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return F1Result(precision, recall, 2 * tp / (2 * tp + fp + fn), tp, fp, fn)


def f1_eval(pred: list[Lane], gt: list[Lane], iou_thresh: float = 0.5, width: float = LANE_WIDTH,
            canvas: tuple[int, int] = CANVAS) -> F1Result:
    pairs = greedy_pairs(iou_matrix(pred, gt, width, canvas), iou_thresh)
    tp = len(pairs)
    return _f1_from_counts(tp, len(pred) - tp, len(gt) - tp)


def f1_dataset(preds: list[list[Lane]], gts: list[list[Lane]], iou_thresh: float = 0.5,
               width: float = LANE_WIDTH) -> dict:
    """Pool tp/fp/fn over images, then compute precision/recall/F1."""
    tp = fp = fn = 0
    for p, g in zip(preds, gts, strict=True):
        r = f1_eval(p, g, iou_thresh, width)
        tp, fp, fn = tp + r.tp, fp + r.fp, fn + r.fn
    r = _f1_from_counts(tp, fp, fn)
    return {"precision": r.precision, "recall": r.recall, "f1": r.f1, "tp": tp, "fp": fp, "fn": fn}
