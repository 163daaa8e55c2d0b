"""Noise-score curves per semantic head and sensitivity-aware head selection."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .metrics import DistortionConfig, lane_distortion_score
from .model import SEMANTIC_HEADS, head_slice
from .postprocess import DecodeConfig, decode, decode_with_replaced_head

DEFAULT_LEVELS = (0.0, 0.02, 0.05, 0.1, 0.2, 0.4, 0.8, 1.6)


@dataclass(frozen=True)
class SelectionConfig:
    k: int = 1
    refresh_interval: int = 2000
    noise_levels: tuple[float, ...] = DEFAULT_LEVELS
    reruns: int = 20
    curve_images: int = 100

    def __post_init__(self):
        lv = self.noise_levels
        if len(lv) < 2 or lv[0] != 0.0 or any(b <= a for a, b in zip(lv, lv[1:])):
            raise ValueError("noise levels must start at 0 and be strictly increasing")


@dataclass
class NoiseScoreCurve:
    head_id: str
    nodes: list[tuple[float, float]]
    reruns: int = 0
    images: int = 0
    stderr: list[float] = field(default_factory=list)

    @property
    def levels(self) -> np.ndarray:
        return np.array([s for s, _ in self.nodes])

    @property
    def means(self) -> np.ndarray:
        return np.array([m for _, m in self.nodes])

    def scaled(self, factor: float) -> "NoiseScoreCurve":
        return NoiseScoreCurve(self.head_id, [(s, m * factor) for s, m in self.nodes],
                               self.reruns, self.images, [e * factor for e in self.stderr])

    def to_dict(self) -> dict:
        return {"head_id": self.head_id, "nodes": [list(n) for n in self.nodes],
                "reruns": self.reruns, "images": self.images, "stderr": self.stderr}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseScoreCurve":
        return cls(d["head_id"], [tuple(map(float, n)) for n in d["nodes"]],
                   int(d.get("reruns", 0)), int(d.get("images", 0)), list(d.get("stderr", [])))


def save_curves(path, curves: Mapping[str, NoiseScoreCurve], meta: dict | None = None) -> None:
    payload = {"curves": [c.to_dict() for c in curves.values()], **(meta or {})}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)


def load_curves(path) -> dict[str, NoiseScoreCurve]:
    with open(path) as fh:
        payload = json.load(fh)
    return {c["head_id"]: NoiseScoreCurve.from_dict(c) for c in payload["curves"]}


def inject_noise(head: np.ndarray, sigma_rel: float, rng: np.random.Generator) -> np.ndarray:
    """Add iid gaussian noise with standard deviation ``sigma_rel * std(head)``."""
    if sigma_rel < 0:
        raise ValueError("noise level must be non-negative")
    head = np.asarray(head, dtype=np.float64)
    if sigma_rel == 0:
        return head.copy()
    return head + rng.normal(0.0, sigma_rel * float(np.std(head)), head.shape)


def build_curve(fp_heads: Mapping[str, np.ndarray], head_id: str, cfg: SelectionConfig = SelectionConfig(),
                seed: int = 0, decode_cfg: DecodeConfig = DecodeConfig(),
                dist_cfg: DistortionConfig = DistortionConfig()) -> NoiseScoreCurve:
    """Monte-Carlo noise-score curve for one head.

    ``fp_heads`` are cached full-precision outputs stacked over images. Every
    (image, level, rerun) draw uses its own seed so results do not depend on
    evaluation order.
    """
    n_img = len(fp_heads[head_id])
    head_idx = sorted(fp_heads).index(head_id)
    dec = (decode_cfg.threshold, decode_cfg.stride, decode_cfg.cluster_radius)
    scores = np.zeros((len(cfg.noise_levels), n_img, cfg.reruns))
    for i in range(n_img):
        heads = head_slice(fp_heads, i)
        base = decode(heads, *dec)
        for li, level in enumerate(cfg.noise_levels):
            for r in range(cfg.reruns):
                rng = np.random.default_rng(np.random.SeedSequence([seed, head_idx, i, li, r]))
                noisy = inject_noise(heads[head_id], level, rng)
                lanes = decode_with_replaced_head(heads, head_id, noisy, *dec)
                scores[li, i, r] = lane_distortion_score(base, lanes, dist_cfg)
    flat = scores.reshape(len(cfg.noise_levels), -1)
    means = flat.mean(axis=1)
    stderr = flat.std(axis=1, ddof=1) / np.sqrt(flat.shape[1]) if flat.shape[1] > 1 else np.zeros(len(means))
    nodes = [(float(s), float(m)) for s, m in zip(cfg.noise_levels, means)]
    return NoiseScoreCurve(head_id, nodes, cfg.reruns, n_img, [float(e) for e in stderr])


def build_curves(fp_heads, cfg: SelectionConfig = SelectionConfig(), seed: int = 0,
                 heads: Sequence[str] = SEMANTIC_HEADS, **kw) -> dict[str, NoiseScoreCurve]:
    return {h: build_curve(fp_heads, h, cfg, seed, **kw) for h in heads}


def query_curve(curve: NoiseScoreCurve, sigma: float) -> float:
    """Piecewise-linear lookup; 0 below the first node, last mean beyond the last."""
    if len(curve.nodes) < 2:
        raise ValueError("a curve needs at least two nodes")
    return float(np.interp(sigma, curve.levels, curve.means, left=0.0, right=curve.means[-1]))


def noise_levels(fp_heads: Mapping[str, np.ndarray], q_heads: Mapping[str, np.ndarray],
                 heads: Sequence[str] = SEMANTIC_HEADS) -> dict[str, float]:
    """Per-head ``rms(q - fp) / std(fp)`` averaged over the images of a batch."""
    out = {}
    for h in heads:
        fp = np.asarray(fp_heads[h], dtype=np.float64)
        q = np.asarray(q_heads[h], dtype=np.float64)
        axes = tuple(range(1, fp.ndim))
        rms = np.sqrt(np.mean((q - fp) ** 2, axis=axes))
        std = np.std(fp, axis=axes)
        out[h] = float(np.mean(np.where(std > 0, rms / np.where(std > 0, std, 1.0), 0.0)))
    return out


def _rank(scores: Mapping[str, float], order: Sequence[str], k: int) -> list[str]:
    if not 1 <= k <= len(order):
        raise ValueError(f"k={k} must lie in [1, {len(order)}]")
    ranked = sorted(order, key=lambda h: (-scores[h], order.index(h)))
    return ranked[:k]


def select_heads(fp_heads, q_heads, curves: Mapping[str, NoiseScoreCurve], k: int = 1,
                 heads: Sequence[str] = SEMANTIC_HEADS) -> list[str]:
    """Top-``k`` heads by curve-predicted distortion at their current noise level."""
    if k > len(heads):
        raise ValueError(f"k={k} exceeds the {len(heads)} semantic heads")
    missing = [h for h in heads if h not in curves]
    if missing:
        raise KeyError(f"no curve for heads {missing}")
    sig = noise_levels(fp_heads, q_heads, heads)
    scores = {h: query_curve(curves[h], sig[h]) for h in heads}
    return _rank(scores, list(heads), k)


def direct_scores(fp_heads, q_heads, heads: Sequence[str] = SEMANTIC_HEADS,
                  decode_cfg: DecodeConfig = DecodeConfig(),
                  dist_cfg: DistortionConfig = DistortionConfig()) -> dict[str, float]:
    dec = (decode_cfg.threshold, decode_cfg.stride, decode_cfg.cluster_radius)
    scores = {h: 0.0 for h in heads}
    n = len(next(iter(fp_heads.values())))
    for x in range(n):
        fp = head_slice(fp_heads, x)
        base = decode(fp, *dec)
        for h in heads:
            lanes = decode_with_replaced_head(fp, h, q_heads[h][x], *dec)
            scores[h] += lane_distortion_score(base, lanes, dist_cfg)
    return scores


def select_heads_direct(fp_heads, q_heads, k: int = 1, heads: Sequence[str] = SEMANTIC_HEADS,
                        decode_cfg: DecodeConfig = DecodeConfig(),
                        dist_cfg: DistortionConfig = DistortionConfig()) -> list[str]:
    """Replace one head at a time with its quantized output, decode, score, and keep the top-``k``.

    Takes stacked head arrays from the full-precision and quantized nets on
    the same images.
    """
    return _rank(direct_scores(fp_heads, q_heads, heads, decode_cfg, dist_cfg), list(heads), k)
