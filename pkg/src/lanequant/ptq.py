"""Calibrate-then-tune post-training quantization with focus and head-selection objectives."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .model import (CONF, ROLES, SEMANTIC_HEADS, HeadOutput, LaneDetector, LaneNet, check_images,
                    head_slice, predict_heads)
from .postprocess import DecodeConfig, Lane, decode
from .quant import BitConfig, QuantSpec, calibrate_activation_ema, calibrate_weight_omse, grid_mse
from .sensitivity import NoiseScoreCurve, SelectionConfig, build_curves, noise_levels, select_heads
from .tensor import Adam, Tensor, backward, weighted_sq_error

logger = logging.getLogger(__name__)

OBJECTIVES = ("plain", "focus", "focus_select")


class NumericFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class FocusConfig:
    lam: float = 2.0
    objective: str = "focus_select"

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.objective != "plain" and not self.lam > 1:
            raise ValueError(f"lambda must exceed 1 for {self.objective}, got {self.lam}")


@dataclass(frozen=True)
class TuneConfig:
    iterations: int = 5000
    lr: float = 2.5e-5
    batch_size: int = 32
    calib_size: int = 512
    bits: BitConfig = BitConfig(4, 4)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    log_every: int = 100
    seed: int = 0


def _arrays(h) -> dict[str, np.ndarray]:
    if isinstance(h, HeadOutput):
        return h.arrays()
    return {k: getattr(v, "value", v) for k, v in h.items()}


def _tensor(v) -> Tensor:
    return v if isinstance(v, Tensor) else Tensor(v)


def _check_heads(fp: Mapping[str, np.ndarray], q: Mapping) -> None:
    if set(fp) != set(q):
        raise ValueError(f"head sets differ: {sorted(fp)} vs {sorted(q)}")
    for k, v in fp.items():
        if v.shape != _tensor(q[k]).shape:
            raise ValueError(f"head {k!r} shapes differ: {v.shape} vs {_tensor(q[k]).shape}")


def _heads(h) -> dict:
    return dict(h.heads) if isinstance(h, HeadOutput) else dict(h)


def loss_plain(fp, q) -> Tensor:
    """Unweighted squared reconstruction error over every head, averaged over the batch."""
    fp_a, q_t = _arrays(fp), _heads(q)
    _check_heads(fp_a, q_t)
    n = fp_a[CONF].shape[0]
    total = None
    for k in sorted(fp_a):
        term = weighted_sq_error(_tensor(q_t[k]), fp_a[k], batch=n)
        total = term if total is None else total + term
    return total


def loss_focus(fp, q, lam: float = 2.0, active_heads: Sequence[str] | None = None,
               conf_head: str = CONF, semantic: Sequence[str] = SEMANTIC_HEADS) -> Tensor:
    """Confidence-weighted semantic error plus ``lam`` times confidence error.

    The full-precision confidence map is the fixed weight and is broadcast over
    each semantic head's channels.
    """
    if not lam > 1:
        raise ValueError(f"lambda must exceed 1, got {lam}")
    return _focus(fp, q, lam, active_heads, conf_head, semantic)


def _focus(fp, q, lam, active_heads, conf_head=CONF, semantic=SEMANTIC_HEADS) -> Tensor:
    fp_a, q_t = _arrays(fp), _heads(q)
    _check_heads(fp_a, q_t)
    active = list(semantic) if active_heads is None else list(active_heads)
    bad = [h for h in active if h not in semantic]
    if bad:
        raise ValueError(f"active heads {bad} are not semantic heads")
    conf = fp_a[conf_head]
    n = conf.shape[0]
    total = weighted_sq_error(_tensor(q_t[conf_head]), conf, batch=n) * float(lam)
    for h in active:
        total = total + weighted_sq_error(_tensor(q_t[h]), fp_a[h], conf, batch=n)
    return total


def mask_expectation_check(fp, q, samples: int = 10_000, seed: int = 0, conf_head: str = CONF,
                    semantic: Sequence[str] = SEMANTIC_HEADS, chunk: int = 500) -> dict:
    """Compare the Bernoulli-mask sampled loss with its confidence-weighted expectation.

    Masks are drawn elementwise from ``Bernoulli(C)``, so the expectation
    weights squared errors by ``C`` itself.
    """
    fp_a, q_a = _arrays(fp), _arrays(q)
    conf = fp_a[conf_head]
    rng = np.random.default_rng(seed)
    analytic, mc = 0.0, 0.0
    for h in semantic:
        err2 = (q_a[h] - fp_a[h]) ** 2
        c = np.broadcast_to(conf, err2.shape)
        analytic += float((c * err2).sum())
        total, done = 0.0, 0
        while done < samples:
            m = min(chunk, samples - done)
            masks = rng.random((m,) + err2.shape) < c
            total += float((masks * err2).sum())
            done += m
        mc += total / samples
    gap = abs(mc - analytic) / analytic if analytic > 0 else abs(mc - analytic)
    return {"mc_estimate": mc, "analytic": analytic, "rel_gap": gap, "samples": samples}


def mask_bound_check(fp, q, conf_head: str = CONF, semantic: Sequence[str] = SEMANTIC_HEADS,
                     threshold: float = 0.5) -> dict:
    """Hard-mask loss ``1{C>=t}`` versus the confidence-weighted loss for one batch."""
    fp_a, q_a = _arrays(fp), _arrays(q)
    conf = fp_a[conf_head]
    hard = weighted = 0.0
    for h in semantic:
        err2 = (q_a[h] - fp_a[h]) ** 2
        c = np.broadcast_to(conf, err2.shape)
        hard += float(((c >= threshold) * err2).sum())
        weighted += float((c * c * err2).sum())
    return {"masked": hard, "weighted": weighted, "holds": hard <= weighted}


# ---------------------------------------------------------------- calibration


def calibrate(net: LaneNet, calib_images: np.ndarray, bits: BitConfig, batch_size: int = 32,
              momentum: float = 0.9) -> dict[str, QuantSpec]:
    """Frozen per-tensor scales: grid-MSE for weights, EMA of per-batch grid-MSE for activations."""
    table: dict[str, QuantSpec] = {}
    for name in net.weight_names:
        scale, degenerate = calibrate_weight_omse(net.params[name].value, bits.weight_bits)
        if degenerate:
            logger.warning("weight %s is all zeros; using floor scale", name)
        table[name] = QuantSpec(bits.weight_bits, scale, "weight", True, degenerate)
    weights_only = dict(table)
    running: dict[str, float | None] = {a: None for a in net.activation_names}
    degenerate = {a: False for a in net.activation_names}
    for start in range(0, len(calib_images), batch_size):
        taps: dict[str, np.ndarray] = {}
        net.forward(calib_images[start:start + batch_size], weights_only, taps)
        for a in net.activation_names:
            best, deg = grid_mse(taps[a], bits.activation_bits)
            degenerate[a] |= deg
            running[a] = calibrate_activation_ema(running[a], best, momentum)
    for a in net.activation_names:
        table[a] = QuantSpec(bits.activation_bits, float(running[a]), "activation", True, degenerate[a])
    return table


# ---------------------------------------------------------------- tuning


@dataclass
class TuneLog:
    rows: list[dict] = field(default_factory=list)
    selections: list[tuple[int, list[str]]] = field(default_factory=list)

    def to_csv_rows(self) -> list[dict]:
        return self.rows


def tune(net: LaneNet, quant: Mapping[str, QuantSpec], calib_images: np.ndarray, cfg: TuneConfig,
         focus: FocusConfig, curves: Mapping[str, NoiseScoreCurve] | None = None,
         fp_heads: Mapping[str, np.ndarray] | None = None) -> tuple[LaneNet, TuneLog]:
    """Adam on every weight through the fake-quantized forward against cached FP head outputs.

    Returns a tuned copy of ``net``; ``net`` and ``quant`` are left untouched.
    """
    if focus.objective == "focus_select" and not curves:
        raise ValueError("focus_select needs noise-score curves")
    for name, spec in quant.items():
        if not spec.frozen:
            raise ValueError(f"scale {name} is not frozen; calibrate first")
    frozen_before = {k: (s.bits, s.scale) for k, s in quant.items()}
    qnet = net.copy()
    log = TuneLog()
    if cfg.iterations <= 0:
        return qnet, log
    if fp_heads is None:
        fp_heads = predict_heads(net, calib_images)
    n = len(calib_images)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    opt = Adam(qnet.parameters(), lr=cfg.lr)
    active: list[str] | None = None
    order = rng.permutation(n)
    pos = 0
    for it in range(cfg.iterations):
        if pos + cfg.batch_size > n:
            order, pos = rng.permutation(n), 0
        idx = order[pos:pos + cfg.batch_size]
        pos += cfg.batch_size
        fp = {k: v[idx] for k, v in fp_heads.items()}
        opt.zero_grad()
        q = qnet.forward(calib_images[idx], quant)
        if focus.objective == "focus_select" and it % cfg.selection.refresh_interval == 0:
            active = select_heads(fp, q.arrays(), curves, cfg.selection.k)
            log.selections.append((it, list(active)))
        if focus.objective == "plain":
            loss = loss_plain(fp, q)
        elif focus.objective == "focus":
            loss = loss_focus(fp, q, focus.lam)
        else:
            loss = loss_focus(fp, q, focus.lam, active)
        val = loss.item()
        if not np.isfinite(val):
            raise NumericFailure(f"non-finite tuning loss at iteration {it}")
        backward(loss)
        opt.step()
        if cfg.log_every and (it % cfg.log_every == 0 or it == cfg.iterations - 1):
            sig = noise_levels(fp, q.arrays())
            log.rows.append({"iteration": it, "loss": val,
                             **{f"sigma_{h}": sig[h] for h in SEMANTIC_HEADS},
                             "active": "+".join(active) if active else "all"})
    after = {k: (s.bits, s.scale) for k, s in quant.items()}
    if after != frozen_before:
        raise RuntimeError("quantization scales changed during tuning")
    return qnet, log


class SelectiveFocusPTQ(BaseEstimator):
    """Post-training quantizer for a fitted :class:`LaneDetector`.

    ``fit`` takes unlabeled calibration images: it builds noise-score curves
    (for ``objective="focus_select"``), calibrates frozen scales, and tunes the
    weights. ``transform`` returns quantized head outputs and ``predict``
    decodes them into lanes.
    """

    def __init__(self, detector: LaneDetector | None = None, bits: str = "W4A4",
                 objective: str = "focus_select", lam: float = 2.0, iterations: int = 5000,
                 lr: float = 2.5e-5, batch_size: int = 32, k: int = 1, refresh_interval: int = 2000,
                 noise_levels: tuple[float, ...] = SelectionConfig().noise_levels, reruns: int = 20,
                 curve_images: int = 100, momentum: float = 0.9, seed: int = 0):
        self.detector = detector
        self.bits = bits
        self.objective = objective
        self.lam = lam
        self.iterations = iterations
        self.lr = lr
        self.batch_size = batch_size
        self.k = k
        self.refresh_interval = refresh_interval
        self.noise_levels = noise_levels
        self.reruns = reruns
        self.curve_images = curve_images
        self.momentum = momentum
        self.seed = seed

    def _selection(self) -> SelectionConfig:
        return SelectionConfig(self.k, self.refresh_interval, tuple(self.noise_levels), self.reruns,
                               self.curve_images)

    def fit(self, X, y=None, curves: Mapping[str, NoiseScoreCurve] | None = None):
        if self.detector is None:
            raise ValueError("SelectiveFocusPTQ needs a fitted LaneDetector")
        check_is_fitted(self.detector, "net_")
        X = check_images(X)
        net = self.detector.net_
        focus = FocusConfig(self.lam, self.objective)
        bits = BitConfig.parse(self.bits) if isinstance(self.bits, str) else self.bits
        sel = self._selection()
        fp_heads = predict_heads(net, X)
        if focus.objective == "focus_select" and curves is None:
            n = min(sel.curve_images, len(X))
            curves = build_curves({k: v[:n] for k, v in fp_heads.items()}, sel, self.seed)
        self.curves_ = dict(curves) if curves else {}
        self.quant_table_ = calibrate(net, X, bits, self.batch_size, self.momentum)
        cfg = TuneConfig(self.iterations, self.lr, self.batch_size, len(X), bits, sel, seed=self.seed)
        self.net_, self.log_ = tune(net, self.quant_table_, X, cfg, focus, self.curves_, fp_heads)
        return self

    def transform(self, X) -> dict[str, np.ndarray]:
        check_is_fitted(self, "net_")
        return predict_heads(self.net_, check_images(X), self.quant_table_)

    def predict(self, X) -> list[list[Lane]]:
        heads = self.transform(X)
        d = self.detector
        return [decode(head_slice(heads, i), d.threshold, LaneNet.stride, d.cluster_radius)
                for i in range(len(heads[CONF]))]

    def score(self, X, y) -> float:
        from .metrics import f1_dataset

        return f1_dataset(self.predict(X), y)["f1"]
