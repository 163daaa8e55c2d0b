"""Symmetric per-tensor fake quantization and scale calibration."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .tensor import Tensor, make_op

SCALE_FLOOR = float(np.finfo(np.float64).eps)
GRID_POINTS = 100
GRID_RANGE = (0.2, 1.2)
EMA_MOMENTUM = 0.9


@dataclass
class QuantSpec:
    bits: int
    scale: float
    target: Literal["weight", "activation"] = "weight"
    frozen: bool = False
    degenerate: bool = False

    def __post_init__(self):
        if self.bits not in (4, 8):
            raise ValueError(f"bits must be 4 or 8, got {self.bits}")
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bits - 1))

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1


@dataclass(frozen=True)
class BitConfig:
    weight_bits: int
    activation_bits: int

    def __post_init__(self):
        for b in (self.weight_bits, self.activation_bits):
            if b not in (4, 8):
                raise ValueError(f"bit widths must be 4 or 8, got {b}")

    @property
    def name(self) -> str:
        return f"W{self.weight_bits}A{self.activation_bits}"

    @classmethod
    def parse(cls, text: str) -> "BitConfig":
        t = text.strip().upper()
        if not (t.startswith("W") and "A" in t):
            raise ValueError(f"bit config must look like W8A4, got {text!r}")
        w, a = t[1:].split("A")
        return cls(int(w), int(a))

    def __str__(self) -> str:
        return self.name


W8A8, W8A4, W4A4 = BitConfig(8, 8), BitConfig(8, 4), BitConfig(4, 4)


def quantize_array(x: np.ndarray, scale: float, bits: int) -> np.ndarray:
    qmin, qmax = -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    return np.clip(np.rint(x / scale), qmin, qmax) * scale


def fake_quantize(x: Tensor, spec: QuantSpec) -> Tensor:
    """Round-to-nearest symmetric quantization with a straight-through gradient.

    The gradient is 1 where ``x / scale`` lies strictly inside
    ``(qmin, qmax)`` and 0 elsewhere.
    """
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if not spec.scale > 0:
        raise ValueError(f"scale must be positive, got {spec.scale}")
    if not np.all(np.isfinite(x.value)):
        raise ValueError("fake_quantize: non-finite input")
    r = x.value / spec.scale
    out = np.clip(np.rint(r), spec.qmin, spec.qmax) * spec.scale
    inside = (r > spec.qmin) & (r < spec.qmax)
    return make_op(out, (x,), lambda g: (g * inside,), "fake_quant")


def candidate_scales(x: np.ndarray, bits: int, points: int = GRID_POINTS) -> np.ndarray:
    base = np.max(np.abs(x)) / (2 ** (bits - 1) - 1)
    return base * np.linspace(GRID_RANGE[0], GRID_RANGE[1], points)


def grid_mse(x: np.ndarray, bits: int, points: int = GRID_POINTS) -> tuple[float, bool]:
    """Grid-searched scale minimising ``||fake_quantize(x, s) - x||^2``.

    Returns ``(scale, degenerate)``; an all-zero input yields the floor scale.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    if not np.any(x):
        return SCALE_FLOOR, True
    best_s, best_err = None, np.inf
    for s in candidate_scales(x, bits, points):
        d = quantize_array(x, s, bits) - x
        err = float(np.dot(d, d))
        if err < best_err:
            best_s, best_err = float(s), err
    return max(best_s, SCALE_FLOOR), False


def calibrate_weight_omse(w, bits: int) -> tuple[float, bool]:
    """MSE-optimal weight scale over a 100-point grid; returns ``(scale, degenerate)``."""
    return grid_mse(getattr(w, "value", w), bits)


def calibrate_activation_ema(running: float | None, batch_best: float,
                             momentum: float = EMA_MOMENTUM) -> float:
    """Fold one batch's best scale into the running activation scale."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"momentum must be in [0, 1], got {momentum}")
    if running is None:
        return float(batch_best)
    return momentum * running + (1.0 - momentum) * batch_best
