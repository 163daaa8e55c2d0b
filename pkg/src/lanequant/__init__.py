"""Post-training quantization for a keypoint lane detector with confidence-guided objectives."""

from .metrics import f1_dataset, lane_distortion_score
from .model import LaneDetector, LaneNet
from .postprocess import Lane, decode
from .ptq import SelectiveFocusPTQ, calibrate, loss_focus, loss_plain, tune
from .quant import BitConfig, QuantSpec, fake_quantize
from .sensitivity import build_curves, select_heads, select_heads_direct

__version__ = "0.1.0"

__all__ = [
    "BitConfig", "Lane", "LaneDetector", "LaneNet", "QuantSpec", "SelectiveFocusPTQ",
    "build_curves", "calibrate", "decode", "f1_dataset", "fake_quantize", "lane_distortion_score",
    "loss_focus", "loss_plain", "select_heads", "select_heads_direct", "tune",
]
