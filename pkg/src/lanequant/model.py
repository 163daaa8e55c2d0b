"""Desk-scale keypoint lane detector with confidence, local-offset and root-offset heads."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .postprocess import CONF, LOCAL, ROOT, Lane, decode
from .quant import QuantSpec, fake_quantize
from .tensor import Adam, Tensor, backward, bce_with_logits, conv2d, relu, sigmoid, weighted_sq_error

logger = logging.getLogger(__name__)

ROLES = {CONF: "confidence", LOCAL: "semantic", ROOT: "semantic"}
SEMANTIC_HEADS = (LOCAL, ROOT)
HEAD_CHANNELS = {CONF: 1, LOCAL: 2, ROOT: 2}
BACKBONE = (("conv1", 1, 8, 1), ("conv2", 8, 16, 2), ("conv3", 16, 16, 2))
IMAGE_SHAPE = (1, 64, 64)


class DivergenceError(RuntimeError):
    pass


@dataclass
class HeadOutput:
    """Per-head outputs of one forward pass, batched as ``(N, C, 16, 16)``."""

    heads: dict[str, Tensor]
    roles: dict[str, str] = field(default_factory=lambda: dict(ROLES))
    conf_logits: Tensor | None = None

    def __getitem__(self, key: str) -> Tensor:
        return self.heads[key]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.value for k, v in self.heads.items()}

    @property
    def semantic(self) -> list[str]:
        return [k for k, r in self.roles.items() if r == "semantic"]

    @property
    def confidence(self) -> str:
        (name,) = [k for k, r in self.roles.items() if r == "confidence"]
        return name

    def __len__(self) -> int:
        return self.heads[CONF].shape[0]

    def image(self, i: int) -> dict[str, np.ndarray]:
        return {k: v.value[i] for k, v in self.heads.items()}

    def detached(self) -> "HeadOutput":
        return HeadOutput({k: Tensor(v.value) for k, v in self.heads.items()}, dict(self.roles))


class LaneNet:
    """Three stride-changing 3x3 conv layers feeding three 3x3 conv heads.

    Parameters live in ``self.params`` keyed ``"<layer>.weight"`` /
    ``"<layer>.bias"``. Quantization specs key weights by the same names and
    post-ReLU activations by ``"<layer>.act"``.
    """

    stride = 4

    def __init__(self, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        for name, cin, cout, _ in BACKBONE:
            self._init_layer(rng, name, cin, cout)
        for head, cout in HEAD_CHANNELS.items():
            self._init_layer(rng, head, 16, cout)
        # start the confidence head at a low prior so early epochs are stable
        self.params[f"{CONF}.bias"].value[:] = -2.0

    def _init_layer(self, rng, name, cin, cout):
        std = np.sqrt(2.0 / (cin * 9))
        self.params[f"{name}.weight"] = Tensor(rng.normal(0.0, std, (cout, cin, 3, 3)), True, f"{name}.weight")
        self.params[f"{name}.bias"] = Tensor(np.zeros(cout), True, f"{name}.bias")

    @property
    def weight_names(self) -> list[str]:
        return [k for k in self.params if k.endswith(".weight")]

    @property
    def activation_names(self) -> list[str]:
        return [f"{name}.act" for name, *_ in BACKBONE]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> "LaneNet":
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks {sorted(missing)}")
        for k, p in self.params.items():
            v = np.asarray(state[k], dtype=np.float64)
            if v.shape != p.shape:
                raise ValueError(f"{k}: checkpoint shape {v.shape} != {p.shape}")
            p.value = v.copy()
            p.zero_grad()
        return self

    def copy(self) -> "LaneNet":
        net = LaneNet.__new__(LaneNet)
        net.params = {k: Tensor(v.value.copy(), True, k) for k, v in self.params.items()}
        return net

    def _weight(self, name: str, quant: Mapping[str, QuantSpec] | None) -> Tensor:
        w = self.params[f"{name}.weight"]
        spec = quant.get(f"{name}.weight") if quant else None
        return fake_quantize(w, spec) if spec is not None else w

    def features(self, x: Tensor, quant: Mapping[str, QuantSpec] | None = None,
                 taps: dict | None = None) -> Tensor:
        h = x
        for name, _, _, stride in BACKBONE:
            h = relu(conv2d(h, self._weight(name, quant), self.params[f"{name}.bias"], stride))
            if taps is not None:
                taps[f"{name}.act"] = h.value
            spec = quant.get(f"{name}.act") if quant else None
            if spec is not None:
                h = fake_quantize(h, spec)
        return h

    def forward(self, images, quant: Mapping[str, QuantSpec] | None = None,
                taps: dict | None = None) -> HeadOutput:
        """Run the network; with ``quant`` the listed weights/activations are fake-quantized.

        ``taps``, when given, receives the pre-quantization post-ReLU activations.
        """
        x = images if isinstance(images, Tensor) else Tensor(images)
        if x.value.ndim == 3:
            x = Tensor(x.value[None])
        if x.value.ndim != 4 or x.shape[1:] != IMAGE_SHAPE:
            raise ValueError(f"expected images of shape (N, 1, 64, 64), got {x.shape}")
        h = self.features(x, quant, taps)
        logits = conv2d(h, self._weight(CONF, quant), self.params[f"{CONF}.bias"], 1)
        heads = {CONF: sigmoid(logits)}
        for head in SEMANTIC_HEADS:
            heads[head] = conv2d(h, self._weight(head, quant), self.params[f"{head}.bias"], 1)
        return HeadOutput(heads, dict(ROLES), logits)

    __call__ = forward


def predict_heads(net: LaneNet, images: np.ndarray, quant=None, batch_size: int = 64) -> dict[str, np.ndarray]:
    """Inference-only forward in chunks; returns stacked head arrays."""
    parts: dict[str, list[np.ndarray]] = {k: [] for k in ROLES}
    for i in range(0, len(images), batch_size):
        out = net.forward(images[i:i + batch_size], quant)
        for k in parts:
            parts[k].append(out.heads[k].value)
    return {k: np.concatenate(v) for k, v in parts.items()}


def head_slice(heads: Mapping[str, np.ndarray], i: int) -> dict[str, np.ndarray]:
    return {k: v[i] for k, v in heads.items()}


# ---------------------------------------------------------------- pretraining


def stack_targets(targets) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mask = np.stack([t.mask for t in targets])
    local = np.stack([t.local for t in targets])
    root = np.stack([t.root for t in targets])
    return mask, local, root


def pretrain_loss(out: HeadOutput, mask: np.ndarray, local: np.ndarray, root: np.ndarray,
                  pos_weight: float = 1.0, root_weight: float = 0.1) -> Tensor:
    """BCE on confidence plus squared offset errors on ground-truth cells.

    Offset errors are summed over positive cells and divided by their count.
    """
    npos = max(float(mask.sum()), 1.0)
    loss = bce_with_logits(out.conf_logits, mask, pos_weight)
    loss = loss + weighted_sq_error(out.heads[LOCAL], local, mask, batch=npos)
    loss = loss + weighted_sq_error(out.heads[ROOT], root, mask, batch=npos) * root_weight
    return loss


def pretrain(net: LaneNet, images: np.ndarray, targets, epochs: int = 30, lr: float = 3e-3,
             batch_size: int = 32, seed: int = 0, pos_weight: float = 1.0, root_weight: float = 0.1,
             log_every: int = 0) -> list[float]:
    """Full-precision supervised training with Adam; returns per-epoch mean loss."""
    mask, local, root = stack_targets(targets)
    rng = np.random.default_rng(seed)
    opt = Adam(net.parameters(), lr=lr)
    history = []
    n = len(images)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total, batches = 0.0, 0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            opt.zero_grad()
            out = net.forward(images[idx])
            loss = pretrain_loss(out, mask[idx], local[idx], root[idx], pos_weight, root_weight)
            val = loss.item()
            if not np.isfinite(val):
                raise DivergenceError(f"non-finite pretraining loss at epoch {epoch}, batch {batches}")
            backward(loss)
            opt.step()
            total += val
            batches += 1
        history.append(total / batches)
        if log_every and (epoch + 1) % log_every == 0:
            logger.info("epoch %d loss %.4f", epoch + 1, history[-1])
    return history


class LaneDetector(BaseEstimator):
    """Estimator wrapper: ``fit`` pretrains a :class:`LaneNet`, ``predict`` decodes lanes."""

    def __init__(self, epochs: int = 30, lr: float = 3e-3, batch_size: int = 32, seed: int = 0,
                 threshold: float = 0.5, cluster_radius: float = 8.0, pos_weight: float = 1.0,
                 root_weight: float = 0.1):
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed
        self.threshold = threshold
        self.cluster_radius = cluster_radius
        self.pos_weight = pos_weight
        self.root_weight = root_weight

    def fit(self, X, y):
        from .scenes import to_targets

        X = check_images(X)
        if len(y) != len(X):
            raise ValueError(f"{len(X)} images but {len(y)} label sets")
        targets = [to_targets(lanes, LaneNet.stride, X.shape[-1] // LaneNet.stride) for lanes in y]
        self.net_ = LaneNet(self.seed)
        self.history_ = pretrain(self.net_, X, targets, self.epochs, self.lr, self.batch_size,
                                 self.seed, self.pos_weight, self.root_weight)
        return self

    @classmethod
    def from_net(cls, net: LaneNet, **params) -> "LaneDetector":
        det = cls(**params)
        det.net_ = net
        return det

    def transform(self, X) -> dict[str, np.ndarray]:
        check_is_fitted(self, "net_")
        return predict_heads(self.net_, check_images(X))

    def predict(self, X) -> list[list[Lane]]:
        heads = self.transform(X)
        return [decode(head_slice(heads, i), self.threshold, LaneNet.stride, self.cluster_radius)
                for i in range(len(heads[CONF]))]

    def score(self, X, y) -> float:
        from .metrics import f1_dataset

        return f1_dataset(self.predict(X), y)["f1"]


def check_images(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[1:] != IMAGE_SHAPE:
        raise ValueError(f"expected images of shape (N, 1, 64, 64), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain non-finite values")
    return X
