"""Step-wise multi-label predictor: backbone features, channel attention, ConvLSTM and per-step heads.

The image is encoded once. At each step ``t`` the feature map is
recalibrated by attention weights computed from the features and the
previous hidden state, fed through the ConvLSTM, and the flattened hidden
state is mapped to the probability of class ``order[t]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionParams, attention_weights, channel_stats, recalibrate
from .backbone import BackboneConfig, BackboneParams, extract_features
from .cells import ConvLstmParams, ConvLstmState, conv_lstm_step, xavier_uniform, zero_state
from .tensor import ShapeError, Tensor, affine, dropout, flatten, sigmoid, sigmoid_cross_entropy, step_loss

__all__ = [
    "ModelConfig",
    "WeatherModel",
    "LabelOrder",
    "predict_step",
    "rollout",
    "predict_labels",
    "step_loss",
    "total_loss",
    "sequence_loss",
    "TRANSIENT_CLASSES",
    "TRANSIENT_ORDER",
    "MULTILABEL_CLASSES",
    "MULTILABEL_ORDER",
]

TRANSIENT_CLASSES = ("sunny", "cloudy", "foggy", "snowy", "moist", "rainy", "other")
TRANSIENT_ORDER = ("moist", "cloudy", "other", "sunny", "snowy", "foggy", "rainy")
MULTILABEL_CLASSES = ("sunny", "cloudy", "foggy", "rainy", "snowy")
MULTILABEL_ORDER = ("cloudy", "sunny", "foggy", "rainy", "snowy")


class LabelOrder(tuple):
    """A permutation of class indices giving the prediction sequence."""

    def __new__(cls, indices):
        idx = tuple(int(i) for i in indices)
        if sorted(idx) != list(range(len(idx))):
            raise ValueError(f"label order {idx} is not a permutation of 0..{len(idx) - 1}")
        return super().__new__(cls, idx)

    @classmethod
    def identity(cls, n: int) -> "LabelOrder":
        return cls(range(n))

    @classmethod
    def from_names(cls, names, classes) -> "LabelOrder":
        classes = list(classes)
        try:
            return cls(classes.index(n) for n in names)
        except ValueError as exc:
            raise ValueError(f"unknown class in order {list(names)}; classes are {classes}") from exc

    def names(self, classes) -> list[str]:
        return [classes[i] for i in self]


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    num_classes: int = 7
    kernel_size: int = 3
    attention_reduction: int = 1
    head_mode: str = "per-step"        # or "shared"
    attention_mode: str = "channel"    # or "literal"
    forget_bias: float = 1.0

    def __post_init__(self):
        if self.head_mode not in ("per-step", "shared"):
            raise ValueError(f"head_mode must be 'per-step' or 'shared', got {self.head_mode!r}")
        if self.attention_mode not in ("channel", "literal"):
            raise ValueError(f"attention_mode must be 'channel' or 'literal', got {self.attention_mode!r}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")

    @property
    def state_shape(self) -> tuple[int, int, int]:
        return self.backbone.feature_shape

    def to_dict(self) -> dict:
        return {
            "backbone": self.backbone.to_dict(),
            "num_classes": self.num_classes,
            "kernel_size": self.kernel_size,
            "attention_reduction": self.attention_reduction,
            "head_mode": self.head_mode,
            "attention_mode": self.attention_mode,
            "forget_bias": self.forget_bias,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["backbone"] = BackboneConfig.from_dict(d["backbone"])
        return cls(**d)


@dataclass
class WeatherModel:
    config: ModelConfig
    backbone: BackboneParams
    attention: AttentionParams
    cell: ConvLstmParams
    head_w: Tensor   # (H*W*C_h) x T, or x 1 when shared
    head_b: Tensor

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator, dtype=np.float32,
             backbone: BackboneParams | None = None, zero_heads: bool = False) -> "WeatherModel":
        if backbone is None:
            backbone = BackboneParams.init(config.backbone, config.num_classes, rng, dtype)
        h, w, c = config.state_shape
        cell_in = 1 if config.attention_mode == "literal" else c
        attention = AttentionParams.init(c, rng, config.attention_reduction, dtype)
        cell = ConvLstmParams.init(cell_in, c, config.kernel_size, rng, dtype, config.forget_bias)
        n_heads = config.num_classes if config.head_mode == "per-step" else 1
        d = h * w * c
        if zero_heads:
            head_w = np.zeros((d, n_heads), dtype)
        else:
            head_w = xavier_uniform((d, n_heads), d, 1, rng, dtype)
        return cls(config, backbone, attention, cell, Tensor(head_w, True), Tensor(np.zeros(n_heads, dtype), True))

    def recurrent_tensors(self) -> dict[str, Tensor]:
        out = {f"attention.{k}": v for k, v in self.attention.tensors().items()}
        out.update({f"cell.{k}": v for k, v in self.cell.tensors().items()})
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def tensors(self) -> dict[str, Tensor]:
        out = {f"backbone.{k}": v for k, v in self.backbone.tensors().items()}
        out.update(self.recurrent_tensors())
        return out

    @classmethod
    def from_tensors(cls, tensors: dict[str, Tensor], config: ModelConfig) -> "WeatherModel":
        bb = BackboneParams.from_tensors(
            {k[len("backbone."):]: v for k, v in tensors.items() if k.startswith("backbone.")}, config.backbone)
        att = AttentionParams(*(tensors[f"attention.{k}"] for k in ("w1", "b1", "w2", "b2")))
        cell = ConvLstmParams(*(tensors[f"cell.{k}"] for k in ("w", "u", "b")))
        return cls(config, bb, att, cell, tensors["head.w"], tensors["head.b"])


def _head_logit(h: Tensor, model: WeatherModel, t: int, dropout_rate: float,
                rng: np.random.Generator | None) -> Tensor:
    batched = h.ndim == 4
    flat = dropout(flatten(h, batched=batched), dropout_rate, rng)
    if flat.shape[-1] != model.head_w.shape[0]:
        raise ShapeError(f"head expects {model.head_w.shape[0]} inputs, hidden state flattens to {flat.shape[-1]}")
    col = t if model.config.head_mode == "per-step" else 0
    logit = affine(flat, model.head_w[:, col:col + 1], model.head_b[col:col + 1])
    return logit


def _step(x: Tensor, state: ConvLstmState, model: WeatherModel, t: int, dropout_rate: float = 0.0,
          rng: np.random.Generator | None = None) -> tuple[Tensor, ConvLstmState, Tensor]:
    a, d = channel_stats(x, state.h)
    z = attention_weights(a, d, model.attention)
    x_tilde = recalibrate(x, z, model.config.attention_mode)
    new_state = conv_lstm_step(x_tilde, state, model.cell)
    return _head_logit(new_state.h, model, t, dropout_rate, rng), new_state, z


def predict_step(x: Tensor, state: ConvLstmState, model: WeatherModel, t: int = 0
                 ) -> tuple[Tensor, ConvLstmState, Tensor]:
    """One prediction step. Returns ``(p_t, new_state, z_t)``."""
    logit, new_state, z = _step(x, state, model, t)
    return sigmoid(logit), new_state, z


def rollout(features: Tensor, model: WeatherModel, order: LabelOrder | None = None,
            dropout_rate: float = 0.0, rng: np.random.Generator | None = None
            ) -> tuple[list[Tensor], list[Tensor]]:
    """Run all ``T`` steps from the zero state on fixed features.

    Returns per-step logits and attention weights, both in step order.
    """
    T = model.config.num_classes
    order = LabelOrder.identity(T) if order is None else order
    if len(order) != T:
        raise ValueError(f"label order has {len(order)} entries, model predicts {T} classes")
    h, w, c = model.config.state_shape
    if tuple(features.shape[-3:]) != (h, w, c):
        raise ShapeError(f"features {features.shape} do not match state shape {(h, w, c)}")
    batch = features.shape[0] if features.ndim == 4 else None
    state = zero_state(h, w, c, batch=batch, dtype=features.dtype)
    logits, zs = [], []
    for t in range(T):
        logit, state, z = _step(features, state, model, t, dropout_rate, rng)
        logits.append(logit)
        zs.append(z)
    return logits, zs


def total_loss(step_losses) -> Tensor:
    """Sum of per-step losses."""
    step_losses = list(step_losses)
    if not step_losses:
        raise ValueError("no step losses to sum")
    out = step_losses[0]
    for loss in step_losses[1:]:
        out = out + loss
    return out


def sequence_loss(logits: list[Tensor], labels: np.ndarray, order: LabelOrder) -> Tensor:
    """Summed per-step cross-entropy; step ``t`` is scored against class ``order[t]``.

    ``labels`` is ``N x T`` (or length ``T`` for a single image) in class order.
    """
    labels = np.asarray(labels)
    losses = []
    for t, logit in enumerate(logits):
        target = labels[..., order[t]].reshape(logit.shape)
        losses.append(sigmoid_cross_entropy(logit, target))
    return total_loss(losses)


def predict_labels(image: Tensor, model: WeatherModel, order: LabelOrder | None = None,
                   threshold: float = 0.5, return_attention: bool = False):
    """Class-order probabilities and binary labels for one image or a batch.

    Labels are ``prob >= threshold``. With ``return_attention`` the per-step
    attention weights (step order) are returned as a third value.
    """
    order = LabelOrder.identity(model.config.num_classes) if order is None else order
    feats = extract_features(image, model.backbone)
    logits, zs = rollout(feats, model, order)
    step_probs = np.stack([sigmoid(l).data.reshape(-1) for l in logits], axis=-1)  # N x T, step order
    probs = np.empty_like(step_probs)
    probs[:, list(order)] = step_probs
    if image.ndim == 3:
        probs = probs[0]
    labels = (probs >= threshold).astype(np.int64)
    if return_attention:
        att = np.stack([z.data for z in zs], axis=-2)  # (N x) T x C
        return probs, labels, att
    return probs, labels
