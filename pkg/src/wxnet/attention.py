"""Channel-wise attention driven by the feature map and the previous hidden state."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cells import xavier_uniform
from .tensor import ShapeError, Tensor, affine, concat, global_avg_pool, mul, relu, reshape, sigmoid


@dataclass
class AttentionParams:
    """Two-layer gating network: ``w1`` is ``2C x C_mid``, ``w2`` is ``C_mid x C``."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def __post_init__(self):
        two_c, mid = self.w1.shape
        if two_c % 2 or self.b1.shape != (mid,) or self.w2.shape != (mid, two_c // 2) \
                or self.b2.shape != (two_c // 2,):
            raise ShapeError(f"inconsistent attention params: w1 {self.w1.shape}, w2 {self.w2.shape}")

    @property
    def channels(self) -> int:
        return self.w2.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator, reduction: int = 1,
             dtype=np.float32) -> "AttentionParams":
        mid = max(1, channels // reduction)
        return cls(
            Tensor(xavier_uniform((2 * channels, mid), 2 * channels, mid, rng, dtype), True),
            Tensor(np.zeros(mid, dtype), True),
            Tensor(xavier_uniform((mid, channels), mid, channels, rng, dtype), True),
            Tensor(np.zeros(channels, dtype), True),
        )


def channel_stats(x: Tensor, h_prev: Tensor) -> tuple[Tensor, Tensor]:
    """Global-average-pooled channel descriptors of the features and the previous hidden state."""
    if x.shape != h_prev.shape:
        raise ShapeError(f"channel_stats: feature {x.shape} and hidden {h_prev.shape} shapes differ")
    return global_avg_pool(x), global_avg_pool(h_prev)


def attention_weights(a: Tensor, d: Tensor, params: AttentionParams) -> Tensor:
    """``sigmoid(relu([a; d] w1 + b1) w2 + b2)``, one weight in (0, 1) per channel."""
    if a.shape != d.shape or a.shape[-1] != params.channels:
        raise ShapeError(f"attention_weights: a {a.shape}, d {d.shape} vs {params.channels} channels")
    hidden = relu(affine(concat([a, d], axis=-1), params.w1, params.b1))
    return sigmoid(affine(hidden, params.w2, params.b2))


def recalibrate(x: Tensor, z: Tensor, mode: str = "channel") -> Tensor:
    """Rescale each feature channel by its attention weight.

    ``mode="literal"`` instead returns the weighted channel sum
    ``sum_k z_k x_k`` as a single-channel map, kept for ablations.
    """
    c = x.shape[-1]
    if z.shape[-1] != c or z.ndim != x.ndim - 2:
        raise ShapeError(f"recalibrate: weights {z.shape} do not match features {x.shape}")
    zb = reshape(z, z.shape[:-1] + (1, 1, c))
    scaled = mul(x, zb)
    if mode == "channel":
        return scaled
    if mode == "literal":
        ones = Tensor(np.ones((c, 1), x.dtype))
        return _channel_sum(scaled, ones)
    raise ValueError(f"unknown recalibration mode {mode!r}")


def _channel_sum(x: Tensor, ones: Tensor) -> Tensor:
    return affine(x, ones, Tensor(np.zeros(1, x.dtype)))

