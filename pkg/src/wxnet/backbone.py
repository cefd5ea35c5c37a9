"""VGG-style convolutional feature extractor and its flat multi-label head."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cells import xavier_uniform
from .tensor import ShapeError, Tensor, affine, conv2d, dropout, flatten, max_pool2d, relu

VGG_GROUPS = ((2, 64), (2, 128), (3, 256), (3, 512), (3, 512))
DESK_GROUPS = ((1, 8), (1, 16), (1, 32), (1, 64), (1, 64))


@dataclass(frozen=True)
class BackboneConfig:
    """Groups of 3x3 convolutions; a 2x2 max-pool follows every group but the last."""

    groups: tuple[tuple[int, int], ...] = VGG_GROUPS
    input_size: tuple[int, int, int] = (224, 224, 3)

    def __post_init__(self):
        if not self.groups or any(n < 1 or c < 1 for n, c in self.groups):
            raise ValueError(f"invalid backbone groups {self.groups}")

    @property
    def downsample(self) -> int:
        return 2 ** (len(self.groups) - 1)

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        h, w, _ = self.input_size
        return h // self.downsample, w // self.downsample, self.groups[-1][1]

    @classmethod
    def desk(cls, size: int = 64) -> "BackboneConfig":
        return cls(groups=DESK_GROUPS, input_size=(size, size, 3))

    def to_dict(self) -> dict:
        return {"groups": [list(g) for g in self.groups], "input_size": list(self.input_size)}

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(groups=tuple(tuple(g) for g in d["groups"]), input_size=tuple(d["input_size"]))


@dataclass
class BackboneParams:
    convs: list[tuple[Tensor, Tensor]]
    head_w: Tensor
    head_b: Tensor
    config: BackboneConfig = field(default_factory=BackboneConfig)

    def tensors(self, with_head: bool = True) -> dict[str, Tensor]:
        out = {}
        i = 0
        for g, (n, _) in enumerate(self.config.groups, start=1):
            for j in range(1, n + 1):
                k, b = self.convs[i]
                out[f"conv{g}_{j}.w"] = k
                out[f"conv{g}_{j}.b"] = b
                i += 1
        if with_head:
            out["head.w"] = self.head_w
            out["head.b"] = self.head_b
        return out

    @classmethod
    def from_tensors(cls, tensors: dict[str, Tensor], config: BackboneConfig) -> "BackboneParams":
        convs = []
        for g, (n, _) in enumerate(config.groups, start=1):
            for j in range(1, n + 1):
                convs.append((tensors[f"conv{g}_{j}.w"], tensors[f"conv{g}_{j}.b"]))
        return cls(convs, tensors["head.w"], tensors["head.b"], config)

    @classmethod
    def init(cls, config: BackboneConfig, num_classes: int, rng: np.random.Generator,
             dtype=np.float32) -> "BackboneParams":
        convs = []
        c_in = config.input_size[2]
        for n, c_out in config.groups:
            for _ in range(n):
                fan_in = c_in * 9
                k = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, 3, 3)).astype(dtype)
                convs.append((Tensor(k, True), Tensor(np.zeros(c_out, dtype), True)))
                c_in = c_out
        d = int(np.prod(config.feature_shape))
        head_w = Tensor(xavier_uniform((d, num_classes), d, num_classes, rng, dtype), True)
        head_b = Tensor(np.zeros(num_classes, dtype), True)
        return cls(convs, head_w, head_b, config)


def extract_features(image: Tensor, params: BackboneParams) -> Tensor:
    """Convolutional features of one image ``H x W x 3`` or a batch ``N x H x W x 3``."""
    cfg = params.config
    if image.ndim not in (3, 4) or tuple(image.shape[-3:]) != tuple(cfg.input_size):
        raise ShapeError(f"backbone expects images of size {cfg.input_size}, got {image.shape}")
    x = image
    i = 0
    last = len(cfg.groups) - 1
    for g, (n, _) in enumerate(cfg.groups):
        for _ in range(n):
            k, b = params.convs[i]
            x = relu(conv2d(x, k, b))
            i += 1
        if g < last:
            x = max_pool2d(x, 2)
    return x


def stage1_logits(features: Tensor, params: BackboneParams, dropout_rate: float = 0.0,
                  rng: np.random.Generator | None = None) -> Tensor:
    """Flatten, dropout, then one affine layer to ``T`` raw logits."""
    flat = flatten(features, batched=features.ndim == 4)
    return affine(dropout(flat, dropout_rate, rng), params.head_w, params.head_b)
