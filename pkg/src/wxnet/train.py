"""Two-stage training: backbone with a flat multi-label head, then attention + ConvLSTM + heads."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from typing import Callable

import numpy as np

from .backbone import BackboneConfig, BackboneParams, extract_features, stage1_logits
from .dataio import Dataset
from .model import LabelOrder, ModelConfig, WeatherModel, rollout, sequence_loss
from .tensor import GradTape, Tensor, _sigmoid, sigmoid_cross_entropy, square_sum

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dropout: float = 0.5
    l2: float = 5e-4
    batch_size: int = 50
    lr_drop_factor: float = 10.0
    lr_patience: int = 5
    lr_min_delta: float = 1e-4
    max_lr_drops: int = 2
    max_epochs: int = 30
    seed: int = 0
    augment: bool = True
    flip_prob: float = 0.5
    noise_std: float = 0.01
    finetune_all: bool = False

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def to_dict(self) -> dict:
        return asdict(self)


# -- Adam ------------------------------------------------------------------------


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


def adam_update(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float, beta1: float = 0.9,
                beta2: float = 0.999, eps: float = 1e-8) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam step; returns the new parameter and state without mutating inputs."""
    if grad.shape != param.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match parameter {param.shape}")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient("non-finite gradient; update aborted")
    t = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    new = param - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new.astype(param.dtype, copy=False), AdamState(m, v, t)


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.states: dict[str, AdamState] = {}

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray], lr: float) -> None:
        """Update every parameter in place, or none of them if any gradient is non-finite."""
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient for {name}; step aborted")
        for name, p in params.items():
            st = self.states.get(name)
            if st is None:
                st = self.states[name] = AdamState(np.zeros_like(p.data), np.zeros_like(p.data))
            p.data[...], self.states[name] = adam_update(p.data, grads[name], st, lr, self.beta1, self.beta2,
                                                         self.eps)


# -- augmentation ----------------------------------------------------------------


def augment(image: np.ndarray, rng: np.random.Generator, crop: int = 224, flip_prob: float = 0.5,
            noise_std: float = 0.01, random_crop: bool = True) -> np.ndarray:
    """Horizontal flip, ``crop x crop`` crop and additive Gaussian noise, clamped to [0, 1]."""
    h, w = image.shape[:2]
    if h < crop or w < crop:
        raise ValueError(f"image {image.shape} smaller than crop {crop}")
    out = image[:, ::-1] if flip_prob > 0 and rng.random() < flip_prob else image
    if random_crop:
        y, x = int(rng.integers(0, h - crop + 1)), int(rng.integers(0, w - crop + 1))
    else:
        y, x = (h - crop) // 2, (w - crop) // 2
    out = out[y:y + crop, x:x + crop]
    if noise_std > 0:
        out = out + rng.normal(0.0, noise_std, size=out.shape)
    return np.clip(out, 0.0, 1.0).astype(image.dtype, copy=False)


def center_crop(images: np.ndarray, crop: int) -> np.ndarray:
    h, w = images.shape[-3:-1]
    y, x = (h - crop) // 2, (w - crop) // 2
    return images[..., y:y + crop, x:x + crop, :]


def _augment_batch(images: np.ndarray, rng: np.random.Generator, crop: int, cfg: TrainConfig) -> np.ndarray:
    if not cfg.augment:
        return center_crop(images, crop)
    return np.stack([augment(im, rng, crop, cfg.flip_prob, cfg.noise_std) for im in images])


# -- generic loop ----------------------------------------------------------------

LOG_FIELDS = ["epoch", "train_loss", "val_loss", "lr", "wall_ms"]


class CsvLog:
    """Epoch log sink writing one CSV row per epoch."""

    def __init__(self, path):
        self.fh = open(path, "w", newline="")
        self.writer = csv.DictWriter(self.fh, fieldnames=LOG_FIELDS)
        self.writer.writeheader()

    def __call__(self, row: dict) -> None:
        self.writer.writerow(row)
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def _is_weight(t: Tensor) -> bool:
    return t.ndim >= 2


def _fit(params: dict[str, Tensor], batch_loss: Callable, eval_loss: Callable | None, n_train: int,
         cfg: TrainConfig, rng: np.random.Generator, on_epoch: Callable | None, stage: str) -> list[dict]:
    adam = Adam(cfg.beta1, cfg.beta2, cfg.eps)
    names = list(params)
    tensors = [params[k] for k in names]
    weights = [t for t in tensors if _is_weight(t)]
    lr = cfg.lr
    best_loss = math.inf
    best = {k: v.data.copy() for k, v in params.items()}
    plateau_ref, stale, drops = math.inf, 0, 0
    history = []
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        perm = rng.permutation(n_train)
        total, seen = 0.0, 0
        for start in range(0, n_train, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            with GradTape() as tape:
                data_loss = batch_loss(idx, rng)
                objective = data_loss
                if cfg.l2 > 0:
                    for w in weights:
                        objective = objective + square_sum(w) * cfg.l2
            grads = tape.gradient(objective, tensors)
            try:
                adam.step(params, dict(zip(names, grads)), lr)
            except NonFiniteGradient as exc:
                log.warning("%s epoch %d: %s", stage, epoch, exc)
                continue
            total += data_loss.item() * len(idx)
            seen += len(idx)
        train_loss = total / max(seen, 1)
        val_loss = eval_loss() if eval_loss is not None else None
        monitored = val_loss if val_loss is not None else train_loss
        if monitored < best_loss:
            best_loss = monitored
            best = {k: v.data.copy() for k, v in params.items()}
        if monitored < plateau_ref - cfg.lr_min_delta:
            plateau_ref, stale = monitored, 0
        else:
            stale += 1
            if stale >= cfg.lr_patience and drops < cfg.max_lr_drops:
                lr /= cfg.lr_drop_factor
                drops += 1
                stale = 0
                log.info("%s epoch %d: learning rate dropped to %g", stage, epoch, lr)
        row = {"epoch": epoch, "train_loss": train_loss, "val_loss": "" if val_loss is None else val_loss,
               "lr": lr, "wall_ms": int(round(1000 * (time.perf_counter() - t0)))}
        history.append(row)
        val_text = "-" if val_loss is None else f"{val_loss:.5f}"
        log.info("%s epoch %d: train %.5f val %s lr %g", stage, epoch, train_loss, val_text, lr)
        if on_epoch is not None:
            on_epoch(row)
    for k, v in params.items():
        v.data[...] = best[k]
    return history


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


# -- stage 1 -----------------------------------------------------------------------


def stage1_predict(params: BackboneParams, images: np.ndarray, batch: int = 100) -> np.ndarray:
    """Sigmoid outputs of the flat head on center-cropped images."""
    crop = params.config.input_size[0]
    out = []
    for sl in _batches(len(images), batch):
        x = Tensor(center_crop(images[sl], crop))
        out.append(_sigmoid(stage1_logits(extract_features(x, params), params).data))
    return np.concatenate(out) if out else np.zeros((0, params.head_b.shape[0]))


def stage1_loss(params: BackboneParams, data: Dataset, batch: int = 100) -> float:
    crop = params.config.input_size[0]
    total = 0.0
    for sl in _batches(len(data), batch):
        x = Tensor(center_crop(data.images[sl], crop))
        total += sigmoid_cross_entropy(stage1_logits(extract_features(x, params), params),
                                       data.labels[sl]).item() * (sl.stop - sl.start)
    return total / len(data)


def train_stage1(train: Dataset, cfg: TrainConfig, backbone_config: BackboneConfig, val: Dataset | None = None,
                 params: BackboneParams | None = None, on_epoch: Callable | None = None
                 ) -> tuple[BackboneParams, list[dict]]:
    """Train the backbone and its ``T``-output head with mean sigmoid cross-entropy.

    Returns the parameters with the best validation loss (training loss when
    no validation set is given).
    """
    if len(train) == 0:
        raise ValueError("stage 1 needs a non-empty training set")
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = BackboneParams.init(backbone_config, train.labels.shape[1], rng, train.images.dtype)
    crop = backbone_config.input_size[0]
    labels = train.labels.astype(train.images.dtype)

    def batch_loss(idx, rng):
        x = Tensor(_augment_batch(train.images[idx], rng, crop, cfg))
        logits = stage1_logits(extract_features(x, params), params, cfg.dropout, rng)
        return sigmoid_cross_entropy(logits, labels[idx])

    eval_loss = (lambda: stage1_loss(params, val)) if val is not None and len(val) else None
    history = _fit(params.tensors(), batch_loss, eval_loss, len(train), cfg, rng, on_epoch, "stage1")
    return params, history


# -- stage 2 -----------------------------------------------------------------------


def features_of(backbone: BackboneParams, images: np.ndarray, batch: int = 100) -> np.ndarray:
    crop = backbone.config.input_size[0]
    out = [extract_features(Tensor(center_crop(images[sl], crop)), backbone).data
           for sl in _batches(len(images), batch)]
    return np.concatenate(out)


def predict_probs(model: WeatherModel, images: np.ndarray, order: LabelOrder, batch: int = 100) -> np.ndarray:
    """Class-order probabilities for center-cropped images."""
    crop = model.config.backbone.input_size[0]
    out = []
    for sl in _batches(len(images), batch):
        feats = extract_features(Tensor(center_crop(images[sl], crop)), model.backbone)
        logits, _ = rollout(feats, model, order)
        step = np.concatenate([_sigmoid(l.data) for l in logits], axis=-1)
        probs = np.empty_like(step)
        probs[:, list(order)] = step
        out.append(probs)
    return np.concatenate(out) if out else np.zeros((0, model.config.num_classes))


def stage2_loss(model: WeatherModel, feats: np.ndarray, labels: np.ndarray, order: LabelOrder,
                batch: int = 100) -> float:
    total = 0.0
    for sl in _batches(len(feats), batch):
        logits, _ = rollout(Tensor(feats[sl]), model, order)
        total += sequence_loss(logits, labels[sl], order).item() * (sl.stop - sl.start)
    return total / len(feats)


def train_stage2(train: Dataset, backbone: BackboneParams, cfg: TrainConfig, model_config: ModelConfig,
                 order: LabelOrder | None = None, val: Dataset | None = None, zero_heads: bool = False,
                 on_epoch: Callable | None = None) -> tuple[WeatherModel, list[dict]]:
    """Freeze the backbone and train attention, ConvLSTM and heads on the summed per-step loss.

    With ``cfg.finetune_all`` the backbone is trained as well.
    """
    if len(train) == 0:
        raise ValueError("stage 2 needs a non-empty training set")
    order = LabelOrder.identity(model_config.num_classes) if order is None else LabelOrder(order)
    rng = np.random.default_rng(cfg.seed + 1)
    model = WeatherModel.init(model_config, rng, train.images.dtype, backbone=backbone, zero_heads=zero_heads)
    crop = model_config.backbone.input_size[0]
    labels = train.labels.astype(train.images.dtype)
    trainable = model.tensors() if cfg.finetune_all else model.recurrent_tensors()
    frozen = [] if cfg.finetune_all else list(backbone.tensors().values())
    saved_flags = [t.requires_grad for t in frozen]
    for t in frozen:
        t.requires_grad = False
    try:
        cached = None
        if not cfg.augment and not cfg.finetune_all:
            cached = features_of(backbone, train.images)

        def batch_loss(idx, rng):
            if cached is not None:
                feats = Tensor(cached[idx])
            else:
                feats = extract_features(Tensor(_augment_batch(train.images[idx], rng, crop, cfg)), backbone)
            logits, _ = rollout(feats, model, order, cfg.dropout, rng)
            return sequence_loss(logits, labels[idx], order)

        eval_loss = None
        if val is not None and len(val):
            val_feats = features_of(backbone, val.images)
            val_labels = val.labels.astype(val.images.dtype)
            eval_loss = lambda: stage2_loss(model, val_feats, val_labels, order)
        history = _fit(trainable, batch_loss, eval_loss, len(train), cfg, rng, on_epoch, "stage2")
    finally:
        for t, flag in zip(frozen, saved_flags):
            t.requires_grad = flag
    return model, history
