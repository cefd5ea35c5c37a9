"""Finite-difference gradient suites for the differentiable building blocks.

Every check runs in 64-bit with central differences (``eps = 1e-5``). The
component suites require a maximum relative error below ``1e-4``; the model
suite samples coordinates of the full image-to-loss pipeline on the small
backbone and requires ``1e-3`` on at least 99% of them, since ReLU and
max-pool kinks can corrupt an occasional finite difference.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .attention import AttentionParams, attention_weights, channel_stats, recalibrate
from .backbone import BackboneConfig, extract_features
from .cells import ConvLstmParams, ConvLstmState, FcLstmParams, conv_lstm_step, fc_lstm_step
from .model import LabelOrder, ModelConfig, WeatherModel, rollout, sequence_loss
from .tensor import (
    Tensor, affine, conv2d, global_avg_pool, grad_check, max_pool2d, relative_errors, relu, sigmoid,
    sigmoid_cross_entropy, square_sum, step_loss, tanh, tsum,
)

EPS = 1e-5
COMPONENT_TOL = 1e-4
MODEL_TOL = 1e-3
MODEL_FRACTION = 0.99
MODULES = ("tensors", "cells", "attention", "model")


@dataclass
class CheckResult:
    name: str
    error: float          # max relative error, or fraction within tolerance for sampled checks
    passed: bool
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.detail or f'max rel err {self.error:.3e}'}"


def _t(rng, *shape, low=None):
    v = rng.normal(size=shape)
    if low is not None:  # keep values away from kinks at zero
        v = np.sign(v) * (np.abs(v) + low)
    return Tensor(v)


def _check(name: str, fn: Callable, points) -> CheckResult:
    err = grad_check(fn, points, EPS)
    return CheckResult(name, err, err < COMPONENT_TOL)


def tensor_suite(rng: np.random.Generator) -> list[CheckResult]:
    target = rng.normal(size=(5, 4, 3))
    labels = (rng.random(6) < 0.5).astype(float)
    probs_t = np.array([1.0, 0.0, 1.0, 0.0])
    return [
        _check("conv2d", lambda x, k, b: square_sum(conv2d(x, k, b) - Tensor(target)),
               [_t(rng, 5, 4, 2), _t(rng, 3, 2, 3, 3), _t(rng, 3)]),
        _check("conv2d_batched", lambda x, k, b: square_sum(conv2d(x, k, b)),
               [_t(rng, 2, 3, 3, 2), _t(rng, 2, 2, 3, 3), _t(rng, 2)]),
        _check("affine", lambda x, w, b: square_sum(affine(x, w, b)), [_t(rng, 3, 4), _t(rng, 4, 2), _t(rng, 2)]),
        _check("sigmoid", lambda x: square_sum(sigmoid(x)), [_t(rng, 6)]),
        _check("tanh", lambda x: square_sum(tanh(x)), [_t(rng, 6)]),
        _check("relu", lambda x: square_sum(relu(x)), [_t(rng, 6, low=0.1)]),
        _check("global_avg_pool", lambda x: square_sum(global_avg_pool(x)), [_t(rng, 3, 3, 2)]),
        _check("max_pool2d", lambda x: square_sum(max_pool2d(x)), [_t(rng, 4, 4, 2)]),
        _check("step_loss", lambda p: step_loss(p, probs_t), [Tensor(rng.uniform(0.1, 0.9, size=4))]),
        _check("sigmoid_cross_entropy", lambda z: sigmoid_cross_entropy(z, labels), [_t(rng, 6)]),
    ]


def cell_suite(rng: np.random.Generator) -> list[CheckResult]:
    target = rng.normal(size=(3, 4, 2))

    def fc(x, h0, c0, w, u, b):
        h, c = fc_lstm_step(x, (h0, c0), FcLstmParams(w, u, b))
        return square_sum(h) + tsum(c)

    def conv(x, h0, c0, w, u, b):
        s = conv_lstm_step(x, ConvLstmState(h0, c0), ConvLstmParams(w, u, b))
        return square_sum(s.h - Tensor(target)) + tsum(s.c)

    return [
        _check("fc_lstm_step", fc, [_t(rng, 3), _t(rng, 2), _t(rng, 2), _t(rng, 3, 8), _t(rng, 2, 8), _t(rng, 8)]),
        _check("conv_lstm_step", conv, [_t(rng, 3, 4, 2), _t(rng, 3, 4, 2), _t(rng, 3, 4, 2),
                                        _t(rng, 8, 2, 3, 3), _t(rng, 8, 2, 3, 3), _t(rng, 8)]),
    ]


def attention_suite(rng: np.random.Generator) -> list[CheckResult]:
    def chain(x, h, w1, b1, w2, b2):
        a, d = channel_stats(x, h)
        z = attention_weights(a, d, AttentionParams(w1, b1, w2, b2))
        return square_sum(recalibrate(x, z))

    def literal(x, h, w1, b1, w2, b2):
        a, d = channel_stats(x, h)
        z = attention_weights(a, d, AttentionParams(w1, b1, w2, b2))
        return square_sum(recalibrate(x, z, mode="literal"))

    pts = lambda: [_t(rng, 3, 3, 4), _t(rng, 3, 3, 4), _t(rng, 8, 3), _t(rng, 3, low=0.5), _t(rng, 3, 4), _t(rng, 4)]
    return [_check("attention_chain", chain, pts()), _check("attention_literal", literal, pts())]


def model_suite(rng: np.random.Generator, coords: int = 200) -> list[CheckResult]:
    """Image and parameter gradients of the summed step loss on the small backbone."""
    cfg = ModelConfig(backbone=BackboneConfig.desk(), num_classes=4)
    model = WeatherModel.init(cfg, rng, np.float64)
    # nonzero biases keep most ReLU inputs away from zero
    for b in model.backbone.tensors(with_head=False).values():
        if b.ndim == 1:
            b.data[:] = rng.uniform(0.05, 0.15, size=b.shape)
    image = Tensor(rng.random(cfg.backbone.input_size))
    labels = np.array([1.0, 0.0, 1.0, 0.0])
    order = LabelOrder([2, 0, 3, 1])

    def loss(*_):
        logits, _ = rollout(extract_features(image, model.backbone), model, order)
        return sequence_loss(logits, labels, order)

    errs = np.concatenate([
        relative_errors(loss, [image], EPS, coords=coords // 2, rng=rng),
        relative_errors(loss, list(model.tensors().values()), EPS, coords=coords, rng=rng),
    ])
    frac = float(np.mean(errs < MODEL_TOL))
    detail = f"{frac:.2%} of {errs.size} coordinates within {MODEL_TOL:g} (median {np.median(errs):.1e})"
    return [CheckResult("model_end_to_end", frac, frac >= MODEL_FRACTION, detail)]


SUITES = {"tensors": tensor_suite, "cells": cell_suite, "attention": attention_suite, "model": model_suite}


def run(modules=MODULES, seed: int = 0) -> list[CheckResult]:
    results = []
    for name in modules:
        if name not in SUITES:
            raise ValueError(f"unknown gradcheck module {name!r}; choose from {', '.join(MODULES)}")
        results.extend(SUITES[name](np.random.default_rng(seed)))
    return results
