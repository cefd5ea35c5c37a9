"""Fully connected LSTM and convolutional LSTM cells.

Both cells keep their four gates fused along the output axis in the order
input, forget, output, candidate (``i, f, o, g``), so one matrix product (or
one convolution) yields every gate pre-activation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, affine, concat, conv2d, sigmoid, tanh

GATES = ("i", "f", "o", "g")


def xavier_uniform(shape: tuple[int, ...], fan_in: int, fan_out: int, rng: np.random.Generator,
                   dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


@dataclass
class FcLstmParams:
    """Gate weights of a fully connected LSTM.

    ``w`` is ``D_in x 4D_h``, ``u`` is ``D_h x 4D_h`` and ``b`` has ``4D_h``
    entries; column block ``k`` belongs to gate ``GATES[k]``.
    """

    w: Tensor
    u: Tensor
    b: Tensor

    def __post_init__(self):
        d_in, four_h = self.w.shape
        if four_h % 4 or self.u.shape != (four_h // 4, four_h) or self.b.shape != (four_h,):
            raise ShapeError(f"inconsistent LSTM params: w {self.w.shape}, u {self.u.shape}, b {self.b.shape}")

    @property
    def hidden(self) -> int:
        return self.u.shape[0]

    def gate(self, name: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        k = GATES.index(name)
        sl = slice(k * self.hidden, (k + 1) * self.hidden)
        return self.w.data[:, sl], self.u.data[:, sl], self.b.data[sl]

    def tensors(self) -> dict[str, Tensor]:
        return {"w": self.w, "u": self.u, "b": self.b}

    @classmethod
    def init(cls, d_in: int, d_h: int, rng: np.random.Generator, dtype=np.float32,
             forget_bias: float = 1.0) -> "FcLstmParams":
        w = xavier_uniform((d_in, 4 * d_h), d_in, d_h, rng, dtype)
        u = xavier_uniform((d_h, 4 * d_h), d_h, d_h, rng, dtype)
        b = np.zeros(4 * d_h, dtype)
        b[d_h:2 * d_h] = forget_bias
        return cls(Tensor(w, True), Tensor(u, True), Tensor(b, True))


@dataclass
class ConvLstmParams:
    """Gate kernels of a convolutional LSTM.

    ``w`` is ``4C_h x C_in x k x k`` (input-to-state), ``u`` is
    ``4C_h x C_h x k x k`` (state-to-state), ``b`` has ``4C_h`` entries.
    """

    w: Tensor
    u: Tensor
    b: Tensor

    def __post_init__(self):
        four_h, _, k, k2 = self.w.shape
        if k != k2 or k % 2 == 0:
            raise ShapeError(f"ConvLSTM kernels must be square with odd size, got {self.w.shape}")
        if four_h % 4 or self.u.shape != (four_h, four_h // 4, k, k) or self.b.shape != (four_h,):
            raise ShapeError(f"inconsistent ConvLSTM params: w {self.w.shape}, u {self.u.shape}, b {self.b.shape}")

    @property
    def hidden(self) -> int:
        return self.u.shape[1]

    @property
    def in_channels(self) -> int:
        return self.w.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.w.shape[2]

    def gate(self, name: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        k = GATES.index(name)
        sl = slice(k * self.hidden, (k + 1) * self.hidden)
        return self.w.data[sl], self.u.data[sl], self.b.data[sl]

    def tensors(self) -> dict[str, Tensor]:
        return {"w": self.w, "u": self.u, "b": self.b}

    @classmethod
    def init(cls, c_in: int, c_h: int, k: int, rng: np.random.Generator, dtype=np.float32,
             forget_bias: float = 1.0) -> "ConvLstmParams":
        w = xavier_uniform((4 * c_h, c_in, k, k), c_in * k * k, c_h * k * k, rng, dtype)
        u = xavier_uniform((4 * c_h, c_h, k, k), c_h * k * k, c_h * k * k, rng, dtype)
        b = np.zeros(4 * c_h, dtype)
        b[c_h:2 * c_h] = forget_bias
        return cls(Tensor(w, True), Tensor(u, True), Tensor(b, True))


@dataclass
class ConvLstmState:
    h: Tensor
    c: Tensor

    def __post_init__(self):
        if self.h.shape != self.c.shape:
            raise ShapeError(f"hidden {self.h.shape} and cell {self.c.shape} shapes differ")

    def __iter__(self):
        return iter((self.h, self.c))


def zero_state(h: int, w: int, c_h: int, batch: int | None = None, dtype=np.float32) -> ConvLstmState:
    """All-zero initial state, ``H x W x C_h`` (or ``N x H x W x C_h``)."""
    if min(h, w, c_h) < 1 or (batch is not None and batch < 1):
        raise ValueError("state dims must be positive")
    shape = (h, w, c_h) if batch is None else (batch, h, w, c_h)
    return ConvLstmState(Tensor(np.zeros(shape, dtype)), Tensor(np.zeros(shape, dtype)))


def _gate_update(pre: Tensor, c: Tensor, hidden: int) -> tuple[Tensor, Tensor]:
    i = sigmoid(pre[..., 0:hidden])
    f = sigmoid(pre[..., hidden:2 * hidden])
    o = sigmoid(pre[..., 2 * hidden:3 * hidden])
    g = tanh(pre[..., 3 * hidden:4 * hidden])
    c_new = f * c + i * g
    return o * tanh(c_new), c_new


def fc_lstm_step(x: Tensor, state: tuple[Tensor, Tensor], params: FcLstmParams) -> tuple[Tensor, Tensor]:
    """One LSTM step on vectors (or a batch of row vectors). Returns ``(h, c)``."""
    h, c = state
    if x.shape[-1] != params.w.shape[0] or h.shape[-1] != params.hidden or h.shape != c.shape:
        raise ShapeError(f"fc_lstm_step: x {x.shape}, h {h.shape}, c {c.shape} vs params {params.w.shape}")
    pre = affine(x, params.w, params.b) + affine(h, params.u, _zeros_bias(params))
    return _gate_update(pre, c, params.hidden)


def _zeros_bias(params) -> Tensor:
    return Tensor(np.zeros(params.b.shape, params.b.dtype))


def conv_lstm_step(x: Tensor, state: ConvLstmState, params: ConvLstmParams) -> ConvLstmState:
    """One ConvLSTM step; the returned state has the same shape as ``state``.

    Input and recurrent kernels are applied as a single convolution over the
    channel concatenation ``[x, h]``.
    """
    h, c = state
    if x.shape[:-1] != h.shape[:-1]:
        raise ShapeError(f"conv_lstm_step: input {x.shape} and state {h.shape} differ spatially")
    if x.shape[-1] != params.in_channels or h.shape[-1] != params.hidden:
        raise ShapeError(f"conv_lstm_step: channels of x {x.shape} / h {h.shape} do not match params")
    kernels = concat([params.w, params.u], axis=1)
    pre = conv2d(concat([x, h], axis=-1), kernels, params.b)
    h_new, c_new = _gate_update(pre, c, params.hidden)
    return ConvLstmState(h_new, c_new)
