"""Dense tensors, a reverse-mode gradient tape and the differentiable primitives.

Every model in the package is composed from the functions in this module.
A :class:`GradTape` records each primitive executed while it is active;
:meth:`GradTape.gradient` replays the record backwards to accumulate
gradients. Feature maps are laid out ``H x W x C`` (optionally with a
leading batch axis), so the channel vector at a pixel is contiguous.
"""
from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeError",
    "Tensor",
    "GradTape",
    "conv2d",
    "affine",
    "apply_activation",
    "sigmoid",
    "tanh",
    "relu",
    "global_avg_pool",
    "max_pool2d",
    "concat",
    "reshape",
    "flatten",
    "tsum",
    "square_sum",
    "dropout",
    "step_loss",
    "sigmoid_cross_entropy",
    "grad_check",
    "relative_errors",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


_local = threading.local()


def _tapes() -> list["GradTape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class Tensor:
    """A dense row-major array of reals that knows its shape.

    ``requires_grad`` marks trainable leaves; results of primitives inherit it
    from their operands.
    """

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"all dims must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic sugar; all routed through recorded primitives
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return _getitem(self, idx)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _result(name: str, data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        for tape in _tapes():
            tape._records.append((name, out, tuple(parents), backward))
    return out


class GradTape:
    """Ordered record of executed primitives for reverse accumulation.

    Use as a context manager; operations executed inside on tensors that
    require gradients are appended in execution order.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with GradTape() as tape:
    ...     y = square_sum(x)
    >>> tape.gradient(y, [x])[0]
    array([2., 4.])
    """

    def __init__(self):
        self._records: list[tuple[str, Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "GradTape":
        _tapes().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tapes()
        for i in range(len(stack) - 1, -1, -1):
            if stack[i] is self:
                del stack[i]
                break

    @property
    def operations(self) -> list[str]:
        return [r[0] for r in self._records]

    def gradient(self, target: Tensor, sources: Sequence[Tensor], seed: np.ndarray | None = None,
                 trace: list[str] | None = None) -> list[np.ndarray]:
        """Gradients of ``target`` with respect to each of ``sources``.

        Sources never reached get a zero array. When ``trace`` is given the
        names of visited ops are appended to it in visiting order.
        """
        grads: dict[int, np.ndarray] = {
            id(target): np.ones_like(target.data) if seed is None else np.asarray(seed, target.dtype)
        }
        for name, out, parents, backward in reversed(self._records):
            g = grads.get(id(out))
            if g is None:
                continue
            if trace is not None:
                trace.append(name)
            for p, pg in zip(parents, backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                k = id(p)
                grads[k] = grads[k] + pg if k in grads else pg
        return [grads.get(id(s), np.zeros_like(s.data)) for s in sources]


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, d in enumerate(shape):
        if d == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _result("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _result("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    ad, bd = a.data, b.data
    return _result("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def _getitem(x: Tensor, idx) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def backward(g):
        gx = np.zeros(shape, dtype)
        gx[idx] += g
        return (gx,)

    return _result("slice", x.data[idx], (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _result("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def flatten(x: Tensor, batched: bool = False) -> Tensor:
    """Flatten to a vector, or to ``N x rest`` when ``batched``."""
    return reshape(x, (x.shape[0], -1) if batched else (-1,))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _result("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors,
                   lambda g: tuple(np.split(g, cuts, axis=axis)))


def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    return _result("sum", np.asarray(x.data.sum(), x.dtype).reshape(1), (x,),
                   lambda g: (np.broadcast_to(g.reshape(()), shape).copy(),))


def square_sum(x: Tensor) -> Tensor:
    """Sum of squared entries (L2 penalty building block)."""
    xd = x.data
    return _result("square_sum", np.asarray(np.sum(xd * xd), x.dtype).reshape(1), (x,),
                   lambda g: (2.0 * g.reshape(()) * xd,))


# -- activations ------------------------------------------------------------

def _sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(v.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _result("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _result("tanh", t, (x,), lambda g: (g * (1.0 - t * t),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result("relu", np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,),
                   lambda g: (g * mask,))


_ACTIVATIONS = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}


def apply_activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(x)


# -- linear maps ------------------------------------------------------------

def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` for a vector ``x`` or a batch of row vectors."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"affine: input length {x.shape[-1]} does not match weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"affine: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data

    def backward(g):
        x2 = xd.reshape(-1, xd.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        return g @ wd.T, x2.T @ g2, g2.sum(axis=0)

    return _result("affine", xd @ wd + bias.data, (x, weight, bias), backward)


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 'same' convolution with zero padding.

    ``x`` is ``H x W x Cin`` or ``N x H x W x Cin``; ``kernels`` is
    ``Cout x Cin x kh x kw`` with odd ``kh``, ``kw``.
    """
    if kernels.ndim != 4:
        raise ShapeError(f"conv2d: kernels must be rank 4, got {kernels.shape}")
    co, ci, kh, kw = kernels.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel size must be odd, got {kh}x{kw}")
    if x.ndim not in (3, 4) or x.shape[-1] != ci:
        raise ShapeError(f"conv2d: input {x.shape} does not match kernels {kernels.shape}")
    if bias.shape != (co,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {co} output channels")

    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    n, h, w, _ = xd.shape
    ph, pw = kh // 2, kw // 2
    kmat = kernels.data.reshape(co, -1)
    if kh == 1 and kw == 1:
        cols = xd.reshape(-1, ci)
    else:
        xp = np.pad(xd, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
        # (N, H, W, Cin, kh, kw) -> rows of Cin*kh*kw, matching kernel layout
        cols = sliding_window_view(xp, (kh, kw), axis=(1, 2)).reshape(n * h * w, ci * kh * kw)
    out = (cols @ kmat.T).reshape(n, h, w, co) + bias.data
    if single:
        out = out[0]

    def backward(g):
        g2 = g.reshape(-1, co)
        dk = (g2.T @ cols).reshape(kernels.shape)
        db = g2.sum(axis=0)
        dcols = (g2 @ kmat).reshape(n, h, w, ci, kh, kw)
        if kh == 1 and kw == 1:
            dx = dcols.reshape(n, h, w, ci)
        else:
            dxp = np.zeros((n, h + 2 * ph, w + 2 * pw, ci), dcols.dtype)
            for dy in range(kh):
                for dx_ in range(kw):
                    dxp[:, dy:dy + h, dx_:dx_ + w, :] += dcols[..., dy, dx_]
            dx = dxp[:, ph:ph + h, pw:pw + w, :]
        return (dx[0] if single else dx), dk, db

    return _result("conv2d", out, (x, kernels, bias), backward)


# -- pooling ----------------------------------------------------------------

def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the two spatial axes: ``H x W x C -> C`` (batched: ``N x C``)."""
    if x.ndim not in (3, 4):
        raise ShapeError(f"global_avg_pool expects a rank-3 map (or a batch of them), got {x.shape}")
    h, w = x.shape[-3], x.shape[-2]
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(g[..., None, None, :] / (h * w), shape).copy(),)

    return _result("global_avg_pool", x.data.mean(axis=(-3, -2)), (x,), backward)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping ``size x size`` max pooling; trailing rows/cols that do not fill a window are dropped."""
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    n, h, w, c = xd.shape
    h2, w2 = h // size, w // size
    if h2 < 1 or w2 < 1:
        raise ShapeError(f"max_pool2d: input {x.shape} smaller than window {size}")
    win = (xd[:, :h2 * size, :w2 * size, :]
           .reshape(n, h2, size, w2, size, c)
           .transpose(0, 1, 3, 5, 2, 4)
           .reshape(n, h2, w2, c, size * size))
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        g4 = g[None] if single else g
        gw = np.zeros(win.shape, g.dtype)
        np.put_along_axis(gw, arg[..., None], g4[..., None], axis=-1)
        gx = np.zeros((n, h, w, c), g.dtype)
        gx[:, :h2 * size, :w2 * size, :] = (gw.reshape(n, h2, w2, c, size, size)
                                           .transpose(0, 1, 4, 2, 5, 3)
                                           .reshape(n, h2 * size, w2 * size, c))
        return (gx[0] if single else gx,)

    return _result("max_pool2d", out[0] if single else out, (x,), backward)


# -- regularization and losses ---------------------------------------------

def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout. Identity when ``rng`` is None (inference) or ``rate`` is 0."""
    if rng is None or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    mask = ((rng.random(x.shape) >= rate) / (1.0 - rate)).astype(x.dtype)
    return _result("dropout", x.data * mask, (x,), lambda g: (g * mask,))


def step_loss(probs: Tensor, targets, eps: float = 1e-7) -> Tensor:
    """Mean binary cross-entropy of probabilities against 0/1 targets.

    Probabilities are clamped to ``[eps, 1 - eps]`` before the logarithm.
    """
    t = np.asarray(targets, dtype=probs.dtype)
    if t.shape != probs.shape:
        raise ShapeError(f"step_loss: targets {t.shape} vs probabilities {probs.shape}")
    p = np.clip(probs.data, eps, 1.0 - eps)
    n = probs.size
    loss = -np.sum(t * np.log(p) + (1.0 - t) * np.log1p(-p)) / n
    inside = (probs.data >= eps) & (probs.data <= 1.0 - eps)

    def backward(g):
        return (g.reshape(()) * inside * (-(t / p) + (1.0 - t) / (1.0 - p)) / n,)

    return _result("step_loss", np.asarray(loss, probs.dtype).reshape(1), (probs,), backward)


def sigmoid_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean of ``-[t log s(x) + (1-t) log(1-s(x))]`` computed stably from logits."""
    t = np.asarray(targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ShapeError(f"sigmoid_cross_entropy: targets {t.shape} vs logits {logits.shape}")
    xd = logits.data
    n = logits.size
    loss = np.sum(np.maximum(xd, 0) - xd * t + np.log1p(np.exp(-np.abs(xd)))) / n
    s = _sigmoid(xd)
    return _result("sigmoid_cross_entropy", np.asarray(loss, xd.dtype).reshape(1), (logits,),
                   lambda g: (g.reshape(()) * (s - t) / n,))


# -- finite-difference verification ---------------------------------------

def relative_errors(fn: Callable[..., Tensor], points: Tensor | Sequence[Tensor], eps: float = 1e-5,
                    coords: int | None = None, rng: np.random.Generator | None = None) -> np.ndarray:
    """Per-coordinate relative error between tape gradients and central differences.

    ``fn`` maps the tensors in ``points`` to a scalar tensor. The error at a
    coordinate is ``|a - n| / max(1, |a|, |n|)``. With ``coords`` set, only that
    many coordinates (sampled uniformly across all points) are checked.
    Non-finite values yield ``inf``.
    """
    pts = [points] if isinstance(points, Tensor) else list(points)
    for p in pts:
        p.requires_grad = True
    with GradTape() as tape:
        out = fn(*pts)
    if out.size != 1:
        raise ShapeError(f"grad check needs a scalar-valued function, got shape {out.shape}")
    analytic = tape.gradient(out, pts)

    sizes = [p.size for p in pts]
    total = sum(sizes)
    if coords is None or coords >= total:
        flat_ids = np.arange(total)
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        flat_ids = np.sort(rng.choice(total, size=coords, replace=False))
    offsets = np.cumsum([0] + sizes)

    errs = np.empty(len(flat_ids))
    for n, fid in enumerate(flat_ids):
        which = int(np.searchsorted(offsets, fid, side="right") - 1)
        local = int(fid - offsets[which])
        flat = pts[which].data.reshape(-1)
        orig = flat[local]
        flat[local] = orig + eps
        fp = fn(*pts).item()
        flat[local] = orig - eps
        fm = fn(*pts).item()
        flat[local] = orig
        num = (fp - fm) / (2.0 * eps)
        a = float(analytic[which].reshape(-1)[local])
        if not (math.isfinite(a) and math.isfinite(num)):
            errs[n] = math.inf
        else:
            errs[n] = abs(a - num) / max(1.0, abs(a), abs(num))
    return errs


def grad_check(fn: Callable[..., Tensor], point: Tensor | Sequence[Tensor], eps: float = 1e-5) -> float:
    """Maximum relative error of the tape gradient against central differences.

    Points should be 64-bit. Returns ``inf`` when any value is non-finite, so a
    comparison against a tolerance reports failure.
    """
    errs = relative_errors(fn, point, eps)
    return float(errs.max()) if errs.size else 0.0
