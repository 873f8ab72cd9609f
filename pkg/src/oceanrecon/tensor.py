"""Dense float32 tensors with tape-based reverse-mode differentiation.

Only the operations the denoiser needs are provided. Every op checks its
operand shapes, refuses to produce non-finite values and, when any operand
requires a gradient, appends a node to the thread-local tape. ``backward``
replays that tape in reverse and clears it.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

DTYPE = np.float32
NORM_EPS = 1e-5


class TensorError(Exception):
    """Base class for engine errors."""


class ShapeError(TensorError, ValueError):
    pass


class NonFiniteError(TensorError, FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


@dataclass
class _Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


class _State(threading.local):
    def __init__(self) -> None:
        self.tape: list[_Node] = []
        self.grad_enabled = True


_state = _State()


def tape_length() -> int:
    return len(_state.tape)


def clear_tape() -> None:
    for node in _state.tape:
        node.output._node = None
    _state.tape.clear()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _record(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    _check_finite(out, op)
    needs = _state.grad_enabled and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    if needs:
        node = _Node(inputs, result, bwd, op)
        result._node = node
        _state.tape.append(node)
    return result


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires_grad tensor reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` buffers of leaves. The tape is
    cleared afterwards whether or not the loss was on it.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = _state.tape
    if not tape and loss.is_leaf:
        raise TensorError("backward called with an empty tape")
    seed = np.ones_like(loss.data)
    pending: dict[int, np.ndarray] = {id(loss): seed}
    if loss.is_leaf and loss.requires_grad:
        loss.grad = seed if loss.grad is None else loss.grad + seed
    try:
        for node in reversed(tape):
            g = pending.pop(id(node.output), None)
            if g is None:
                continue
            g = np.ascontiguousarray(g, dtype=DTYPE)
            node.output.grad = g
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                gi = np.asarray(gi, dtype=DTYPE).reshape(t.shape)
                if t.is_leaf:
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
                else:
                    prev = pending.get(id(t))
                    pending[id(t)] = gi if prev is None else prev + gi
    finally:
        clear_tape()


# ---------------------------------------------------------------- elementwise


def _binary_operands(a, b, op: str) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not match")
    return a, b


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum(), dtype=DTYPE).reshape(t.shape)


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")
    out = a.data + b.data
    return _record("add", out, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")
    out = a.data - b.data
    return _record("sub", out, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a), _unbroadcast(g * a.data, b)

    return _record("mul", out, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def silu(x: Tensor) -> Tensor:
    sig = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    out = x.data * sig

    def bwd(g):
        return (g * (sig * (1.0 + x.data * (1.0 - sig))),)

    return _record("silu", out, (x,), bwd)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=DTYPE).reshape(())
    return _record("sum", out, (x,), lambda g: (np.broadcast_to(g, x.shape),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.mean(dtype=np.float64), dtype=DTYPE).reshape(())
    return _record("mean", out, (x,), lambda g: (np.broadcast_to(g / n, x.shape),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)
    return _record("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: incompatible shapes {a.shape} and {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _record("concat", out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def upsample_nearest2x(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError("upsample_nearest2x expects NCHW input")
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = x.shape

    def bwd(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _record("upsample", out, (x,), bwd)


def add_channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    """x[N,C,H,W] + bias[N,C] broadcast over the spatial axes."""
    if x.data.ndim != 4 or bias.shape != x.shape[:2]:
        raise ShapeError(f"add_channel_bias: {bias.shape} cannot bias {x.shape}")
    out = x.data + bias.data[:, :, None, None]
    return _record("channel_bias", out, (x, bias), lambda g: (g, g.sum(axis=(2, 3))))


# ---------------------------------------------------------------- layers


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x[N,I] @ weight[O,I].T + bias[O]."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out += bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _record("linear", out, inputs, bwd)


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patches of a padded channels-last array as rows ordered (ki, kj, c)."""
    n, _, _, c = xp.shape
    if k == 1:
        return np.ascontiguousarray(xp[:, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride, :]).reshape(
            n * ho * wo, c
        )
    cols = np.empty((n, ho, wo, k, k, c), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride, :]
    return cols.reshape(n * ho * wo, k * k * c)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int = 0, stride: int = 1) -> Tensor:
    """Cross-correlation of x[N,C,H,W] with weight[O,C,k,k] (no kernel flip)."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    o, cw, k, k2 = weight.shape
    if cw != c or k != k2:
        raise ShapeError(f"conv2d: weight {weight.shape} incompatible with input {x.shape}")
    if k % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {k}")
    if padding < 0 or stride < 1:
        raise ShapeError(f"conv2d: invalid padding={padding} stride={stride}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {o} output channels")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < k or wp < k:
        raise ShapeError("conv2d: kernel larger than padded input")
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1

    # channels-last internally so every matmul operand is a contiguous block
    xp = np.zeros((n, hp, wp, c), dtype=DTYPE)
    xp[:, padding : padding + h, padding : padding + w, :] = x.data.transpose(0, 2, 3, 1)
    inputs = (x, weight) if bias is None else (x, weight, bias)
    if stride == 1 and k > 1:
        out, bwd = _conv_shifted(x, weight, bias, xp, padding)
    else:
        out, bwd = _conv_im2col(x, weight, bias, xp, padding, stride, ho, wo)
    return _record("conv2d", out, inputs, bwd)


def _conv_shifted(x: Tensor, weight: Tensor, bias: Tensor | None, xp: np.ndarray, padding: int):
    """Stride-1 conv as k*k matmuls over row-shifted views of the flattened padded image.

    Output row r of the flat (N*Hp*Wp) grid is the patch anchored at r; rows whose
    anchor falls in the right/bottom margin are junk and get cropped.
    """
    n, hp, wp, c = xp.shape
    o, _, k, _ = weight.shape
    h, w = x.shape[2:]
    ho, wo = hp - k + 1, wp - k + 1
    total = n * hp * wp
    rows = total - (k - 1) * (wp + 1)
    offsets = [i * wp + j for i in range(k) for j in range(k)]
    flat = xp.reshape(total, c)
    wk = np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0)).reshape(k * k, c, o)

    full = np.empty((total, o), dtype=DTYPE)
    acc = full[:rows]
    np.matmul(flat[:rows], wk[0], out=acc)
    for idx in range(1, k * k):
        off = offsets[idx]
        acc += flat[off : off + rows] @ wk[idx]
    if bias is not None:
        acc += bias.data
    out = np.ascontiguousarray(full.reshape(n, hp, wp, o)[:, :ho, :wo, :].transpose(0, 3, 1, 2))

    def bwd(g):
        gfull = np.zeros((n, hp, wp, o), dtype=DTYPE)
        gfull[:, :ho, :wo, :] = g.transpose(0, 2, 3, 1)
        gflat = gfull.reshape(total, o)[:rows]
        gwk = np.empty((k * k, c, o), dtype=DTYPE)
        for idx, off in enumerate(offsets):
            np.matmul(flat[off : off + rows].T, gflat, out=gwk[idx])
        gw = gwk.reshape(k, k, c, o).transpose(3, 2, 0, 1)
        gx = None
        if x.requires_grad:
            gxflat = np.zeros((total, c), dtype=DTYPE)
            for idx, off in enumerate(offsets):
                gxflat[off : off + rows] += gflat @ wk[idx].T
            gx = gxflat.reshape(n, hp, wp, c)[:, padding : padding + h, padding : padding + w, :].transpose(0, 3, 1, 2)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return out, bwd


def _conv_im2col(x: Tensor, weight: Tensor, bias: Tensor | None, xp: np.ndarray, padding: int, stride: int, ho, wo):
    n, hp, wp, c = xp.shape
    o, _, k, _ = weight.shape
    h, w = x.shape[2:]
    cols = _im2col(xp, k, stride, ho, wo)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(o, k * k * c)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def bwd(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (gmat.T @ cols).reshape(o, k, k, c).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, ho, wo, k, k, c)
            gxp = np.zeros((n, hp, wp, c), dtype=DTYPE)
            for i in range(k):
                for j in range(k):
                    gxp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride, :] += gcols[
                        :, :, :, i, j, :
                    ]
            gx = gxp[:, padding : padding + h, padding : padding + w, :].transpose(0, 3, 1, 2)
        grads = [gx, gw]
        if bias is not None:
            grads.append(gmat.sum(axis=0))
        return grads

    return out, bwd


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = NORM_EPS) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError("group_norm expects NCHW input")
    n, c, h, w = x.shape
    if groups < 1 or c % groups != 0:
        raise ShapeError(f"group_norm: {c} channels not divisible into {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("group_norm: gamma/beta must have one entry per channel")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(n, c, h, w)
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    m = xg.shape[2]

    def bwd(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            gxhat = (g * gamma.data[None, :, None, None]).reshape(n, groups, m)
            xh = xhat.reshape(n, groups, m)
            gx = inv * (gxhat - gxhat.mean(axis=2, keepdims=True) - xh * (gxhat * xh).mean(axis=2, keepdims=True))
            gx = gx.reshape(n, c, h, w)
        return gx, ggamma, gbeta

    return _record("group_norm", out.astype(DTYPE, copy=False), (x, gamma, beta), bwd)
