"""Dense tensors with tape-based reverse-mode gradients.

Only the primitives the PAMNet graph uses are provided.  Tensors are rank 1-3;
rank-3 tensors carry a leading batch axis and every op treats it as a loop
over windows (no other broadcasting beyond the bias row and the per-channel
scale used by denormalization).

Usage::

    with Tape() as tape:
        y = matmul(x, w)
        loss = mean_abs(y)
    tape.backward(loss)   # accumulates into w.grad
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class BoundsError(IndexError):
    pass


class NumericError(FloatingPointError):
    pass


class ConfigError(ValueError):
    pass


_state = threading.local()


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype new tensors are created with."""
    old = default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = old


class Tensor:
    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or default_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if not 1 <= arr.ndim <= 3:
            raise DimensionError(f"tensor rank must be 1-3, got shape {arr.shape}")
        if arr.size == 0:
            raise DimensionError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def check_finite(self, stage: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NumericError(f"non-finite values in {stage}")
        return self

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


class Parameter(Tensor):
    """A learnable tensor.  ``grad`` accumulates across backward passes."""

    __slots__ = ("name", "grad", "frozen")

    def __init__(self, data, name: str, frozen: bool = False, dtype=None):
        super().__init__(data, requires_grad=not frozen, dtype=dtype)
        self.name = name
        self.frozen = frozen
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


# vjp returns one gradient (or None) per input
_Record = tuple  # (out, inputs, vjp)


class Tape:
    """Records primitive ops executed inside ``with tape:``."""

    def __init__(self) -> None:
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def record(self, out: Tensor, inputs: Sequence[Tensor], vjp: Callable) -> None:
        self.records.append((out, tuple(inputs), vjp))

    def backward(self, loss: Tensor, seed: Optional[np.ndarray] = None) -> None:
        """Replay the tape in reverse, adding gradients into Parameter.grad."""
        grads: dict[int, np.ndarray] = {
            id(loss): np.ones_like(loss.data) if seed is None else np.asarray(seed, loss.data.dtype)
        }
        for out, inputs, vjp in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if isinstance(inp, Parameter):
                    inp.grad += gi
                elif id(inp) in grads:
                    grads[id(inp)] = grads[id(inp)] + gi
                else:
                    grads[id(inp)] = gi
        self.clear()

    def clear(self) -> None:
        self.records.clear()

    def __len__(self) -> int:
        return len(self.records)


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def _result(data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = needs
    stack = _tape_stack()
    if needs and stack:
        stack[-1].record(out, inputs, vjp)
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(m×k)·(k×n), or batched (B×m×k)·(k×n) / (B×m×k)·(B×k×n)."""
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if a.data.ndim == 3 and b.data.ndim == 3 and a.shape[0] != b.shape[0]:
        raise DimensionError(f"matmul: batch sizes of {a.shape} and {b.shape} differ")
    if a.data.ndim == 2 and b.data.ndim == 3:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by batched {b.shape}")
    A, B = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(B, -1, -2)
        gb = np.swapaxes(A, -1, -2) @ g
        if B.ndim == 2 and gb.ndim == 3:
            gb = gb.sum(axis=0)
        return ga, gb

    return _result(A @ B, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """x + bias with ``bias`` (length = last dim of x) repeated over rows."""
    if bias.data.ndim != 1 or bias.shape[0] != x.shape[-1]:
        raise DimensionError(f"add_bias: bias {bias.shape} does not fit {x.shape}")
    axes = tuple(range(x.data.ndim - 1))
    return _result(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=axes)))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "hadamard")
    A, B = a.data, b.data
    return _result(A * B, (a, b), lambda g: (g * B, g * A))


def scale(x: Tensor, k: float) -> Tensor:
    return _result(x.data * x.data.dtype.type(k), (x,), lambda g: (g * k,))


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.data.ndim < 2:
        raise DimensionError(f"transpose needs rank >= 2, got {x.shape}")
    return _result(np.swapaxes(x.data, -1, -2).copy(), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.data.size:
        raise DimensionError(f"reshape: {x.shape} cannot become {shape}")
    orig = x.shape
    return _result(x.data.reshape(shape).copy(), (x,), lambda g: (g.reshape(orig),))


def repeat_rows(x: Tensor, n: int) -> Tensor:
    """(d,) -> (n×d) or (B×d) -> (B×n×d): copy each row n times."""
    if x.data.ndim == 1:
        data = np.broadcast_to(x.data, (n,) + x.shape).copy()
        return _result(data, (x,), lambda g: (g.sum(axis=0),))
    if x.data.ndim == 2:
        data = np.broadcast_to(x.data[:, None, :], (x.shape[0], n, x.shape[1])).copy()
        return _result(data, (x,), lambda g: (g.sum(axis=1),))
    raise DimensionError(f"repeat_rows: unsupported shape {x.shape}")


def gather_row(table: Tensor, index: int) -> Tensor:
    """Row ``index`` of a 2-D table as a 1×c tensor."""
    return gather_rows(table, [index])


def gather_rows(table: Tensor, indices: Sequence[int]) -> Tensor:
    """Rows of ``table`` at ``indices`` stacked into a len(indices)×c tensor."""
    if table.data.ndim != 2:
        raise DimensionError(f"gather: table must be 2-D, got {table.shape}")
    r = table.shape[0]
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    bad = idx[(idx < 0) | (idx >= r)]
    if bad.size:
        raise BoundsError(f"gather: index {int(bad[0])} out of range for {r} rows")

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _result(table.data[idx].copy(), (table,), vjp)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _result(s, (x,), lambda g: (g * s * (1 - s),))


def silu(x: Tensor) -> Tensor:
    v = x.data
    s = _sigmoid(v)
    return _result(v * s, (x,), lambda g: (g * s * (1 + v * (1 - s)),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _result(t, (x,), lambda g: (g * (1 - t * t),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    v = x.data
    u = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(u)

    def vjp(g):
        du = _GELU_C * (1 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1 + t) + 0.5 * v * (1 - t * t) * du),)

    return _result(0.5 * v * (1 + t), (x,), vjp)


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "silu": silu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu": relu,
    "gelu": gelu,
}


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # split by sign to avoid exp overflow
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1 / (1 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1 + e)
    return out


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) at train time."""
    if not 0 <= rate < 1:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.data.dtype) / x.data.dtype.type(1 - rate)
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


def mean_abs(x: Tensor) -> Tensor:
    n = x.data.size
    if n == 0:
        raise ValueError("mean_abs of an empty tensor")
    sgn = np.sign(x.data)
    return _result(np.array([np.abs(x.data).mean()], dtype=x.data.dtype), (x,), lambda g: (g[0] * sgn / n,))


def mean_square(x: Tensor) -> Tensor:
    n = x.data.size
    v = x.data
    return _result(np.array([(v * v).mean()], dtype=v.dtype), (x,), lambda g: (g[0] * 2 * v / n,))


# ------------------------------------------------------------------ spectral

_dft_cache: dict[int, np.ndarray] = {}


def dft_matrix(n: int) -> np.ndarray:
    """F[k, j] = exp(-2πi·jk/n), complex128."""
    if n < 1:
        raise ValueError("DFT length must be >= 1")
    F = _dft_cache.get(n)
    if F is None:
        jk = np.outer(np.arange(n), np.arange(n)) % n
        F = np.exp(-2j * np.pi * jk / n)
        _dft_cache[n] = F
    return F


def dft(x, axis: int = -1) -> np.ndarray:
    """Direct DFT along ``axis``: X[k] = Σ_j x[j]·exp(-2πi·jk/n)."""
    arr = np.asarray(x)
    moved = np.moveaxis(arr, axis, -1)
    out = moved @ dft_matrix(moved.shape[-1]).T
    return np.moveaxis(out, -1, axis)


def spectral_mean_abs(x: Tensor, axis: int) -> Tensor:
    """Mean complex modulus of the DFT of ``x`` along ``axis`` (over all entries)."""
    v = x.data
    Z = dft(v.astype(np.float64), axis=axis)
    mod = np.abs(Z)
    n = v.size

    def vjp(g):
        with np.errstate(invalid="ignore", divide="ignore"):
            u = np.where(mod > 0, Z / np.where(mod > 0, mod, 1), 0)
        # d|Z_k|/dx_j = Re(conj(u_k)·F[k,j]); summed over k this is Re(F^H u)
        moved = np.moveaxis(u, axis, -1)
        back = np.real(moved @ dft_matrix(moved.shape[-1]).conj())
        return ((g[0] / n) * np.moveaxis(back, -1, axis).astype(v.dtype),)

    return _result(np.array([mod.mean()], dtype=v.dtype), (x,), vjp)


# ------------------------------------------------------------- normalization


def instance_norm(x: Tensor, eps: float) -> tuple[Tensor, Tensor, Tensor]:
    """Normalize each channel over the time axis (axis -2).

    Returns (normalized, mu, scale) with ``scale = sqrt(var + eps)``; the
    variance uses divisor L.  mu and scale keep a length-1 time axis so they
    line up with both the L×N input and an H×N forecast.
    """
    v = x.data
    L = v.shape[-2]
    mu = v.mean(axis=-2, keepdims=True)
    c = v - mu
    var = (c * c).mean(axis=-2, keepdims=True)
    s = np.sqrt(var + v.dtype.type(eps))
    y = c / s

    def vjp_y(g):
        # layer-norm style backward over the time axis
        return ((g - g.mean(axis=-2, keepdims=True) - y * (g * y).mean(axis=-2, keepdims=True)) / s,)

    def vjp_mu(g):
        return (np.broadcast_to(g / L, v.shape).copy(),)

    def vjp_s(g):
        return (g * c / (L * s),)

    return _result(y, (x,), vjp_y), _result(mu, (x,), vjp_mu), _result(s, (x,), vjp_s)


def denormalize(y: Tensor, mu: Tensor, s: Tensor) -> Tensor:
    """y·s + mu with mu, s of shape (..., 1, N) broadcast over the time axis."""
    if mu.shape != s.shape or mu.shape[-1] != y.shape[-1] or mu.shape[-2] != 1:
        raise DimensionError(f"denormalize: stats {mu.shape}/{s.shape} do not fit {y.shape}")
    Y, S = y.data, s.data

    def vjp(g):
        return g * S, g.sum(axis=-2, keepdims=True), (g * Y).sum(axis=-2, keepdims=True)

    return _result(Y * S + mu.data, (y, mu, s), vjp)
