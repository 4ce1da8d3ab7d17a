"""Dense float64 tensor kernel with a reverse-mode gradient tape.

Every public operation validates that its output is finite. Gradients cover
the continuous computation path only: mask construction (thresholding,
top-k, density flags) happens outside the tape and is treated as constant
during backprop.

All arrays are C-contiguous float64; `Tensor.data` exposes the row-major
flat view required by the storage contract.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError, NumericError

Array = np.ndarray

# ---------------------------------------------------------------------------
# Tensor


def _check_finite(arr: Array, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in {what}")


class Tensor:
    """Dense n-dimensional array of float64 with shape metadata."""

    __slots__ = ("a",)

    def __init__(self, values, check: bool = True):
        arr = np.ascontiguousarray(np.asarray(values, dtype=np.float64))
        if check:
            _check_finite(arr, "tensor constructor")
        self.a = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.a.shape

    @property
    def size(self) -> int:
        return self.a.size

    @property
    def data(self) -> Array:
        """Row-major flat view of the storage."""
        return self.a.reshape(-1)

    def item(self) -> float:
        return float(self.a.reshape(-1)[0])

    def copy(self) -> "Tensor":
        return Tensor(self.a.copy(), check=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    # Operator sugar; the module-level functions do the real work.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def _out(arr: Array, what: str, check: bool = True) -> Tensor:
    # check=False only for pure reindexing (reshape, gather, concat, ...)
    # whose outputs inherit finiteness from their inputs
    if check:
        _check_finite(arr, what)
    t = Tensor.__new__(Tensor)
    t.a = np.ascontiguousarray(arr)
    return t


# ---------------------------------------------------------------------------
# Gradient tape

_TAPE_STACK: list["GradTape"] = []
_RECORDING_PAUSED = 0

# Optional cost counter installed by dape.costs.cost_scope. Duck-typed:
# anything with .add(kind, amount) works.
_COST_SINK = None


class GradTape:
    """Ordered record of primitive ops, replayed in reverse for gradients."""

    def __init__(self):
        # (output tensor, backward closure). The closure receives the
        # output gradient and an id-keyed accumulator dict.
        self.entries: list[tuple[Tensor, Callable[[Array, dict], None]]] = []

    def __enter__(self) -> "GradTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def gradients(self, target: Tensor, sources: Sequence[Tensor]) -> list[Array]:
        """Gradients of a scalar target w.r.t. each source tensor.

        Sources never touched by the recorded computation get zero
        gradients of their own shape.
        """
        if target.size != 1:
            raise DimensionError(
                f"gradient target must be scalar, got shape {target.shape}"
            )
        acc: dict[int, Array] = {id(target): np.ones_like(target.a)}
        for out, backward in reversed(self.entries):
            g = acc.pop(id(out), None)
            if g is None:
                continue
            backward(g, acc)
        grads = []
        for s in sources:
            g = acc.get(id(s))
            g = np.zeros_like(s.a) if g is None else g.reshape(s.a.shape)
            _check_finite(g, "gradient")
            grads.append(g)
        return grads


def _tape() -> GradTape | None:
    if _RECORDING_PAUSED or not _TAPE_STACK:
        return None
    return _TAPE_STACK[-1]


def _rec(out: Tensor, backward: Callable[[Array, dict], None]) -> None:
    t = _tape()
    if t is not None:
        t.entries.append((out, backward))


def _acc(acc: dict, t: Tensor, g: Array) -> None:
    k = id(t)
    prev = acc.get(k)
    acc[k] = g if prev is None else prev + g


@contextmanager
def no_recording():
    """Pause tape recording; used for mask construction (stop-gradient)."""
    global _RECORDING_PAUSED
    _RECORDING_PAUSED += 1
    try:
        yield
    finally:
        _RECORDING_PAUSED -= 1


def _count(kind: str, amount: int) -> None:
    if _COST_SINK is not None:
        _COST_SINK.add(kind, amount)


# ---------------------------------------------------------------------------
# Primitive operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.a.ndim != 2 or b.a.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    _count("mac", m * k * n)
    out = _out(a.a @ b.a, "matmul")

    def backward(g, acc):
        _acc(acc, a, g @ b.a.T)
        _acc(acc, b, a.a.T @ g)

    _rec(out, backward)
    return out


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{op} shape mismatch: {a.shape} vs {b.shape}")


def _unbroadcast(g: Array, t: Tensor) -> Array:
    if g.shape == t.a.shape:
        return g
    return np.sum(g).reshape(t.a.shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "add")
    out = _out(a.a + b.a, "add")

    def backward(g, acc):
        _acc(acc, a, _unbroadcast(g, a))
        _acc(acc, b, _unbroadcast(g, b))

    _rec(out, backward)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "sub")
    out = _out(a.a - b.a, "sub")

    def backward(g, acc):
        _acc(acc, a, _unbroadcast(g, a))
        _acc(acc, b, -_unbroadcast(g, b))

    _rec(out, backward)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; either operand may be a scalar tensor."""
    _binary_shapes(a, b, "mul")
    _count("mac", max(a.size, b.size))
    out = _out(a.a * b.a, "mul")

    def backward(g, acc):
        _acc(acc, a, _unbroadcast(g * b.a, a))
        _acc(acc, b, _unbroadcast(g * a.a, b))

    _rec(out, backward)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    _count("mac", a.size)
    out = _out(a.a * c, "scale")

    def backward(g, acc):
        _acc(acc, a, g * c)

    _rec(out, backward)
    return out


def reciprocal(a: Tensor) -> Tensor:
    if np.any(a.a == 0.0):
        raise NumericError("reciprocal of zero")
    out = _out(1.0 / a.a, "reciprocal")

    def backward(g, acc):
        _acc(acc, a, -g / (a.a * a.a))

    _rec(out, backward)
    return out


def transpose(a: Tensor) -> Tensor:
    if a.a.ndim != 2:
        raise DimensionError(f"transpose expects 2-D, got {a.shape}")
    out = _out(a.a.T, "transpose", check=False)

    def backward(g, acc):
        _acc(acc, a, g.T)

    _rec(out, backward)
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = _out(a.a.reshape(shape), "reshape", check=False)

    def backward(g, acc):
        _acc(acc, a, g.reshape(a.a.shape))

    _rec(out, backward)
    return out


def relu(a: Tensor) -> Tensor:
    out = _out(np.maximum(a.a, 0.0), "relu")

    def backward(g, acc):
        _acc(acc, a, g * (a.a > 0.0))

    _rec(out, backward)
    return out


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    out = _out(np.sum(a.a, axis=axis), "sum")

    def backward(g, acc):
        if axis is None:
            _acc(acc, a, np.broadcast_to(g, a.a.shape).copy())
        else:
            _acc(acc, a, np.broadcast_to(np.expand_dims(g, axis), a.a.shape).copy())

    _rec(out, backward)
    return out


def tmean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.a.shape[axis]
    out = _out(np.mean(a.a, axis=axis), "mean")

    def backward(g, acc):
        if axis is None:
            _acc(acc, a, np.broadcast_to(g / n, a.a.shape).copy())
        else:
            _acc(acc, a, np.broadcast_to(np.expand_dims(g / n, axis), a.a.shape).copy())

    _rec(out, backward)
    return out


def row_softmax(a: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis of a 2-D tensor."""
    if a.a.ndim != 2:
        raise DimensionError(f"row_softmax expects 2-D, got {a.shape}")
    shifted = a.a - np.max(a.a, axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=1, keepdims=True)
    out = _out(y, "row_softmax")

    def backward(g, acc):
        dot = np.sum(g * y, axis=1, keepdims=True)
        _acc(acc, a, y * (g - dot))

    _rec(out, backward)
    return out


def row_logsumexp(a: Tensor) -> Tensor:
    """log(sum(exp(row))) per row, shape (m,). Stable via max subtraction."""
    if a.a.ndim != 2:
        raise DimensionError(f"row_logsumexp expects 2-D, got {a.shape}")
    m = np.max(a.a, axis=1, keepdims=True)
    lse = (m + np.log(np.sum(np.exp(a.a - m), axis=1, keepdims=True))).reshape(-1)
    out = _out(lse, "row_logsumexp")

    def backward(g, acc):
        sm = np.exp(a.a - lse[:, None])
        _acc(acc, a, sm * g[:, None])

    _rec(out, backward)
    return out


def cosine(u: Tensor, v: Tensor) -> Tensor:
    """Cosine similarity of two vectors, clamped to [-1, 1].

    cosine(0, 0) is defined as 0 so that zero tokens carry no affinity.
    """
    if u.a.ndim != 1 or v.a.ndim != 1 or u.shape != v.shape:
        raise DimensionError(f"cosine shape mismatch: {u.shape} vs {v.shape}")
    d = u.size
    _count("mac", 3 * d)
    _count("cosine", 1)
    nu = math.sqrt(float(u.a @ u.a))
    nv = math.sqrt(float(v.a @ v.a))
    if nu == 0.0 or nv == 0.0:
        out = _out(np.float64(0.0), "cosine")
        # Not differentiable at zero; contributes no gradient.
        return out
    c = float(u.a @ v.a) / (nu * nv)
    c = min(1.0, max(-1.0, c))
    out = _out(np.float64(c), "cosine")

    def backward(g, acc):
        gs = float(np.asarray(g).reshape(-1)[0])
        _acc(acc, u, gs * (v.a / (nu * nv) - c * u.a / (nu * nu)))
        _acc(acc, v, gs * (u.a / (nu * nv) - c * v.a / (nv * nv)))

    _rec(out, backward)
    return out


def l2_normalize_rows(a: Tensor) -> Tensor:
    """Unit-normalize each row; all-zero rows stay zero."""
    if a.a.ndim != 2:
        raise DimensionError(f"l2_normalize_rows expects 2-D, got {a.shape}")
    norms = np.sqrt(np.sum(a.a * a.a, axis=1, keepdims=True))
    safe = np.where(norms == 0.0, 1.0, norms)
    y = a.a / safe
    out = _out(y, "l2_normalize_rows")

    def backward(g, acc):
        dot = np.sum(g * y, axis=1, keepdims=True)
        ga = (g - y * dot) / safe
        ga[norms.reshape(-1) == 0.0] = 0.0
        _acc(acc, a, ga)

    _rec(out, backward)
    return out


# --- structural ops (gather/scatter/stack/slice) ---------------------------


def gather_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    out = _out(a.a[idx], "gather_rows", check=False)

    def backward(g, acc):
        ga = np.zeros_like(a.a)
        np.add.at(ga, idx, g)
        _acc(acc, a, ga)

    _rec(out, backward)
    return out


def replace_rows(base: Tensor, idx, rows: Tensor) -> Tensor:
    """Copy of `base` with rows at `idx` replaced by `rows`."""
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= base.shape[0]):
        raise DimensionError(
            f"replace_rows index out of range for {base.shape[0]} rows"
        )
    arr = base.a.copy()
    arr[idx] = rows.a
    out = _out(arr, "replace_rows", check=False)

    def backward(g, acc):
        gb = g.copy()
        gb[idx] = 0.0
        _acc(acc, base, gb)
        _acc(acc, rows, g[idx])

    _rec(out, backward)
    return out


def stack_rows(vectors: Sequence[Tensor]) -> Tensor:
    out = _out(np.stack([v.a for v in vectors]), "stack_rows", check=False)

    def backward(g, acc):
        for i, v in enumerate(vectors):
            _acc(acc, v, g[i])

    _rec(out, backward)
    return out


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    out = _out(np.concatenate([p.a for p in parts], axis=0), "concat_rows", check=False)
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(g, acc):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _acc(acc, p, g[lo:hi])

    _rec(out, backward)
    return out


def take_diag(a: Tensor) -> Tensor:
    if a.a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"take_diag expects square 2-D, got {a.shape}")
    out = _out(np.diagonal(a.a).copy(), "take_diag", check=False)

    def backward(g, acc):
        ga = np.zeros_like(a.a)
        np.fill_diagonal(ga, g)
        _acc(acc, a, ga)

    _rec(out, backward)
    return out


def slice_last(a: Tensor, c0: int, c1: int) -> Tensor:
    """Slice channels [c0, c1) along the last axis."""
    out = _out(a.a[..., c0:c1], "slice_last", check=False)

    def backward(g, acc):
        ga = np.zeros_like(a.a)
        ga[..., c0:c1] = g
        _acc(acc, a, ga)

    _rec(out, backward)
    return out


def span_means(a: Tensor, spans: Sequence[tuple[int, int]]) -> Tensor:
    """Mean of rows a[s:e] for each span; output (len(spans), d)."""
    if a.a.ndim != 2:
        raise DimensionError(f"span_means expects 2-D, got {a.shape}")
    n, d = a.shape
    j = len(spans)
    # contiguous equal-length spans covering [0, n) pool in one reshape
    uniform = (
        n % j == 0
        and all(s == i * (n // j) and e == (i + 1) * (n // j) for i, (s, e) in enumerate(spans))
    )
    if uniform:
        width = n // j
        rows = a.a.reshape(j, width, d).mean(axis=1)
    else:
        rows = np.stack([a.a[s:e].mean(axis=0) for s, e in spans])
    out = _out(rows, "span_means")

    def backward(g, acc):
        if uniform:
            ga = np.repeat(g / (n // j), n // j, axis=0)
        else:
            ga = np.zeros_like(a.a)
            for i, (s, e) in enumerate(spans):
                ga[s:e] += g[i] / (e - s)
        _acc(acc, a, ga)

    _rec(out, backward)
    return out


# --- spatial ops ------------------------------------------------------------


def block_mean_2d(x: Tensor, sy: int, sx: int) -> Tensor:
    """Mean over non-overlapping sy*sx blocks of an (h, w, c) tensor."""
    if x.a.ndim != 3:
        raise DimensionError(f"block_mean_2d expects 3-D, got {x.shape}")
    h, w, c = x.shape
    if h % sy or w % sx:
        raise DimensionError(f"block {sy}x{sx} does not divide {h}x{w}")
    y = x.a.reshape(h // sy, sy, w // sx, sx, c).mean(axis=(1, 3))
    out = _out(y, "block_mean_2d")

    def backward(g, acc):
        ga = np.repeat(np.repeat(g, sy, axis=0), sx, axis=1) / (sy * sx)
        _acc(acc, x, ga)

    _rec(out, backward)
    return out


def downsample_avg(x: Tensor, s: int) -> Tensor:
    """Average-pool downsampling by factor s on both spatial axes."""
    if s < 1:
        raise ConfigurationError(f"downsample factor must be >= 1, got {s}")
    return block_mean_2d(x, s, s)


_ALLOWED_KERNELS = (3, 5, 7)


def conv2d_local(x: Tensor, kernel_size: int, weights: Tensor) -> Tensor:
    """Depthwise 2-D cross-correlation with zero padding, shape-preserving.

    weights has shape (c, k, k): one k*k filter per channel.
    """
    if kernel_size % 2 == 0:
        raise ConfigurationError(f"kernel size must be odd, got {kernel_size}")
    if kernel_size not in _ALLOWED_KERNELS:
        raise ConfigurationError(
            f"kernel size must be one of {_ALLOWED_KERNELS}, got {kernel_size}"
        )
    if x.a.ndim != 3:
        raise DimensionError(f"conv2d_local expects (h, w, c), got {x.shape}")
    h, w, c = x.shape
    k = kernel_size
    if weights.shape != (c, k, k):
        raise DimensionError(
            f"conv weights shape {weights.shape} incompatible with input {x.shape}"
        )
    p = k // 2
    xp = np.pad(x.a, ((p, p), (p, p), (0, 0)))
    y = np.zeros((h, w, c))
    for di in range(k):
        for dj in range(k):
            y += xp[di : di + h, dj : dj + w, :] * weights.a[:, di, dj]
    _count("mac", h * w * c * k * k)
    out = _out(y, "conv2d_local")

    def backward(g, acc):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(weights.a)
        for di in range(k):
            for dj in range(k):
                gxp[di : di + h, dj : dj + w, :] += g * weights.a[:, di, dj]
                gw[:, di, dj] = np.sum(g * xp[di : di + h, dj : dj + w, :], axis=(0, 1))
        _acc(acc, x, gxp[p : p + h, p : p + w, :])
        _acc(acc, weights, gw)

    _rec(out, backward)
    return out


@lru_cache(maxsize=32)
def _dft_matrix(n: int) -> Array:
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n)


@lru_cache(maxsize=32)
def _highpass_keep(h: int, w: int, cutoff_frac: float) -> Array:
    fu = np.minimum(np.arange(h), h - np.arange(h))
    fv = np.minimum(np.arange(w), w - np.arange(w))
    radius = np.hypot(fu[:, None], fv[None, :])
    max_radius = math.hypot(h // 2, w // 2)
    return radius >= cutoff_frac * max_radius


def _highpass_apply(arr: Array, keep: Array) -> Array:
    h, w = arr.shape
    f_h = _dft_matrix(h)
    f_w = _dft_matrix(w)
    spectrum = f_h @ arr @ f_w.T
    filtered = spectrum * keep
    back = (np.conj(f_h) / h) @ filtered @ (np.conj(f_w).T / w)
    return back.real


@lru_cache(maxsize=32)
def _idft_pair(h: int, w: int) -> tuple[Array, Array]:
    return np.conj(_dft_matrix(h)) / h, np.ascontiguousarray(np.conj(_dft_matrix(w)).T / w)


@lru_cache(maxsize=8)
def _highpass_operator(h: int, w: int, cutoff_frac: float) -> Array:
    """The filter as one real (h*w, h*w) matrix acting on flattened maps.

    The chain inverse-DFT * mask * DFT is a fixed real-valued linear map
    for a negation-symmetric mask; materializing it turns the per-channel
    filter into a single real matmul.
    """
    keep = _highpass_keep(h, w, cutoff_frac)
    f_h = _dft_matrix(h)
    f_w = _dft_matrix(w)
    inv_h = np.conj(f_h) / h
    inv_w = np.conj(f_w) / w
    # row factor R[u, y, y'] = inv_h[y, u] * f_h[u, y'], masked column factor
    # W[u, z, z'] = sum_v keep[u, v] inv_w[z, v] f_w[v, z']
    col = np.einsum("uv,zv,vq->uzq", keep.astype(complex), inv_w, f_w)
    op = np.einsum("yu,up,uzq->yzpq", inv_h, f_h, col).real
    return np.ascontiguousarray(op.reshape(h * w, h * w))


def _highpass_apply_channels(arr: Array, keep_unused, h: int, w: int,
                             cutoff_frac: float) -> Array:
    c = arr.shape[2]
    op = _highpass_operator(h, w, cutoff_frac)
    return (op @ arr.reshape(h * w, c)).reshape(h, w, c)


@lru_cache(maxsize=8)
def _pooled_highpass_operator(h: int, w: int, cutoff_frac: float, pool: int) -> Array:
    """High-pass followed by pool*pool cell averaging, as one real matrix."""
    op = _highpass_operator(h, w, cutoff_frac)
    gy, gx = h // pool, w // pool
    pm = np.zeros((gy * gx, h * w))
    for a in range(gy):
        for b in range(gx):
            for dy in range(pool):
                for dx in range(pool):
                    src = (a * pool + dy) * w + (b * pool + dx)
                    pm[a * gx + b, src] = 1.0 / (pool * pool)
    return np.ascontiguousarray(pm @ op)


def pooled_highpass_cells(arr: Array, cutoff_frac: float, pool: int) -> Array:
    """Raw-array fused filter+pool: (h, w, c) -> (h*w/pool^2, c) cells."""
    h, w, c = arr.shape
    if not (0.0 < cutoff_frac < 1.0):
        raise ConfigurationError(f"cutoff_frac must be in (0, 1), got {cutoff_frac}")
    if pool == 1:
        op = _highpass_operator(h, w, cutoff_frac)
    else:
        op = _pooled_highpass_operator(h, w, cutoff_frac, pool)
    _count("mac", op.shape[0] * op.shape[1] * c)
    out = op @ arr.reshape(h * w, c)
    _check_finite(out, "pooled_highpass_cells")
    return out


def highpass_fourier(x: Tensor, cutoff_frac: float) -> Tensor:
    """Remove low radial frequencies of a 2-D map via a naive separable DFT.

    Bins with radius < cutoff_frac * max_radius are zeroed (DC always goes).
    The frequency mask is symmetric under negation, so the filter is
    self-adjoint: the backward pass applies the same filter.
    """
    if not (0.0 < cutoff_frac < 1.0):
        raise ConfigurationError(
            f"cutoff_frac must be in (0, 1), got {cutoff_frac}"
        )
    if x.a.ndim != 2:
        raise DimensionError(f"highpass_fourier expects 2-D, got {x.shape}")
    h, w = x.shape
    keep = _highpass_keep(h, w, cutoff_frac)
    _count("mac", 4 * (h * h * w + h * w * w))
    out = _out(_highpass_apply(x.a, keep), "highpass_fourier")

    def backward(g, acc):
        _acc(acc, x, _highpass_apply(g, keep))

    _rec(out, backward)
    return out


def highpass_channels(x: Tensor, cutoff_frac: float) -> Tensor:
    """Per-channel high-pass of an (h, w, c) map; one op on the tape."""
    if not (0.0 < cutoff_frac < 1.0):
        raise ConfigurationError(
            f"cutoff_frac must be in (0, 1), got {cutoff_frac}"
        )
    if x.a.ndim != 3:
        raise DimensionError(f"highpass_channels expects 3-D, got {x.shape}")
    h, w, c = x.shape
    _count("mac", h * w * h * w * c)
    out = _out(
        _highpass_apply_channels(x.a, None, h, w, cutoff_frac), "highpass_channels"
    )

    def backward(g, acc):
        _acc(acc, x, _highpass_apply_channels(g, None, h, w, cutoff_frac))

    _rec(out, backward)
    return out


# ---------------------------------------------------------------------------
# Finite-difference gradient checking


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    max_coords: int = 64,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences.

    `f` must be a deterministic scalar-valued computation over `params`
    with masks/top-k frozen (or with enough margin that +-eps never flips
    a threshold). Coordinates are subsampled per parameter when large.
    """
    with GradTape() as tape:
        y = f()
    grads = tape.gradients(y, params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, grads):
        n = p.size
        coords = (
            np.arange(n)
            if n <= max_coords
            else rng.choice(n, size=max_coords, replace=False)
        )
        flat = p.a.reshape(-1)
        gflat = g.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            hi = f().item()
            flat[c] = orig - eps
            lo = f().item()
            flat[c] = orig
            fd = (hi - lo) / (2.0 * eps)
            if not math.isfinite(fd):
                raise NumericError("non-finite finite-difference gradient")
            err = abs(fd - gflat[c]) / max(1.0, abs(fd), abs(gflat[c]))
            worst = max(worst, err)
    return worst
