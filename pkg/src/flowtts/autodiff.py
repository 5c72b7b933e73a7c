"""Dense-tensor substrate with tape-based reverse-mode differentiation.

Everything downstream (the generator, the flow-matching decoder, training)
is built on the primitives in this module.  Arrays are plain numpy; a
``Tape`` records primitive applications during a forward pass and replays
their adjoints in exact reverse order.  Gradients accumulate additively at
fan-out points.

Precision is float32 by default; a float64 mode exists for finite-difference
gradient checks, where float32 tolerances are meaningless.
"""

from __future__ import annotations

import contextlib
import hashlib
import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "RecordError",
    "record",
    "push_op",
    "constant",
    "parameter",
    "zero_grads",
    "precision",
    "active_dtype",
    "grad_check",
    "rng_stream",
    "RngHub",
    "primitive_forward_set",
    "matmul",
    "add",
    "sub",
    "mul",
    "gelu",
    "layer_norm",
    "softmax",
    "sigmoid",
    "embedding_lookup",
    "concat",
    "narrow",
    "transpose",
    "repeat_rows",
    "tile_rows",
    "tensor_sum",
    "mse",
    "bce_with_logits",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested primitive."""


class RecordError(RuntimeError):
    """Invalid use of a computation record (tape)."""


_DEFAULT_DTYPE = np.dtype(np.float32)

_DTYPE_ALIASES = {
    "float32": np.dtype(np.float32),
    "float64": np.dtype(np.float64),
}


def active_dtype() -> np.dtype:
    """Dtype used for tensors created without an explicit dtype."""
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype ("float32" or "float64")."""
    global _DEFAULT_DTYPE
    if isinstance(dtype, str):
        dtype = _DTYPE_ALIASES[dtype]
    else:
        dtype = np.dtype(dtype)
    previous = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = dtype
    try:
        yield
    finally:
        _DEFAULT_DTYPE = previous


class Tensor:
    """A dense array plus an accumulated gradient slot.

    The shape is fixed at creation.  Ops never mutate their inputs, so
    tensors are safe to share read-only across concurrent evaluations.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else _DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor has shape {self.data.shape}, expected a scalar")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _from_array(arr: np.ndarray, requires_grad: bool) -> Tensor:
    # Internal: wrap an op result without re-casting to the default dtype.
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.grad = None
    out.requires_grad = requires_grad
    return out


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# --------------------------------------------------------------------------
# Recording
# --------------------------------------------------------------------------

_ACTIVE_TAPE: "Tape | None" = None


class Tape:
    """Ordered log of primitive applications for one forward pass.

    ``backward`` replays the registered adjoints in exact reverse order of
    recording and may run at most once per record.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._consumed = False

    def __len__(self) -> int:
        return len(self._entries)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the tape."""
        if self._consumed:
            raise RecordError("backward was already run on this record; re-record the forward pass")
        if loss.data.size != 1:
            raise ShapeError(f"backward: loss must be a scalar, got shape {loss.data.shape}")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for out, adjoint in reversed(self._entries):
            if out.grad is None:
                continue
            adjoint(out.grad)


@contextlib.contextmanager
def record():
    """Activate a fresh tape; ops applied inside are recorded on it."""
    global _ACTIVE_TAPE
    if _ACTIVE_TAPE is not None:
        raise RecordError("nested recording is not supported; one record per forward pass")
    tape = Tape()
    _ACTIVE_TAPE = tape
    try:
        yield tape
    finally:
        _ACTIVE_TAPE = None


def push_op(out: Tensor, adjoint: Callable[[np.ndarray], None]) -> None:
    """Register the adjoint of a primitive application on the active tape.

    No-op when nothing is recording or the output does not need gradients,
    so the same ops serve inference without bookkeeping overhead.
    """
    if _ACTIVE_TAPE is not None and out.requires_grad:
        _ACTIVE_TAPE._entries.append((out, adjoint))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Reduce a broadcast gradient back to the operand's shape.
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else _DEFAULT_DTYPE
    return Tensor(x, requires_grad=False, dtype=dtype)


# --------------------------------------------------------------------------
# Primitives
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b, a)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: shapes {a.data.shape} and {b.data.shape} are not conformable")
    out = _from_array(a.data @ b.data, a.requires_grad or b.requires_grad)

    def adjoint(g: np.ndarray) -> None:
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    push_op(out, adjoint)
    return out


def add(a: Tensor, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.data.shape} and {b.data.shape} do not broadcast") from None
    out = _from_array(data, a.requires_grad or b.requires_grad)

    def adjoint(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    push_op(out, adjoint)
    return out


def sub(a: Tensor, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: shapes {a.data.shape} and {b.data.shape} do not broadcast") from None
    out = _from_array(data, a.requires_grad or b.requires_grad)

    def adjoint(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    push_op(out, adjoint)
    return out


def mul(a: Tensor, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.data.shape} and {b.data.shape} do not broadcast") from None
    out = _from_array(data, a.requires_grad or b.requires_grad)

    def adjoint(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    push_op(out, adjoint)
    return out


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) Gaussian error linear unit."""
    x = _wrap(x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out = _from_array((x.data * cdf).astype(x.data.dtype, copy=False), x.requires_grad)

    def adjoint(g: np.ndarray) -> None:
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        _accumulate(x, g * (cdf + x.data * pdf).astype(x.data.dtype, copy=False))

    push_op(out, adjoint)
    return out


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine terms).

    A zero-variance slice maps to exactly zero: the epsilon sits in the
    denominator, so constant inputs cannot produce NaN.
    """
    x = _wrap(x)
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (centered * inv).astype(x.data.dtype, copy=False)
    out = _from_array(xhat, x.requires_grad)

    def adjoint(g: np.ndarray) -> None:
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        _accumulate(x, (inv * (g - gm - xhat * gx)).astype(x.data.dtype, copy=False))

    push_op(out, adjoint)
    return out


def softmax(x: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis."""
    x = _wrap(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _from_array(y.astype(x.data.dtype, copy=False), x.requires_grad)

    def adjoint(g: np.ndarray) -> None:
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accumulate(x, (y * (g - dot)).astype(x.data.dtype, copy=False))

    push_op(out, adjoint)
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = _wrap(x)
    y = np.where(x.data >= 0, 1.0 / (1.0 + np.exp(-x.data)),
                 np.exp(x.data) / (1.0 + np.exp(x.data)))
    y = y.astype(x.data.dtype, copy=False)
    out = _from_array(y, x.requires_grad)

    def adjoint(g: np.ndarray) -> None:
        _accumulate(x, g * y * (1.0 - y))

    push_op(out, adjoint)
    return out


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows ``table[ids]``; the adjoint scatter-adds into the table."""
    table = _wrap(table)
    idx = np.asarray(ids)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be rank 2, got shape {table.data.shape}")
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("embedding_lookup: ids must be a 1-d integer sequence")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ShapeError(
            f"embedding_lookup: ids out of range for table with {table.data.shape[0]} rows"
        )
    out = _from_array(table.data[idx], table.requires_grad)

    def adjoint(g: np.ndarray) -> None:
        if not table.requires_grad:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, idx, g)

    push_op(out, adjoint)
    return out


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_wrap(p) for p in parts]
    if not parts:
        raise ShapeError("concat: need at least one tensor")
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: shapes {[p.data.shape for p in parts]} do not align on axis {axis}"
        ) from None
    out = _from_array(data, any(p.requires_grad for p in parts))
    offsets = np.cumsum([0] + [p.data.shape[axis] for p in parts])

    def adjoint(g: np.ndarray) -> None:
        for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, stop)
            _accumulate(p, g[tuple(sl)])

    push_op(out, adjoint)
    return out


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` extents along ``axis`` starting at ``start``."""
    x = _wrap(x)
    extent = x.data.shape[axis]
    if start < 0 or length < 0 or start + length > extent:
        raise ShapeError(
            f"slice: window [{start}, {start + length}) exceeds extent {extent} on axis {axis}"
        )
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, start + length)
    out = _from_array(x.data[tuple(sl)], x.requires_grad)

    def adjoint(g: np.ndarray) -> None:
        full = np.zeros_like(x.data)
        full[tuple(sl)] = g
        _accumulate(x, full)

    push_op(out, adjoint)
    return out


def transpose(x: Tensor) -> Tensor:
    x = _wrap(x)
    if x.data.ndim != 2:
        raise ShapeError(f"transpose: expected rank 2, got shape {x.data.shape}")
    out = _from_array(x.data.T.copy(), x.requires_grad)

    def adjoint(g: np.ndarray) -> None:
        _accumulate(x, g.T)

    push_op(out, adjoint)
    return out


def repeat_rows(x: Tensor, reps: int) -> Tensor:
    """Repeat each row ``reps`` times: rows [a, b] -> [a, a, b, b] for reps=2."""
    x = _wrap(x)
    if x.data.ndim != 2:
        raise ShapeError(f"repeat_rows: expected rank 2, got shape {x.data.shape}")
    out = _from_array(np.repeat(x.data, reps, axis=0), x.requires_grad)

    def adjoint(g: np.ndarray) -> None:
        _accumulate(x, g.reshape(x.data.shape[0], reps, -1).sum(axis=1))

    push_op(out, adjoint)
    return out


def tile_rows(x: Tensor, reps: int) -> Tensor:
    """Tile the whole row block ``reps`` times: rows [a, b] -> [a, b, a, b]."""
    x = _wrap(x)
    if x.data.ndim != 2:
        raise ShapeError(f"tile_rows: expected rank 2, got shape {x.data.shape}")
    out = _from_array(np.tile(x.data, (reps, 1)), x.requires_grad)

    def adjoint(g: np.ndarray) -> None:
        _accumulate(x, g.reshape(reps, x.data.shape[0], -1).sum(axis=0))

    push_op(out, adjoint)
    return out


def tensor_sum(x: Tensor) -> Tensor:
    """Full reduction to a scalar."""
    x = _wrap(x)
    out = _from_array(np.asarray(x.data.sum(), dtype=x.data.dtype), x.requires_grad)

    def adjoint(g: np.ndarray) -> None:
        _accumulate(x, np.broadcast_to(g, x.data.shape).astype(x.data.dtype, copy=False))

    push_op(out, adjoint)
    return out


def mse(a: Tensor, b) -> Tensor:
    """Mean squared error over all elements."""
    a = _wrap(a)
    b = _wrap(b, a)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mse: shapes {a.data.shape} and {b.data.shape} differ")
    diff = a.data - b.data
    n = max(diff.size, 1)
    out = _from_array(np.asarray(np.mean(diff * diff), dtype=a.data.dtype),
                      a.requires_grad or b.requires_grad)

    def adjoint(g: np.ndarray) -> None:
        scaled = (2.0 / n) * g * diff
        scaled = scaled.astype(a.data.dtype, copy=False)
        _accumulate(a, scaled)
        _accumulate(b, -scaled)

    push_op(out, adjoint)
    return out


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy over all elements, stable for large logits.

    Targets are treated as constants; gradients flow to the logits only.
    """
    logits = _wrap(logits)
    t = np.asarray(targets, dtype=logits.data.dtype)
    if t.shape != logits.data.shape:
        raise ShapeError(f"bce_with_logits: shapes {logits.data.shape} and {t.shape} differ")
    z = logits.data
    per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    n = max(z.size, 1)
    out = _from_array(np.asarray(per.mean(), dtype=z.dtype), logits.requires_grad)

    def adjoint(g: np.ndarray) -> None:
        s = np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)), np.exp(z) / (1.0 + np.exp(z)))
        _accumulate(logits, (g * (s - t) / n).astype(z.dtype, copy=False))

    push_op(out, adjoint)
    return out


def primitive_forward_set() -> dict[str, Callable]:
    """Registry of forward primitives; every entry has a registered adjoint."""
    return {
        "matmul": matmul,
        "add": add,
        "mul": mul,
        "gelu": gelu,
        "layer_norm": layer_norm,
        "softmax": softmax,
        "embedding_lookup": embedding_lookup,
        "concat": concat,
        "slice": narrow,
        "sum": tensor_sum,
        "mse": mse,
        "sigmoid": sigmoid,
        "bce_with_logits": bce_with_logits,
        # Extras used by the model; held to the same gradient contract.
        "sub": sub,
        "transpose": transpose,
        "repeat_rows": repeat_rows,
        "tile_rows": tile_rows,
    }


# --------------------------------------------------------------------------
# Gradient checking
# --------------------------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must return a scalar tensor.  Run under float64: central
    differences with step ~1e-5 are meaningless in float32.
    """
    x.grad = None
    with record() as tape:
        y = f(x)
    if not isinstance(y, Tensor) or y.data.size != 1:
        raise ShapeError("grad_check: f must return a scalar Tensor")
    tape.backward(y)
    analytic = (x.grad if x.grad is not None else np.zeros_like(x.data)).reshape(-1)

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f(x).item()
        flat[i] = orig - step
        down = f(x).item()
        flat[i] = orig
        numeric[i] = (up - down) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0


# --------------------------------------------------------------------------
# Random streams
# --------------------------------------------------------------------------

def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Counter-based (Philox) generator for one named stream.

    Stream identity is derived from a stable hash of ``name`` so draws are
    reproducible across runs and platforms and independent across streams.
    """
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    key = int.from_bytes(digest[:8], "little")
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=(key,))
    return np.random.Generator(np.random.Philox(seq))


class RngHub:
    """Caches named streams for one seed; each stream keeps its own counter."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def stream(self, name: str) -> np.random.Generator:
        gen = self._streams.get(name)
        if gen is None:
            gen = rng_stream(self.seed, name)
            self._streams[name] = gen
        return gen
