"""Dense tensors with reverse-mode automatic differentiation on a tape.

The engine is deliberately small: it provides exactly the operations the
translation model needs, backed by numpy arrays in row-major layout. An op
records a backward closure on the currently active :class:`Tape`; replaying
the tape in reverse accumulates gradients into every reachable tensor that
has ``requires_grad`` set.

Broadcasting is restricted: elementwise ops accept equal shapes, a scalar
against anything, or a trailing-suffix operand (e.g. a ``(d,)`` bias against
``(batch, seq, d)`` activations). Anything else raises ``DimensionError``.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import (
    ConfigurationError,
    DegenerateBatchError,
    DimensionError,
    DomainError,
    InputError,
)

__all__ = [
    "Tensor",
    "Tape",
    "no_grad",
    "as_tensor",
    "matmul",
    "elementwise",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "sigmoid",
    "xlogx",
    "softmax",
    "layer_norm",
    "cross_entropy",
    "concat",
    "split",
    "embedding_gather",
    "transpose",
    "reshape",
    "tsum",
    "tmean",
    "dropout",
    "repeat_interleave",
    "adam_step",
    "Adam",
    "clip_grad_norm",
    "CounterRng",
]


class Tensor:
    """A dense n-dimensional float array participating in a gradient tape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if type(data) is not np.ndarray or dtype is not None:
            data = np.asarray(data, dtype=dtype)
        if data.dtype.kind != "f":
            data = data.astype(np.float32)
        self.data = data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the module-level functions are the canonical API.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    """Wrap plain arrays/scalars as constant (no-grad) tensors."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x, requires_grad=False, dtype=dtype)


class Tape:
    """Ordered record of operations; backward replays them in reverse once."""

    def __init__(self):
        self._ops: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def record(self, out: Tensor, backward: Callable[[np.ndarray], None]) -> None:
        self._ops.append((out, backward))

    def __len__(self) -> int:
        return len(self._ops)

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise DimensionError(f"backward expects a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, bw in reversed(self._ops):
            if out.grad is not None:
                bw(out.grad)

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()


_TAPE_STACK: list[Tape | None] = []


class no_grad:
    """Context that suppresses recording (forward-only evaluation)."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()


def _tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _accum(t: Tensor, g: np.ndarray, fresh: bool = False) -> None:
    """Accumulate a gradient contribution.

    `fresh` marks g as a newly computed array this call may take ownership
    of; anything that could be a view into (or alias of) another tensor's
    buffer must be copied, or later in-place accumulation would corrupt it.
    """
    if t.grad is None:
        if fresh and g.dtype == t.data.dtype and g.shape == t.data.shape:
            t.grad = g
        else:
            t.grad = np.array(g, dtype=t.data.dtype)
        if t.grad.shape != t.data.shape:
            raise DimensionError(
                f"gradient shape {t.grad.shape} does not match data {t.data.shape}")
    else:
        t.grad += g


def _record(out: Tensor, inputs: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    tape = _tape()
    if tape is not None and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        tape.record(out, backward)
    return out


def _check_broadcast(sa: tuple[int, ...], sb: tuple[int, ...]) -> None:
    """Allow equal shapes, scalar-vs-tensor, or trailing-suffix operands."""
    if sa == sb:
        return
    if int(np.prod(sa)) == 1 or int(np.prod(sb)) == 1:
        return
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if big[len(big) - len(small):] == small:
        return
    raise DimensionError(f"shapes {sa} and {sb} are not broadcast-compatible")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to an operand's (possibly smaller) shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# core ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Supports 2D x 2D, ND x 2D, and equal-leading ND x ND."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} x {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    if b.data.ndim != 2 and a.data.shape[:-2] != b.data.shape[:-2]:
        raise DimensionError(f"matmul leading dimensions disagree: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g @ np.swapaxes(b.data, -1, -2), fresh=True)
        if b.requires_grad:
            if b.data.ndim == 2:
                k = a.data.shape[-1]
                _accum(b, a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]), fresh=True)
            else:
                _accum(b, np.swapaxes(a.data, -1, -2) @ g, fresh=True)

    return _record(out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    out = Tensor(a.data + b.data)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, _reduce_to(g, a.shape))
        if b.requires_grad:
            _accum(b, _reduce_to(g, b.shape))

    return _record(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    out = Tensor(a.data - b.data)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, _reduce_to(g, a.shape))
        if b.requires_grad:
            _accum(b, _reduce_to(-g, b.shape))

    return _record(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    out = Tensor(a.data * b.data)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, _reduce_to(g * b.data, a.shape), fresh=True)
        if b.requires_grad:
            _accum(b, _reduce_to(g * a.data, b.shape), fresh=True)

    return _record(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data * c)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g * c, fresh=True)

    return _record(out, (a,), backward)


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0))

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g * (a.data > 0), fresh=True)

    return _record(out, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(s.astype(x.dtype))

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g * out.data * (1.0 - out.data), fresh=True)

    return _record(out, (a,), backward)


def xlogx(a: Tensor) -> Tensor:
    """x * log(x) with the convention 0*log 0 = 0 (and zero gradient there)."""
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("xlogx requires nonnegative input")
    pos = a.data > 0
    out_data = np.zeros_like(a.data)
    out_data[pos] = a.data[pos] * np.log(a.data[pos])
    out = Tensor(out_data)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            gx = np.zeros_like(a.data)
            gx[pos] = g[pos] * (np.log(a.data[pos]) + 1.0)
            _accum(a, gx, fresh=True)

    return _record(out, (a,), backward)


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    """Dispatch form of the pointwise ops: add, mul, relu, scale."""
    if op == "add":
        return add(a, b)
    if op == "mul":
        return mul(a, b)
    if op == "relu":
        return relu(a)
    if op == "scale":
        return scale(a, float(b))
    raise ConfigurationError(f"unknown elementwise op {op!r}")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if not -a.data.ndim <= axis < a.data.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = Tensor(e / e.sum(axis=axis, keepdims=True))

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            s = out.data
            _accum(a, s * (g - (g * s).sum(axis=axis, keepdims=True)), fresh=True)

    return _record(out, (a,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last dimension to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ConfigurationError(f"layer_norm eps must be positive, got {eps}")
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    d = a.data.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"gain/bias must have shape ({d},), got {gain.shape}/{bias.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)

    def backward(g: np.ndarray) -> None:
        if gain.requires_grad:
            _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0), fresh=True)
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, d).sum(axis=0), fresh=True)
        if a.requires_grad:
            gh = g * gain.data
            # d/dx of (x - mu) * inv with mu, var functions of x
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            _accum(a, gx, fresh=True)

    return _record(out, (a, gain, bias), backward)


def cross_entropy(logits: Tensor, targets: np.ndarray, pad_id: int, label_smoothing: float = 0.0) -> Tensor:
    """Mean negative log-likelihood over non-pad positions.

    ``logits`` may be (positions, vocab) or (batch, seq, vocab); ``targets``
    holds integer token ids with the matching leading shape. Padding rows are
    excluded from both numerator and denominator.
    """
    logits = as_tensor(logits)
    t = np.asarray(targets)
    if logits.data.ndim < 2 or t.shape != logits.data.shape[:-1]:
        raise DimensionError(f"targets shape {t.shape} does not match logits {logits.shape}")
    vocab = logits.data.shape[-1]
    flat = logits.data.reshape(-1, vocab)
    tf = t.reshape(-1)
    valid = tf != pad_id
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise DegenerateBatchError("all positions are padding")
    if np.any(tf[valid] < 0) or np.any(tf[valid] >= vocab):
        raise InputError("target token id outside vocabulary")

    m = flat.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(flat - m).sum(axis=-1))
    idx = np.arange(flat.shape[0])
    safe_t = np.where(valid, tf, 0)
    logp_t = flat[idx, safe_t] - lse
    nll = -logp_t[valid].mean()
    if label_smoothing > 0.0:
        uniform = (lse - flat.mean(axis=-1))[valid].mean()
        loss_val = (1.0 - label_smoothing) * nll + label_smoothing * uniform
    else:
        loss_val = nll
    out = Tensor(np.asarray(loss_val, dtype=logits.dtype))

    def backward(g: np.ndarray) -> None:
        if logits.requires_grad:
            p = np.exp(flat - lse[:, None])
            grad = p.copy()
            grad[idx, safe_t] -= 1.0
            if label_smoothing > 0.0:
                grad *= 1.0 - label_smoothing
                grad += label_smoothing * (p - 1.0 / vocab)
            grad[~valid] = 0.0
            grad *= float(g) / n_valid
            _accum(logits, grad.reshape(logits.shape), fresh=True)

    return _record(out, (logits,), backward)


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    ts = [as_tensor(t) for t in tensors]
    base = ts[0].data.shape[:-1]
    for t in ts[1:]:
        if t.data.shape[:-1] != base:
            raise DimensionError(f"concat leading shapes disagree: {[t.shape for t in ts]}")
    out = Tensor(np.concatenate([t.data for t in ts], axis=-1))
    sizes = [t.data.shape[-1] for t in ts]

    def backward(g: np.ndarray) -> None:
        off = 0
        for t, n in zip(ts, sizes):
            if t.requires_grad:
                _accum(t, g[..., off:off + n])
            off += n

    return _record(out, ts, backward)


def split(a: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    """Split the last axis into chunks of the given sizes."""
    a = as_tensor(a)
    if sum(sizes) != a.data.shape[-1]:
        raise DimensionError(f"split sizes {list(sizes)} do not cover last dim {a.data.shape[-1]}")
    pieces: list[Tensor] = []
    off = 0
    for n in sizes:
        lo, hi = off, off + n
        piece = Tensor(a.data[..., lo:hi].copy())

        def backward(g: np.ndarray, lo=lo, hi=hi) -> None:
            if a.requires_grad:
                if a.grad is None:
                    a.grad = np.zeros_like(a.data)
                a.grad[..., lo:hi] += g

        _record(piece, (a,), backward)
        pieces.append(piece)
        off += n
    return pieces


def embedding_gather(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup into an embedding table; backward is a scatter-add."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if np.any(ids < 0) or np.any(ids >= table.data.shape[0]):
        raise InputError("embedding id outside table")
    out = Tensor(table.data[ids])

    def backward(g: np.ndarray) -> None:
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))

    return _record(out, (table,), backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    out = Tensor(np.transpose(a.data, axes))
    inv = tuple(np.argsort(axes))

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, np.transpose(g, inv))

    return _record(out, (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g.reshape(a.shape))

    return _record(out, (a,), backward)


def tsum(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.asarray(a.data.sum(), dtype=a.dtype))

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, np.full_like(a.data, float(g)), fresh=True)

    return _record(out, (a,), backward)


def tmean(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.asarray(a.data.mean(), dtype=a.dtype))

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, np.full_like(a.data, float(g) / a.data.size), fresh=True)

    return _record(out, (a,), backward)


def dropout(a: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity when evaluating or p == 0."""
    if not training or p <= 0.0:
        return a
    if p >= 1.0:
        raise ConfigurationError(f"dropout probability must be < 1, got {p}")
    a = as_tensor(a)
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    keep = keep.astype(a.dtype)
    out = Tensor(a.data * keep)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g * keep, fresh=True)

    return _record(out, (a,), backward)


def repeat_interleave(a: Tensor, repeats: int) -> Tensor:
    """Repeat each entry of the last axis `repeats` times (block tiling)."""
    a = as_tensor(a)
    out = Tensor(np.repeat(a.data, repeats, axis=-1))

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g.reshape(*a.shape[:-1], a.shape[-1], repeats).sum(axis=-1), fresh=True)

    return _record(out, (a,), backward)


# ---------------------------------------------------------------------------
# optimizer


def adam_step(value: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
              t: int, lr: float, beta1: float = 0.9, beta2: float = 0.98,
              eps: float = 1e-9) -> None:
    """One in-place Adam update with bias correction (t is 1-based)."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    value -= lr * mhat / (np.sqrt(vhat) + eps)


class Adam:
    """Adam over a named parameter dict; moments are checkpointable arrays."""

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9,
                 beta2: float = 0.98, eps: float = 1e-9):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            adam_step(p.data, p.grad, self.m[name], self.v[name],
                      self.t, lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return norm


class CounterRng:
    """Counter-based RNG streams derived from (seed, tag, step, call-index).

    Every stochastic draw in the package routes through one of these so a
    result depends only on the logical coordinates of the draw, not on
    evaluation order. Streams are numpy ``SeedSequence`` spawns, which are
    stable across platforms.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def stream(self, *coords: int) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=tuple(int(c) for c in coords))
        return np.random.default_rng(ss)


# tags for CounterRng coordinates, kept in one place to avoid collisions
RNG_INIT = 0
RNG_DROPOUT = 1
RNG_GUMBEL = 2
RNG_DIRECTION = 3
RNG_BATCH = 4
