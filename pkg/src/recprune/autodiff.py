"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record onto the innermost active :class:`Tape`.  With no tape
active nothing is recorded, which doubles as the no-grad inference mode::

    with Tape() as tape:
        loss = cross_entropy_logits(matmul(x, w), targets)
    backward(loss, tape)
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError, TokenIndexError

KL_FLOOR = 1e-12

_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Optional["Tape"]:
    stack = _stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "is_leaf")

    def __init__(self, data, requires_grad: bool = False, *, _leaf: bool = True):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite value in tensor of shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.is_leaf = _leaf

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"expected a scalar, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self, tuple(range(self.ndim))[::-1])


@dataclass
class _Op:
    out: Tensor
    inputs: tuple
    backward: Callable[[np.ndarray], tuple]


class Tape:
    """Ordered record of differentiable operations.

    Operations are appended as they execute, so the list is already in
    topological order and the reverse sweep visits each op once.
    """

    def __init__(self):
        self.ops: list[_Op] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().remove(self)

    def __len__(self) -> int:
        return len(self.ops)

    def record(self, out: Tensor, inputs: tuple, backward_fn) -> None:
        self.ops.append(_Op(out, inputs, backward_fn))

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` of every requires-grad tensor reachable from ``loss``.

    Leaf gradients accumulate additively across calls; callers zero them
    explicitly between steps.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    pending = {id(loss): np.ones_like(loss.data)}
    if loss.is_leaf and loss.requires_grad:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
    for op in reversed(tape.ops):
        g = pending.pop(id(op.out), None)
        if g is None:
            continue
        op.out.grad = g
        for t, gi in zip(op.inputs, op.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.is_leaf:
                t.grad = np.array(gi, dtype=np.float64) if t.grad is None else t.grad + gi
            else:
                key = id(t)
                pending[key] = pending[key] + gi if key in pending else gi


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs, _leaf=not needs)
    if needs:
        tape.record(out, inputs, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _result(a.data / b.data, (a, b), bw)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _result(x.data * s, (x,), lambda g: (g * (s + x.data * s * (1.0 - s)),))


# -- shape ----------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def getitem(x: Tensor, idx) -> Tensor:
    def bw(g):
        z = np.zeros_like(x.data)
        np.add.at(z, idx, g)
        return (z,)

    return _result(x.data[idx], (x,), bw)


def embedding(weight: Tensor, ids) -> Tensor:
    """Gather rows of ``weight`` at integer ``ids`` (any shape)."""
    ids = np.asarray(ids, dtype=np.int64)
    n = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise TokenIndexError(f"token id out of range [0, {n})")

    def bw(g):
        z = np.zeros_like(weight.data)
        np.add.at(z, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (z,)

    return _result(weight.data[ids], (weight,), bw)


def total(x: Tensor) -> Tensor:
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _result(
        np.asarray(x.data.mean()), (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),)
    )


# -- linear algebra ------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    # stacked-by-matrix products run as one flat 2-D product
    flat = b.ndim == 2 and a.ndim > 2
    k, n = b.shape[-2], b.shape[-1]

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            if flat:
                ga = (g.reshape(-1, n) @ b.data.T).reshape(a.shape)
            else:
                ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if flat:
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    out = (a.data.reshape(-1, k) @ b.data).reshape(a.shape[:-1] + (n,)) if flat else a.data @ b.data
    return _result(out, (a, b), bw)


# -- normalisation and attention primitives -------------------------------


def softmax_last_dim(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis.  ``mask`` (bool, broadcastable) marks
    admissible entries; excluded entries get probability exactly 0."""
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax needs a nonempty last dimension, got {x.shape}")
    z = x.data if mask is None else np.where(mask, x.data, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    if not np.isfinite(m).all():
        raise ContractError("softmax row has no admissible entry")
    e = np.exp(z - m)
    y = e / e.sum(axis=-1, keepdims=True)
    return _result(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def rms_norm(x: Tensor, weight: Tensor, eps: float, width: Optional[int] = None) -> Tensor:
    """``x / sqrt(sum(x**2)/width + eps) * weight`` along the last axis.

    ``width`` defaults to the last extent (a plain mean).  Pruned models
    pass their original width so that removing all-zero residual
    dimensions leaves the normaliser unchanged.
    """
    d = x.shape[-1]
    if weight.shape != (d,):
        raise DimensionError(f"rms_norm weight {weight.shape} does not match input {x.shape}")
    if eps < 0:
        raise ContractError("rms_norm eps must be nonnegative")
    n = d if width is None else width
    ms = (x.data * x.data).sum(axis=-1, keepdims=True) / n + eps
    r = 1.0 / np.sqrt(ms)
    normed = x.data * r
    w = weight.data

    def bw(g):
        gn = g * w
        gx = r * (gn - normed * (gn * normed).sum(axis=-1, keepdims=True) / n)
        gw = (g * normed).reshape(-1, d).sum(axis=0)
        return gx, gw

    return _result(normed * w, (x, weight), bw)


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary encoding, rotate-half convention, over the last axis.

    ``cos``/``sin`` have shape ``(S, d_k // 2)`` and broadcast over heads.
    """
    half = x.shape[-1] // 2
    x1, x2 = x.data[..., :half], x.data[..., half:]
    out = np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1)

    def bw(g):
        g1, g2 = g[..., :half], g[..., half:]
        return (np.concatenate([g1 * cos + g2 * sin, g2 * cos - g1 * sin], axis=-1),)

    return _result(out, (x,), bw)


def rope_tables(seq_len: int, d_k: int, base: float) -> tuple[np.ndarray, np.ndarray]:
    inv = base ** (-np.arange(0, d_k // 2, dtype=np.float64) * 2.0 / d_k)
    ang = np.arange(seq_len, dtype=np.float64)[:, None] * inv[None, :]
    return np.cos(ang), np.sin(ang)


# -- losses ----------------------------------------------------------------


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def _position_weights(lead_shape: tuple, weights) -> np.ndarray:
    if weights is None:
        return np.ones(lead_shape)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != lead_shape:
        raise DimensionError(f"weights {w.shape} do not match positions {lead_shape}")
    if w.sum() <= 0:
        raise ContractError("no position carries loss weight")
    return w


def cross_entropy_logits(logits: Tensor, targets, weights=None) -> Tensor:
    """Weighted mean over positions of ``-log softmax(logits)[target]``."""
    targets = np.asarray(targets, dtype=np.int64)
    lead, v = logits.shape[:-1], logits.shape[-1]
    if targets.shape != lead:
        raise DimensionError(f"targets {targets.shape} do not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise TokenIndexError(f"target index out of range [0, {v})")
    w = _position_weights(lead, weights)
    denom = w.sum()
    logp = _log_softmax(logits.data)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(w * picked).sum() / denom

    def bw(g):
        p = np.exp(logp)
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], -1) - 1.0, -1)
        return (p * (w / denom)[..., None] * g,)

    return _result(np.asarray(loss), (logits,), bw)


def _check_prob(v: np.ndarray, name: str) -> None:
    if (v < 0).any():
        raise ContractError(f"{name} has negative entries")
    s = v.sum(axis=-1)
    bad = np.abs(s - 1.0) > 1e-9
    if np.any(bad):
        raise ContractError(f"{name} is not normalized: sums to {np.ravel(s)[np.argmax(np.ravel(bad))]!r}")


def kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise KL(p || q) in nats for plain arrays (no validation)."""
    qc = np.maximum(q, KL_FLOOR)
    pos = p > 0
    terms = np.where(pos, p * (np.log(np.where(pos, p, 1.0)) - np.log(qc)), 0.0)
    return terms.sum(axis=-1)


def kl_divergence(p, q) -> Tensor:
    """KL(p || q) between probability vectors; ``0 * log(0/q) = 0`` and
    ``q`` is floored at 1e-12 inside the log only."""
    p, q = _as_tensor(p), _as_tensor(q)
    if p.shape != q.shape:
        raise DimensionError(f"kl_divergence shape mismatch: {p.shape} vs {q.shape}")
    _check_prob(p.data, "p")
    _check_prob(q.data, "q")
    qc = np.maximum(q.data, KL_FLOOR)
    pos = p.data > 0

    def bw(g):
        gp = np.where(pos, np.log(np.where(pos, p.data, 1.0)) - np.log(qc) + 1.0, 0.0)
        gq = np.where(q.data >= KL_FLOOR, -p.data / qc, 0.0)
        return gp * g, gq * g

    return _result(np.asarray(kl_rows(p.data, q.data).sum()), (p, q), bw)


def distill_kl(teacher_logits: np.ndarray, student_logits: Tensor, weights=None,
               direction: str = "forward") -> Tensor:
    """Weighted mean over positions of KL between softmaxed logits.

    ``forward`` is KL(teacher || student), ``reverse`` KL(student || teacher).
    The teacher side is a constant.
    """
    t = np.asarray(teacher_logits, dtype=np.float64)
    if t.shape != student_logits.shape:
        raise DimensionError(f"teacher {t.shape} vs student {student_logits.shape}")
    w = _position_weights(t.shape[:-1], weights)
    scale = (w / w.sum())[..., None]
    log_t = _log_softmax(t)
    log_s = _log_softmax(student_logits.data)
    p_t, p_s = np.exp(log_t), np.exp(log_s)
    if direction == "forward":
        rows = (p_t * (log_t - log_s)).sum(axis=-1)

        def bw(g):
            return ((p_s - p_t) * scale * g,)
    elif direction == "reverse":
        diff = log_s - log_t
        rows = (p_s * diff).sum(axis=-1)

        def bw(g):
            return (p_s * (diff - rows[..., None]) * scale * g,)
    else:
        raise ContractError(f"unknown KL direction {direction!r}")
    return _result(np.asarray((rows * scale[..., 0]).sum()), (student_logits,), bw)


# -- gradient oracle -------------------------------------------------------


def finite_diff_grad(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if h <= 0:
        raise ContractError("finite-difference step must be positive")
    base = np.array(_as_tensor(x).data, dtype=np.float64)
    flat = base.reshape(-1)
    out = np.zeros_like(flat)

    def value(arr):
        r = f(Tensor(arr.reshape(base.shape)))
        return float(r.data) if isinstance(r, Tensor) else float(r)

    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        out[i] = (value(xp) - value(xm)) / (2.0 * h)
    return Tensor(out.reshape(base.shape))


def gradients(f: Callable[..., Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    """Reverse-mode gradients of scalar ``f(*inputs)`` w.r.t. each input."""
    leaves = [Tensor(np.array(t.data), requires_grad=True) for t in inputs]
    with Tape() as tape:
        loss = f(*leaves)
    backward(loss, tape)
    return [np.zeros_like(t.data) if t.grad is None else t.grad for t in leaves]
