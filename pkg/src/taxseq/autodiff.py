"""Dense-array kernel with reverse-mode gradients.

A thin tape over numpy: every op builds a ``Tensor`` that remembers its
inputs and a backward closure. ``backward(loss)`` replays the recorded
graph in reverse topological order, accumulating gradients into leaf
tensors (``Parameter`` instances and any tensor with ``requires_grad``).
Arrays are float32 by default; float64 inputs are respected so tests can
run the same graph at higher precision.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    AllIgnored,
    DetachedGraph,
    IndivisibleHeads,
    InvalidProbability,
    ShapeMismatch,
)

NEG_INF = -1e9  # additive mask value for disallowed attention positions

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _as_float(data) -> np.ndarray:
    a = np.asarray(data)
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(np.float32)
    return np.ascontiguousarray(a)


class Tensor:
    """Value node: numpy payload plus optional links into the tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_float(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # convenience operators; all defer to the module-level ops
    def __add__(self, other):
        return add(self, other if isinstance(other, Tensor) else Tensor(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, -(other if isinstance(other, Tensor) else Tensor(other)))


class Parameter(Tensor):
    """Trainable leaf tensor with a name for checkpointing."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str = "", trainable: bool = True):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.trainable = trainable


def _node(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    t = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward
    return t


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``.

    Leaf gradients add up across calls (+=), which is what gradient
    accumulation over micro-batches relies on; intermediate node gradients
    live only for the duration of one call.
    """
    if loss.data.size != 1:
        raise ShapeMismatch(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._backward is None:
        raise DetachedGraph("loss is not connected to any recorded operation")

    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p._backward is not None and id(p) not in visited:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

    def accumulate(t: Tensor, g: np.ndarray) -> None:
        if not t.requires_grad:
            return
        if t._backward is not None:  # interior node: stage for its own backward
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
        else:  # leaf: persistent accumulation
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            np.add(t.grad, g.astype(t.data.dtype, copy=False), out=t.grad)

    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node._backward(g, accumulate)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bwd(g, acc):
        acc(a, _unbroadcast(g, a.data.shape))
        acc(b, _unbroadcast(g, b.data.shape))

    return _node(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bwd(g, acc):
        acc(a, _unbroadcast(g * b.data, a.data.shape))
        acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(out, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    def bwd(g, acc):
        acc(a, g * s)

    return _node(a.data * s, (a,), bwd)


def add_const(a: Tensor, c: np.ndarray | float) -> Tensor:
    def bwd(g, acc):
        acc(a, _unbroadcast(g, a.data.shape))

    return _node(a.data + c, (a,), bwd)


def mul_const(a: Tensor, c: np.ndarray | float) -> Tensor:
    def bwd(g, acc):
        acc(a, _unbroadcast(g * c, a.data.shape))

    return _node(a.data * c, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g, acc):
        acc(a, g * out)

    return _node(out, (a,), bwd)


def power(a: Tensor, p: float) -> Tensor:
    """Elementwise a**p for a constant exponent."""
    out = a.data ** p

    def bwd(g, acc):
        acc(a, g * p * a.data ** (p - 1.0))

    return _node(out, (a,), bwd)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g, acc):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        acc(a, np.broadcast_to(gg, a.data.shape).astype(a.data.dtype, copy=False))

    return _node(out, (a,), bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    def bwd(g, acc):
        acc(a, g.reshape(a.data.shape))

    return _node(a.data.reshape(shape), (a,), bwd)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = np.argsort(axes)

    def bwd(g, acc):
        acc(a, g.transpose(inv))

    return _node(a.data.transpose(axes), (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g, acc):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            acc(t, piece)

    return _node(out, tuple(tensors), bwd)


# ---------------------------------------------------------------------------
# linear algebra and neural-net building blocks
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeMismatch("matmul needs at least 2-d operands")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeMismatch(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def bwd(g, acc):
        ga = g @ b.data.swapaxes(-1, -2)
        gb = a.data.swapaxes(-1, -2) @ g
        acc(a, _unbroadcast(ga, a.data.shape))
        acc(b, _unbroadcast(gb, b.data.shape))

    return _node(out, (a, b), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b). ``w`` is (d_in, d_out); bias broadcasts over leading axes."""
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


def embed(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: out[..., :] = table[ids[...], :]."""
    ids = np.asarray(ids)
    out = table.data[ids]

    def bwd(g, acc):
        if not table.requires_grad:
            return
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]).astype(table.data.dtype, copy=False))
        acc(table, gt)

    return _node(out, (table,), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g, acc):
        dot = (g * out).sum(axis=axis, keepdims=True)
        acc(x, out * (g - dot))

    return _node(out, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeMismatch(f"layer_norm affine shapes {gain.data.shape}/{bias.data.shape} "
                            f"do not match feature dim {d}")
    if eps <= 0:
        raise InvalidProbability(f"layer_norm eps must be positive, got {eps}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = y * gain.data + bias.data

    def bwd(g, acc):
        lead = tuple(range(g.ndim - 1))
        acc(bias, g.sum(axis=lead))
        acc(gain, (g * y).sum(axis=lead))
        gy = g * gain.data
        m1 = gy.mean(axis=-1, keepdims=True)
        m2 = (gy * y).mean(axis=-1, keepdims=True)
        acc(x, inv * (gy - m1 - y * m2))

    return _node(out, (x, gain, bias), bwd)


def dropout(x: Tensor, p: float, train_mode: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout. Eval mode returns the input unchanged, bit for bit."""
    if not 0.0 <= p < 1.0:
        raise InvalidProbability(f"dropout probability must be in [0, 1), got {p}")
    if not train_mode or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = (rng.random(x.data.shape) >= p).astype(x.data.dtype) / np.asarray(1.0 - p, dtype=x.data.dtype)
    return mul_const(x, keep)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Smooth nonlinearity (tanh approximation)."""
    u = _GELU_C * (x.data + 0.044715 * x.data ** 3)
    th = np.tanh(u)
    out = 0.5 * x.data * (1.0 + th)

    def bwd(g, acc):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data ** 2)
        acc(x, g * (0.5 * (1.0 + th) + 0.5 * x.data * (1.0 - th * th) * du))

    return _node(out, (x,), bwd)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., T, d) -> (..., heads, T, d/heads)."""
    *lead, t, d = x.data.shape
    if d % heads != 0:
        raise IndivisibleHeads(f"model dim {d} not divisible by {heads} heads")
    y = reshape(x, (*lead, t, heads, d // heads))
    order = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return transpose(y, order)


def merge_heads(x: Tensor) -> Tensor:
    """(..., heads, T, d_h) -> (..., T, heads*d_h)."""
    *lead, h, t, dh = x.data.shape
    order = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    y = transpose(x, order)
    return reshape(y, (*lead, t, h * dh))


def scaled_dot_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask: np.ndarray | None = None,
    capture: list | None = None,
) -> Tensor:
    """softmax(q kᵀ / sqrt(d_h) + mask) v.

    ``mask`` is additive (0 = allowed, large negative = disallowed) and must
    broadcast to the score shape. Rows with every position disallowed
    produce zero output; when ``capture`` is given, a record with the
    attention probabilities and the count of such rows is appended.
    """
    if q.data.shape[-1] != k.data.shape[-1]:
        raise ShapeMismatch(f"query dim {q.data.shape} vs key dim {k.data.shape}")
    if k.data.shape[-2] != v.data.shape[-2]:
        raise ShapeMismatch(f"key count {k.data.shape} vs value count {v.data.shape}")
    dh = q.data.shape[-1]
    scores = matmul(q, transpose(k, (*range(k.data.ndim - 2), k.data.ndim - 1, k.data.ndim - 2)))
    scores = scale(scores, 1.0 / math.sqrt(dh))
    all_masked = None
    if mask is not None:
        mask = np.asarray(mask, dtype=scores.data.dtype)
        scores = add_const(scores, mask)
        allowed = np.broadcast_to(mask > NEG_INF / 2, scores.data.shape)
        blocked = ~allowed.any(axis=-1, keepdims=True)
        if blocked.any():
            all_masked = blocked
    probs = softmax(scores, axis=-1)
    if all_masked is not None:
        probs = mul_const(probs, (~all_masked).astype(probs.data.dtype))
    if capture is not None:
        capture.append({
            "probs": probs.data.copy(),
            "all_masked_rows": 0 if all_masked is None else int(all_masked.sum()),
        })
    return matmul(probs, v)


def multi_head_attention(
    x_q: Tensor,
    x_k: Tensor,
    x_v: Tensor,
    mask: np.ndarray | None,
    heads: int,
    params: dict[str, Tensor],
    capture: list | None = None,
) -> Tensor:
    """Projected multi-head attention with an output projection.

    ``params`` holds wq/bq, wk/bk, wv/bv, wo/bo. The additive ``mask``
    must broadcast to (..., heads, T_q, T_k).
    """
    d = x_q.data.shape[-1]
    if d % heads != 0:
        raise IndivisibleHeads(f"model dim {d} not divisible by {heads} heads")
    q = split_heads(linear(x_q, params["wq"], params["bq"]), heads)
    k = split_heads(linear(x_k, params["wk"], params["bk"]), heads)
    v = split_heads(linear(x_v, params["wv"], params["bv"]), heads)
    ctx = scaled_dot_attention(q, k, v, mask=mask, capture=capture)
    return linear(merge_heads(ctx), params["wo"], params["bo"])


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def smoothed_nll_sum(
    logits: Tensor,
    targets: np.ndarray,
    smoothing: float = 0.0,
    ignore_id: int | None = None,
) -> tuple[Tensor, int]:
    """Sum over non-ignored positions of the smoothed negative log-likelihood.

    Per position: (1-s) * nll(target) + s * mean-over-classes nll. Returns
    the float64 scalar sum and the number of positions kept, so callers can
    average across accumulation windows without losing count information.
    Raises AllIgnored when nothing is left to score.
    """
    if not 0.0 <= smoothing < 1.0:
        raise InvalidProbability(f"smoothing must be in [0, 1), got {smoothing}")
    targets = np.asarray(targets)
    if logits.data.shape[:-1] != targets.shape:
        raise ShapeMismatch(f"logits {logits.data.shape} vs targets {targets.shape}")
    vsize = logits.data.shape[-1]
    flat = logits.data.reshape(-1, vsize)
    tgt = targets.reshape(-1)
    keep = np.ones(tgt.shape, dtype=bool) if ignore_id is None else tgt != ignore_id
    n = int(keep.sum())
    if n == 0:
        raise AllIgnored("every target position is ignored")

    logp = _log_softmax(flat[keep].astype(np.float64))
    rows = np.arange(n)
    safe_tgt = tgt[keep]
    nll_target = -logp[rows, safe_tgt]
    nll_uniform = -logp.mean(axis=-1)
    total = ((1.0 - smoothing) * nll_target + smoothing * nll_uniform).sum()

    def bwd(g, acc):
        if not logits.requires_grad:
            return
        gflat = np.zeros_like(flat)
        p = np.exp(logp)
        target_dist = np.full_like(p, smoothing / vsize)
        target_dist[rows, safe_tgt] += 1.0 - smoothing
        gscalar = float(np.asarray(g).reshape(-1)[0])
        gflat[keep] = (gscalar * (p - target_dist)).astype(flat.dtype)
        acc(logits, gflat.reshape(logits.data.shape))

    return _node(np.float64(total), (logits,), bwd), n


def smoothed_nll_per_position(
    logits: Tensor,
    targets: np.ndarray,
    smoothing: float = 0.0,
    ignore_id: int | None = None,
) -> tuple[Tensor, int]:
    """Vector of per-position smoothed NLLs over the non-ignored positions."""
    if not 0.0 <= smoothing < 1.0:
        raise InvalidProbability(f"smoothing must be in [0, 1), got {smoothing}")
    targets = np.asarray(targets)
    if logits.data.shape[:-1] != targets.shape:
        raise ShapeMismatch(f"logits {logits.data.shape} vs targets {targets.shape}")
    vsize = logits.data.shape[-1]
    flat = logits.data.reshape(-1, vsize)
    tgt = targets.reshape(-1)
    keep = np.ones(tgt.shape, dtype=bool) if ignore_id is None else tgt != ignore_id
    n = int(keep.sum())
    if n == 0:
        raise AllIgnored("every target position is ignored")

    logp = _log_softmax(flat[keep].astype(np.float64))
    rows = np.arange(n)
    safe_tgt = tgt[keep]
    vals = (1.0 - smoothing) * (-logp[rows, safe_tgt]) + smoothing * (-logp.mean(axis=-1))

    def bwd(g, acc):
        if not logits.requires_grad:
            return
        gflat = np.zeros_like(flat)
        p = np.exp(logp)
        target_dist = np.full_like(p, smoothing / vsize)
        target_dist[rows, safe_tgt] += 1.0 - smoothing
        gflat[keep] = (np.asarray(g).reshape(-1, 1) * (p - target_dist)).astype(flat.dtype)
        acc(logits, gflat.reshape(logits.data.shape))

    return _node(vals, (logits,), bwd), n


def cross_entropy_smoothed(
    logits: Tensor,
    targets: np.ndarray,
    smoothing: float = 0.0,
    ignore_id: int | None = None,
) -> Tensor:
    """Mean smoothed negative log-likelihood over non-ignored positions."""
    total, n = smoothed_nll_sum(logits, targets, smoothing=smoothing, ignore_id=ignore_id)
    return scale(total, 1.0 / n)
