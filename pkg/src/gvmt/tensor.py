"""Dense float64 tensors with taped reverse-mode gradients.

Every forward function below computes with plain numpy and records a backward
closure only when at least one input participates in gradient tracking, so
inference-time code pays no tape overhead.  The graph is released by
``backward``; parameter gradients accumulate into ``Tensor.grad`` until
``zero_grad`` clears them.

Shapes are strict: no implicit broadcasting beyond the few row-vector forms
(`add_bias`, `mul_rowvec`) that the model actually needs.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class Tensor:
    """A dense float64 array, optionally tracked for reverse-mode gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._bwd: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def param(data, rng: Optional[np.random.Generator] = None, std: float = 0.02) -> Tensor:
    """A leaf parameter. `data` may be a shape tuple (random init) or an array."""
    if isinstance(data, tuple):
        if rng is None:
            raise ValueError("random init requires an rng")
        data = rng.normal(0.0, std, size=data)
    return Tensor(data, requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _make(data: np.ndarray, parents: Sequence[Tensor], bwd: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._bwd = bwd
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        # copy: g may alias a view of another node's grad buffer
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad = t.grad + g


def backward(loss: Tensor) -> None:
    """Fill ``grad`` on every tracked leaf reachable from a scalar loss.

    The traversed graph is released afterwards; a second backward through the
    same nodes is not possible.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not attached to a gradient tape")

    # iterative post-order DFS
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._bwd is not None:
            node._bwd(node.grad)
    # release the graph; interior activations drop their grads, leaves keep them
    for node in topo:
        if node._bwd is not None:
            node._bwd = None
            node._parents = ()
            node.grad = None


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def bwd(g: np.ndarray) -> None:
        _accum(a, g)
        _accum(b, g)

    return _make(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def bwd(g: np.ndarray) -> None:
        _accum(a, g)
        _accum(b, -g)

    return _make(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")

    def bwd(g: np.ndarray) -> None:
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g: np.ndarray) -> None:
        _accum(a, g * c)

    return _make(a.data * c, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard matrix product, [m x k] @ [k x n] -> [m x n]."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree, {a.data.shape} @ {b.data.shape}")

    def bwd(g: np.ndarray) -> None:
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bwd)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Fused affine map: x [m x k] @ w [k x n] (+ b [n])."""
    if x.ndim != 2 or w.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.data.shape} @ {w.data.shape}")
    out = x.data @ w.data
    if b is not None:
        if b.data.shape != (w.data.shape[1],):
            raise ShapeError(f"linear: bias shape {b.data.shape} vs width {w.data.shape[1]}")
        out = out + b.data

    parents = (x, w) if b is None else (x, w, b)

    def bwd(g: np.ndarray) -> None:
        _accum(x, g @ w.data.T)
        _accum(w, x.data.T @ g)
        if b is not None:
            _accum(b, g.sum(axis=0))

    return _make(out, parents, bwd)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x [m x n] + b [n], broadcast over rows."""
    if x.ndim != 2 or b.data.shape != (x.data.shape[1],):
        raise ShapeError(f"add_bias: {x.data.shape} + {b.data.shape}")

    def bwd(g: np.ndarray) -> None:
        _accum(x, g)
        _accum(b, g.sum(axis=0))

    return _make(x.data + b.data, (x, b), bwd)


def mul_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """x [m x n] * v [n], elementwise per row."""
    if x.ndim != 2 or v.data.shape != (x.data.shape[1],):
        raise ShapeError(f"mul_rowvec: {x.data.shape} * {v.data.shape}")

    def bwd(g: np.ndarray) -> None:
        _accum(x, g * v.data)
        _accum(v, (g * x.data).sum(axis=0))

    return _make(x.data * v.data, (x, v), bwd)


def mul_colvec(x: Tensor, v: Tensor) -> Tensor:
    """x [m x n] with row i scaled by v[i]; v is [m x 1]."""
    if x.ndim != 2 or v.data.shape != (x.data.shape[0], 1):
        raise ShapeError(f"mul_colvec: {x.data.shape} * {v.data.shape}")

    def bwd(g: np.ndarray) -> None:
        _accum(x, g * v.data)
        _accum(v, (g * x.data).sum(axis=1, keepdims=True))

    return _make(x.data * v.data, (x, v), bwd)


def div_scalar(x: Tensor, s: Tensor) -> Tensor:
    """x / s for a scalar tensor s."""
    if s.data.size != 1:
        raise ShapeError(f"div_scalar: divisor must be scalar, got {s.data.shape}")
    sv = float(s.data)
    if sv == 0.0:
        raise ZeroDivisionError("div_scalar: zero divisor")

    def bwd(g: np.ndarray) -> None:
        _accum(x, g / sv)
        if s.requires_grad:
            _accum(s, np.asarray(-(g * x.data).sum() / (sv * sv)).reshape(s.data.shape))

    return _make(x.data / sv, (x, s), bwd)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose expects 2-D, got {x.data.shape}")

    def bwd(g: np.ndarray) -> None:
        _accum(x, g.T)

    return _make(x.data.T.copy(), (x,), bwd)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    def bwd(g: np.ndarray) -> None:
        _accum(x, g.reshape(x.data.shape))

    return _make(x.data.reshape(shape).copy(), (x,), bwd)


def rows(x: Tensor, i0: int, i1: int) -> Tensor:
    """Row slice x[i0:i1]."""
    if x.ndim != 2 or not (0 <= i0 < i1 <= x.data.shape[0]):
        raise ShapeError(f"rows: invalid slice [{i0}:{i1}] of {x.data.shape}")

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            buf = np.zeros_like(x.data)
            buf[i0:i1] = g
            _accum(x, buf)

    return _make(x.data[i0:i1].copy(), (x,), bwd)


def cols(x: Tensor, j0: int, j1: int) -> Tensor:
    """Column slice x[:, j0:j1]."""
    if x.ndim != 2 or not (0 <= j0 < j1 <= x.data.shape[1]):
        raise ShapeError(f"cols: invalid slice [{j0}:{j1}] of {x.data.shape}")

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            buf = np.zeros_like(x.data)
            buf[:, j0:j1] = g
            _accum(x, buf)

    return _make(x.data[:, j0:j1].copy(), (x,), bwd)


def concat0(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 0."""
    if not parts:
        raise ShapeError("concat0 of nothing")
    widths = {p.data.shape[1:] for p in parts}
    if len(widths) != 1:
        raise ShapeError(f"concat0: trailing dims differ: {sorted(widths)}")
    sizes = [p.data.shape[0] for p in parts]

    def bwd(g: np.ndarray) -> None:
        off = 0
        for p, n in zip(parts, sizes):
            _accum(p, g[off : off + n])
            off += n

    return _make(np.concatenate([p.data for p in parts], axis=0), tuple(parts), bwd)


def mean0(x: Tensor) -> Tensor:
    """Mean over axis 0: [m x n] -> [n]."""
    if x.ndim != 2:
        raise ShapeError(f"mean0 expects 2-D, got {x.data.shape}")
    m = x.data.shape[0]

    def bwd(g: np.ndarray) -> None:
        _accum(x, np.broadcast_to(g / m, x.data.shape))

    return _make(x.data.mean(axis=0), (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    def bwd(g: np.ndarray) -> None:
        _accum(x, np.full_like(x.data, float(g)))

    return _make(np.asarray(x.data.sum()), (x,), bwd)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def bwd(g: np.ndarray) -> None:
        _accum(x, np.full_like(x.data, float(g) / n))

    return _make(np.asarray(x.data.mean()), (x,), bwd)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0

    def bwd(g: np.ndarray) -> None:
        _accum(x, g * pos)

    return _make(np.maximum(x.data, 0.0), (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    # split by sign to avoid exp overflow
    d = x.data
    s = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def bwd(g: np.ndarray) -> None:
        _accum(x, g * s * (1.0 - s))

    return _make(s, (x,), bwd)


def softmax_rows(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Row-wise softmax with max-subtraction; `mask` True marks valid entries.

    Masked-out entries get probability exactly 0.  A fully masked row has no
    valid attention target and raises.
    """
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects 2-D, got {x.data.shape}")
    d = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != d.shape:
            raise ShapeError(f"softmax_rows: mask shape {mask.shape} vs {d.shape}")
        if not mask.any(axis=1).all():
            bad = int(np.flatnonzero(~mask.any(axis=1))[0])
            raise ValueError(f"softmax_rows: row {bad} is fully masked")
        z = np.where(mask, d, -np.inf)
        e = np.exp(z - z.max(axis=1, keepdims=True))
    else:
        m = d.max(axis=1, keepdims=True)
        e = np.exp(d - m)
    p = e / e.sum(axis=1, keepdims=True)

    def bwd(g: np.ndarray) -> None:
        inner = (g * p).sum(axis=1, keepdims=True)
        _accum(x, p * (g - inner))

    return _make(p, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization of x [m x d] with learnable gain/bias [d]."""
    d = x.data.shape[1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must be ({d},)")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def bwd(g: np.ndarray) -> None:
        _accum(gain, (g * xhat).sum(axis=0))
        _accum(bias, g.sum(axis=0))
        if x.requires_grad:
            dxhat = g * gain.data
            mean_dxhat = dxhat.mean(axis=1, keepdims=True)
            mean_dxhat_xhat = (dxhat * xhat).mean(axis=1, keepdims=True)
            _accum(x, inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat))

    return _make(out, (x, gain, bias), bwd)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; call only in training mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= rate) / (1.0 - rate)

    def bwd(g: np.ndarray) -> None:
        _accum(x, g * keep)

    return _make(x.data * keep, (x,), bwd)


def embedding_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of table [V x d] at ids -> [len(ids) x d]."""
    idx = np.asarray(ids, dtype=np.intp)
    if idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0])):
        raise ShapeError(f"embedding_lookup: ids out of range for table {table.data.shape}")

    def bwd(g: np.ndarray) -> None:
        if table.requires_grad:
            buf = np.zeros_like(table.data)
            np.add.at(buf, idx, g)
            _accum(table, buf)

    return _make(table.data[idx].copy(), (table,), bwd)


# ---------------------------------------------------------------------------
# attention and loss kernels
# ---------------------------------------------------------------------------


def attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    n_heads: int = 1,
    *,
    causal: bool = False,
    key_mask: Optional[np.ndarray] = None,
) -> Tensor:
    """Multi-head scaled dot-product attention over pre-projected q/k/v.

    q is [Lq x d], k and v are [Lk x d]; d must divide into n_heads.  Scores
    are scaled by 1/sqrt(d/n_heads); softmax runs over key positions.
    `key_mask` (bool [Lk], True = attend) hides e.g. padding keys; `causal`
    restricts position i to keys 0..i (requires Lq == Lk).
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError("attention expects 2-D q, k, v")
    lq, dm = q.data.shape
    lk, dk_ = k.data.shape
    if dm != dk_ or v.data.shape != (lk, dm):
        raise ShapeError(f"attention: shapes {q.data.shape}, {k.data.shape}, {v.data.shape}")
    if lk == 0:
        raise ValueError("attention: empty attention target")
    if dm % n_heads != 0:
        raise ShapeError(f"attention: width {dm} not divisible by {n_heads} heads")
    if causal and lq != lk:
        raise ShapeError("causal attention requires equal query/key lengths")
    hd = dm // n_heads
    inv_sqrt = 1.0 / math.sqrt(hd)

    mask2 = None
    if causal or key_mask is not None:
        mask2 = np.ones((lq, lk), dtype=bool)
        if causal:
            mask2 &= np.tri(lq, lk, dtype=bool)
        if key_mask is not None:
            km = np.asarray(key_mask, dtype=bool)
            if km.shape != (lk,):
                raise ShapeError(f"attention: key_mask shape {km.shape} vs {lk}")
            mask2 &= km[None, :]
        if not mask2.any(axis=1).all():
            raise ValueError("attention: some query has no valid key")

    out = np.empty((lq, dm))
    probs: list[np.ndarray] = []
    for h in range(n_heads):
        sl = slice(h * hd, (h + 1) * hd)
        s = (q.data[:, sl] @ k.data[:, sl].T) * inv_sqrt
        if mask2 is not None:
            s = np.where(mask2, s, -np.inf)
        e = np.exp(s - s.max(axis=1, keepdims=True))
        a = e / e.sum(axis=1, keepdims=True)
        probs.append(a)
        out[:, sl] = a @ v.data[:, sl]

    def bwd(g: np.ndarray) -> None:
        gq = np.zeros_like(q.data)
        gk = np.zeros_like(k.data)
        gv = np.zeros_like(v.data)
        for h in range(n_heads):
            sl = slice(h * hd, (h + 1) * hd)
            a = probs[h]
            go = g[:, sl]
            gv[:, sl] = a.T @ go
            ga = go @ v.data[:, sl].T
            gs = a * (ga - (ga * a).sum(axis=1, keepdims=True))
            gq[:, sl] = (gs @ k.data[:, sl]) * inv_sqrt
            gk[:, sl] = (gs.T @ q.data[:, sl]) * inv_sqrt
        _accum(q, gq)
        _accum(k, gk)
        _accum(v, gv)

    return _make(out, (q, k, v), bwd)


def cross_entropy_label_smoothed(logits: Tensor, targets: Sequence[int], epsilon: float) -> Tensor:
    """Mean label-smoothed cross entropy over positions.

    The smoothed target distribution is q = (1 - eps) * onehot + eps / V.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [n x V] logits, got {logits.data.shape}")
    n, vocab = logits.data.shape
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"label smoothing must be in [0, 1), got {epsilon}")
    idx = np.asarray(targets, dtype=np.intp)
    if idx.shape != (n,):
        raise ShapeError(f"cross_entropy: {n} positions but {idx.shape} targets")
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        bad = int(idx[(idx < 0) | (idx >= vocab)][0])
        raise ValueError(f"cross_entropy: target id {bad} outside vocabulary of size {vocab}")

    d = logits.data
    m = d.max(axis=1, keepdims=True)
    logz = m + np.log(np.exp(d - m).sum(axis=1, keepdims=True))
    logp = d - logz
    nll = -logp[np.arange(n), idx]
    smooth = -logp.mean(axis=1)
    loss = ((1.0 - epsilon) * nll + epsilon * smooth).mean()

    def bwd(g: np.ndarray) -> None:
        p = np.exp(logp)
        qdist = np.full_like(p, epsilon / vocab)
        qdist[np.arange(n), idx] += 1.0 - epsilon
        _accum(logits, (p - qdist) * (float(g) / n))

    return _make(np.asarray(loss), (logits,), bwd)
