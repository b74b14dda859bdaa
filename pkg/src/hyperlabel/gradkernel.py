"""A small reverse-mode autodiff kernel over float64 numpy arrays, plus Adam.

Only the operations the hyper label model needs are provided. Every op
records its parents and a closure that pushes the output gradient back to
them; :func:`backward` walks the recorded graph once in reverse topological
order.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ContractViolation, NonFiniteError


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, value, requires_grad=False, op="leaf", parents=()):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._backward = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.value.shape})"


def param(value) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True)


def constant(value) -> Tensor:
    return Tensor(np.asarray(value, dtype=np.float64))


def _accumulate(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _result(value, op, parents):
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite output from {op}")
    needs = any(p.requires_grad for p in parents)
    return Tensor(value, requires_grad=needs, op=op, parents=parents if needs else ())


def record(value, op, parents, backward_fn) -> Tensor:
    """Register a composite op computed outside this module.

    ``backward_fn(grad)`` must return one gradient (or None) per parent.
    """
    out = _result(value, op, tuple(parents))
    if out.requires_grad:
        def backward():
            for p, g in zip(parents, backward_fn(out.grad)):
                if g is not None:
                    _accumulate(p, g)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# forward ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ContractViolation(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = _result(a.value @ b.value, "matmul", (a, b))
    if out.requires_grad:
        def backward():
            _accumulate(a, out.grad @ b.value.T)
            _accumulate(b, a.value.T @ out.grad)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        value = a.value + b.value
    except ValueError:
        raise ContractViolation(f"add shape mismatch {a.shape} + {b.shape}") from None
    out = _result(value, "add", (a, b))
    if out.requires_grad:
        def backward():
            _accumulate(a, _unbroadcast(out.grad, a.value.shape))
            _accumulate(b, _unbroadcast(out.grad, b.value.shape))
        out._backward = backward
    return out


def concat(tensors) -> Tensor:
    """Concatenate along the last axis."""
    tensors = tuple(tensors)
    lead = {t.value.shape[:-1] for t in tensors}
    if len(lead) != 1:
        raise ContractViolation(f"concat shape mismatch {[t.shape for t in tensors]}")
    out = _result(np.concatenate([t.value for t in tensors], axis=-1), "concat", tensors)
    if out.requires_grad:
        bounds = np.cumsum([0] + [t.value.shape[-1] for t in tensors])

        def backward():
            for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
                _accumulate(t, out.grad[..., lo:hi])
        out._backward = backward
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0
    out = _result(np.where(mask, x.value, 0.0), "relu", (x,))
    if out.requires_grad:
        def backward():
            _accumulate(x, out.grad * mask)
        out._backward = backward
    return out


def _sigmoid(z):
    # two-branch form never overflows exp
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.value)
    out = _result(s, "sigmoid", (x,))
    if out.requires_grad:
        def backward():
            _accumulate(x, out.grad * s * (1.0 - s))
        out._backward = backward
    return out


def scale(x: Tensor, factor: float) -> Tensor:
    out = _result(x.value * factor, "scale", (x,))
    if out.requires_grad:
        def backward():
            _accumulate(x, out.grad * factor)
        out._backward = backward
    return out


def mean(x: Tensor) -> Tensor:
    k = x.value.size
    if k == 0:
        raise ContractViolation("mean of an empty tensor")
    out = _result(np.asarray(x.value.sum() / k), "mean", (x,))
    if out.requires_grad:
        def backward():
            _accumulate(x, np.full(x.value.shape, float(out.grad) / k))
        out._backward = backward
    return out


class Grouping:
    """Assignment of N members to G non-empty groups.

    Holds the sparse averaging and indicator matrices so repeated pooling over
    the same groups costs one sparse product each.
    """

    def __init__(self, index, num_groups):
        index = np.asarray(index, dtype=np.int64)
        if index.ndim != 1:
            raise ContractViolation("group index must be 1-D")
        if index.size and (index.min() < 0 or index.max() >= num_groups):
            raise ContractViolation("group index out of range")
        counts = np.bincount(index, minlength=num_groups)
        if (counts == 0).any():
            raise ContractViolation(f"empty group {int(np.argmin(counts))}")
        self.index = index
        self.num_groups = num_groups
        self.counts = counts
        n = index.size
        # CSR built directly: members of a group are contiguous after a stable sort
        order = np.argsort(index, kind="stable")
        indptr = np.concatenate(([0], np.cumsum(counts)))
        inv = 1.0 / counts
        self.indicator = sp.csr_matrix((np.ones(n), order, indptr), shape=(num_groups, n))
        self.averager = sp.csr_matrix((inv[index[order]], order, indptr), shape=(num_groups, n))
        self.averager_t = sp.csr_matrix((inv[index], index, np.arange(n + 1)), shape=(n, num_groups))

    @property
    def size(self):
        return self.index.size


def group_mean(x: Tensor, groups: Grouping) -> Tensor:
    """Mean of the rows of ``x`` within each group, divided by the member count."""
    if x.value.shape[0] != groups.size:
        raise ContractViolation(
            f"group_mean: {x.value.shape[0]} rows for {groups.size} members"
        )
    out = _result(groups.averager @ x.value, "group_mean", (x,))
    if out.requires_grad:
        def backward():
            _accumulate(x, groups.averager_t @ out.grad)
        out._backward = backward
    return out


def gather(x: Tensor, groups: Grouping) -> Tensor:
    """Broadcast each group's row back to its members (inverse of pooling)."""
    if x.value.shape[0] != groups.num_groups:
        raise ContractViolation(
            f"gather: {x.value.shape[0]} rows for {groups.num_groups} groups"
        )
    out = _result(np.take(x.value, groups.index, axis=0), "gather", (x,))
    if out.requires_grad:
        def backward():
            _accumulate(x, groups.indicator @ out.grad)
        out._backward = backward
    return out


def slice_rows(x: Tensor, lo: int, hi: int) -> Tensor:
    """Rows ``lo:hi`` of a 2-D tensor (views a weight block)."""
    out = _result(x.value[lo:hi], "slice_rows", (x,))
    if out.requires_grad:
        def backward():
            g = np.zeros_like(x.value)
            g[lo:hi] = out.grad
            _accumulate(x, g)
        out._backward = backward
    return out


def gather_sum(base: Tensor, terms) -> Tensor:
    """``base + sum_k terms_k[group_k]`` for (group-level tensor, Grouping) pairs.

    Equivalent to adding :func:`gather` results, without the temporaries.
    """
    value = base.value.copy()
    for t, groups in terms:
        if t.value.shape[0] != groups.num_groups or groups.size != value.shape[0]:
            raise ContractViolation("gather_sum: group/member count mismatch")
        value += np.take(t.value, groups.index, axis=0)
    parents = (base,) + tuple(t for t, _ in terms)
    out = _result(value, "gather_sum", parents)
    if out.requires_grad:
        def backward():
            _accumulate(base, out.grad)
            for t, groups in terms:
                if t.requires_grad:
                    _accumulate(t, groups.indicator @ out.grad)
        out._backward = backward
    return out


def take_rows(x: Tensor, index) -> Tensor:
    """Row lookup ``x[index]`` (embedding tables)."""
    index = np.asarray(index, dtype=np.int64)
    out = _result(np.take(x.value, index, axis=0), "take_rows", (x,))
    if out.requires_grad:
        def backward():
            g = np.zeros_like(x.value)
            # tables are tiny; one masked reduction per used row
            for r in np.unique(index):
                g[r] = out.grad[index == r].sum(axis=0)
            _accumulate(x, g)
        out._backward = backward
    return out


def scatter_rows(x: Tensor, index, size) -> Tensor:
    """Place the rows of ``x`` at ``index`` in a zero array with ``size`` rows."""
    index = np.asarray(index, dtype=np.int64)
    value = np.zeros((size,) + x.value.shape[1:])
    value[index] = x.value
    out = _result(value, "scatter_rows", (x,))
    if out.requires_grad:
        def backward():
            _accumulate(x, out.grad[index])
        out._backward = backward
    return out


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise binary cross-entropy of sigmoid(logits) against 0/1 targets.

    Uses max(z, 0) - z*t + log1p(exp(-|z|)), finite for every finite z.
    """
    z = logits.value
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != z.shape:
        raise ContractViolation(f"bce shape mismatch {z.shape} vs {t.shape}")
    value = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = _result(value, "bce_with_logits", (logits,))
    if out.requires_grad:
        def backward():
            _accumulate(logits, out.grad * (_sigmoid(z) - t))
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# reverse pass


def _topological(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Populate ``.grad`` on every tensor that ``loss`` depends on."""
    if loss.value.size != 1:
        raise ContractViolation("backward needs a scalar loss")
    if not loss.requires_grad:
        return
    order = _topological(loss)
    for node in order:
        if node is not loss:
            node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._backward is None:
            continue
        if not np.all(np.isfinite(node.grad)):
            raise NonFiniteError(f"non-finite gradient flowing into {node.op}")
        node._backward()
    for node in order:
        if node.op == "leaf" and node.grad is not None and not np.all(np.isfinite(node.grad)):
            raise NonFiniteError("non-finite gradient at a parameter")


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    amsgrad: bool = True
    step: int = 0
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)
    max_exp_avg_sq: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """One Adam update; returns new parameter arrays and advances ``state``.

    With ``amsgrad`` the running maximum of the second moment is used in the
    denominator, following the PyTorch formulation.
    """
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ContractViolation(f"gradient shape mismatch for {name}")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    new = {}
    for name, p in params.items():
        g = grads[name]
        m = state.exp_avg.get(name, np.zeros_like(p))
        v = state.exp_avg_sq.get(name, np.zeros_like(p))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.exp_avg[name] = m
        state.exp_avg_sq[name] = v
        if state.amsgrad:
            vmax = np.maximum(state.max_exp_avg_sq.get(name, np.zeros_like(p)), v)
            state.max_exp_avg_sq[name] = vmax
            denom = np.sqrt(vmax) / np.sqrt(bc2) + state.eps
        else:
            denom = np.sqrt(v) / np.sqrt(bc2) + state.eps
        new[name] = p - (state.lr / bc1) * m / denom
    return new
