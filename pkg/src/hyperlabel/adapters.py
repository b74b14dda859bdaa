"""Fine-tuning on a few revealed labels, and one-vs-rest multi-class inference."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gradkernel as gk
from . import hlmnet
from .errors import ContractViolation, LabelParseError
from .hlmnet import ModelParams
from .labelcore import LabelMatrix, _parse_int_rows, as_binary

FINETUNE_LR = 1e-4


@dataclass(frozen=True)
class LabeledSubset:
    indices: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        lab = np.asarray(self.labels, dtype=np.int64)
        if idx.ndim != 1 or idx.shape != lab.shape:
            raise ContractViolation("indices and labels must be 1-D and equally long")
        if np.unique(idx).size != idx.size:
            raise ContractViolation("duplicate indices in labeled subset")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "labels", lab)

    def __len__(self):
        return self.indices.size

    @classmethod
    def from_labels(cls, y, indices):
        """Reveal ``y[indices]``; only those entries are copied."""
        indices = np.asarray(indices, dtype=np.int64)
        return cls(indices, np.asarray(y)[indices])


def load_subset(path) -> LabeledSubset:
    """Read ``index,label`` lines."""
    rows = _parse_int_rows(path)
    if any(len(r) != 2 for r in rows):
        raise LabelParseError(f"{path}: expected 'index,label' on every line")
    arr = np.array(rows, dtype=np.int64)
    return LabeledSubset(arr[:, 0], arr[:, 1])


def default_epochs(num_labels: int) -> int:
    """round(sqrt(N_gt)), at least 1."""
    return max(1, int(round(np.sqrt(num_labels))))


def finetune(params: ModelParams, X, subset: LabeledSubset, lr: float = FINETUNE_LR, epochs=None) -> ModelParams:
    """Full-batch AMSGrad on the cross-entropy of the revealed rows.

    One epoch is one gradient step over all of ``subset``. ``params`` is not
    modified; a new :class:`ModelParams` is returned.
    """
    X = as_binary(X)
    n = X.shape[0]
    if len(subset) == 0:
        raise ContractViolation("labeled subset is empty")
    if subset.indices.min() < 0 or subset.indices.max() >= n:
        raise ContractViolation(f"labeled subset index out of range for n={n}")
    if not np.isin(subset.labels, (-1, 1)).all():
        raise ContractViolation("binary fine-tuning labels must be -1 or +1")
    if epochs is None:
        epochs = default_epochs(len(subset))
    if epochs < 0:
        raise ContractViolation("epochs must be >= 0")

    graph = hlmnet.encode(X)
    rows = gk.Grouping(np.zeros(len(subset), dtype=np.int64), 1)
    targets = ((subset.labels + 1) / 2.0)[:, None]
    pick = subset.indices
    state = gk.AdamState(lr=lr)
    arrays = {k: v.copy() for k, v in params.arrays.items()}
    for _ in range(epochs):
        tensors = {k: gk.param(v) for k, v in arrays.items()}
        logits = hlmnet.forward_logits(tensors, graph, params.K)
        chosen = gk.record(
            logits.value[pick], "select_rows", (logits,),
            lambda g: (_scatter(g, pick, logits.value.shape),),
        )
        loss = gk.group_mean(gk.bce_with_logits(chosen, targets), rows)
        gk.backward(gk.mean(loss))
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.value)) for k, t in tensors.items()}
        arrays = gk.adam_step(state, arrays, grads)
    return ModelParams(params.K, params.d, arrays, params.version)


def _scatter(g, index, shape):
    out = np.zeros(shape)
    out[index] = g
    return out


def restricted_loss(params: ModelParams, X, subset: LabeledSubset) -> float:
    p = hlmnet.forward(params, X)[subset.indices]
    t = (subset.labels + 1) / 2.0
    p = np.clip(p, 1e-300, 1 - 1e-16)
    return float(-np.mean(t * np.log(p) + (1 - t) * np.log1p(-p)))


def one_vs_rest(X: np.ndarray, c: int) -> np.ndarray:
    """+1 where the vote is class ``c``, 0 on abstention, -1 for any other class."""
    return np.where(X == c, 1, np.where(X == 0, 0, -1))


def multiclass_infer(params: ModelParams, X, num_classes=None, return_per_class=False):
    """Soft labels (n x C): per-class sigmoid outputs normalised per row."""
    if isinstance(X, LabelMatrix):
        if X.is_binary:
            raise ContractViolation("multi-class inference needs a multi-class matrix")
        num_classes = num_classes or X.num_classes
        values = X.values
    else:
        if num_classes is None:
            raise ContractViolation("num_classes is required for a raw array")
        values = LabelMatrix(np.asarray(X), num_classes).values
    if num_classes < 2:
        raise ContractViolation(f"need C >= 2, got {num_classes}")
    if not values.any():
        raise ContractViolation("empty label matrix: every entry abstains")
    per_class = np.empty((values.shape[0], num_classes))
    for c in range(1, num_classes + 1):
        Xc = one_vs_rest(values, c)
        # a class nobody voted for still has -1 votes from the others
        per_class[:, c - 1] = hlmnet.forward(params, Xc)
    soft = per_class / per_class.sum(axis=1, keepdims=True)
    if return_per_class:
        return soft, per_class
    return soft
