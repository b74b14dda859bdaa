"""Label matrices, the better-than-random validity predicate and majority vote.

Binary label matrices hold -1/+1 votes with 0 for abstention. Multi-class
matrices hold 0 (abstain) or a class id in 1..C.
"""
from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, LabelParseError


@dataclass(frozen=True)
class LabelMatrix:
    values: np.ndarray
    num_classes: int | None = None  # None means binary mode

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise ContractViolation(f"label matrix must be 2-D and non-empty, got shape {values.shape}")
        if self.num_classes is None:
            _check_alphabet(values, (-1, 0, 1), "binary")
        else:
            if self.num_classes < 2:
                raise ContractViolation(f"multi-class mode needs C >= 2, got {self.num_classes}")
            _check_alphabet(values, range(0, self.num_classes + 1), f"{self.num_classes}-class")
        values = values.astype(np.int64)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def m(self):
        return self.values.shape[1]

    @property
    def is_binary(self):
        return self.num_classes is None


def _check_alphabet(values, allowed, mode):
    if not np.issubdtype(values.dtype, np.integer):
        if not np.all(np.isfinite(values)) or not np.all(values == np.round(values)):
            raise ContractViolation(f"{mode} label matrix must hold integers")
    lo, hi = min(allowed), max(allowed)
    if values.size and lo <= values.min() and values.max() <= hi:
        return
    bad = (values < lo) | (values > hi)
    i, j = np.argwhere(bad)[0]
    raise ContractViolation(f"entry {values[i, j]!r} at ({i}, {j}) outside the {mode} alphabet")


def as_binary(X) -> np.ndarray:
    """Return ``X`` as a validated binary int array."""
    if isinstance(X, LabelMatrix):
        if not X.is_binary:
            raise ContractViolation("expected a binary label matrix, got multi-class")
        return X.values
    return LabelMatrix(np.asarray(X)).values


def as_labels(y, n=None) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ContractViolation(f"label vector must be 1-D, got shape {y.shape}")
    if n is not None and y.shape[0] != n:
        raise ContractViolation(f"label vector has length {y.shape[0]}, matrix has {n} rows")
    if not np.isin(y, (-1, 1)).all():
        raise ContractViolation("binary labels must be -1 or +1")
    return y.astype(np.int64)


# ---------------------------------------------------------------------------
# validity predicate


def class_counts(X: np.ndarray, y: np.ndarray):
    """Per-LF correct/incorrect vote counts inside each class.

    Returns ``(pos_right, pos_wrong, neg_right, neg_wrong)``, each of length m.
    ``pos_right[j]`` counts rows with y=+1 where LF j voted +1, ``pos_wrong[j]``
    rows with y=+1 where it voted -1, and likewise for class -1. Abstentions
    land in neither count.
    """
    pos = y == 1
    neg = ~pos
    Xp = X == 1
    Xn = X == -1
    return (
        Xp[pos].sum(axis=0),
        Xn[pos].sum(axis=0),
        Xn[neg].sum(axis=0),
        Xp[neg].sum(axis=0),
    )


def valid_from_counts(pos_right, pos_wrong, neg_right, neg_wrong) -> np.ndarray:
    """Validity from per-LF counts; the LF axis is last, leading axes batch."""
    m = np.shape(pos_right)[-1]
    pos_ok = (pos_right > pos_wrong).sum(axis=-1)
    neg_ok = (neg_right > neg_wrong).sum(axis=-1)
    # sum > m/2  <=>  2*sum > m, kept in integers
    return (2 * pos_ok > m) & (2 * neg_ok > m)


def lf_better_than_random(X, y, j: int, c: int) -> int:
    X = as_binary(X)
    y = as_labels(y, X.shape[0])
    if not 0 <= j < X.shape[1]:
        raise ContractViolation(f"LF index {j} out of range for m={X.shape[1]}")
    if c not in (-1, 1):
        raise ContractViolation(f"class must be -1 or +1, got {c}")
    rows = X[y == c, j]
    return int((rows == c).sum() > (rows == -c).sum())


def is_valid(X, y) -> int:
    X = as_binary(X)
    y = as_labels(y, X.shape[0])
    return int(valid_from_counts(*class_counts(X, y)))


def is_valid_batch(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Vectorised validity over a stack: ``X`` is (b, n, m), ``y`` is (b, n).

    No alphabet checks; callers pass generator output. Counts are formed as
    batched products in float32, exact for n < 2**24.
    """
    pos = (y == 1).astype(np.float32)[:, None, :]
    Xp = (X == 1).astype(np.float32)
    Xn = (X == -1).astype(np.float32)
    pos_right = np.matmul(pos, Xp)[:, 0, :]
    pos_wrong = np.matmul(pos, Xn)[:, 0, :]
    tot_p = Xp.sum(axis=1)
    tot_n = Xn.sum(axis=1)
    return valid_from_counts(pos_right, pos_wrong, tot_n - pos_wrong, tot_p - pos_right)


# ---------------------------------------------------------------------------
# majority vote


def majority_vote(X) -> np.ndarray:
    """Fraction of non-abstaining votes that are +1; 0.5 for rows without votes."""
    X = as_binary(X)
    pos = (X == 1).sum(axis=1)
    total = pos + (X == -1).sum(axis=1)
    probs = np.full(X.shape[0], 0.5)
    voted = total > 0
    probs[voted] = pos[voted] / total[voted]
    return probs


def hard_labels(probs, threshold=0.5) -> np.ndarray:
    """Threshold probabilities into -1/+1; ties go to +1."""
    return np.where(np.asarray(probs) >= threshold, 1, -1)


def accuracy(probs, y, threshold=0.5) -> float:
    return float(np.mean(hard_labels(probs, threshold) == np.asarray(y)))


# ---------------------------------------------------------------------------
# CSV interfaces


def _read_lines(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise LabelParseError(f"{path}: not valid UTF-8: {exc}") from None
    if text.startswith("\ufeff"):
        text = text[1:]
    return text.replace("\r\n", "\n").split("\n")


def _parse_int_rows(path):
    rows = []
    width = None
    lines = _read_lines(path)
    for lineno, line in enumerate(lines, start=1):
        if lineno == 1 and line.startswith("#"):
            continue
        if not line.strip():
            if any(rest.strip() for rest in lines[lineno:]):
                raise LabelParseError(f"{path}: blank line inside data", row=lineno)
            break
        fields = next(csv.reader(io.StringIO(line)))
        if width is None:
            width = len(fields)
        elif len(fields) != width:
            raise LabelParseError(
                f"{path}: expected {width} values, found {len(fields)}", row=lineno
            )
        parsed = []
        for col, field in enumerate(fields, start=1):
            try:
                parsed.append(int(field.strip()))
            except ValueError:
                raise LabelParseError(
                    f"{path}: malformed value {field!r}", row=lineno, column=col
                ) from None
        rows.append(parsed)
    if not rows:
        raise LabelParseError(f"{path}: no data rows")
    return rows


def load_matrix(path, num_classes=None) -> LabelMatrix:
    """Read a label matrix CSV (binary if ``num_classes`` is None)."""
    rows = _parse_int_rows(path)
    values = np.array(rows, dtype=np.int64)
    allowed = (-1, 0, 1) if num_classes is None else range(0, num_classes + 1)
    bad = ~np.isin(values, list(allowed))
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise LabelParseError(
            f"{path}: value {values[i, j]} outside the allowed alphabet", row=_data_row(path, i), column=j + 1
        )
    return LabelMatrix(values, num_classes)


def _data_row(path, index):
    # data row index -> 1-based file line (accounts for a header line)
    lines = _read_lines(path)
    return index + (2 if lines and lines[0].startswith("#") else 1)


def load_labels(path) -> np.ndarray:
    rows = _parse_int_rows(path)
    if any(len(r) != 1 for r in rows):
        raise LabelParseError(f"{path}: expected one label per row")
    return np.array([r[0] for r in rows], dtype=np.int64)


def save_matrix(path, X):
    values = X.values if isinstance(X, LabelMatrix) else np.asarray(X)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in values:
            fh.write(",".join(str(int(v)) for v in row) + "\n")


def save_labels(path, y):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for v in np.asarray(y):
            fh.write(f"{int(v)}\n")


def format_prob(p: float) -> str:
    # 17 significant digits: round-trips any double
    return f"{float(p):#.17g}"


def save_predictions(path, probs):
    """Write one probability per row, or one row of class probabilities per point."""
    probs = np.asarray(probs, dtype=float)
    tmp = f"{path}.tmp-{os.getpid()}"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        for row in probs:
            if probs.ndim == 1:
                fh.write(format_prob(row) + "\n")
            else:
                fh.write(",".join(format_prob(p) for p in row) + "\n")
    os.replace(tmp, path)


def load_predictions(path) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(_read_lines(path), start=1):
        if lineno == 1 and line.startswith("#"):
            continue
        if not line.strip():
            continue
        try:
            rows.append([float(v) for v in line.split(",")])
        except ValueError:
            raise LabelParseError(f"{path}: malformed probability", row=lineno) from None
    if not rows:
        raise LabelParseError(f"{path}: no data rows")
    if len({len(r) for r in rows}) != 1:
        raise LabelParseError(f"{path}: ragged rows")
    arr = np.array(rows)
    return arr[:, 0] if arr.shape[1] == 1 else arr
