"""The analytical optimal estimator h*(X): the component-wise mean of all label
vectors y that are valid for X.

``exact_hstar`` enumerates {-1,+1}^n. Candidates are split into a block of low
rows, whose per-LF vote counters are tabulated once for every bit pattern,
and the remaining high rows, which are walked in Gray-code order so that each
step adds or removes one row's contribution (O(m) per step). Every step then
scores the whole low block at once.
"""
from __future__ import annotations

import json
from math import comb
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from .datagen import sample_valid_labels, stream
from .errors import ContractViolation, EnumerationCapError, NoValidLabelingError, ValidSetTooSparseError
from .labelcore import as_binary, is_valid_batch, valid_from_counts

DEFAULT_CAP = 20
DEFAULT_MAX_DRAWS = 10**7
_LOW_BITS = 10


@dataclass
class OracleResult:
    estimate: np.ndarray
    valid_count: int
    method: str
    samples_drawn: int = 0

    def to_json(self) -> str:
        doc = asdict(self)
        doc["estimate"] = [float(v) for v in self.estimate]
        return json.dumps(doc)


def _bit_patterns(bits):
    """(2**bits, bits) 0/1 matrix; row p holds the binary digits of p, LSB first."""
    p = np.arange(2**bits, dtype=np.int64)[:, None]
    return (p >> np.arange(bits)) & 1


def exact_hstar(X, cap: int = DEFAULT_CAP) -> OracleResult:
    X = as_binary(X)
    n, m = X.shape
    if n > cap:
        raise EnumerationCapError(f"n={n} exceeds the enumeration cap {cap}")
    Xp = (X == 1).astype(np.int64)
    Xn = (X == -1).astype(np.int64)
    tot_p = Xp.sum(axis=0)
    tot_n = Xn.sum(axis=0)

    low = min(n, _LOW_BITS)
    high = n - low
    # bit set <=> y_i = +1
    L = _bit_patterns(low)
    low_right = L @ Xp[:low]      # votes +1 among low rows labelled +1
    low_wrong = L @ Xn[:low]      # votes -1 among low rows labelled +1
    low_y = 2 * L - 1

    hi_bits = np.zeros(high, dtype=np.int64)
    hi_right = np.zeros(m, dtype=np.int64)
    hi_wrong = np.zeros(m, dtype=np.int64)
    sums = np.zeros(n, dtype=np.int64)
    count = 0
    for step in range(2**high):
        if step:
            # Gray code: flip the lowest set bit position of step
            b = (step & -step).bit_length() - 1
            row = low + b
            sign = 1 - 2 * hi_bits[b]   # +1 when the row turns positive
            hi_bits[b] ^= 1
            hi_right += sign * Xp[row]
            hi_wrong += sign * Xn[row]
        pos_right = low_right + hi_right
        pos_wrong = low_wrong + hi_wrong
        ok = valid_from_counts(pos_right, pos_wrong, tot_n - pos_wrong, tot_p - pos_right)
        k = int(ok.sum())
        if k:
            count += k
            sums[:low] += low_y[ok].sum(axis=0)
            sums[low:] += k * (2 * hi_bits - 1)
    if count == 0:
        raise NoValidLabelingError("no label vector is valid for this matrix")
    return OracleResult(sums / count, count, "exact")


def mc_hstar(X, num_accepted: int, seed=0, max_draws: int = DEFAULT_MAX_DRAWS) -> OracleResult:
    """Monte-Carlo h*: mean of ``num_accepted`` uniformly drawn valid label vectors."""
    X = as_binary(X)
    if num_accepted < 1:
        raise ContractViolation("num_accepted must be >= 1")
    Y, draws = sample_valid_labels(X, stream(seed, 2), num_accepted, max_draws)
    if Y is None:
        raise ValidSetTooSparseError(
            f"fewer than {num_accepted} valid vectors in {draws} draws"
        )
    return OracleResult(Y.sum(axis=0) / num_accepted, num_accepted, "monte_carlo", draws)


def valid_pair_probability(n, m, trials, seed=0, chunk=2000) -> float:
    """Fraction of uniformly drawn (X, y) pairs that are valid.

    ``m`` is an int, or a ``(low, high)`` tuple to draw m uniformly per trial.
    X entries are uniform over {-1, 0, +1}, y uniform over {-1, +1}^n.
    """
    if trials < 1:
        raise ContractViolation("trials must be >= 1")
    rng = stream(seed, 3)
    if isinstance(m, tuple):
        ms = rng.integers(m[0], m[1] + 1, size=trials)
    else:
        ms = np.full(trials, int(m))
    hits = 0
    for width in np.unique(ms):
        total = int((ms == width).sum())
        done = 0
        while done < total:
            k = min(chunk, total - done)
            X = rng.integers(-1, 2, size=(k, n, int(width)), dtype=np.int8)
            y = rng.integers(0, 2, size=(k, n), dtype=np.int8) * 2 - 1
            hits += int(is_valid_batch(X, y).sum())
            done += k
    return hits / trials


def appendix_probability(m: int) -> float:
    """Tie-free approximation: 1/4 for odd m, (1 - C(m, m/2)/2^m)/4 for even m."""
    if m % 2:
        return 0.25
    return (1 - comb(m, m // 2) / 2**m) / 4


def ce_minimizer_check(X, num_samples: int, seed=0, max_draws: int = DEFAULT_MAX_DRAWS):
    """Minimise summed cross-entropy against sampled valid y, element by element.

    Returns ``(minimiser, hstar)``, both on the [-1, 1] scale. The minimiser is
    found numerically on the [0, 1] scale rather than read off as a mean.
    """
    X = as_binary(X)
    hstar = exact_hstar(X).estimate
    Y, draws = sample_valid_labels(X, stream(seed, 4), num_samples, max_draws)
    if Y is None:
        raise ValidSetTooSparseError(f"fewer than {num_samples} valid vectors in {draws} draws")
    positives = (Y == 1).sum(axis=0)
    minimiser = np.empty(X.shape[0])
    for i, k in enumerate(positives):
        if k == 0 or k == num_samples:
            # objective is monotone, the infimum sits on the boundary
            minimiser[i] = 1.0 if k else -1.0
            continue

        def objective(q, k=k):
            return -(k * np.log(q) + (num_samples - k) * np.log1p(-q))

        res = minimize_scalar(objective, bounds=(1e-12, 1 - 1e-12), method="bounded",
                              options={"xatol": 1e-12})
        minimiser[i] = 2 * res.x - 1
    return minimiser, hstar
