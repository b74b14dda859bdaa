"""Synthetic training pairs by shape sampling plus rejection, and a
conditionally-independent generator for validation suites.

Randomness is organised as independent streams keyed off one master seed with
numpy's ``SeedSequence`` spawn keys, so any single pair can be regenerated
from ``(master_seed, stream_key)`` alone.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, GenerationError
from .labelcore import is_valid, is_valid_batch, valid_from_counts

# spawn-key namespaces, keep streams of different purposes apart
TRAIN_STREAM = 0
CONDIND_STREAM = 1


@dataclass(frozen=True)
class GenConfig:
    L_m: int = 3
    H_m: int = 15
    L_n: int = 20
    H_n: int = 200
    entry_distribution: str = "uniform3"
    master_seed: int = 0
    max_attempts: int = 10_000  # per shape
    max_shapes: int = 100

    def __post_init__(self):
        if not 2 <= self.L_m <= self.H_m:
            raise ContractViolation(f"need 2 <= L_m <= H_m, got [{self.L_m}, {self.H_m}]")
        if not 1 <= self.L_n <= self.H_n:
            raise ContractViolation(f"need 1 <= L_n <= H_n, got [{self.L_n}, {self.H_n}]")
        if self.entry_distribution != "uniform3":
            raise ContractViolation(f"unknown entry distribution {self.entry_distribution!r}")
        if self.max_attempts < 1 or self.max_shapes < 1:
            raise ContractViolation("rejection caps must be positive")

    @classmethod
    def desk(cls, master_seed=0, **kw):
        return cls(L_m=3, H_m=15, L_n=20, H_n=200, master_seed=master_seed, **kw)

    @classmethod
    def paper(cls, master_seed=0, **kw):
        return cls(L_m=2, H_m=60, L_n=100, H_n=2000, master_seed=master_seed, **kw)


@dataclass
class SyntheticPair:
    X: np.ndarray
    y: np.ndarray
    seed_lineage: tuple = ()
    attempts: int = 0
    meta: dict = field(default_factory=dict)


def stream(master_seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=tuple(key)))


# draws per vectorised rejection round
_CHUNK = 8


def _draw_valid_at_shape(rng, n, m, max_attempts):
    """Rejection-sample a valid (X, y) of fixed shape; returns (X, y, attempts)."""
    attempts = 0
    while attempts < max_attempts:
        k = min(_CHUNK, max_attempts - attempts)
        X = rng.integers(-1, 2, size=(k, n, m), dtype=np.int64)
        y = rng.integers(0, 2, size=(k, n), dtype=np.int64) * 2 - 1
        ok = np.flatnonzero(is_valid_batch(X, y))
        if ok.size:
            first = ok[0]
            return X[first], y[first], attempts + first + 1
        attempts += k
    return None, None, attempts


def gen_pair(cfg: GenConfig, rng: np.random.Generator, lineage=()) -> SyntheticPair:
    """Draw a shape, then (X, y) uniformly at that shape until the pair is valid.

    After ``cfg.max_attempts`` rejections at one shape a fresh shape is drawn;
    after ``cfg.max_shapes`` shapes a :class:`GenerationError` is raised.
    """
    total = 0
    for _ in range(cfg.max_shapes):
        m = int(rng.integers(cfg.L_m, cfg.H_m + 1))
        n = int(rng.integers(cfg.L_n, cfg.H_n + 1))
        X, y, attempts = _draw_valid_at_shape(rng, n, m, cfg.max_attempts)
        total += attempts
        if X is not None:
            return SyntheticPair(X, y, tuple(lineage), total)
    raise GenerationError(
        f"no valid pair after {cfg.max_shapes} shapes x {cfg.max_attempts} attempts "
        f"(n in [{cfg.L_n}, {cfg.H_n}], m in [{cfg.L_m}, {cfg.H_m}])"
    )


def gen_batch(cfg: GenConfig, batch_size: int, iteration_index: int, run: int = 0) -> list:
    """``batch_size`` pairs, pair k drawn from stream (run, iteration_index, k)."""
    if batch_size < 1:
        raise ContractViolation("batch_size must be >= 1")
    out = []
    for k in range(batch_size):
        key = (TRAIN_STREAM, run, iteration_index, k)
        out.append(gen_pair(cfg, stream(cfg.master_seed, *key), lineage=(cfg.master_seed,) + key))
    return out


def sample_valid_labels(X, rng: np.random.Generator, count: int, max_draws: int = 10**7):
    """Draw y uniformly from {-1,+1}^n and keep the valid ones until ``count``.

    Returns ``(Y, draws)`` with ``Y`` of shape (count, n). The acceptance test is
    the same per-LF counting used by :func:`labelcore.is_valid`.
    """
    X = np.asarray(X)
    n = X.shape[0]
    Xp = (X == 1).astype(np.int64)
    Xn = (X == -1).astype(np.int64)
    tot_p = Xp.sum(axis=0)
    tot_n = Xn.sum(axis=0)
    kept = []
    have = 0
    draws = 0
    chunk = 4096
    while have < count:
        if draws >= max_draws:
            return None, draws
        k = min(chunk, max_draws - draws)
        Y = rng.integers(0, 2, size=(k, n), dtype=np.int64)
        pos_right = Y @ Xp
        pos_wrong = Y @ Xn
        ok = valid_from_counts(pos_right, pos_wrong, tot_n - pos_wrong, tot_p - pos_right)
        idx = np.flatnonzero(ok)
        if have + idx.size >= count:
            last = idx[count - have - 1]
            idx = idx[: count - have]
            draws += int(last) + 1
        else:
            draws += k
        kept.append(Y[idx] * 2 - 1)
        have += idx.size
    return np.concatenate(kept)[:count], draws


def gen_condind_dataset(
    num_datasets: int,
    n_range=(20, 200),
    m_range=(3, 15),
    seed: int = 0,
    prior_range=(0.3, 0.7),
    accuracy_range=(0.55, 0.95),
    propensity_range=(0.1, 0.9),
) -> list:
    """Datasets whose LFs are independent given the true label.

    Per dataset the class +1 prior, and per LF an accuracy and a propensity
    (probability of not abstaining), are drawn uniformly from the given ranges.
    No validity filtering is applied.
    """
    if num_datasets < 1:
        raise ContractViolation("num_datasets must be >= 1")
    out = []
    for k in range(num_datasets):
        rng = stream(seed, CONDIND_STREAM, k)
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        m = int(rng.integers(m_range[0], m_range[1] + 1))
        prior = rng.uniform(*prior_range)
        acc = rng.uniform(*accuracy_range, size=m)
        prop = rng.uniform(*propensity_range, size=m)
        y = np.where(rng.random(n) < prior, 1, -1)
        votes = rng.random((n, m)) < prop
        correct = rng.random((n, m)) < acc
        X = np.where(votes, np.where(correct, y[:, None], -y[:, None]), 0).astype(np.int64)
        meta = {"prior": prior, "accuracy": acc.tolist(), "propensity": prop.tolist()}
        out.append(SyntheticPair(X, y, (seed, CONDIND_STREAM, k), 0, meta))
    return out


def revalidate(pair: SyntheticPair) -> bool:
    return bool(is_valid(pair.X, pair.y))
