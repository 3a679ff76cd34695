"""Slate selection: greedy, epsilon-greedy, Thompson sampling and
order-statistic UCB over posterior CTR score samples.

All selectors are pure functions of their inputs (plus an explicit rng for
epsilon-greedy) and break ties by lowest candidate id.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, EnvironmentExhausted, UsageError

POLICY_KINDS = ("greedy", "epsilon_greedy", "thompson", "ucb")


@dataclass(frozen=True)
class PolicyConfig:
    kind: str
    slate_size: int = 7
    epsilon: float = 0.1
    ucb_order_k: int = 2
    ucb_samples: int = 10
    rng_seed: int = 0

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        problems = []
        if self.kind not in POLICY_KINDS:
            problems.append(f"policy kind must be one of {POLICY_KINDS}, got {self.kind!r}")
        if not 0.0 <= self.epsilon <= 1.0:
            problems.append(f"epsilon must be in [0, 1], got {self.epsilon}")
        if self.slate_size < 1:
            problems.append(f"slate_size must be >= 1, got {self.slate_size}")
        if self.ucb_order_k < 1:
            problems.append(f"ucb_order_k must be >= 1, got {self.ucb_order_k}")
        if self.ucb_samples < 1:
            problems.append(f"ucb_samples must be >= 1, got {self.ucb_samples}")
        if self.kind == "ucb" and self.ucb_order_k > self.ucb_samples:
            problems.append(
                f"ucb_order_k ({self.ucb_order_k}) cannot exceed ucb_samples ({self.ucb_samples})"
            )
        if problems:
            raise ConfigurationError("; ".join(problems))

    def samples_per_decision(self) -> int:
        """How many posterior samples per candidate this policy consumes."""
        if self.kind == "thompson":
            return 1
        if self.kind == "ucb":
            return self.ucb_samples
        return 0


def empirical_quantile(samples: Sequence[float], k: int) -> float:
    """k-th largest of the samples (k=1 is the maximum), no interpolation."""
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise UsageError("samples must be a nonempty 1-D sequence")
    if not 1 <= k <= arr.size:
        raise UsageError(f"k must be in [1, {arr.size}], got {k}")
    return float(np.partition(arr, arr.size - k)[arr.size - k])


def confidence_level_to_k(q: float, s: int) -> int:
    """Map a confidence level q to the order-statistic index floor((1-q)*S)+1.

    Advisory helper: configs set ucb_order_k directly.
    """
    if not 0.0 < q < 1.0:
        raise UsageError(f"q must be in (0, 1), got {q}")
    if s < 1:
        raise UsageError(f"S must be >= 1, got {s}")
    k = int(math.floor((1.0 - q) * s + 1e-9)) + 1
    return max(1, min(s, k))


def _rank_by_score(candidate_ids: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Candidate ids ordered by score descending, ties by lowest id."""
    order = np.lexsort((candidate_ids, -scores))
    return candidate_ids[order]


def _check_eligible(eligible: Sequence[int], k: int) -> np.ndarray:
    ids = np.asarray(sorted(eligible), dtype=np.int64)
    if ids.size < k:
        raise EnvironmentExhausted(f"{ids.size} eligible candidates cannot fill a slate of {k}")
    return ids


def select_greedy(point_scores: np.ndarray, k: int, eligible: Sequence[int]) -> list[int]:
    """Top-k eligible candidates by point score.

    point_scores is indexed by candidate id over the whole universe.
    """
    ids = _check_eligible(eligible, k)
    scores = np.asarray(point_scores, dtype=np.float64)[ids]
    return [int(c) for c in _rank_by_score(ids, scores)[:k]]


def select_epsilon_greedy(point_scores: np.ndarray, k: int, epsilon: float,
                          eligible: Sequence[int], rng: np.random.Generator) -> list[int]:
    """Fill the slate slot by slot: exploit the best remaining candidate with
    probability 1-epsilon, otherwise pick uniformly among the remaining."""
    ids = _check_eligible(eligible, k)
    scores = np.asarray(point_scores, dtype=np.float64)[ids]
    ranked = list(_rank_by_score(ids, scores))
    remaining = set(ranked)
    slate: list[int] = []
    for _ in range(k):
        if rng.random() < epsilon:
            pool = np.asarray(sorted(remaining), dtype=np.int64)
            pick = int(pool[rng.integers(pool.size)])
        else:
            pick = next(int(c) for c in ranked if c in remaining)
        slate.append(pick)
        remaining.remove(pick)
    return slate


def select_thompson(score_samples: np.ndarray, k: int, eligible: Sequence[int]) -> list[int]:
    """Act greedily on a single posterior draw per candidate.

    Sample rows correspond to sorted(eligible).
    """
    samples = np.asarray(score_samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[1] != 1:
        raise UsageError(f"thompson selection needs exactly one sample column, got shape {samples.shape}")
    ids = _check_eligible(eligible, k)
    if samples.shape[0] != ids.size:
        raise UsageError(f"{samples.shape[0]} sample rows for {ids.size} eligible candidates")
    return [int(c) for c in _rank_by_score(ids, samples[:, 0])[:k]]


def ucb_scores(score_samples: np.ndarray, ucb_order_k: int) -> np.ndarray:
    """Per-candidate k-th largest sample, vectorized over rows."""
    samples = np.asarray(score_samples, dtype=np.float64)
    if samples.ndim != 2:
        raise UsageError(f"score samples must be 2-D, got shape {samples.shape}")
    s = samples.shape[1]
    if not 1 <= ucb_order_k <= s:
        raise UsageError(f"ucb_order_k must be in [1, {s}], got {ucb_order_k}")
    return np.partition(samples, s - ucb_order_k, axis=1)[:, s - ucb_order_k]


def select_ucb(score_samples: np.ndarray, ucb_order_k: int, k: int,
               eligible: Sequence[int]) -> list[int]:
    """Top-k by the optimistic order-statistic of each candidate's samples.

    Sample rows correspond to sorted(eligible).
    """
    ids = _check_eligible(eligible, k)
    bounds = ucb_scores(score_samples, ucb_order_k)
    if bounds.shape[0] != ids.size:
        raise UsageError(f"{bounds.shape[0]} sample rows for {ids.size} eligible candidates")
    return [int(c) for c in _rank_by_score(ids, bounds)[:k]]
