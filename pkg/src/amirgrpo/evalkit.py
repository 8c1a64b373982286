"""Evaluation and analysis math: Pass@k, perplexity, margins, coverage, failure locality."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from . import diffmath as dm
from .policy import PolicyParams, Rollout, token_logprobs

TAXONOMY = (
    "calculation",
    "conceptual",
    "reasoning",
    "modeling",
    "constraint",
    "prompt-misinterpretation",
    "format",
    "other",
)

DEFAULT_KS = (1, 2, 4)
GRID_POINTS = 101


def pass_at_k_single(n: int, c: int, k: int) -> Fraction:
    """Exact ``1 - C(n-c, k) / C(n, k)`` for one question."""
    if not 0 <= c <= n:
        raise ValueError(f"need 0 <= c <= n, got c={c}, n={n}")
    if k < 1:
        raise ValueError("k must be at least 1")
    if k > n:
        raise ValueError(f"k={k} exceeds n={n}")
    return 1 - Fraction(math.comb(n - c, k), math.comb(n, k))


def pass_at_k_exact(counts: Sequence[tuple[int, int]], k: int) -> Fraction:
    if not counts:
        raise ValueError("no questions")
    return sum((pass_at_k_single(n, c, k) for n, c in counts), Fraction(0)) / len(counts)


def pass_at_k(counts: Sequence[tuple[int, int]], k: int) -> float:
    """Mean unbiased Pass@k over questions given ``(n, c_q)`` pairs."""
    return float(pass_at_k_exact(counts, k))


def pass_at_k_table(counts: Sequence[tuple[int, int]], ks: Sequence[int] = DEFAULT_KS) -> list[tuple[int, float]]:
    return [(k, pass_at_k(counts, k)) for k in ks]


def conditional_perplexity(params: PolicyParams, query: Sequence[int], completion: Sequence[int]) -> float:
    """exp of minus the mean token log-prob of ``completion`` given ``query``.

    The mean is taken around the first token's value, so a constant per-token
    log-prob comes back unchanged instead of picking up summation error.
    """
    with dm.no_grad():
        logp, mask = token_logprobs(params, [query], [completion])
    x = logp.data[0, : int(mask.sum())]
    ell = x[0] + math.fsum(x - x[0]) / len(x)
    return math.exp(-ell)


def mean_normalized_logprob(params: PolicyParams, rollouts: Sequence[Rollout]) -> float:
    with dm.no_grad():
        logp, mask = token_logprobs(params, [r.query for r in rollouts], [r.tokens for r in rollouts])
    ell = (logp.data * mask).sum(axis=1) / mask.sum(axis=1)
    return float(ell.mean())


def preference_margin(params: PolicyParams, correct: Sequence[Rollout], incorrect: Sequence[Rollout]) -> float | None:
    """Mean length-normalized log-prob of correct minus incorrect completions; None if either side is empty."""
    if not correct or not incorrect:
        return None
    return mean_normalized_logprob(params, correct) - mean_normalized_logprob(params, incorrect)


def length_stats(rollouts: Sequence[Rollout], correct: Sequence[bool]) -> dict[str, float | None]:
    good = [len(r) for r, ok in zip(rollouts, correct) if ok]
    bad = [len(r) for r, ok in zip(rollouts, correct) if not ok]
    return {
        "mean_len_correct": float(np.mean(good)) if good else None,
        "mean_len_incorrect": float(np.mean(bad)) if bad else None,
    }


@dataclass(frozen=True)
class CoverageCell:
    base: bool
    grpo: bool
    amir: bool
    count: int
    fraction: float


CELL_ORDER = tuple(
    (b, g, a) for b in (True, False) for g in (True, False) for a in (True, False)
)


def _as_mapping(counts) -> Mapping:
    if isinstance(counts, Mapping):
        return counts
    return dict(enumerate(counts))


def coverage_table(base_counts, grpo_counts, amir_counts, n: int = 16,
                   denominator: str = "all") -> list[CoverageCell]:
    """Partition questions by which models solve them (c_q >= 1 of ``n``).

    ``denominator="solvable"`` reports fractions of questions solved by at
    least one model; the all-unsolved cell then keeps its count but has
    fraction 0 so the cells still partition 1.
    """
    base, grpo, amir = (_as_mapping(c) for c in (base_counts, grpo_counts, amir_counts))
    if not (set(base) == set(grpo) == set(amir)):
        raise ValueError("question sets differ between models")
    if not base:
        raise ValueError("no questions")
    for mapping in (base, grpo, amir):
        for c in mapping.values():
            if not 0 <= c <= n:
                raise ValueError(f"count {c} outside [0, {n}]")
    tally = {cell: 0 for cell in CELL_ORDER}
    for q in base:
        tally[(base[q] >= 1, grpo[q] >= 1, amir[q] >= 1)] += 1
    if denominator == "all":
        total = len(base)
    elif denominator == "solvable":
        total = len(base) - tally[(False, False, False)]
    else:
        raise ValueError(f"unknown denominator {denominator!r}")
    cells = []
    for cell in CELL_ORDER:
        counted = total and not (denominator == "solvable" and not any(cell))
        cells.append(CoverageCell(*cell, count=tally[cell], fraction=tally[cell] / total if counted else 0.0))
    return cells


@dataclass(frozen=True)
class FailurePoint:
    step: int
    total_steps: int
    label: str | None = None

    def __post_init__(self):
        if self.total_steps < 1 or not 1 <= self.step <= self.total_steps:
            raise ValueError(f"step {self.step} not within 1..{self.total_steps}")
        if self.label is not None and self.label not in TAXONOMY:
            raise ValueError(f"unknown failure label {self.label!r}")

    @property
    def position(self) -> float:
        return self.step / self.total_steps


def locality_density(points: Sequence[FailurePoint | float], bandwidth: float = 0.07,
                     grid_points: int = GRID_POINTS) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian KDE of relative failure positions on a grid over [0, 1], reflected at both ends."""
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    if len(points) == 0:
        raise ValueError("no failure points")
    pos = np.array([p.position if isinstance(p, FailurePoint) else float(p) for p in points])
    if np.any(pos < 0) or np.any(pos > 1):
        raise ValueError("relative positions must lie in [0, 1]")
    grid = np.linspace(0.0, 1.0, grid_points)
    centers = np.concatenate([pos, -pos, 2.0 - pos])
    z = (grid[:, None] - centers[None, :]) / bandwidth
    dens = np.exp(-0.5 * z * z).sum(axis=1) / (len(pos) * bandwidth * math.sqrt(2 * math.pi))
    return grid, dens
