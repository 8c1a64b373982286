"""Group-normalized advantages, the clipped surrogate, and the k3 KL penalty.

Both the token-level (GRPO) and the sequence-level (GSPO) surrogate are
built from the same per-token log-prob tensors, so the trainer can evaluate a
whole batch of groups with a single forward pass.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor
from .policy import PolicyParams, Rollout, token_logprobs

log = logging.getLogger(__name__)

KL_EXPONENT_CLAMP = 30.0


@dataclass
class RolloutGroup:
    query_id: int
    rollouts: list[Rollout]
    rewards: np.ndarray
    advantages: np.ndarray
    degenerate: bool

    def __len__(self) -> int:
        return len(self.rollouts)


@dataclass
class SurrogateTerms:
    ratio: np.ndarray
    clipped_ratio: np.ndarray
    kl: np.ndarray
    lengths: np.ndarray
    mask: np.ndarray = field(repr=False)

    @property
    def clip_fraction(self) -> float:
        moved = (self.ratio != self.clipped_ratio) & (self.mask > 0)
        return float(moved.sum() / max(self.mask.sum(), 1.0))

    @property
    def mean_kl(self) -> float:
        return float((self.kl * self.mask).sum() / max(self.mask.sum(), 1.0))


def normalize_advantages(
    rewards: Sequence[float], std_guard: float = 1e-4, population: bool = True
) -> tuple[np.ndarray, bool]:
    """Return ``(r - mean) / std`` and a flag set when the group has no spread."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ValueError("a group needs at least two rewards")
    if std_guard <= 0:
        raise ValueError("std_guard must be positive")
    std = r.std(ddof=0 if population else 1)
    if std < std_guard:
        return np.zeros_like(r), True
    return (r - r.mean()) / std, False


def make_group(query_id: int, rollouts: list[Rollout], rewards: Sequence[float], std_guard: float = 1e-4,
               population: bool = True) -> RolloutGroup:
    adv, degenerate = normalize_advantages(rewards, std_guard, population)
    return RolloutGroup(query_id, rollouts, np.asarray(rewards, dtype=np.float64), adv, degenerate)


def kl_k3(logp_ref, logp_theta):
    """Per-token ``r - log r - 1`` with ``r = pi_ref / pi_theta``; works on scalars or arrays."""
    x = np.asarray(logp_ref, dtype=np.float64) - np.asarray(logp_theta, dtype=np.float64)
    if np.any(np.abs(x) > KL_EXPONENT_CLAMP):
        log.warning("k3 log-ratio beyond +/-%s clamped", KL_EXPONENT_CLAMP)
        x = np.clip(x, -KL_EXPONENT_CLAMP, KL_EXPONENT_CLAMP)
    # expm1(x) - x avoids the cancellation in exp(x) - 1 - x near zero
    out = np.expm1(x) - x
    return float(out) if out.ndim == 0 else out


def _k3_tensor(logp_new: Tensor, logp_ref: np.ndarray) -> Tensor:
    x = dm.clip(dm.sub(logp_ref, logp_new), -KL_EXPONENT_CLAMP, KL_EXPONENT_CLAMP)
    return dm.expm1(x) - x


def surrogate_objective(
    logp_new: Tensor,
    logp_old: np.ndarray,
    logp_ref: np.ndarray,
    mask: np.ndarray,
    advantages: np.ndarray,
    epsilon: float,
    gamma: float,
    level: str = "token",
) -> tuple[Tensor, SurrogateTerms]:
    """Per-rollout objective (to be maximized), shape ``[N]``.

    ``level="token"`` clips each token ratio (GRPO); ``level="sequence"``
    clips one length-normalized sequence ratio per rollout (GSPO).
    """
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    lengths = mask.sum(axis=1)
    if np.any(lengths == 0):
        raise ValueError("rollout with zero tokens")
    adv = np.asarray(advantages, dtype=np.float64)
    inv_len = 1.0 / lengths
    k3 = _k3_tensor(logp_new, logp_ref)
    kl_avg = dm.sum_(k3 * mask, axis=1) * inv_len
    if level == "token":
        ratio = dm.exp(dm.sub(logp_new, logp_old))
        clipped = dm.clip(ratio, 1.0 - epsilon, 1.0 + epsilon)
        a = adv[:, None]
        surr = dm.minimum(ratio * a, clipped * a)
        obj = dm.sum_(surr * mask, axis=1) * inv_len - gamma * kl_avg
        ratio_np, clipped_np = ratio.data, clipped.data
    elif level == "sequence":
        log_s = dm.sum_(dm.sub(logp_new, logp_old) * mask, axis=1) * inv_len
        ratio = dm.exp(log_s)
        clipped = dm.clip(ratio, 1.0 - epsilon, 1.0 + epsilon)
        obj = dm.minimum(ratio * adv, clipped * adv) - gamma * kl_avg
        ratio_np = np.broadcast_to(ratio.data[:, None], mask.shape).copy()
        clipped_np = np.broadcast_to(clipped.data[:, None], mask.shape).copy()
    else:
        raise ValueError(f"unknown ratio level {level!r}")
    terms = SurrogateTerms(ratio_np, clipped_np, k3.data, lengths, mask)
    return obj, terms


def group_weights(group_sizes: Sequence[int]) -> np.ndarray:
    """Weights averaging first within each group, then across groups."""
    sizes = list(group_sizes)
    return np.concatenate([np.full(g, 1.0 / (g * len(sizes))) for g in sizes])


def _group_logprobs(group: RolloutGroup, theta, theta_old, ref):
    queries = [r.query for r in group.rollouts]
    comps = [r.tokens for r in group.rollouts]
    if any(len(c) == 0 for c in comps):
        raise ValueError("rollout with zero tokens")
    new, mask = token_logprobs(theta, queries, comps)
    with dm.no_grad():
        old, _ = token_logprobs(theta_old, queries, comps)
        refp, _ = token_logprobs(ref, queries, comps)
    return new, old.data, refp.data, mask


def _group_loss(group, theta, theta_old, ref, epsilon, gamma, level) -> Tensor:
    new, old, refp, mask = _group_logprobs(group, theta, theta_old, ref)
    obj, _ = surrogate_objective(new, old, refp, mask, group.advantages, epsilon, gamma, level)
    return -obj.mean()


def grpo_loss(group: RolloutGroup, theta: PolicyParams, theta_old: PolicyParams, ref: PolicyParams,
              epsilon: float, gamma: float) -> Tensor:
    """Negated GRPO objective of one group (token-level ratios)."""
    return _group_loss(group, theta, theta_old, ref, epsilon, gamma, "token")


def gspo_loss(group: RolloutGroup, theta: PolicyParams, theta_old: PolicyParams, ref: PolicyParams,
              epsilon: float, gamma: float) -> Tensor:
    """Negated GSPO objective of one group (sequence-level ratios)."""
    return _group_loss(group, theta, theta_old, ref, epsilon, gamma, "sequence")
