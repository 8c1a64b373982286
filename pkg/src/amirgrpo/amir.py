"""Implicit preference pairs mined from group rewards, and the contrastive regularizer."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor
from .grpo import RolloutGroup
from .policy import PolicyParams, token_logprobs


@dataclass
class PreferencePair:
    query_id: int
    i: int  # preferred
    j: int  # rejected
    r_i: float
    r_j: float
    z: float | None = None

    @property
    def gap(self) -> float:
        return self.r_i - self.r_j


def mine_pairs(rewards: Sequence[float], delta_r: float, cap: int | None = None,
               query_id: int = 0) -> list[PreferencePair]:
    """All ordered pairs whose reward gap strictly exceeds ``delta_r``.

    With ``cap`` set, keep the ``cap`` largest gaps (ties: lower i, then lower j).
    """
    if delta_r <= 0:
        raise ValueError("delta_r must be positive")
    r = np.asarray(rewards, dtype=np.float64)
    gaps = r[:, None] - r[None, :]
    ii, jj = np.nonzero(gaps > delta_r)
    pairs = [PreferencePair(query_id, int(i), int(j), float(r[i]), float(r[j])) for i, j in zip(ii, jj)]
    if cap is not None and len(pairs) > cap:
        pairs.sort(key=lambda p: (-p.gap, p.i, p.j))
        pairs = sorted(pairs[:cap], key=lambda p: (p.i, p.j))
    return pairs


def sequence_scores(logp: Tensor, mask: np.ndarray, normalize: bool = True) -> Tensor:
    """Sum of token log-probs per row, divided by length when ``normalize``."""
    total = dm.sum_(logp * mask, axis=1)
    if normalize:
        return total * (1.0 / mask.sum(axis=1))
    return total


def pair_logits(score_new: Tensor, score_ref: np.ndarray, preferred: np.ndarray, rejected: np.ndarray,
                beta_dpo: float) -> Tensor:
    """``beta * [(l_new - l_ref)[preferred] - (l_new - l_ref)[rejected]]`` for each pair."""
    if beta_dpo <= 0:
        raise ValueError("beta_dpo must be positive")
    margin = dm.sub(score_new, score_ref)
    return (margin[preferred] - margin[rejected]) * beta_dpo


def preference_objective(z: Tensor | None) -> Tensor:
    """``-mean(log sigmoid(z))``; an exact constant zero when there are no pairs."""
    if z is None or z.size == 0:
        return Tensor(0.0)
    return -dm.log_sigmoid(z).mean()


def _scores(group: RolloutGroup, theta: PolicyParams, ref: PolicyParams, normalize: bool):
    queries = [r.query for r in group.rollouts]
    comps = [r.tokens for r in group.rollouts]
    if any(len(c) == 0 for c in comps):
        raise ValueError("empty completion")
    new, mask = token_logprobs(theta, queries, comps)
    with dm.no_grad():
        refp, _ = token_logprobs(ref, queries, comps)
    return sequence_scores(new, mask, normalize), sequence_scores(refp, mask, normalize).data


def dpo_logit(pair: PreferencePair, group: RolloutGroup, theta: PolicyParams, ref: PolicyParams,
              beta_dpo: float, normalize: bool = True) -> Tensor:
    new, refs = _scores(group, theta, ref, normalize)
    z = pair_logits(new, refs, np.array([pair.i]), np.array([pair.j]), beta_dpo)
    return dm.reshape(z, ())


def pref_loss(pairs: Sequence[PreferencePair], groups: dict[int, RolloutGroup], theta: PolicyParams,
              ref: PolicyParams, beta_dpo: float, normalize: bool = True) -> Tensor:
    """Negated preference objective averaged over every pair in ``pairs``."""
    if not pairs:
        return Tensor(0.0)
    zs = []
    by_query: dict[int, list[PreferencePair]] = {}
    for p in pairs:
        by_query.setdefault(p.query_id, []).append(p)
    for qid, plist in by_query.items():
        new, refs = _scores(groups[qid], theta, ref, normalize)
        pi = np.array([p.i for p in plist])
        pj = np.array([p.j for p in plist])
        zs.append(pair_logits(new, refs, pi, pj, beta_dpo))
    return preference_objective(dm.concat(zs))


def combined_loss(grpo_term: Tensor, pref_term: Tensor, lambda_reg: float) -> Tensor:
    if lambda_reg < 0:
        raise ValueError("lambda_reg must be non-negative")
    return grpo_term + pref_term * lambda_reg


@dataclass
class LambdaController:
    """Multiplicative controller keeping ``lambda * pref / grpo`` inside ``[lo, hi]``."""

    lam: float = 1.0
    lo: float = 0.1
    hi: float = 0.5
    step: float = 1.1
    lam_min: float = 1e-3
    lam_max: float = 10.0
    warmup: int = 20
    smoothing: float = 0.9
    eps_den: float = 1e-8
    calls: int = 0
    ema_grpo: float | None = None
    ema_pref: float | None = None
    history: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.step <= 1:
            raise ValueError("multiplicative step must exceed 1")
        if not 0 <= self.lo <= self.hi:
            raise ValueError("need 0 <= lo <= hi")
        if self.lam_min > self.lam_max:
            raise ValueError("lam_min exceeds lam_max")
        self.lam = min(max(self.lam, self.lam_min), self.lam_max)

    def ratio(self, grpo_mag: float, pref_mag: float) -> float:
        return self.lam * pref_mag / (abs(grpo_mag) + self.eps_den)


def lambda_update(ctl: LambdaController, grpo_mag: float, pref_mag: float) -> LambdaController:
    if grpo_mag < 0 or pref_mag < 0:
        raise ValueError("magnitudes must be non-negative")
    a = ctl.smoothing
    ctl.ema_grpo = grpo_mag if ctl.ema_grpo is None else a * ctl.ema_grpo + (1 - a) * grpo_mag
    ctl.ema_pref = pref_mag if ctl.ema_pref is None else a * ctl.ema_pref + (1 - a) * pref_mag
    raw = ctl.ratio(grpo_mag, pref_mag)
    smoothed = ctl.ratio(ctl.ema_grpo, ctl.ema_pref)
    ctl.calls += 1
    before = ctl.lam
    if ctl.calls > ctl.warmup:
        if smoothed < ctl.lo:
            ctl.lam = min(ctl.lam * ctl.step, ctl.lam_max)
        elif smoothed > ctl.hi:
            ctl.lam = max(ctl.lam / ctl.step, ctl.lam_min)
    ctl.history.append({"raw_ratio": raw, "smoothed_ratio": smoothed, "lam_before": before, "lam": ctl.lam})
    return ctl


def steps_to_band(ratio: float, lo: float, hi: float, step: float) -> int:
    """Updates a multiplicative controller needs to bring ``ratio`` into ``[lo, hi]``."""
    if ratio <= 0:
        raise ValueError("ratio must be positive")
    if ratio < lo:
        return math.ceil(math.log(lo / ratio, step) - 1e-12)
    if ratio > hi:
        return math.ceil(math.log(ratio / hi, step) - 1e-12)
    return 0


def write_pairs_jsonl(pairs: Iterable[PreferencePair], path: str | Path) -> None:
    with open(path, "w") as fh:
        for p in pairs:
            row = {"query_id": p.query_id, "i": p.i, "j": p.j, "r_i": p.r_i, "r_j": p.r_j,
                   "gap": p.gap, "z": p.z}
            fh.write(json.dumps(row) + "\n")
