"""Training loop: rollouts, rewards, advantages, pair mining, loss, AdamW, lambda control.

Randomness flows from ``TrainConfig.seed`` only.  Every consumer draws from
its own stream ``default_rng([seed, STREAM, *counters])`` so results do not
depend on evaluation order or on the number of worker threads.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diffmath as dm
from .amir import LambdaController, lambda_update, mine_pairs, pair_logits, preference_objective, sequence_scores
from .grpo import group_weights, make_group, surrogate_objective
from .policy import (
    PolicyParams,
    Rollout,
    Vocabulary,
    init_params,
    sample_batch,
    save_checkpoint,
    snapshot,
    token_logprobs,
    trainable,
)
from .tasks import TaskInstance, annotate, generate_instances, score

log = logging.getLogger(__name__)

ALGORITHMS = ("grpo", "amir-grpo", "gspo", "amir-gspo")

# stream ids for the seed counter scheme
STREAM_INIT = 1
STREAM_SFT = 2
STREAM_BATCH = 3
STREAM_ROLLOUT = 4
STREAM_EVAL = 5

CHUNK_QUERIES = 4  # fixed work-unit size; keeps batching independent of thread count

METRICS_SCHEMA = "metrics-v1"
METRIC_COLUMNS = (
    "schema",
    "step",
    "mean_reward",
    "mean_correct",
    "adv_mean",
    "adv_std",
    "grpo_loss",
    "pref_loss",
    "lambda_reg",
    "contribution_ratio",
    "smoothed_ratio",
    "grpo_mag",
    "pref_mag",
    "mean_kl",
    "clip_fraction",
    "pairs_mined",
    "degenerate_groups",
    "mean_len_correct",
    "mean_len_incorrect",
    "pass1_eval",
)


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    algorithm: str = "amir-grpo"
    # tasks
    family: str = "addition-chain"
    difficulty: int = 2
    n_train_tasks: int = 600
    n_eval_tasks: int = 100
    # objective
    group_size: int = 8
    batch_queries: int = 16
    epsilon: float = 0.2
    gamma: float = 0.04
    beta_dpo: float = 0.5
    delta_r: float = 0.0  # 0 -> 10% of the maximum total reward
    pair_cap: int = 0  # 0 -> keep every mined pair
    logprob_norm: str = "length"  # "length" | "sum"
    dpo_reference: str = "shared"  # "shared" | "behavior"
    std_guard: float = 1e-4
    population_std: bool = True
    w_corr: float = 2.0
    w_fmt: float = 0.9
    w_calib: float = 1.0
    # lambda controller
    lambda_init: float = 1.0
    lambda_lo: float = 0.1
    lambda_hi: float = 0.5
    lambda_step: float = 1.1
    lambda_min: float = 1e-3
    lambda_max: float = 10.0
    lambda_warmup: int = 20
    lambda_smoothing: float = 0.9
    ratio_mode: str = "grad_norm"  # "grad_norm" | "loss"
    # optimizer
    lr: float = 5e-4
    weight_decay: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # sampling
    temperature: float = 1.0
    top_p: float = 1.0
    max_len: int = 64
    # schedule
    total_steps: int = 400
    seed: int = 0
    ref_refresh_interval: int = 0
    inner_epochs: int = 1
    # policy
    embed_dim: int = 64
    hidden_dim: int = 128
    n_layers: int = 2
    # supervised warm start producing the base policy
    sft_steps: int = 1000
    sft_batch: int = 32
    sft_lr: float = 3e-3
    sft_accuracy: float = 0.3
    # evaluation and checkpoints
    eval_every: int = 50
    eval_n: int = 8
    eval_temperature: float = 0.6
    eval_top_p: float = 1.0
    checkpoint_every: int = 0

    def validate(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}")
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.delta_r < 0:
            raise ValueError("delta_r must be non-negative (0 selects the default)")
        positive = ("lr", "beta_dpo", "temperature", "std_guard", "batch_queries", "max_len", "inner_epochs",
                    "eval_n", "sft_lr", "sft_batch", "lambda_step")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.top_p <= 1 or not 0 < self.eval_top_p <= 1:
            raise ValueError("top_p must lie in (0, 1]")
        if self.logprob_norm not in ("length", "sum"):
            raise ValueError("logprob_norm must be 'length' or 'sum'")
        if self.dpo_reference not in ("shared", "behavior"):
            raise ValueError("dpo_reference must be 'shared' or 'behavior'")
        if self.ratio_mode not in ("grad_norm", "loss"):
            raise ValueError("ratio_mode must be 'grad_norm' or 'loss'")
        if min(self.w_corr, self.w_fmt, self.w_calib) < 0:
            raise ValueError("reward weights must be non-negative")
        if self.lambda_min > self.lambda_max:
            raise ValueError("lambda_min exceeds lambda_max")

    @property
    def weights(self) -> tuple[float, float, float]:
        return (self.w_corr, self.w_fmt, self.w_calib)

    @property
    def margin(self) -> float:
        return self.delta_r if self.delta_r > 0 else 0.1 * sum(self.weights)

    @property
    def uses_pairs(self) -> bool:
        return self.algorithm.startswith("amir")

    @property
    def ratio_level(self) -> str:
        return "sequence" if self.algorithm.endswith("gspo") else "token"


# ---------------------------------------------------------------------------
# config files: flat "key = value" text


def _coerce(name: str, raw: str, kind) -> object:
    raw = raw.strip()
    if kind is bool or kind == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    try:
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
    except ValueError:
        raise ValueError(f"{name}: cannot parse {raw!r}") from None
    return raw


def _field_types() -> dict[str, object]:
    return {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def apply_overrides(cfg: TrainConfig, pairs: dict[str, str]) -> TrainConfig:
    types = _field_types()
    unknown = sorted(set(pairs) - set(types))
    if unknown:
        raise ValueError(f"unknown config key(s): {', '.join(unknown)}")
    updates = {k: _coerce(k, v, types[k]) for k, v in pairs.items()}
    out = dataclasses.replace(cfg, **updates)
    out.validate()
    return out


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return apply_overrides(base or TrainConfig(), pairs)


def load_config(path: str | Path) -> TrainConfig:
    return parse_config_text(Path(path).read_text())


def config_to_text(cfg: TrainConfig) -> str:
    lines = []
    for f in dataclasses.fields(TrainConfig):
        value = getattr(cfg, f.name)
        lines.append(f"{f.name} = {str(value).lower() if isinstance(value, bool) else value}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricRecord:
    step: int
    mean_reward: float | None = None
    mean_correct: float | None = None
    adv_mean: float | None = None
    adv_std: float | None = None
    grpo_loss: float | None = None
    pref_loss: float | None = None
    lambda_reg: float | None = None
    contribution_ratio: float | None = None
    smoothed_ratio: float | None = None
    grpo_mag: float | None = None
    pref_mag: float | None = None
    mean_kl: float | None = None
    clip_fraction: float | None = None
    pairs_mined: int | None = None
    degenerate_groups: int | None = None
    mean_len_correct: float | None = None
    mean_len_incorrect: float | None = None
    pass1_eval: float | None = None

    def row(self) -> list[str]:
        out = [METRICS_SCHEMA]
        for name in METRIC_COLUMNS[1:]:
            v = getattr(self, name)
            out.append("" if v is None else repr(v) if isinstance(v, float) else str(v))
        return out


class CsvMetricSink:
    """Writes one CSV row per record; the header is written on open."""

    def __init__(self, path: str | Path):
        self._fh = open(path, "w", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(METRIC_COLUMNS)

    def __call__(self, record: MetricRecord) -> None:
        self._writer.writerow(record.row())
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def read_metrics(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# tasks and warm start


def prepare_tasks(cfg: TrainConfig) -> tuple[list[TaskInstance], list[TaskInstance]]:
    """Disjoint train and held-out slices drawn from one deterministic pool."""
    pool = generate_instances(cfg.family, cfg.n_train_tasks + cfg.n_eval_tasks, cfg.difficulty, cfg.seed)
    return pool[: cfg.n_train_tasks], pool[cfg.n_train_tasks :]


def _corrupt(answer: str, rng: np.random.Generator) -> str:
    if answer in ("even", "odd"):
        return "odd" if answer == "even" else "even"
    value = int(answer)
    candidates = [value + d for d in (-2, -1, 1, 2) if value + d >= 0]
    return str(candidates[int(rng.integers(len(candidates)))])


def demonstration(task: TaskInstance, vocab: Vocabulary, rng: np.random.Generator, accuracy: float) -> list[int]:
    """A well-formed completion whose answer is right with probability ``accuracy``."""
    answer = task.answer if rng.random() < accuracy else _corrupt(task.answer, rng)
    conf = int(rng.integers(0, 100))
    words = ["<a>", *vocab.tokenize(answer), "</a>", "<c>", "0", ".", *f"{conf:02d}", "</c>", "<eos>"]
    return vocab.encode(words)


def warm_start(cfg: TrainConfig, tasks: Sequence[TaskInstance], vocab: Vocabulary | None = None) -> PolicyParams:
    """Random init followed by ``sft_steps`` of supervised training on noisy demonstrations."""
    vocab = vocab or Vocabulary()
    params = init_params(vocab, np.random.default_rng([cfg.seed, STREAM_INIT]), cfg.embed_dim, cfg.hidden_dim,
                         cfg.n_layers)
    opt = dm.OptimizerState(lr=cfg.sft_lr)
    plist = params.parameters()
    for step in range(cfg.sft_steps):
        rng = np.random.default_rng([cfg.seed, STREAM_SFT, step])
        idx = rng.integers(0, len(tasks), size=cfg.sft_batch)
        queries = [tasks[i].query_ids(vocab) for i in idx]
        comps = [demonstration(tasks[i], vocab, rng, cfg.sft_accuracy) for i in idx]
        logp, mask = token_logprobs(params, queries, comps)
        loss = -dm.sum_(logp * mask) * (1.0 / mask.sum())
        dm.backward(loss)
        dm.adamw_step(plist, opt)
    return params


# ---------------------------------------------------------------------------
# rollouts and evaluation


def _sample_units(params, units, temperature, top_p, max_len, threads) -> list[list[Rollout]]:
    """``units`` is a list of (queries, rngs); returns rollouts per unit, order preserved."""

    def run(unit):
        queries, rngs = unit
        return sample_batch(params, queries, temperature, top_p, max_len, rngs)

    if threads <= 1:
        return [run(u) for u in units]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(run, units))


def evaluate_detailed(
    params: PolicyParams,
    tasks: Sequence[TaskInstance],
    n: int,
    temperature: float = 0.6,
    top_p: float = 1.0,
    seed: int = 0,
    round_id: int = 0,
    max_len: int = 64,
    threads: int = 1,
    weights: Sequence[float] = (2.0, 0.9, 1.0),
) -> tuple[list[int], list[list[tuple[Rollout, object]]]]:
    """Sample ``n`` completions per task; return correct counts and scored rollouts."""
    if n < 1:
        raise ValueError("n must be at least 1")
    vocab = params.vocab
    frozen = snapshot(params)
    units = []
    for start in range(0, len(tasks), CHUNK_QUERIES):
        queries, rngs = [], []
        for t in range(start, min(start + CHUNK_QUERIES, len(tasks))):
            q = tasks[t].query_ids(vocab)
            for s in range(n):
                queries.append(q)
                rngs.append(np.random.default_rng([seed, STREAM_EVAL, round_id, t, s]))
        units.append((queries, rngs))
    flat = [r for unit in _sample_units(frozen, units, temperature, top_p, max_len, threads) for r in unit]
    counts, scored = [], []
    for t, task in enumerate(tasks):
        group = []
        for r in flat[t * n : (t + 1) * n]:
            annotate(r, vocab)
            group.append((r, score(r, task.answer, vocab, weights)))
        scored.append(group)
        counts.append(sum(b.corr for _, b in group))
    return counts, scored


def evaluate(params: PolicyParams, tasks: Sequence[TaskInstance], n: int, temperature: float = 0.6,
             top_p: float = 1.0, **kwargs) -> list[int]:
    counts, _ = evaluate_detailed(params, tasks, n, temperature, top_p, **kwargs)
    return counts


def rollout_log_rows(tasks: Sequence[TaskInstance], scored, vocab: Vocabulary) -> list[dict]:
    rows = []
    for qid, group in enumerate(scored):
        for sid, (r, b) in enumerate(group):
            rows.append({
                "query_id": qid,
                "sample_id": sid,
                "tokens": vocab.decode(r.tokens),
                "logp_old": r.logp_old,
                "reward": {"corr": b.corr, "fmt": b.fmt, "calib": b.calib, "total": b.total},
                "answer": r.answer,
                "confidence": r.confidence,
                "correct": bool(b.corr),
            })
    return rows


def write_jsonl(rows: Sequence[dict], path: str | Path) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    params: PolicyParams
    base: PolicyParams
    records: list[MetricRecord]
    controller: LambdaController | None
    eval_tasks: list[TaskInstance] = field(default_factory=list)


def params_digest(params: PolicyParams) -> str:
    h = hashlib.sha256()
    for t in params.parameters():
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


def _grads(params: list[dm.Tensor]) -> list[np.ndarray]:
    return [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]


def _norm(grads: list[np.ndarray]) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads))


def train(
    cfg: TrainConfig,
    train_tasks: Sequence[TaskInstance] | None = None,
    eval_tasks: Sequence[TaskInstance] | None = None,
    sink: Callable[[MetricRecord], None] | None = None,
    out_dir: str | Path | None = None,
    threads: int = 1,
    base: PolicyParams | None = None,
) -> TrainResult:
    cfg.validate()
    if train_tasks is None:
        train_tasks, default_eval = prepare_tasks(cfg)
        eval_tasks = default_eval if eval_tasks is None else eval_tasks
    train_tasks = list(train_tasks)
    eval_tasks = list(eval_tasks or [])
    if not train_tasks:
        raise ValueError("no training tasks")
    if len(train_tasks) < cfg.batch_queries:
        raise ValueError("fewer training tasks than batch_queries")
    out = Path(out_dir) if out_dir is not None else None

    vocab = base.vocab if base is not None else Vocabulary()
    if base is None:
        base = warm_start(cfg, train_tasks, vocab)
    base = snapshot(base)
    theta = trainable(base)
    plist = theta.parameters()
    ref = snapshot(base)
    ref_digest = params_digest(ref)
    opt = dm.OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2,
                            eps=cfg.adam_eps)
    ctl = None
    if cfg.uses_pairs:
        ctl = LambdaController(lam=cfg.lambda_init, lo=cfg.lambda_lo, hi=cfg.lambda_hi, step=cfg.lambda_step,
                               lam_min=cfg.lambda_min, lam_max=cfg.lambda_max, warmup=cfg.lambda_warmup,
                               smoothing=cfg.lambda_smoothing)
    records: list[MetricRecord] = []

    def emit(rec: MetricRecord) -> None:
        records.append(rec)
        if sink is not None:
            sink(rec)

    def eval_pass1(round_id: int) -> float | None:
        if not eval_tasks:
            return None
        counts = evaluate(theta, eval_tasks, cfg.eval_n, cfg.eval_temperature, cfg.eval_top_p, seed=cfg.seed,
                          round_id=round_id, max_len=cfg.max_len, threads=threads, weights=cfg.weights)
        return float(np.mean(counts) / cfg.eval_n)

    emit(MetricRecord(step=0, pass1_eval=eval_pass1(0)))
    G = cfg.group_size
    for step in range(1, cfg.total_steps + 1):
        if params_digest(ref) != ref_digest:
            raise TrainingAborted("reference snapshot changed between refreshes")
        batch_rng = np.random.default_rng([cfg.seed, STREAM_BATCH, step])
        chosen = batch_rng.choice(len(train_tasks), size=cfg.batch_queries, replace=False)
        behavior = snapshot(theta)

        units = []
        for start in range(0, len(chosen), CHUNK_QUERIES):
            queries, rngs = [], []
            for slot in range(start, min(start + CHUNK_QUERIES, len(chosen))):
                q = train_tasks[chosen[slot]].query_ids(vocab)
                for s in range(G):
                    queries.append(q)
                    rngs.append(np.random.default_rng([cfg.seed, STREAM_ROLLOUT, step, slot, s]))
            units.append((queries, rngs))
        flat = [r for unit in _sample_units(behavior, units, cfg.temperature, cfg.top_p, cfg.max_len, threads)
                for r in unit]

        groups, pairs, breakdowns = [], [], []
        for slot, ti in enumerate(chosen):
            rollouts = flat[slot * G : (slot + 1) * G]
            parts = [score(annotate(r, vocab), train_tasks[ti].answer, vocab, cfg.weights) for r in rollouts]
            breakdowns.extend(parts)
            group = make_group(slot, rollouts, [b.total for b in parts], cfg.std_guard, cfg.population_std)
            groups.append(group)
            if cfg.uses_pairs:
                pairs.extend(mine_pairs(group.rewards, cfg.margin, cfg.pair_cap or None, query_id=slot))

        queries = [r.query for r in flat]
        comps = [r.tokens for r in flat]
        adv = np.concatenate([g.advantages for g in groups])
        weights = group_weights([len(g) for g in groups])
        with dm.no_grad():
            old_lp, _ = token_logprobs(behavior, queries, comps)
            ref_lp, _ = token_logprobs(ref, queries, comps)
        old_lp, ref_lp = old_lp.data, ref_lp.data
        normalize = cfg.logprob_norm == "length"
        pref_i = np.array([p.query_id * G + p.i for p in pairs], dtype=np.int64)
        pref_j = np.array([p.query_id * G + p.j for p in pairs], dtype=np.int64)
        lam = ctl.lam if ctl is not None else 0.0

        for _epoch in range(cfg.inner_epochs):
            new_lp, mask = token_logprobs(theta, queries, comps)
            obj, terms = surrogate_objective(new_lp, old_lp, ref_lp, mask, adv, cfg.epsilon, cfg.gamma,
                                             cfg.ratio_level)
            if np.any(terms.kl < 0):
                raise TrainingAborted("negative k3 estimate")
            grpo_term = -dm.sum_(obj * weights)
            pref_term = dm.Tensor(0.0)
            if cfg.uses_pairs and len(pairs):
                score_new = sequence_scores(new_lp, mask, normalize)
                ref_scores = ref_lp if cfg.dpo_reference == "shared" else old_lp
                score_ref = (ref_scores * mask).sum(axis=1)
                if normalize:
                    score_ref = score_ref / mask.sum(axis=1)
                z = pair_logits(score_new, score_ref, pref_i, pref_j, cfg.beta_dpo)
                pref_term = preference_objective(z)
            if not (math.isfinite(grpo_term.item()) and math.isfinite(pref_term.item())):
                _abort_dump(out, step, groups, vocab, grpo_term.item(), pref_term.item())

            dm.backward(grpo_term)
            g_grpo = _grads(plist)
            grpo_mag = _norm(g_grpo)
            pref_mag = 0.0
            if cfg.uses_pairs:
                dm.zero_grad(plist)
                if pref_term.requires_grad:
                    dm.backward(pref_term)
                g_pref = _grads(plist)
                pref_mag = _norm(g_pref)
                for p, a, b in zip(plist, g_grpo, g_pref):
                    p.grad = a + lam * b
            if not all(np.isfinite(p.grad).all() for p in plist):
                _abort_dump(out, step, groups, vocab, grpo_term.item(), pref_term.item())
            dm.adamw_step(plist, opt)

        rec = MetricRecord(step=step)
        if cfg.ratio_mode == "loss":
            grpo_mag, pref_mag = abs(grpo_term.item()), abs(pref_term.item())
        rec.grpo_mag, rec.pref_mag = grpo_mag, pref_mag
        if ctl is not None:
            rec.lambda_reg = lam
            lambda_update(ctl, grpo_mag, pref_mag)
            rec.contribution_ratio = ctl.history[-1]["raw_ratio"]
            rec.smoothed_ratio = ctl.history[-1]["smoothed_ratio"]
        rewards = np.array([b.total for b in breakdowns])
        correct = np.array([b.corr for b in breakdowns], dtype=bool)
        lengths = np.array([len(r) for r in flat], dtype=np.float64)
        rec.mean_reward = float(rewards.mean())
        rec.mean_correct = float(correct.mean())
        rec.adv_mean = float(adv.mean())
        rec.adv_std = float(adv.std())
        rec.grpo_loss = grpo_term.item()
        rec.pref_loss = pref_term.item() if cfg.uses_pairs else None
        rec.mean_kl = terms.mean_kl
        rec.clip_fraction = terms.clip_fraction
        rec.pairs_mined = len(pairs)
        rec.degenerate_groups = sum(g.degenerate for g in groups)
        rec.mean_len_correct = float(lengths[correct].mean()) if correct.any() else None
        rec.mean_len_incorrect = float(lengths[~correct].mean()) if (~correct).any() else None
        if cfg.eval_every and (step % cfg.eval_every == 0 or step == cfg.total_steps):
            rec.pass1_eval = eval_pass1(step)
        emit(rec)

        if cfg.ref_refresh_interval and step % cfg.ref_refresh_interval == 0:
            ref = snapshot(theta)
            ref_digest = params_digest(ref)
        if out is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            (out / "checkpoints").mkdir(parents=True, exist_ok=True)
            save_checkpoint(theta, out / "checkpoints" / f"step_{step:06d}.json")

    return TrainResult(snapshot(theta), base, records, ctl, eval_tasks)


def _abort_dump(out: Path | None, step: int, groups, vocab: Vocabulary, grpo_value: float, pref_value: float):
    bad = None
    for g in groups:
        if not np.all(np.isfinite(g.rewards)):
            bad = g
            break
    bad = bad or groups[0]
    dump = {
        "step": step,
        "grpo_loss": repr(grpo_value),
        "pref_loss": repr(pref_value),
        "query_id": bad.query_id,
        "rewards": bad.rewards.tolist(),
        "advantages": bad.advantages.tolist(),
        "completions": [vocab.decode(r.tokens) for r in bad.rollouts],
    }
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "abort_dump.json").write_text(json.dumps(dump, indent=2) + "\n")
    raise TrainingAborted(f"non-finite loss at step {step}: {json.dumps(dump)[:400]}")
