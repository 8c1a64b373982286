"""Command-line entry point: ``amirgrpo <verb> [options]``.

Exit codes: 0 success, 2 bad configuration or arguments, 3 runtime abort,
4 file I/O failure.  Configuration problems are detected before any output
file is created.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from collections import defaultdict
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffmath as dm
from .amir import mine_pairs, pair_logits, sequence_scores, write_pairs_jsonl
from .evalkit import (
    DEFAULT_KS,
    FailurePoint,
    coverage_table,
    length_stats,
    locality_density,
    pass_at_k,
    preference_margin,
)
from .policy import PolicyParams, Rollout, load_checkpoint, save_checkpoint, token_logprobs
from .tasks import TaskInstance, dump_instances, load_instances
from .trainer import (
    CsvMetricSink,
    TrainConfig,
    TrainingAborted,
    apply_overrides,
    config_to_text,
    evaluate_detailed,
    load_config,
    prepare_tasks,
    rollout_log_rows,
    train,
    warm_start,
    write_jsonl,
)

log = logging.getLogger("amirgrpo")

EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_IO = 4


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _config_help() -> str:
    lines = ["configuration fields (override with --set key=value):"]
    for f in dataclasses.fields(TrainConfig):
        lines.append(f"  {f.name:<22} default {f.default!r}")
    return "\n".join(lines)


def _parse_sets(items: Sequence[str]) -> dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_config(args) -> TrainConfig:
    try:
        cfg = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
        return apply_overrides(cfg, _parse_sets(getattr(args, "set", None)))
    except (ValueError, ConfigError) as exc:
        raise ConfigError(str(exc)) from None
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None


def _require(path: str | None, what: str) -> Path:
    if not path:
        raise ConfigError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _read_jsonl(path: Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _ks_for(n: int, ks: Sequence[int]) -> list[int]:
    return [k for k in ks if k <= n]


def counts_from_log(rows: list[dict]) -> dict[int, tuple[int, int]]:
    """Per query: (samples, correct samples)."""
    n, c = defaultdict(int), defaultdict(int)
    for row in rows:
        n[row["query_id"]] += 1
        c[row["query_id"]] += int(bool(row["correct"]))
    return {q: (n[q], c[q]) for q in sorted(n)}


def pass_at_k_rows(counts: Sequence[tuple[int, int]], ks: Sequence[int]) -> list[tuple[int, float]]:
    n_min = min(n for n, _ in counts)
    return [(k, pass_at_k(counts, k)) for k in _ks_for(n_min, ks)]


def rollouts_from_log(rows: list[dict], tasks: Sequence[TaskInstance], vocab) -> list[tuple[int, Rollout, dict]]:
    out = []
    for row in rows:
        qid = row["query_id"]
        if not 0 <= qid < len(tasks):
            raise ConfigError(f"query_id {qid} has no task in the task file")
        words = row["tokens"]
        r = Rollout(tasks[qid].query_ids(vocab), vocab.encode(words), list(row["logp_old"]),
                    bool(words) and words[-1] == "<eos>", row.get("answer"), row.get("confidence"))
        out.append((qid, r, row))
    return out


def _eval_tasks(args, cfg: TrainConfig) -> list[TaskInstance]:
    if getattr(args, "tasks", None):
        return load_instances(_require(args.tasks, "task file"))
    return prepare_tasks(cfg)[1]


def _eval_artifacts(params: PolicyParams, tasks, cfg: TrainConfig, n: int, out: Path, threads: int,
                    round_id: int = 10**6) -> list[tuple[int, float]]:
    counts, scored = evaluate_detailed(params, tasks, n, cfg.eval_temperature, cfg.eval_top_p, seed=cfg.seed,
                                       round_id=round_id, max_len=cfg.max_len, threads=threads, weights=cfg.weights)
    write_jsonl(rollout_log_rows(tasks, scored, params.vocab), out / "rollouts.jsonl")
    table = pass_at_k_rows([(n, c) for c in counts], DEFAULT_KS)
    _write_csv(out / "pass_at_k.csv", ("k", "pass_at_k"), table)
    return table


# ---------------------------------------------------------------------------
# verbs


def cmd_gen_tasks(args) -> int:
    cfg = build_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_tasks, eval_tasks = prepare_tasks(cfg)
    dump_instances(train_tasks, out / "train_tasks.jsonl")
    dump_instances(eval_tasks, out / "eval_tasks.jsonl")
    print(f"wrote {len(train_tasks)} train and {len(eval_tasks)} eval tasks to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = build_config(args)
    train_tasks = eval_tasks = None
    if args.tasks:
        src = _require(args.tasks, "task directory")
        train_tasks = load_instances(src / "train_tasks.jsonl")
        eval_tasks = load_instances(src / "eval_tasks.jsonl")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config_to_text(cfg))
    sink = CsvMetricSink(out / "metrics.csv")
    try:
        result = train(cfg, train_tasks, eval_tasks, sink=sink, out_dir=out, threads=args.threads)
    finally:
        sink.close()
    save_checkpoint(result.base, out / "base.json")
    save_checkpoint(result.params, out / "final.json")
    last = result.records[-1]
    print(f"trained {cfg.algorithm} for {cfg.total_steps} steps; final pass@1 {last.pass1_eval}")
    return 0


def cmd_eval(args) -> int:
    cfg = build_config(args)
    params = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    tasks = _eval_tasks(args, cfg)
    n = args.n or cfg.eval_n
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, v in _eval_artifacts(params, tasks, cfg, n, out, args.threads):
        print(f"pass@{k} {v:.4f}")
    return 0


def cmd_pass_at_k(args) -> int:
    rows = _read_jsonl(_require(args.rollouts, "rollout log"))
    if not rows:
        raise ConfigError("rollout log is empty")
    counts = list(counts_from_log(rows).values())
    ks = [int(k) for k in args.ks.split(",")]
    table = pass_at_k_rows(counts, ks)
    _write_csv(Path(args.out), ("k", "pass_at_k"), table)
    return 0


def cmd_mine_pairs(args) -> int:
    cfg = build_config(args)
    rows = _read_jsonl(_require(args.rollouts, "rollout log"))
    by_query: dict[int, list[dict]] = defaultdict(list)
    for row in rows:
        by_query[row["query_id"]].append(row)
    pairs = []
    for qid in sorted(by_query):
        group = sorted(by_query[qid], key=lambda r: r["sample_id"])
        rewards = [float(r["reward"]["total"]) for r in group]
        pairs.extend(mine_pairs(rewards, cfg.margin, cfg.pair_cap or None, query_id=qid))
    if args.policy or args.reference:
        _fill_logits(args, cfg, by_query, pairs)
    write_pairs_jsonl(pairs, Path(args.out))
    print(f"mined {len(pairs)} pairs from {len(by_query)} groups")
    return 0


def _fill_logits(args, cfg, by_query, pairs) -> None:
    theta = load_checkpoint(_require(args.policy, "policy checkpoint"))
    ref = load_checkpoint(_require(args.reference, "reference checkpoint"))
    tasks = load_instances(_require(args.tasks, "task file"))
    normalize = cfg.logprob_norm == "length"
    by_pair: dict[int, list] = defaultdict(list)
    for p in pairs:
        by_pair[p.query_id].append(p)
    with dm.no_grad():
        for qid, plist in by_pair.items():
            group = sorted(by_query[qid], key=lambda r: r["sample_id"])
            rs = [r for _, r, _ in rollouts_from_log(group, tasks, theta.vocab)]
            queries, comps = [r.query for r in rs], [r.tokens for r in rs]
            new, mask = token_logprobs(theta, queries, comps)
            old, _ = token_logprobs(ref, queries, comps)
            z = pair_logits(sequence_scores(new, mask, normalize), sequence_scores(old, mask, normalize).data,
                            np.array([p.i for p in plist]), np.array([p.j for p in plist]), cfg.beta_dpo)
            for p, v in zip(plist, z.data):
                p.z = float(v)


def cmd_analyze_margin(args) -> int:
    params = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    tasks = load_instances(_require(args.tasks, "task file"))
    rows = _read_jsonl(_require(args.rollouts, "rollout log"))
    items = rollouts_from_log(rows, tasks, params.vocab)
    rollouts = [r for _, r, _ in items]
    flags = [bool(row["correct"]) for _, _, row in items]
    correct = [r for r, ok in zip(rollouts, flags) if ok]
    incorrect = [r for r, ok in zip(rollouts, flags) if not ok]
    margin = preference_margin(params, correct, incorrect)
    lens = length_stats(rollouts, flags)
    _write_csv(
        Path(args.out),
        ("margin", "n_correct", "n_incorrect", "mean_len_correct", "mean_len_incorrect"),
        [("" if margin is None else margin, len(correct), len(incorrect),
          "" if lens["mean_len_correct"] is None else lens["mean_len_correct"],
          "" if lens["mean_len_incorrect"] is None else lens["mean_len_incorrect"])],
    )
    print("margin", "absent" if margin is None else f"{margin:.6f}")
    return 0


def cmd_analyze_coverage(args) -> int:
    logs = [_read_jsonl(_require(p, name)) for p, name in
            ((args.base, "base log"), (args.grpo, "grpo log"), (args.amir, "amir log"))]
    counts = [{q: c for q, (_, c) in counts_from_log(rows).items()} for rows in logs]
    n = args.n or max(n for n, _ in counts_from_log(logs[0]).values())
    try:
        cells = coverage_table(*counts, n=n, denominator=args.denominator)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    _write_csv(Path(args.out), ("base", "grpo", "amir", "count", "fraction"),
               [(int(c.base), int(c.grpo), int(c.amir), c.count, c.fraction) for c in cells])
    return 0


def cmd_analyze_locality(args) -> int:
    rows = _read_jsonl(_require(args.points, "failure-point file"))
    try:
        points = [FailurePoint(int(r["step"]), int(r["total_steps"]), r.get("label")) for r in rows]
        grid, dens = locality_density(points, args.bandwidth)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad failure points: {exc}") from None
    _write_csv(Path(args.out), ("position", "density"), [(float(g), float(d)) for g, d in zip(grid, dens)])
    return 0


def cmd_sweep_beta(args) -> int:
    cfg = build_config(args)
    try:
        betas = [float(b) for b in args.betas.split(",")]
    except ValueError:
        raise ConfigError(f"bad --betas {args.betas!r}") from None
    if any(b <= 0 for b in betas):
        raise ConfigError("beta values must be positive")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_tasks, eval_tasks = prepare_tasks(cfg)
    base = warm_start(cfg, train_tasks)
    n = args.n or cfg.eval_n

    def run(name: str, run_cfg: TrainConfig) -> dict[int, float]:
        run_dir = out / name
        run_dir.mkdir(exist_ok=True)
        (run_dir / "config.txt").write_text(config_to_text(run_cfg))
        sink = CsvMetricSink(run_dir / "metrics.csv")
        try:
            res = train(run_cfg, train_tasks, eval_tasks, sink=sink, out_dir=run_dir, threads=args.threads, base=base)
        finally:
            sink.close()
        return dict(_eval_artifacts(res.params, eval_tasks, run_cfg, n, run_dir, args.threads))

    baseline = run("grpo", dataclasses.replace(cfg, algorithm="grpo"))
    rows = []
    for beta in betas:
        table = run(f"beta_{beta!r}", dataclasses.replace(cfg, algorithm="amir-grpo", beta_dpo=beta))
        for k, v in table.items():
            rows.append((beta, k, v, baseline[k], v - baseline[k]))
    _write_csv(out / "delta_pass_at_k.csv", ("beta_dpo", "k", "pass_at_k", "grpo_pass_at_k", "delta"), rows)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="amirgrpo", description="GRPO / AMIR-GRPO toy experiments.",
                                     epilog=_config_help(), formatter_class=fmt)
    parser.add_argument("--threads", type=int, default=1, help="rollout worker threads (1 = reference mode)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    def add(name, func, help_text, config=True):
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=_config_help() if config else None,
                           formatter_class=fmt)
        if config:
            p.add_argument("--config", help="key = value config file")
            p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config field")
        p.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="rollout worker threads")
        p.set_defaults(func=func)
        return p

    p = add("gen-tasks", cmd_gen_tasks, "write train/eval task splits as JSONL")
    p.add_argument("--out", required=True, help="output directory")

    p = add("train", cmd_train, "train a policy; writes metrics.csv, base.json, final.json")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--tasks", help="directory with train_tasks.jsonl and eval_tasks.jsonl")

    p = add("eval", cmd_eval, "sample n completions per task; writes rollouts.jsonl and pass_at_k.csv")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tasks", help="task JSONL (default: eval split of the config)")
    p.add_argument("--n", type=int, default=0, help="samples per task (default eval_n)")
    p.add_argument("--out", required=True, help="output directory")

    p = add("pass-at-k", cmd_pass_at_k, "Pass@k table from a rollout log", config=False)
    p.add_argument("--rollouts", required=True)
    p.add_argument("--ks", default=",".join(map(str, DEFAULT_KS)))
    p.add_argument("--out", required=True, help="CSV path")

    p = add("mine-pairs", cmd_mine_pairs, "mine preference pairs from a rollout log (margin from delta_r)")
    p.add_argument("--rollouts", required=True)
    p.add_argument("--out", required=True, help="JSONL path")
    p.add_argument("--policy", help="checkpoint for filling z (needs --reference and --tasks)")
    p.add_argument("--reference", help="reference checkpoint for z")
    p.add_argument("--tasks", help="task JSONL matching the log's query ids")

    p = add("analyze-margin", cmd_analyze_margin, "preference margin and length split of a rollout log",
            config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rollouts", required=True)
    p.add_argument("--tasks", required=True)
    p.add_argument("--out", required=True, help="CSV path")

    p = add("analyze-coverage", cmd_analyze_coverage, "solvable-set coverage table from three rollout logs",
            config=False)
    p.add_argument("--base", required=True)
    p.add_argument("--grpo", required=True)
    p.add_argument("--amir", required=True)
    p.add_argument("--n", type=int, default=0, help="samples per question (default: inferred)")
    p.add_argument("--denominator", choices=("all", "solvable"), default="all")
    p.add_argument("--out", required=True, help="CSV path")

    p = add("analyze-locality", cmd_analyze_locality, "failure-locality density from JSONL failure points",
            config=False)
    p.add_argument("--points", required=True, help="JSONL rows {step, total_steps, label?}")
    p.add_argument("--bandwidth", type=float, default=0.07)
    p.add_argument("--out", required=True, help="CSV path")

    p = add("sweep-beta", cmd_sweep_beta, "train amir-grpo per beta_dpo and report Pass@k deltas vs grpo")
    p.add_argument("--betas", default="0.1,0.5,1.0,2.0")
    p.add_argument("--n", type=int, default=0, help="eval samples per task (default eval_n)")
    p.add_argument("--out", required=True, help="output directory")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, json.JSONDecodeError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, dm.DomainError, FloatingPointError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
