"""Synthetic verifiable tasks and the correctness / format / calibration rewards."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .policy import ANS_CLOSE, ANS_OPEN, CONF_CLOSE, CONF_OPEN, EOS, Rollout, Vocabulary

log = logging.getLogger(__name__)

FAMILIES = ("addition-chain", "modular-arithmetic", "digit-parity", "bracket-evaluation")
DEFAULT_WEIGHTS = (2.0, 0.9, 1.0)
FORMAT_MARKERS = (ANS_OPEN, ANS_CLOSE, CONF_OPEN, CONF_CLOSE)

_NUMBER = re.compile(r"^-?\d+$")
_CONFIDENCE = re.compile(r"^\d+(\.\d+)?$")


@dataclass(frozen=True)
class TaskInstance:
    query: str
    answer: str
    family: str
    difficulty: int
    seed: int

    def query_ids(self, vocab: Vocabulary) -> list[int]:
        return [vocab.bos] + vocab.encode(vocab.tokenize(self.query))


@dataclass(frozen=True)
class RewardBreakdown:
    corr: int
    fmt: float
    calib: float
    total: float


# ---------------------------------------------------------------------------
# generators: each returns (query text, answer text)


def _addition_chain(rng: np.random.Generator, difficulty: int) -> tuple[str, str]:
    lo, hi = {1: (2, 2), 2: (2, 3), 3: (3, 4)}.get(difficulty, (difficulty, difficulty + 1))
    n = int(rng.integers(lo, hi + 1))
    xs = [int(v) for v in rng.integers(0, 10, size=n)]
    return "+".join(map(str, xs)) + "=", str(sum(xs))


def _modular(rng: np.random.Generator, difficulty: int) -> tuple[str, str]:
    top = 10 if difficulty < 3 else 20
    m_hi = 5 if difficulty <= 1 else 9
    a, b = (int(v) for v in rng.integers(0, top, size=2))
    m = int(rng.integers(2, m_hi + 1))
    return f"{a}*{b}%{m}=", str((a * b) % m)


def _digit_parity(rng: np.random.Generator, difficulty: int) -> tuple[str, str]:
    digits = [int(v) for v in rng.integers(0, 10, size=2 + difficulty)]
    parity = "even" if sum(digits) % 2 == 0 else "odd"
    return "".join(map(str, digits)) + "=", parity


def _random_expr(rng: np.random.Generator, depth: int) -> tuple[str, int]:
    if depth == 0:
        v = int(rng.integers(0, 10))
        return str(v), v
    shallow = int(rng.integers(0, depth))
    left_depth, right_depth = (depth - 1, shallow) if rng.random() < 0.5 else (shallow, depth - 1)
    ls, lv = _random_expr(rng, left_depth)
    rs, rv = _random_expr(rng, right_depth)
    if rng.random() < 0.5:
        return f"({ls}+{rs})", lv + rv
    return f"({ls}*{rs})", lv * rv


def _bracket(rng: np.random.Generator, difficulty: int) -> tuple[str, str]:
    text, value = _random_expr(rng, difficulty + 1)
    return text[1:-1] + "=", str(value)


_GENERATORS = {
    "addition-chain": _addition_chain,
    "modular-arithmetic": _modular,
    "digit-parity": _digit_parity,
    "bracket-evaluation": _bracket,
}


def generate_instances(family: str, count: int, difficulty: int, seed: int) -> list[TaskInstance]:
    """Draw ``count`` distinct instances; raises if the family cannot supply that many."""
    if family not in _GENERATORS:
        raise ValueError(f"unknown task family {family!r}; choose from {FAMILIES}")
    if difficulty < 1:
        raise ValueError("difficulty must be >= 1")
    gen = _GENERATORS[family]
    rng = np.random.default_rng([seed, 0x7A5C])
    seen: dict[str, str] = {}
    misses = 0
    while len(seen) < count:
        q, a = gen(rng, difficulty)
        if q in seen:
            misses += 1
            if misses > 200 * count + 10_000:
                raise ValueError(f"{family} at difficulty {difficulty} has fewer than {count} distinct queries")
            continue
        seen[q] = a
    return [TaskInstance(q, a, family, difficulty, seed) for q, a in seen.items()]


def evaluate_expression(text: str) -> str:
    """Reference evaluator for task queries (independent of the generators)."""
    text = text.rstrip("=")
    if text.isdigit() and "+" not in text:
        return "even" if sum(map(int, text)) % 2 == 0 else "odd"
    tokens = re.findall(r"\d+|[+*%()]", text)
    pos = 0

    def atom():
        nonlocal pos
        tok = tokens[pos]
        pos += 1
        if tok == "(":
            v = expr()
            pos += 1
            return v
        return int(tok)

    def term():
        nonlocal pos
        v = atom()
        while pos < len(tokens) and tokens[pos] in "*%":
            op = tokens[pos]
            pos += 1
            rhs = atom()
            v = v * rhs if op == "*" else v % rhs
        return v

    def expr():
        nonlocal pos
        v = term()
        while pos < len(tokens) and tokens[pos] == "+":
            pos += 1
            v += term()
        return v

    return str(expr())


def dump_instances(instances: Iterable[TaskInstance], path: str | Path) -> None:
    with open(path, "w") as fh:
        for inst in instances:
            row = {
                "query": inst.query,
                "answer": inst.answer,
                "family": inst.family,
                "difficulty": inst.difficulty,
                "seed": inst.seed,
            }
            fh.write(json.dumps(row) + "\n")


def load_instances(path: str | Path) -> list[TaskInstance]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                out.append(
                    TaskInstance(row["query"], str(row["answer"]), row["family"], int(row["difficulty"]), int(row["seed"]))
                )
    return out


# ---------------------------------------------------------------------------
# completion parsing


def parse_completion(tokens: Sequence[str]) -> tuple[str | None, float | None]:
    """Extract the answer text and the confidence value from completion tokens."""
    tokens = list(tokens)
    if EOS in tokens:
        tokens = tokens[: tokens.index(EOS)]
    answer = _between(tokens, ANS_OPEN, ANS_CLOSE)
    conf_text = _between(tokens, CONF_OPEN, CONF_CLOSE)
    confidence = None
    if conf_text is not None and _CONFIDENCE.match(conf_text):
        confidence = float(conf_text)
        if confidence > 1.0:
            log.info("confidence %s outside [0, 1]; clamped", conf_text)
            confidence = 1.0
    return answer, confidence


def _between(tokens: list[str], open_tok: str, close_tok: str) -> str | None:
    try:
        start = tokens.index(open_tok)
        end = tokens.index(close_tok, start + 1)
    except ValueError:
        return None
    return "".join(tokens[start + 1 : end])


def annotate(rollout: Rollout, vocab: Vocabulary) -> Rollout:
    rollout.answer, rollout.confidence = parse_completion(vocab.decode(rollout.tokens))
    return rollout


# ---------------------------------------------------------------------------
# rewards


def _canonical(text: str) -> str:
    text = text.strip()
    if _NUMBER.match(text):
        return str(int(text))
    return text


def correctness_reward(rollout: Rollout, truth: str) -> int:
    if rollout.answer is None or rollout.answer == "":
        return 0
    return int(_canonical(rollout.answer) == _canonical(truth))


def format_reward(rollout: Rollout, vocab: Vocabulary | None = None) -> float:
    """Fraction of the marker sequence matched as an in-order prefix subsequence."""
    vocab = vocab or Vocabulary()
    words = vocab.decode(rollout.tokens)
    matched = 0
    for w in words:
        if matched < len(FORMAT_MARKERS) and w == FORMAT_MARKERS[matched]:
            matched += 1
    return matched / len(FORMAT_MARKERS)


def calibration_reward(rollout: Rollout, correct: int) -> float:
    """Complement of the Brier score; zero when no confidence was reported."""
    q = rollout.confidence
    if q is None:
        return 0.0
    if not 0.0 <= q <= 1.0:
        log.info("confidence %s outside [0, 1]; clamped", q)
        q = min(max(q, 0.0), 1.0)
    return 1.0 - (correct - q) ** 2


def total_reward(parts: RewardBreakdown | tuple, weights: Sequence[float] = DEFAULT_WEIGHTS) -> float:
    w_corr, w_fmt, w_calib = weights
    if min(weights) < 0:
        raise ValueError("reward weights must be non-negative")
    corr, fmt, calib = (parts.corr, parts.fmt, parts.calib) if isinstance(parts, RewardBreakdown) else parts[:3]
    return w_corr * corr + w_fmt * fmt + w_calib * calib


def score(rollout: Rollout, truth: str, vocab: Vocabulary, weights: Sequence[float] = DEFAULT_WEIGHTS) -> RewardBreakdown:
    corr = correctness_reward(rollout, truth)
    fmt = format_reward(rollout, vocab)
    calib = calibration_reward(rollout, corr)
    return RewardBreakdown(corr, fmt, calib, total_reward((corr, fmt, calib), weights))
