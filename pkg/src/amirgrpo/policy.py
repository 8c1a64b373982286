"""Tiny causal sequence policy over a fixed symbolic vocabulary.

The model is token + position embeddings followed by ``n_layers`` residual
blocks (single-head causal attention, then a tanh MLP) and a linear readout.
Sequences are right-padded, so causal masking alone keeps padding from
leaking into real positions.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor

log = logging.getLogger(__name__)

BOS, EOS = "<bos>", "<eos>"
ANS_OPEN, ANS_CLOSE = "<a>", "</a>"
CONF_OPEN, CONF_CLOSE = "<c>", "</c>"
DIGITS = tuple(str(d) for d in range(10))
SYMBOLS = ("+", "*", "%", "(", ")", "=", ".", "-")
WORDS = ("even", "odd")
# unused ids that pad the table to a multiple of 8
RESERVED = tuple(f"<r{i}>" for i in range(6))

CHECKPOINT_FORMAT = "amirgrpo-checkpoint"
CHECKPOINT_VERSION = 1


class Vocabulary:
    """Bijection between token strings and integer ids."""

    def __init__(self, tokens: Sequence[str] | None = None):
        if tokens is None:
            tokens = (BOS, EOS, ANS_OPEN, ANS_CLOSE, CONF_OPEN, CONF_CLOSE) + DIGITS + SYMBOLS + WORDS + RESERVED
        tokens = list(tokens)
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        for special in (BOS, EOS, ANS_OPEN, ANS_CLOSE, CONF_OPEN, CONF_CLOSE):
            if special not in tokens:
                raise ValueError(f"vocabulary is missing reserved token {special!r}")
        self.tokens = tokens
        self.ids = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    @property
    def bos(self) -> int:
        return self.ids[BOS]

    @property
    def eos(self) -> int:
        return self.ids[EOS]

    def encode(self, tokens: Sequence[str]) -> list[int]:
        try:
            return [self.ids[t] for t in tokens]
        except KeyError as exc:
            raise ValueError(f"unknown token {exc.args[0]!r}") from None

    def decode(self, ids: Sequence[int]) -> list[str]:
        for i in ids:
            if not 0 <= i < len(self.tokens):
                raise ValueError(f"token id {i} out of range")
        return [self.tokens[i] for i in ids]

    def tokenize(self, text: str) -> list[str]:
        """Split a compact expression such as ``"(3+4)*2="`` into tokens."""
        out = []
        i = 0
        while i < len(text):
            for word in WORDS:
                if text.startswith(word, i):
                    out.append(word)
                    i += len(word)
                    break
            else:
                if text[i] == " ":
                    i += 1
                    continue
                if text[i] not in self.ids:
                    raise ValueError(f"cannot tokenize {text[i]!r}")
                out.append(text[i])
                i += 1
        return out


@dataclass(frozen=True)
class PolicyConfig:
    vocab_size: int
    embed_dim: int = 64
    hidden_dim: int = 128
    n_layers: int = 2
    max_positions: int = 96


@dataclass
class PolicyParams:
    config: PolicyConfig
    vocab: Vocabulary
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def parameters(self) -> list[Tensor]:
        return [self.tensors[k] for k in sorted(self.tensors)]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self.parameters()])

    def set_flat(self, values: np.ndarray) -> None:
        offset = 0
        for t in self.parameters():
            n = t.size
            t.data[...] = values[offset : offset + n].reshape(t.shape)
            offset += n


def init_params(
    vocab: Vocabulary,
    rng: np.random.Generator,
    embed_dim: int = 64,
    hidden_dim: int = 128,
    n_layers: int = 2,
    max_positions: int = 96,
) -> PolicyParams:
    if n_layers not in (1, 2):
        raise ValueError("n_layers must be 1 or 2")
    cfg = PolicyConfig(len(vocab), embed_dim, hidden_dim, n_layers, max_positions)
    d, h, v = embed_dim, hidden_dim, len(vocab)

    def mat(rows, cols, scale):
        return Tensor(rng.normal(0.0, scale, size=(rows, cols)), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    ts = {
        "tok_emb": mat(v, d, 0.5),
        "pos_emb": mat(max_positions, d, 0.5),
        "out_w": mat(d, v, 1.0 / math.sqrt(d)),
        "out_b": zeros(v),
    }
    for layer in range(n_layers):
        p = f"l{layer}."
        for name in ("wq", "wk", "wv", "wo"):
            ts[p + name] = mat(d, d, 1.0 / math.sqrt(d))
        ts[p + "w1"] = mat(d, h, 1.0 / math.sqrt(d))
        ts[p + "b1"] = zeros(h)
        ts[p + "w2"] = mat(h, d, 1.0 / math.sqrt(h))
        ts[p + "b2"] = zeros(d)
    return PolicyParams(cfg, vocab, ts)


def uniform_params(vocab: Vocabulary, **kwargs) -> PolicyParams:
    """A policy whose logits are identically zero (uniform next-token law)."""
    params = init_params(vocab, np.random.default_rng(0), **kwargs)
    params.tensors["out_w"].data[...] = 0.0
    params.tensors["out_b"].data[...] = 0.0
    return params


def snapshot(params: PolicyParams) -> PolicyParams:
    """Deep, detached copy; later updates to ``params`` never reach it."""
    ts = {k: Tensor(t.data.copy()) for k, t in params.tensors.items()}
    return PolicyParams(params.config, params.vocab, ts)


def trainable(params: PolicyParams) -> PolicyParams:
    """Deep copy whose tensors require gradients."""
    ts = {k: Tensor(t.data.copy(), requires_grad=True) for k, t in params.tensors.items()}
    return PolicyParams(params.config, params.vocab, ts)


def forward(params: PolicyParams, tokens: np.ndarray) -> Tensor:
    """Logits of shape ``[batch, time, vocab]`` for right-padded ``tokens``."""
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    _, t_len = tokens.shape
    cfg = params.config
    if t_len > cfg.max_positions:
        raise ValueError(f"sequence length {t_len} exceeds max_positions {cfg.max_positions}")
    ts = params.tensors
    x = dm.take_rows(ts["tok_emb"], tokens) + dm.take_rows(ts["pos_emb"], np.arange(t_len))
    mask = np.triu(np.full((t_len, t_len), -1e9), k=1)
    scale = 1.0 / math.sqrt(cfg.embed_dim)
    for layer in range(cfg.n_layers):
        p = f"l{layer}."
        q = x @ ts[p + "wq"]
        k = x @ ts[p + "wk"]
        v = x @ ts[p + "wv"]
        att = dm.softmax((q @ dm.transpose(k)) * scale + mask)
        x = x + (att @ v) @ ts[p + "wo"]
        hidden = dm.tanh(x @ ts[p + "w1"] + ts[p + "b1"])
        x = x + hidden @ ts[p + "w2"] + ts[p + "b2"]
    return x @ ts["out_w"] + ts["out_b"]


def _pack(queries: Sequence[Sequence[int]], completions: Sequence[Sequence[int]], pad: int):
    lengths = [len(q) + len(c) for q, c in zip(queries, completions)]
    tokens = np.full((len(queries), max(lengths)), pad, dtype=np.int64)
    for r, (q, c) in enumerate(zip(queries, completions)):
        tokens[r, : len(q)] = q
        tokens[r, len(q) : len(q) + len(c)] = c
    return tokens


def token_logprobs(
    params: PolicyParams,
    queries: Sequence[Sequence[int]],
    completions: Sequence[Sequence[int]],
    temperature: float = 1.0,
) -> tuple[Tensor, np.ndarray]:
    """Per-token log-probs of each completion, shape ``[N, T_max]``, plus a 0/1 mask."""
    if len(queries) != len(completions):
        raise ValueError("queries and completions differ in count")
    v = len(params.vocab)
    for q, c in zip(queries, completions):
        if not q:
            raise ValueError("empty query")
        if not c:
            raise ValueError("empty completion")
        if min(q) < 0 or max(q) >= v or min(c) < 0 or max(c) >= v:
            raise ValueError("token id out of range")
    tokens = _pack(queries, completions, params.vocab.eos)
    logits = forward(params, tokens)
    if temperature != 1.0:
        logits = logits * (1.0 / temperature)
    logp = dm.log_softmax(logits)
    n = len(queries)
    t_max = max(len(c) for c in completions)
    rows = np.repeat(np.arange(n), t_max).reshape(n, t_max)
    pos = np.zeros((n, t_max), dtype=np.int64)
    tgt = np.zeros((n, t_max), dtype=np.int64)
    mask = np.zeros((n, t_max))
    for r, (q, c) in enumerate(zip(queries, completions)):
        k = len(c)
        pos[r, :k] = np.arange(len(q) - 1, len(q) - 1 + k)
        tgt[r, :k] = c
        mask[r, :k] = 1.0
    return logp[rows, pos, tgt], mask


def sequence_logprob(
    params: PolicyParams, query: Sequence[int], completion: Sequence[int]
) -> tuple[Tensor, Tensor]:
    """Total and per-token log-probability of ``completion`` given ``query``."""
    per_token, _ = token_logprobs(params, [query], [completion])
    per_token = dm.reshape(per_token, (len(completion),))
    return per_token.sum(), per_token


def length_normalized_logprob(params: PolicyParams, query: Sequence[int], completion: Sequence[int]) -> Tensor:
    if not completion:
        raise ValueError("empty completion")
    total, _ = sequence_logprob(params, query, completion)
    return total * (1.0 / len(completion))


def next_token_distribution(logits: np.ndarray, temperature: float, top_p: float) -> np.ndarray:
    """Probabilities actually sampled from: temperature softmax, then nucleus truncation."""
    z = logits / temperature
    z = z - z.max(axis=-1, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=-1, keepdims=True)
    if top_p >= 1.0:
        return probs
    out = np.zeros_like(probs)
    for r in range(probs.shape[0]):
        order = np.argsort(-probs[r], kind="stable")
        csum = np.cumsum(probs[r, order])
        keep = min(int(np.searchsorted(csum, top_p, side="left")) + 1, len(order))
        kept = order[:keep]
        out[r, kept] = probs[r, kept] / probs[r, kept].sum()
    return out


@dataclass
class Rollout:
    query: list[int]
    tokens: list[int]
    logp_old: list[float]
    terminated: bool
    answer: str | None = None
    confidence: float | None = None

    def __len__(self) -> int:
        return len(self.tokens)


def sample_batch(
    params: PolicyParams,
    queries: Sequence[Sequence[int]],
    temperature: float,
    top_p: float,
    max_len: int,
    rngs: Sequence[np.random.Generator],
) -> list[Rollout]:
    """Sample one completion per query; row ``r`` draws only from ``rngs[r]``."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if not 0 < top_p <= 1:
        raise ValueError("top_p must lie in (0, 1]")
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    vsize = len(params.vocab)
    for q in queries:
        if not q:
            raise ValueError("empty query")
        if min(q) < 0 or max(q) >= vsize:
            raise ValueError("token id out of range")
    eos = params.vocab.eos
    n = len(queries)
    qlen = np.array([len(q) for q in queries])
    tokens = np.full((n, int(qlen.max()) + max_len), eos, dtype=np.int64)
    for r, q in enumerate(queries):
        tokens[r, : len(q)] = q
    done = np.zeros(n, dtype=bool)
    out_tokens: list[list[int]] = [[] for _ in range(n)]
    out_logp: list[list[float]] = [[] for _ in range(n)]
    with dm.no_grad():
        for step in range(max_len):
            cur = qlen + step
            logits = forward(params, tokens[:, : int(cur.max())]).data
            last = logits[np.arange(n), cur - 1]
            probs = next_token_distribution(last, temperature, top_p)
            for r in range(n):
                if done[r]:
                    continue
                u = rngs[r].random()
                csum = np.cumsum(probs[r])
                tok = min(int(np.searchsorted(csum, u * csum[-1], side="right")), vsize - 1)
                while probs[r, tok] == 0.0:
                    tok -= 1
                tokens[r, cur[r]] = tok
                out_tokens[r].append(tok)
                out_logp[r].append(float(np.log(probs[r, tok])))
                if tok == eos:
                    done[r] = True
            if done.all():
                break
    if top_p < 1.0:
        log.debug("top_p=%s: recorded log-probs are under the truncated distribution", top_p)
    return [
        Rollout(list(queries[r]), out_tokens[r], out_logp[r], bool(done[r])) for r in range(n)
    ]


def sample_completion(
    params: PolicyParams,
    query: Sequence[int],
    temperature: float,
    top_p: float,
    max_len: int,
    rng: np.random.Generator,
) -> Rollout:
    return sample_batch(params, [query], temperature, top_p, max_len, [rng])[0]


# ---------------------------------------------------------------------------
# checkpoints


def params_to_dict(params: PolicyParams) -> dict:
    cfg = params.config
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "vocab": params.vocab.tokens,
        "config": {
            "embed_dim": cfg.embed_dim,
            "hidden_dim": cfg.hidden_dim,
            "n_layers": cfg.n_layers,
            "max_positions": cfg.max_positions,
        },
        "params": {
            k: {"shape": list(t.shape), "data": t.data.ravel().tolist()}
            for k, t in sorted(params.tensors.items())
        },
    }


def params_from_dict(doc: dict) -> PolicyParams:
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a policy checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    vocab = Vocabulary(doc["vocab"])
    cfg = PolicyConfig(vocab_size=len(vocab), **doc["config"])
    ts = {}
    for k, entry in doc["params"].items():
        data = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        ts[k] = Tensor(data)
    return PolicyParams(cfg, vocab, ts)


def save_checkpoint(params: PolicyParams, path: str | Path) -> None:
    # json writes floats with repr(), which round-trips float64 exactly
    Path(path).write_text(json.dumps(params_to_dict(params)) + "\n")


def load_checkpoint(path: str | Path) -> PolicyParams:
    return params_from_dict(json.loads(Path(path).read_text()))
