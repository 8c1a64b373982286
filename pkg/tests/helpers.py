"""Shared builders for small policies and rollout groups."""

import numpy as np

from amirgrpo import diffmath as dm
from amirgrpo.grpo import make_group
from amirgrpo.policy import PolicyParams, Vocabulary, init_params, sample_batch, snapshot, trainable

VOCAB = Vocabulary()
TINY = dict(embed_dim=8, hidden_dim=8, n_layers=1, max_positions=24)


def tiny_policy(seed: int, **overrides) -> PolicyParams:
    kw = {**TINY, **overrides}
    return trainable(init_params(VOCAB, np.random.default_rng(seed), **kw))


def perturbed(params: PolicyParams, scale: float, seed: int) -> PolicyParams:
    out = trainable(snapshot(params))
    rng = np.random.default_rng(seed)
    out.set_flat(out.flat() + scale * rng.normal(size=out.num_parameters()))
    return out


def sampled_group(params: PolicyParams, seed: int, G: int = 6, max_len: int = 6, query_id: int = 0,
                  rewards=None):
    rng = np.random.default_rng(seed)
    query = [VOCAB.bos] + list(rng.integers(6, len(VOCAB), size=3))
    rngs = [np.random.default_rng([seed, s]) for s in range(G)]
    with dm.no_grad():
        rollouts = sample_batch(params, [query] * G, 1.0, 1.0, max_len, rngs)
    if rewards is None:
        rewards = rng.normal(size=G)
    return make_group(query_id, rollouts, rewards)


def directional_fd_check(params: PolicyParams, loss_fn, n_dirs: int = 3, h: float = 1e-5, seed: int = 0):
    """Largest relative error between analytic and central-difference directional derivatives."""
    loss = loss_fn()
    dm.zero_grad(params.parameters())
    dm.backward(loss)
    grad = np.concatenate([t.grad.ravel() for t in params.parameters()])
    x0 = params.flat()
    rng = np.random.default_rng(seed)

    def value(x):
        params.set_flat(x)
        with dm.no_grad():
            return loss_fn().item()

    worst = 0.0
    for _ in range(n_dirs):
        d = rng.normal(size=x0.size)
        d /= np.linalg.norm(d)
        num = (value(x0 + h * d) - value(x0 - h * d)) / (2 * h)
        ana = float(grad @ d)
        worst = max(worst, abs(ana - num) / max(abs(num), abs(ana), 1e-6))
    params.set_flat(x0)
    dm.zero_grad(params.parameters())
    return worst


# acceptance outcomes, reported again in the terminal summary
VERDICTS: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str = "") -> None:
    VERDICTS[criterion] = (bool(ok), detail)
    print(f"CRITERION {criterion}: {'PASS' if ok else 'FAIL'} {detail}".rstrip())
