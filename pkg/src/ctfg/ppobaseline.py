"""PPO with GAE over the same rollouts and rewards, for the controlled ablation.

The critic sees a fixed-size state summary: the temporal mean of the encoder
states concatenated with the mean of the tokens generated so far (zeros
before the first token).  Only the final step carries the batch reward.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .dataio import BatchSpec, WindowSet
from .grpo import GrpoConfig, TrainState, clipped_objective, collect_rollouts, epoch_summary, \
    global_norm, policy_terms, refresh_reference
from .rewards import RewardWeights, fit_projection_step


@dataclass
class GaeConfig:
    gamma: float = 0.99
    lam: float = 0.95
    value_lr: float = 1e-3
    value_hidden: int = 64
    value_steps: int = 1

    def __post_init__(self):
        if not (0 <= self.gamma <= 1 and 0 <= self.lam <= 1):
            raise ValueError("gamma and lambda must lie in [0, 1]")


class ValueNet:
    """Two hidden ReLU layers mapping a (D + k) state summary to a scalar."""

    def __init__(self, in_dim: int, hidden: int = 64, rng: np.random.Generator | None = None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.in_dim = in_dim
        dims = [in_dim, hidden, hidden, 1]
        self.params = {}
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]), start=1):
            self.params[f"value.l{i}.w"] = dc.parameter(rng.normal(0, 1 / np.sqrt(a), size=(a, b)), f"value.l{i}.w")
            self.params[f"value.l{i}.b"] = dc.parameter(np.zeros(b), f"value.l{i}.b")

    def forward(self, summary) -> dc.Tensor:
        """(..., D + k) summaries -> (...) values."""
        x = dc._as_tensor(summary)
        if x.shape[-1] != self.in_dim:
            raise dc.ShapeError(f"value net expects last dim {self.in_dim}, got {x.shape}", node="value")
        p = self.params
        x = dc.relu(x @ p["value.l1.w"] + p["value.l1.b"])
        x = dc.relu(x @ p["value.l2.w"] + p["value.l2.b"])
        out = x @ p["value.l3.w"] + p["value.l3.b"]
        return dc.reshape(out, out.shape[:-1])

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state):
        for k, t in self.params.items():
            t.data = np.asarray(state[k], dtype=np.float64).copy()


def value_forward(summary, net: ValueNet) -> np.ndarray:
    with dc.no_grad():
        return net.forward(summary).data


def state_summaries(h: np.ndarray, tokens: np.ndarray) -> np.ndarray:
    """Summaries for states 1..s: (B, G, s, D + k) from h (B, l, D) and tokens (B, G, s, k)."""
    B, G, s, k = tokens.shape
    hbar = np.broadcast_to(h.mean(axis=1)[:, None, None, :], (B, G, s, h.shape[-1]))
    csum = np.cumsum(tokens, axis=2)
    prefix = np.zeros_like(tokens)
    # state j sees tokens 1..j-1
    prefix[:, :, 1:] = csum[:, :, :-1] / np.arange(1, s)[None, None, :, None]
    return np.concatenate([hbar, prefix], axis=-1)


def gae_advantages(rewards: np.ndarray, values: np.ndarray, gamma: float, lam: float) -> np.ndarray:
    """GAE over the last axis.

    ``rewards`` (..., s); ``values`` (..., s + 1) with the terminal value last.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if v.shape[-1] != r.shape[-1] + 1:
        raise ValueError("values need one more entry than rewards")
    delta = r + gamma * v[..., 1:] - v[..., :-1]
    adv = np.empty_like(delta)
    acc = np.zeros(delta.shape[:-1])
    for j in range(delta.shape[-1] - 1, -1, -1):
        acc = delta[..., j] + gamma * lam * acc
        adv[..., j] = acc
    return adv


def sparse_rewards(final: np.ndarray, s: int) -> np.ndarray:
    """(..., s) step rewards that are zero except the last step."""
    final = np.asarray(final, dtype=np.float64)
    r = np.zeros((*final.shape, s))
    r[..., -1] = final
    return r


def init_value(state: TrainState, gae: GaeConfig, seed: int = 0) -> None:
    d_in = state.policy.cfg.d_model + state.policy.token_dim
    state.value = ValueNet(d_in, gae.value_hidden, np.random.default_rng(np.random.SeedSequence([seed, 7])))
    state.value_opt = dc.adam_init(state.value.params, lr=gae.value_lr)


def value_loss(net: ValueNet, summaries: np.ndarray, returns: np.ndarray) -> dc.Tensor:
    diff = net.forward(summaries) - returns
    return dc.mean(diff * diff)


def fit_value(net: ValueNet, opt: dc.AdamState, summaries: np.ndarray, returns: np.ndarray,
              steps: int = 1) -> list[float]:
    losses = []
    for _ in range(steps):
        loss = value_loss(net, summaries, returns)
        losses.append(float(loss.data))
        dc.adam_step(net.params, dc.backward(loss, net.params), opt)
    return losses


def ppo_update(windows: WindowSet, state: TrainState, weights: RewardWeights, cfg: GrpoConfig,
               gae: GaeConfig, batch: BatchSpec | None = None) -> dict:
    """One epoch of the PPO variant: identical rollouts and rewards, critic-based advantages."""
    t0 = time.perf_counter()
    batch = batch or BatchSpec()
    if state.value is None:
        init_value(state, gae)
    state.epoch += 1
    ro = collect_rollouts(windows, state, weights, cfg.group_size, cfg.tokens, batch,
                          need_reference=cfg.beta_kl > 0)
    B, G, s, _ = ro.tokens.shape
    final = np.broadcast_to(ro.rewards[None, :], (B, G))
    summ = state_summaries(ro.h.data, ro.tokens)
    v = value_forward(summ, state.value)
    values = np.concatenate([v, np.zeros((B, G, 1))], axis=-1)
    adv = gae_advantages(sparse_rewards(final, s), values, gae.gamma, gae.lam)

    new_logp, kl = policy_terms(state, ro)
    obj = clipped_objective(new_logp, ro.old_logp, adv, cfg.clip_eps)
    if cfg.beta_kl and kl is not None:
        obj = obj - cfg.beta_kl * kl
    loss = -1.0 * dc.mean(obj)
    grads = dc.backward(loss, state.policy.params)
    dc.adam_step(state.policy.params, grads, state.opt)

    returns = np.broadcast_to(final[..., None], (B, G, s))
    vlosses = fit_value(state.value, state.value_opt, summ, returns, gae.value_steps)
    fit_projection_step(ro.tokens.reshape(-1, *ro.tokens.shape[2:]),
                        np.repeat(ro.h.data.mean(axis=1), G, axis=0), state.proj)
    refresh_reference(state.policy, state.reference, cfg.ref_refresh, state.epoch)
    out = epoch_summary(state.epoch, ro, float(loss.data), kl, global_norm(grads), t0)
    out["value_loss"] = vlosses[0]
    out["advantages"] = adv
    return out
