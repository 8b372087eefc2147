"""Critic-free group-relative policy optimization.

One epoch: stratified batch -> encode -> G sampled sequences per input ->
the g-th sequences of all inputs form the g-th reward batch -> advantages
normalized across the G rewards -> one clipped-surrogate Adam step on the
policy -> one least-squares step on W_proj.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .dataio import BatchSpec, WindowSet, stratified_batch
from .diffcore import Tensor
from .policy import Policy, log_prob
from .rewards import RewardBreakdown, RewardWeights, TmpProjection, batch_reward, fit_projection_step


@dataclass
class GrpoConfig:
    group_size: int = 8
    clip_eps: float = 0.2
    beta_kl: float = 0.01
    eps_stab: float = 1e-8
    tokens: int = 10
    epochs: int = 100
    ref_refresh: int = 0  # epochs between reference refreshes; 0 = never

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.clip_eps <= 0 or self.eps_stab <= 0 or self.beta_kl < 0:
            raise ValueError("clip_eps, eps_stab must be positive and beta_kl non-negative")


def group_advantages(rewards, eps_stab: float = 1e-8) -> np.ndarray:
    """(R - mean) / (population std + eps_stab) along the last axis."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.shape[-1] < 2:
        raise ValueError("group advantages need at least two rewards")
    centered = r - r.mean(axis=-1, keepdims=True)
    sd = np.sqrt(np.mean(centered * centered, axis=-1, keepdims=True))
    return centered / (sd + eps_stab)


def kl_diag_gaussian(mu_p, log_sigma_p, mu_q, log_sigma_q):
    """KL(p || q) between diagonal Gaussians, summed over the last axis.

    ``p`` may be tensors (the trainable policy); ``q`` is treated as constant.
    """
    if not any(isinstance(a, Tensor) for a in (mu_p, log_sigma_p)):
        var_ratio = np.exp(2 * (log_sigma_p - log_sigma_q))
        dmu = (mu_p - mu_q) * np.exp(-log_sigma_q)
        return np.sum((0.5 * (var_ratio + dmu * dmu) - 0.5) + (log_sigma_q - log_sigma_p), axis=-1)
    inv_q = np.exp(-log_sigma_q)
    var_ratio = dc.exp(2.0 * (log_sigma_p - log_sigma_q))
    dmu = (mu_p - mu_q) * inv_q
    # ordered so that p == q gives exactly zero
    per_dim = (0.5 * (var_ratio + dmu * dmu) - 0.5) + (log_sigma_q - log_sigma_p)
    return dc.sum(per_dim, axis=-1)


def clipped_objective(new_logp: Tensor, old_logp: np.ndarray, advantages, clip_eps: float) -> Tensor:
    """Elementwise min(rho * A, clip(rho, 1-eps, 1+eps) * A) with rho = exp(new - old).

    ``old_logp`` is a constant; a non-finite ratio raises FloatingPointError
    naming the (g, j) position.
    """
    old_logp = np.asarray(old_logp, dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        raw = np.exp(new_logp.data - old_logp)
    bad = ~np.isfinite(raw)
    if bad.any():
        pos = tuple(int(i) for i in np.argwhere(bad)[0])
        raise FloatingPointError(f"non-finite importance ratio at (g, j) = {pos[-2:]}")
    ratio = dc.exp(new_logp - old_logp)
    adv = np.broadcast_to(np.asarray(advantages, dtype=np.float64), ratio.shape)
    return dc.minimum(ratio * adv, dc.clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv)


def grpo_loss(new_logp: Tensor, old_logp: np.ndarray, advantages, kl, clip_eps: float = 0.2,
              beta_kl: float = 0.01) -> Tensor:
    """Negative mean over (group member, step) of clipped surrogate minus beta * KL.

    Shapes: log-probs and KL (..., G, s); advantages (..., G), broadcast over steps.
    Leading axes (inputs) are averaged as well.
    """
    adv = np.asarray(advantages, dtype=np.float64)[..., None]
    obj = clipped_objective(new_logp, old_logp, adv, clip_eps)
    if beta_kl and kl is not None:
        obj = obj - beta_kl * kl
    return -1.0 * dc.mean(obj)


@dataclass
class TrainState:
    """Everything one training run mutates."""

    policy: Policy
    reference: Policy
    proj: TmpProjection
    opt: dc.AdamState
    rng: np.random.Generator
    epoch: int = 0
    value: object = None  # ppobaseline.ValueNet when training with PPO
    value_opt: dc.AdamState | None = None


def init_state(n_channels: int, enc, tokens: int, token_dim: int, seed: int, lr: float = 1e-4,
               proj_lr: float = 1e-3, init_log_sigma: float = 0.0) -> TrainState:
    """Seeded policy, reference copy, projection and optimizer."""
    root = np.random.SeedSequence(seed)
    init_seq, proj_seq, run_seq = root.spawn(3)
    policy = Policy(n_channels, enc, tokens=tokens, token_dim=token_dim,
                    rng=np.random.default_rng(init_seq), init_log_sigma=init_log_sigma)
    proj = TmpProjection(token_dim, enc.d_model, np.random.default_rng(proj_seq), lr=proj_lr)
    return TrainState(policy=policy, reference=policy.copy(), proj=proj,
                      opt=dc.adam_init(policy.params, lr=lr), rng=np.random.default_rng(run_seq))


def refresh_reference(policy: Policy, reference: Policy, every: int = 0, epoch: int = 0,
                      force: bool = False) -> Policy:
    """Copy policy weights into the reference when forced or every ``every`` epochs."""
    if force or (every > 0 and epoch > 0 and epoch % every == 0):
        reference.load_state_dict(policy.state_dict())
    return reference


@dataclass
class Rollout:
    idx: np.ndarray  # batch indices into the training windows
    h: Tensor  # (B, l, D) encoder states, graph attached
    tokens: np.ndarray  # (B, G, s, k)
    old_logp: np.ndarray  # (B, G, s)
    ref_mu: np.ndarray | None
    ref_log_sigma: np.ndarray | None
    rewards: np.ndarray  # (G,)
    breakdowns: list[RewardBreakdown] = field(default_factory=list)


def collect_rollouts(windows: WindowSet, state: TrainState, weights: RewardWeights, group_size: int,
                     tokens: int, batch: BatchSpec, need_reference: bool = True) -> Rollout:
    idx = stratified_batch(windows, batch, state.rng)
    x, y, u = windows.x[idx], windows.y[idx], windows.u[idx]
    h = state.policy.encode(x)
    with dc.no_grad():
        seq = state.policy.sample_sequence(h.data, tokens, state.rng, n_samples=group_size)
        ref_mu = ref_ls = None
        if need_reference:
            h_ref = state.reference.encode(x)
            mu, ls = state.reference.decode(h_ref, seq.tokens[:, :, :-1])
            ref_mu, ref_ls = mu.data, ls.data
    hbar = h.data.mean(axis=1)
    breakdowns = [batch_reward(seq.tokens[:, g], y, u, hbar, state.proj.W, weights)
                  for g in range(group_size)]
    rewards = np.array([b.total for b in breakdowns])
    return Rollout(idx, h, seq.tokens, seq.step_logprobs, ref_mu, ref_ls, rewards, breakdowns)


def policy_terms(state: TrainState, ro: Rollout):
    """Differentiable per-step log-probs and KL to the reference, (B, G, s) each."""
    mu, ls = state.policy.decode(ro.h, ro.tokens[:, :, :-1])
    new_logp = log_prob(mu, ls, ro.tokens)
    kl = None
    if ro.ref_mu is not None:
        kl = kl_diag_gaussian(mu, ls, ro.ref_mu, ro.ref_log_sigma)
    return new_logp, kl


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def epoch_summary(epoch: int, ro: Rollout, loss: float, kl, grad_norm: float, t0: float) -> dict:
    bd = ro.breakdowns
    return {
        "epoch": epoch,
        "mean_reward": float(np.mean(ro.rewards)),
        "r_cls": float(np.mean([b.r_cls for b in bd])),
        "r_inv": float(np.mean([b.r_inv for b in bd])),
        "r_tmp": float(np.mean([b.r_tmp for b in bd])),
        "loss": loss,
        "mean_kl": float(np.mean(kl.data)) if kl is not None else 0.0,
        "grad_norm": grad_norm,
        "wall_ms": (time.perf_counter() - t0) * 1e3,
        "breakdowns": [{"epoch": epoch, "g": g, "r_cls": b.r_cls, "r_inv": b.r_inv,
                        "r_tmp": b.r_tmp, "total": b.total} for g, b in enumerate(bd)],
    }


def train_epoch(windows: WindowSet, state: TrainState, weights: RewardWeights, cfg: GrpoConfig,
                batch: BatchSpec | None = None) -> dict:
    """One pass of the training algorithm on a fresh stratified batch."""
    t0 = time.perf_counter()
    batch = batch or BatchSpec()
    state.epoch += 1
    ro = collect_rollouts(windows, state, weights, cfg.group_size, cfg.tokens, batch,
                          need_reference=cfg.beta_kl > 0)
    adv = group_advantages(ro.rewards, cfg.eps_stab)
    new_logp, kl = policy_terms(state, ro)
    loss = grpo_loss(new_logp, ro.old_logp, adv[None, :], kl, cfg.clip_eps, cfg.beta_kl)
    grads = dc.backward(loss, state.policy.params)
    dc.adam_step(state.policy.params, grads, state.opt)
    G = cfg.group_size
    fit_projection_step(ro.tokens.reshape(-1, *ro.tokens.shape[2:]),
                        np.repeat(ro.h.data.mean(axis=1), G, axis=0), state.proj)
    refresh_reference(state.policy, state.reference, cfg.ref_refresh, state.epoch)
    out = epoch_summary(state.epoch, ro, float(loss.data), kl, global_norm(grads), t0)
    out["advantages"] = adv
    return out
