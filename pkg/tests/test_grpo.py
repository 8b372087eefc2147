import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ctfg import diffcore as dc
from ctfg import grpo
from ctfg.dataio import BatchSpec
from ctfg.evalharness import SyntheticTaskSpec, synthetic_windows
from ctfg.grpo import (GrpoConfig, clipped_objective, collect_rollouts, group_advantages, grpo_loss, init_state,
                       kl_diag_gaussian, refresh_reference, train_epoch)
from ctfg.policy import EncoderConfig
from ctfg.rewards import RewardBreakdown, RewardWeights, batch_reward

TINY_ENC = EncoderConfig(d_model=8, n_heads=2, n_layers=1, ff_width=16)
TINY_SPEC = SyntheticTaskSpec(n_users=3, n_classes=2, windows_per_cell=4, window_len=20)


@pytest.fixture(scope="module")
def tiny_windows():
    return synthetic_windows(TINY_SPEC, seed=3)


def _state(seed=0, tokens=4, lr=1e-3):
    return init_state(3, TINY_ENC, tokens, 3, seed, lr=lr)


# --- advantages -------------------------------------------------------------------

def test_advantage_reference_values():
    np.testing.assert_array_equal(group_advantages(np.full(8, 4.2)), np.zeros(8))
    np.testing.assert_allclose(group_advantages([1.0, 3.0]), [-1.0, 1.0], atol=1e-7)
    with pytest.raises(ValueError):
        group_advantages([1.0])


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(2, 64), elements=st.floats(-1e3, 1e3)),
       st.sampled_from([0.5, 5.0, 100.0]), st.sampled_from([-10.0, 0.0, 10.0]))
def test_advantages_zero_mean_and_affine_invariant(r, a, b):
    sd = np.std(r)
    if sd < 1e-3:  # near-constant groups are dominated by eps_stab
        return
    adv = group_advantages(r)
    assert abs(adv.mean()) < 1e-9
    exact = group_advantages(r, eps_stab=0.0)
    np.testing.assert_allclose(group_advantages(a * r + b, eps_stab=0.0), exact, atol=1e-9)
    # with eps_stab the rescaled advantages move by at most eps * |1 - 1/a| * |A| / std
    bound = 1e-8 * abs(1 - 1 / a) * np.abs(exact).max() / sd
    assert np.abs(group_advantages(a * r + b) - adv).max() <= bound + 1e-9


def test_advantage_variance_near_one_for_large_groups(rng):
    adv = group_advantages(rng.normal(size=(10_000, 64)))
    assert 0.9 <= adv.var() <= 1.1


# --- KL ---------------------------------------------------------------------------

def test_kl_reference_values(rng):
    mu, ls = rng.normal(size=5), rng.normal(size=5)
    assert kl_diag_gaussian(mu, ls, mu, ls) == 0.0
    assert kl_diag_gaussian(mu + 0.3, np.zeros(5), mu, np.zeros(5)) == pytest.approx(5 * 0.09 / 2)


def test_kl_matches_monte_carlo(rng):
    mp, lp = rng.normal(size=4), rng.uniform(-0.5, 0.5, size=4)
    mq, lq = rng.normal(size=4), rng.uniform(-0.5, 0.5, size=4)
    z = mp + np.exp(lp) * rng.standard_normal((100_000, 4))

    def logpdf(z, m, l):
        return np.sum(-l - 0.5 * math.log(2 * math.pi) - 0.5 * ((z - m) / np.exp(l)) ** 2, axis=1)

    samples = logpdf(z, mp, lp) - logpdf(z, mq, lq)
    se = samples.std() / math.sqrt(len(samples))
    assert abs(samples.mean() - kl_diag_gaussian(mp, lp, mq, lq)) < 3 * se


def test_kl_tensor_path_matches_numpy(rng):
    args = [rng.normal(size=(2, 3, 4)) for _ in range(4)]
    t = kl_diag_gaussian(dc.tensor(args[0]), dc.tensor(args[1]), args[2], args[3])
    np.testing.assert_allclose(t.data, kl_diag_gaussian(*args), atol=1e-13)


# --- loss -------------------------------------------------------------------------

def _scalar_loss(new, old, adv, kl, eps, beta):
    G, s = new.shape
    total = 0.0
    for g in range(G):
        for j in range(s):
            rho = math.exp(new[g, j] - old[g, j])
            clipped = min(max(rho, 1 - eps), 1 + eps)
            total += min(rho * adv[g], clipped * adv[g]) - beta * kl[g, j]
    return -total / (G * s)


def test_loss_matches_scalar_oracle(rng):
    for _ in range(20):
        G, s = int(rng.integers(2, 9)), int(rng.integers(1, 11))
        old = rng.normal(size=(G, s))
        new = old + rng.normal(scale=0.3, size=(G, s))
        adv = group_advantages(rng.normal(size=G))
        kl = rng.uniform(0, 0.5, size=(G, s))
        loss = grpo_loss(dc.tensor(new), old, adv, dc.tensor(kl), 0.2, 0.01)
        assert abs(float(loss.data) - _scalar_loss(new, old, adv, kl, 0.2, 0.01)) < 1e-10


def test_ratio_one_loss_is_minus_mean_advantage(rng):
    old = rng.normal(size=(8, 5))
    adv = group_advantages(rng.normal(size=8))
    loss = grpo_loss(dc.tensor(old), old, adv, None, 0.2, 0.0)
    assert abs(float(loss.data)) < 1e-12


def test_clipped_branch_has_zero_gradient():
    old = np.zeros((2, 1))
    new = dc.parameter(np.array([[0.5], [-0.5]]), "lp")  # rho = e^0.5 > 1.2 and e^-0.5 < 0.8
    obj = clipped_objective(new, old, np.array([[1.0], [-1.0]]), 0.2)
    g = dc.backward(dc.sum(obj), {"lp": new})["lp"]
    np.testing.assert_array_equal(g, 0.0)
    np.testing.assert_allclose(obj.data, [[1.2], [-0.8]])
    # unclipped side keeps the ratio gradient
    obj = clipped_objective(new, old, np.array([[-1.0], [1.0]]), 0.2)
    g = dc.backward(dc.sum(obj), {"lp": new})["lp"]
    np.testing.assert_allclose(g, [[-math.exp(0.5)], [math.exp(-0.5)]])


def test_non_finite_ratio_names_position():
    new = dc.tensor(np.array([[0.0, 0.0], [0.0, 800.0]]))
    with pytest.raises(FloatingPointError, match=r"\(1, 1\)"):
        clipped_objective(new, np.zeros((2, 2)), np.ones((2, 1)), 0.2)


# --- training step ----------------------------------------------------------------

def test_rewards_use_parallel_per_member_batches(tiny_windows):
    st = _state()
    ro = collect_rollouts(tiny_windows, st, RewardWeights(), 4, 4, BatchSpec(2))
    y, u = tiny_windows.y[ro.idx], tiny_windows.u[ro.idx]
    hbar = ro.h.data.mean(axis=1)
    for g in range(4):
        assert ro.rewards[g] == batch_reward(ro.tokens[:, g], y, u, hbar, st.proj.W, RewardWeights()).total


def test_zero_advantages_leave_policy_untouched(tiny_windows, monkeypatch):
    flat = RewardBreakdown(0.0, 0.0, 0.0, 0.0, RewardWeights())
    monkeypatch.setattr(grpo, "batch_reward", lambda *a, **k: flat)
    st = _state()
    before = st.policy.state_dict()
    m = train_epoch(tiny_windows, st, RewardWeights(), GrpoConfig(group_size=4, tokens=4, beta_kl=0.0))
    np.testing.assert_array_equal(m["advantages"], 0.0)
    after = st.policy.state_dict()
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)


def test_epochs_are_seed_deterministic(tiny_windows):
    cfg = GrpoConfig(group_size=4, tokens=4)
    runs = []
    for _ in range(2):
        st = _state(seed=11)
        ms = [train_epoch(tiny_windows, st, RewardWeights(), cfg) for _ in range(3)]
        runs.append([(m["mean_reward"], m["loss"], m["grad_norm"], m["mean_kl"]) for m in ms])
    assert runs[0] == runs[1]


def test_reference_frozen_without_refresh(tiny_windows):
    st = _state()
    ref = st.reference.state_dict()
    for _ in range(3):
        train_epoch(tiny_windows, st, RewardWeights(), GrpoConfig(group_size=4, tokens=4))
    assert all(ref[k].tobytes() == v.tobytes() for k, v in st.reference.state_dict().items())
    refresh_reference(st.policy, st.reference, force=True)
    assert all(st.policy.params[k].data.tobytes() == v.tobytes() for k, v in st.reference.state_dict().items())


def test_kl_resets_at_refresh_points(tiny_windows):
    N = 3
    st = _state(lr=1e-2)
    cfg = GrpoConfig(group_size=4, tokens=4, ref_refresh=N)
    kls = [train_epoch(tiny_windows, st, RewardWeights(), cfg)["mean_kl"] for _ in range(3 * N)]
    # the policy equals its reference at the start of epochs 1, N+1, 2N+1
    for e, kl in enumerate(kls, start=1):
        if (e - 1) % N == 0:
            assert kl == 0.0
        else:
            assert kl > 0.0
