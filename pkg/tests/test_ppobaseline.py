import numpy as np
import pytest

from ctfg import diffcore as dc
from ctfg import ppobaseline as ppo
from ctfg.dataio import BatchSpec
from ctfg.evalharness import SyntheticTaskSpec, synthetic_windows
from ctfg.grpo import GrpoConfig, collect_rollouts, init_state
from ctfg.policy import EncoderConfig
from ctfg.ppobaseline import GaeConfig, ValueNet, gae_advantages, sparse_rewards, state_summaries
from ctfg.rewards import RewardWeights
from helpers import fd_check

TINY_ENC = EncoderConfig(d_model=8, n_heads=2, n_layers=1, ff_width=16)


def gae_oracle(r, v, gamma, lam):
    s = len(r)
    out = []
    for j in range(s):
        total = 0.0
        for jp in range(j, s):
            delta = r[jp] + gamma * v[jp + 1] - v[jp]
            total += (gamma * lam) ** (jp - j) * delta
        out.append(total)
    return np.array(out)


def test_gae_matches_double_loop(rng):
    for _ in range(200):
        s = int(rng.integers(1, 21))
        r, v = rng.normal(size=s), np.append(rng.normal(size=s), 0.0)
        gamma, lam = rng.uniform(0, 1, size=2)
        np.testing.assert_allclose(gae_advantages(r, v, gamma, lam), gae_oracle(r, v, gamma, lam), atol=1e-12)


def test_gae_batched_axes(rng):
    r, v = rng.normal(size=(3, 2, 6)), rng.normal(size=(3, 2, 7))
    out = gae_advantages(r, v, 0.99, 0.95)
    np.testing.assert_allclose(out[1, 0], gae_oracle(r[1, 0], v[1, 0], 0.99, 0.95), atol=1e-12)


def test_gae_telescopes_at_unit_discount(rng):
    R = 3.7
    r = sparse_rewards(np.array(R), 8)
    assert np.all(gae_advantages(r, np.zeros(9), 1.0, 1.0) == R)
    v = np.append(rng.normal(size=8), 0.0)
    assert gae_advantages(r, v, 1.0, 1.0)[0] == pytest.approx(R - v[0], abs=1e-12)


def test_perfect_critic_gives_zero_advantages():
    R, s = -12.5, 6
    v = np.append(np.full(s, R), 0.0)
    np.testing.assert_array_equal(gae_advantages(sparse_rewards(np.array(R), s), v, 1.0, 0.95), 0.0)


def test_gae_rejects_value_length():
    with pytest.raises(ValueError):
        gae_advantages(np.zeros(4), np.zeros(4), 0.9, 0.9)


def test_gae_config_ranges():
    with pytest.raises(ValueError):
        GaeConfig(gamma=1.2)


# --- value network ----------------------------------------------------------------

def test_value_net_zero_weights_and_repeatability(rng):
    net = ValueNet(5, 8, rng)
    x = rng.normal(size=(4, 3, 5))
    a, b = ppo.value_forward(x, net), ppo.value_forward(x, net)
    assert a.shape == (4, 3) and a.tobytes() == b.tobytes()
    for t in net.params.values():
        t.data[...] = 0.0
    assert np.all(ppo.value_forward(x, net) == 0.0)


def test_value_net_gradients(rng):
    net = ValueNet(4, 6, rng)
    x = rng.normal(size=(5, 4))
    names = list(net.params)

    def f(**ps):
        saved = {k: net.params[k] for k in names}
        net.params.update(ps)
        out = net.forward(x)
        net.params.update(saved)
        return out

    arrays = {k: v.data.copy() for k, v in net.params.items()}
    # keep hidden pre-activations away from the ReLU kink
    arrays["value.l1.b"] += 0.05
    assert fd_check(f, arrays, rng) < 1e-4


def test_value_loss_decreases_on_fixed_buffer(rng):
    net = ValueNet(6, 16, rng)
    opt = dc.adam_init(net.params, lr=1e-2)
    x = rng.normal(size=(32, 6))
    y = x @ rng.normal(size=6) + 0.5
    losses = ppo.fit_value(net, opt, x, y, steps=100)
    smooth = np.convolve(losses, np.ones(10) / 10, mode="valid")
    assert np.all(np.diff(smooth) <= 1e-12)
    assert losses[-1] < 0.5 * losses[0]


def test_state_summaries_prefix_means(rng):
    h = rng.normal(size=(2, 5, 3))
    tok = rng.normal(size=(2, 4, 6, 2))
    s = state_summaries(h, tok)
    assert s.shape == (2, 4, 6, 5)
    np.testing.assert_array_equal(s[..., 0, 3:], 0.0)
    np.testing.assert_allclose(s[1, 2, 4, 3:], tok[1, 2, :4].mean(axis=0), atol=1e-14)
    np.testing.assert_allclose(s[1, 2, 4, :3], h[1].mean(axis=0), atol=1e-14)


# --- update -----------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_windows():
    return synthetic_windows(SyntheticTaskSpec(n_users=3, n_classes=2, windows_per_cell=4, window_len=20), seed=3)


def test_ppo_shares_rollouts_and_rewards_with_grpo(tiny_windows):
    a = init_state(3, TINY_ENC, 4, 3, seed=5)
    b = init_state(3, TINY_ENC, 4, 3, seed=5)
    ro = collect_rollouts(tiny_windows, a, RewardWeights(), 4, 4, BatchSpec(2))
    ppo.init_value(b, GaeConfig(), seed=5)
    m = ppo.ppo_update(tiny_windows, b, RewardWeights(), GrpoConfig(group_size=4, tokens=4), GaeConfig())
    assert m["mean_reward"] == float(np.mean(ro.rewards))
    assert m["advantages"].shape == (len(ro.idx), 4, 4)


def test_ppo_is_seed_deterministic(tiny_windows):
    out = []
    for _ in range(2):
        st = init_state(3, TINY_ENC, 4, 3, seed=9)
        ppo.init_value(st, GaeConfig(), seed=9)
        cfg = GrpoConfig(group_size=4, tokens=4)
        ms = [ppo.ppo_update(tiny_windows, st, RewardWeights(), cfg, GaeConfig()) for _ in range(3)]
        out.append([(m["mean_reward"], m["loss"], m["value_loss"]) for m in ms])
    assert out[0] == out[1]
