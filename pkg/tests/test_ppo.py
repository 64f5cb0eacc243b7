import dataclasses

import numpy as np
import pytest

from eimplace import env, expert
from eimplace.approximator import Arch, QMapModel, check_param_gradient, forward, init_model
from eimplace.netlist import SynthConfig, generate_synthetic
from eimplace.ppo import (EpisodeRecord, HPWLReward, LearnedReward, PolicyModel, PPOBatch,
                          PPOConfig, PPOState, RunningStats, StaleBatchError, collect_rollouts,
                          evaluate_policy, gae_advantages, init_policy, load_policy,
                          make_reward_source, normalize_advantages, policy_distribution,
                          ppo_loss, ppo_update, sample_action, save_policy, train_policy,
                          uniform_policy)
from eimplace.reward import DEMONSTRATION, PREFERENCE, RewardModel, extract_reward

from conftest import make_netlist

TOY = SynthConfig(macro_count=2, net_count=4)


def jittered_policy(grid_n, seed):
    p = init_policy(grid_n, hidden=4, seed=seed, pixel_hidden=3, critic_hidden=4)
    rng = np.random.default_rng(seed + 50)

    def jit(m):
        return m.with_params(m.params + np.where(m.params == 0,
                                                 rng.normal(scale=0.3, size=m.params.size), 0))
    return PolicyModel(jit(p.actor), jit(p.critic))


def gae_oracle(r, v, done, gamma, lam):
    """Double loop: A_t = sum_l (gamma lam)^l delta_{t+l}, cut at episode ends."""
    T = len(r)
    delta = [r[t] + gamma * (v[t + 1] if t + 1 < T else 0.0) * (1 - done[t]) - v[t]
             for t in range(T)]
    adv = []
    for t in range(T):
        acc, w = 0.0, 1.0
        for k in range(t, T):
            acc += w * delta[k]
            if done[k]:
                break
            w *= gamma * lam
        adv.append(acc)
    return np.array(adv)


# --- distribution / sampling ----------------------------------------------------

def test_zero_actor_is_uniform(design1):
    s = env.reset(design1)
    p = policy_distribution(uniform_policy(16), s)
    legal = env.position_mask(s).ravel().astype(bool)
    np.testing.assert_allclose(p[legal], 1 / legal.sum(), atol=1e-15)
    assert not p[~legal].any()


def test_single_legal_cell_has_probability_one():
    n = make_netlist([(1, 1)] * 4, grid_n=2)
    s = env.replay(n, [0, 1, 2])[-1]
    p = policy_distribution(jittered_policy(2, 0), s)
    assert p[3] == 1.0 and p.sum() == 1.0


def test_sampled_actions_always_legal(design1):
    rng = np.random.default_rng(0)
    pol = jittered_policy(16, 1)
    states = [env.reset(design1)]
    for _ in range(3):
        a = int(np.argmax(policy_distribution(pol, states[-1])))
        states.append(env.step(states[-1], a)[0])
    for s in states:
        probs = policy_distribution(pol, s)
        legal = env.position_mask(s).ravel().astype(bool)
        draws = [sample_action(probs, rng) for _ in range(2500)]
        assert legal[draws].all()


# --- reward sources ---------------------------------------------------------------

def test_running_stats_matches_numpy():
    xs = np.random.default_rng(2).normal(3, 5, size=500)
    st = RunningStats()
    for x in xs:
        st.update(float(x))
    assert st.mean == pytest.approx(xs.mean(), abs=1e-10)
    assert st.std == pytest.approx(xs.std(), abs=1e-10)
    assert RunningStats().std == 1.0


def test_hpwl_source_telescopes(design1):
    eps = collect_rollouts(uniform_policy(16), design1, HPWLReward(), 20, seed=3)
    for e in eps:
        assert not e.failed and len(e) == 8
        assert abs(sum(e.rewards) + e.final_hpwl) < 1e-9
        assert e.rewards == e.raw_rewards


def test_learned_sources_match_model(design1):
    for kind in (DEMONSTRATION, PREFERENCE):
        m = init_model(Arch(grid_n=16, hidden=4, pixel_hidden=3), 4)
        rm = RewardModel(kind, m)
        src = make_reward_source("eim_d" if kind == DEMONSTRATION else "eim_p", rm,
                                 standardize=False)
        e = collect_rollouts(uniform_policy(16), design1, src, 1, seed=5)[0]
        states = env.replay(design1, env.layout_actions(design1, e.layout))
        for t, a in enumerate(e.actions):
            if kind == DEMONSTRATION:
                want = extract_reward(rm, states[t], a, states[t + 1])
            else:
                want = forward(m, e.X[t])[a]
            assert e.raw_rewards[t] == pytest.approx(want, abs=1e-10)


def test_standardized_rewards_use_running_stats(design1):
    rm = RewardModel(PREFERENCE, init_model(Arch(grid_n=16, hidden=4, pixel_hidden=3), 4))
    src = LearnedReward(rm, standardize=True)
    eps = collect_rollouts(uniform_policy(16), design1, src, 3, seed=1)
    raw = np.concatenate([e.raw_rewards for e in eps])
    assert src.stats.count == len(raw)
    assert src.stats.mean == pytest.approx(raw.mean(), abs=1e-10)
    assert eps[0].rewards[0] == 0.0        # first sample standardizes against itself


def test_make_reward_source_errors():
    rm = RewardModel(PREFERENCE, init_model(Arch(grid_n=4, hidden=2), 0))
    with pytest.raises(ValueError):
        make_reward_source("eim_p")
    with pytest.raises(ValueError):
        make_reward_source("eim_d", rm)
    assert make_reward_source("hpwl").name == "hpwl"


# --- rollouts ----------------------------------------------------------------------

def test_rollouts_deterministic_and_thread_independent(design1):
    pol = jittered_policy(16, 2)
    a = collect_rollouts(pol, design1, HPWLReward(), 6, seed=9)
    b = collect_rollouts(pol, design1, HPWLReward(), 6, seed=9, threads=4)
    assert [e.actions for e in a] == [e.actions for e in b]
    assert [e.log_probs for e in a] == [e.log_probs for e in b]
    c = collect_rollouts(pol, design1, HPWLReward(), 6, seed=10)
    assert [e.actions for e in a] != [e.actions for e in c]


def test_no_failures_on_generated_designs():
    fails = 0
    for seed in range(5):
        n = generate_synthetic(SynthConfig(), seed)
        fails += sum(e.failed for e in collect_rollouts(uniform_policy(16), n, HPWLReward(),
                                                        200, seed=seed))
    assert fails == 0


def test_failed_episode_is_recorded():
    # on 5x5 a centred 3x3 macro leaves no room for the 2x2 one
    n = make_netlist([(3, 3), (2, 2)], grid_n=5)
    eps = collect_rollouts(uniform_policy(5), n, HPWLReward(), 40, seed=0)
    failed = [e for e in eps if e.failed]
    assert 0 < len(failed) < len(eps) and all(len(e) == 1 for e in failed)
    batch = PPOBatch.from_episodes(eps, 0.99, 0.95)
    assert len(batch.actions) == sum(len(e) for e in eps if not e.failed)


# --- advantages ------------------------------------------------------------------------

def test_gae_examples():
    ep = EpisodeRecord(rewards=[1.0, 0.0, 2.0], values=[0.5, 0.25, 1.0],
                       dones=[False, False, True])
    adv, ret = gae_advantages(ep, 0.9, 0.0)
    np.testing.assert_allclose(adv, [1 + 0.9 * 0.25 - 0.5, 0.9 * 1.0 - 0.25, 2.0 - 1.0])
    np.testing.assert_allclose(ret, adv + np.array(ep.values))
    ep0 = EpisodeRecord(rewards=[1.0, 0.0, 2.0], values=[0.0] * 3, dones=[False, False, True])
    adv, _ = gae_advantages(ep0, 0.9, 1.0)
    np.testing.assert_allclose(adv, [1 + 0.81 * 2, 0.9 * 2, 2.0], atol=1e-15)


def test_gae_matches_double_loop_oracle():
    rng = np.random.default_rng(6)
    for _ in range(50):
        T = int(rng.integers(1, 12))
        r, v = rng.normal(size=T), rng.normal(size=T)
        done = [False] * (T - 1) + [True]
        gamma, lam = rng.uniform(0.5, 1), rng.uniform(0, 1)
        ep = EpisodeRecord(rewards=list(r), values=list(v), dones=done)
        adv, _ = gae_advantages(ep, gamma, lam)
        np.testing.assert_allclose(adv, gae_oracle(r, v, done, gamma, lam), atol=1e-10)


def test_normalize_advantages():
    x = np.random.default_rng(7).normal(4, 9, size=300)
    z = normalize_advantages(x)
    assert abs(z.mean()) < 1e-10 and abs(z.std() - 1) < 1e-8
    np.testing.assert_array_equal(normalize_advantages(np.full(4, 2.0)), np.zeros(4))


# --- loss and update ------------------------------------------------------------------

@pytest.fixture(scope="module")
def probe_batch():
    n = generate_synthetic(TOY, 0)
    pol = jittered_policy(16, 3)
    eps = collect_rollouts(pol, n, HPWLReward(), 6, seed=0)
    return n, pol, PPOBatch.from_episodes(eps, 0.99, 0.95)


def test_ppo_loss_finite_differences(probe_batch):
    _, pol, batch = probe_batch
    rng = np.random.default_rng(8)
    cfg = PPOConfig()
    for probe in range(4):
        b = dataclasses.replace(batch, old_log_probs=batch.old_log_probs +
                                rng.normal(scale=0.3, size=len(batch.actions)),
                                advantages=rng.normal(size=len(batch.actions)),
                                returns=rng.normal(size=len(batch.actions)))
        err_a = check_param_gradient(pol.actor, lambda m: ppo_loss(
            PolicyModel(m, pol.critic), b, cfg)[:2], n_coords=60, seed=probe)
        err_c = check_param_gradient(pol.critic, lambda m: (lambda o: (o[0], o[2]))(
            ppo_loss(PolicyModel(pol.actor, m), b, cfg)), n_coords=60, seed=probe)
        assert err_a < 1e-4 and err_c < 1e-4


def test_first_pass_gradient_is_unclipped(probe_batch):
    _, pol, batch = probe_batch
    adv = normalize_advantages(batch.advantages)
    tight = ppo_loss(pol, batch, PPOConfig(clip=0.01), adv)
    loose = ppo_loss(pol, batch, PPOConfig(clip=0.99), adv)
    assert tight[3]["max_logp_drift"] < 1e-12
    np.testing.assert_allclose(tight[1], loose[1], rtol=0, atol=1e-14)


def test_stale_batch_rejected(probe_batch):
    _, pol, batch = probe_batch
    state = PPOState.fresh(pol, 1e-3)
    stale = dataclasses.replace(batch, old_log_probs=batch.old_log_probs + 1e-3)
    with pytest.raises(StaleBatchError):
        ppo_update(state, stale, PPOConfig())
    new_state, info = ppo_update(state, batch, PPOConfig())
    assert not np.array_equal(new_state.policy.actor.params, pol.actor.params)
    assert np.isfinite(info["loss"])


def test_update_keeps_support_legal(probe_batch):
    n, pol, batch = probe_batch
    state, _ = ppo_update(PPOState.fresh(pol, 0.05), batch, PPOConfig())
    s = env.reset(n)
    legal = env.position_mask(s).ravel().astype(bool)
    assert not policy_distribution(state.policy, s)[~legal].any()


def test_config_validation():
    with pytest.raises(ValueError):
        PPOConfig(clip=1.0)
    with pytest.raises(ValueError):
        PPOConfig(total_updates=0)
    with pytest.raises(ValueError):
        PPOConfig(reward_source="wirelength")


# --- training / evaluation -----------------------------------------------------------

def test_training_is_deterministic():
    n = generate_synthetic(TOY, 0)
    cfg = PPOConfig(total_updates=3, rollout_episodes=4, seed=2)
    p1, h1 = train_policy(n, HPWLReward(), cfg)
    p2, h2 = train_policy(n, HPWLReward(), cfg, threads=3)
    assert h1 == h2 and len(h1) == 3
    assert np.array_equal(p1.actor.params, p2.actor.params)
    assert np.array_equal(p1.critic.params, p2.critic.params)


def test_uniform_policy_less_peripheral_than_expert(design1):
    rep = evaluate_policy(uniform_policy(16), design1, episodes=100, seed=0)
    assert rep["failures"] == 0 and rep["episodes"] == 100
    exp = [env.periphery_occupancy(env.replay(design1, env.layout_actions(
        design1, expert.generate_expert_layout(design1, s)))[-1]) for s in range(20)]
    assert np.mean(exp) >= 0.8
    assert rep["periphery_mean"] <= np.mean(exp) - 0.2


def test_single_corner_macro_fraction_one():
    n = make_netlist([(1, 1)], nets=[([(0, 0)], [(3.0, 3.0)])], grid_n=4)
    s, _ = env.step(env.reset(n), env.encode(0, 0, 4))
    assert env.periphery_occupancy(s) == 1.0


def test_policy_checkpoint_round_trip(tmp_path):
    pol = jittered_policy(8, 1)
    save_policy(pol, tmp_path / "p.json", PPOConfig())
    back = load_policy(tmp_path / "p.json")
    assert np.array_equal(back.actor.params, pol.actor.params)
    assert np.array_equal(back.critic.params, pol.critic.params)
    assert back.critic.arch.out_dim == 1 and isinstance(back.actor, QMapModel)
