import dataclasses
import math

import numpy as np
import pytest

from lcroute import costs, env, nn, policies, router, routes
from lcroute.errors import TrainingDiverged, UsageError
from lcroute.router import (FixedRouter, History, LearnedRouter, PPOConfig, RandomRouter, RolloutBuffer, RouterAgent,
                            Stack, decide, gae_advantages, run_episode, value)

from oracles import brute_force_gae, random_buffer


def two_logit_policy(logits):
    spec = nn.MLPSpec((1, 2), (), "identity")
    return spec, nn.MLPWeights([np.zeros((1, 2))], [np.asarray(logits, dtype=float)])


@pytest.fixture(scope="module")
def stack():
    rng = np.random.default_rng(0)
    trunk = policies.new_trunk(rng)
    trunk.trained = True
    return Stack(trunk, policies.new_local(rng), policies.new_cloud(rng))


def world(pedestrians=5, idx=0, **kw):
    return env.WorldConfig(route=routes.route(idx).tolist(), pedestrian_count=pedestrians, **kw)


# --- history and inputs ----------------------------------------------------------

def test_history_pads_and_keeps_newest_last():
    h = History(3)
    assert h.sources() == [0, 0, 0] and not h.flat().any()
    h.push(env.Action(0.3, 1.5), costs.LOCAL)
    h.push(env.Action(-0.15, 0.75), costs.LOCAL)
    h.set_last(env.Action(0.0, 0.3), costs.CLOUD)
    assert h.sources() == [0, 0, 1]
    assert np.allclose(h.flat(), [0, 0, 0, 1, 1, 0, 0, 0.2, 1])


def test_router_input_width():
    cfg = PPOConfig()
    assert router.input_width(32, cfg) == 32 + 24
    assert router.input_width(32, dataclasses.replace(cfg, history_enabled=False)) == 32
    assert router.router_input(np.zeros(32), History(8)).shape == (56,)


# --- decide / value ------------------------------------------------------------------

def test_equal_logits_give_even_odds():
    spec, w = two_logit_policy([0.3, 0.3])
    _, logp = decide(w, spec, [0.0], np.random.default_rng(0))
    assert math.exp(logp) == pytest.approx(0.5)


def test_deterministic_mode_takes_argmax():
    spec, w = two_logit_policy([math.log(0.9), math.log(0.1)])
    rng = np.random.default_rng(0)
    assert {decide(w, spec, [0.0], rng, deterministic=True)[0] for _ in range(50)} == {0}


def test_sampling_frequencies_match_softmax():
    spec, w = two_logit_policy([0.0, 0.7])
    rng = np.random.default_rng(1)
    p_cloud = 1 / (1 + math.exp(-0.7))
    freq = np.mean([decide(w, spec, [0.0], rng)[0] for _ in range(100_000)])
    assert abs(freq - p_cloud) < 0.01


def test_probabilities_sum_to_one():
    rng = np.random.default_rng(2)
    logits = rng.normal(0, 30, (1000, 2))
    assert np.abs(np.exp(router.log_softmax2(logits)).sum(axis=1) - 1).max() <= 1e-12


def test_state_width_checked():
    spec, w = two_logit_policy([0, 0])
    with pytest.raises(UsageError):
        decide(w, spec, [0.0, 1.0], None, deterministic=True)


def test_value_zero_weights_and_purity():
    spec = nn.MLPSpec((4, 8, 1), ("tanh",), "identity")
    assert value(nn.init_weights(spec, None, zero=True), spec, np.ones(4)) == 0.0
    w = nn.init_weights(spec, np.random.default_rng(0))
    assert value(w, spec, np.ones(4)) == value(w, spec, np.ones(4))


def test_value_learns_discounted_sum_of_constant_reward():
    cfg = PPOConfig(gamma=0.99)
    rng = np.random.default_rng(0)
    agent = RouterAgent.create(4, cfg, rng)
    c = 0.01
    for _ in range(200):
        buf = RolloutBuffer()
        for _ in range(4):
            for _ in range(16):
                s = rng.normal(size=4)
                buf.add(s, 0, math.log(0.5), value(agent.value, agent.value_spec, s), c)
            # never terminal: bootstrap from the critic as at a step-budget cut
            buf.end_episode(False, value(agent.value, agent.value_spec, rng.normal(size=4)))
        router.ppo_update(buf, agent, cfg, rng)
    v = nn.predict(agent.value, agent.value_spec, rng.normal(size=(200, 4)))
    assert v.mean() == pytest.approx(c / (1 - cfg.gamma), rel=0.1)


# --- GAE ----------------------------------------------------------------------------

def test_gae_single_terminal_step():
    buf = RolloutBuffer()
    buf.add([0.0], 0, 0.0, 0.0, 1.0)
    buf.end_episode(True)
    adv, ret = gae_advantages(buf, 0.99, 0.95)
    assert adv[0] == 1.0 and ret[0] == 1.0


def test_gae_lambda_zero_is_td_residual():
    rng = np.random.default_rng(3)
    buf = random_buffer(rng)
    adv, _ = gae_advantages(buf, 0.9, 0.0)
    v = np.asarray(buf.values)
    for t in range(len(buf)):
        nxt = 0.0 if buf.terminal[t] else buf.bootstrap[t] if buf.truncated[t] else v[t + 1]
        assert adv[t] == pytest.approx(buf.rewards[t] + 0.9 * nxt - v[t], abs=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_gae_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    buf = RolloutBuffer()
    for _ in range(20):
        buf.add([0.0], 0, 0.0, rng.normal(), rng.normal())
    buf.end_episode(bool(seed % 2), rng.normal())
    adv, ret = gae_advantages(buf, 0.99, 0.95)
    assert np.abs(adv - brute_force_gae(buf, 0.99, 0.95)).max() <= 1e-10
    assert np.allclose(ret, adv + np.asarray(buf.values))


def test_gae_refuses_unfinished_episode():
    buf = RolloutBuffer()
    buf.add([0.0], 0, 0.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        gae_advantages(buf, 0.99, 0.95)


# --- surrogate ---------------------------------------------------------------------

def test_ratio_clipping_arithmetic():
    obj, _ = router.clipped_surrogate([2.0], [1.5], 0.2)
    assert obj[0] == pytest.approx(1.2 * 1.5)
    obj, _ = router.clipped_surrogate([0.5], [-1.0], 0.2)
    assert obj[0] == pytest.approx(-0.8)


def test_zero_advantage_leaves_only_entropy_gradient():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(8, 2))
    actions = rng.integers(0, 2, 8)
    old = router.log_softmax2(logits)[np.arange(8), actions]
    _, g_full, _ = router.policy_loss_and_grad(logits, actions, old, np.zeros(8), 0.2, 0.01)
    _, g_none, _ = router.policy_loss_and_grad(logits, actions, old, np.zeros(8), 0.2, 0.0)
    assert not g_none.any() and g_full.any()


def test_policy_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(6, 2))
    actions = rng.integers(0, 2, 6)
    old = router.log_softmax2(logits + rng.normal(0, 0.1, (6, 2)))[np.arange(6), actions]
    adv = rng.normal(size=6)
    _, g, _ = router.policy_loss_and_grad(logits, actions, old, adv, 0.2, 0.01)
    h = 1e-6
    for i in range(6):
        for j in range(2):
            e = np.zeros_like(logits)
            e[i, j] = h
            up = router.policy_loss_and_grad(logits + e, actions, old, adv, 0.2, 0.01)[0]
            down = router.policy_loss_and_grad(logits - e, actions, old, adv, 0.2, 0.01)[0]
            assert g[i, j] == pytest.approx((up - down) / (2 * h), abs=1e-7)


def test_non_finite_update_raises_diverged():
    cfg = PPOConfig()
    agent = RouterAgent.create(2, cfg, np.random.default_rng(0))
    buf = RolloutBuffer()
    buf.add([np.nan, 0.0], 0, -0.7, 0.0, 1.0)
    buf.end_episode(True)
    with pytest.raises(TrainingDiverged) as info:
        router.ppo_update(buf, agent, cfg, np.random.default_rng(0))
    assert "policy_loss" in info.value.diagnostics


# --- episodes --------------------------------------------------------------------------

def test_local_only_episode_energy(stack):
    res = run_episode(world(), stack, FixedRouter(costs.LOCAL), seed=3)
    s = res.summary
    assert s.N_cloud == 0 and s.energy == pytest.approx(0.15 * s.steps)


def test_cloud_only_zero_latency_marks_every_history_entry(stack):
    zero = dataclasses.replace(stack, latency=costs.LatencyConfig(model="zero", t_cloud_infer=0.0))
    res = run_episode(world(), zero, FixedRouter(costs.CLOUD), seed=3, record_trace=True)
    assert res.history_sources == [1] * 8
    assert not any(rec["held"] for rec in res.trace)


def test_mean_hold_about_five_ticks(stack):
    holds, decisions, seed = [], 0, 0
    while decisions < 1000:
        res = run_episode(world(0), stack, FixedRouter(costs.CLOUD), seed=seed, record_trace=True)
        per = {}
        for rec in res.trace:
            per.setdefault(rec["decision"], []).append(rec["held"])
        # the final decision may be cut short by the episode end
        holds += [sum(flags) for d, flags in per.items() if d < max(per)]
        decisions += len(per) - 1
        seed += 1
    latency = costs.LatencyConfig()
    rng = np.random.default_rng(0)
    oracle = np.mean([costs.latency_to_ticks(costs.sample_latency(latency, rng), 0.04, 0.1) - 1
                      for _ in range(100_000)])
    assert np.mean(holds) == pytest.approx(oracle, abs=0.15)
    assert np.mean(holds) == pytest.approx(5.0, abs=0.5)


def test_newest_history_entry_matches_executed_source(stack):
    res = run_episode(world(15), stack, RandomRouter(0.4), seed=11, record_trace=True)
    sources = {}
    for rec in res.trace:
        sources[rec["decision"]] = rec["source"]
    last = [sources[d] for d in sorted(sources)][-8:]
    assert res.history_sources == last


def test_trace_energy_matches_ledger(stack):
    res = run_episode(world(15), stack, RandomRouter(0.5), seed=5, record_trace=True)
    assert math.fsum(rec["energy"] for rec in res.trace) == res.ledger.total_joules == res.summary.energy
    assert [rec["step"] for rec in res.trace] == list(range(1, len(res.trace) + 1))


def test_reward_only_on_final_tick_of_a_decision(stack):
    res = run_episode(world(5), stack, FixedRouter(costs.CLOUD), seed=2, record_trace=True)
    for rec in res.trace[:-1]:
        assert (rec["reward"] is None) == rec["held"]
    # the episode may end mid-hold; its last tick still closes the decision
    assert res.trace[-1]["reward"] is not None


def test_mismatched_heads_rejected(stack):
    bad = dataclasses.replace(stack, local=policies.new_local(np.random.default_rng(0),
                                                              policies.ModelSizes(embedding_dim=16)))
    with pytest.raises(UsageError):
        run_episode(world(), bad, FixedRouter(0), seed=0)


def test_buffer_marks_terminal_and_truncated(stack):
    buf = RolloutBuffer()
    run_episode(world(0, max_steps=20), stack, FixedRouter(0), seed=0, mode="train", buffer=buf,
                value_fn=lambda s: 7.0)
    assert buf.truncated[-1] and buf.bootstrap[-1] == 7.0 and not any(buf.terminal)


# --- training ------------------------------------------------------------------------------

def short_training(stack, seed=0, episodes=100, **kw):
    cfg = PPOConfig(episodes=episodes, seed=seed, eval_seeds=4, **kw)

    def world_for(idx):
        return world(5, idx)
    return router.train_router(world_for, stack, cfg, range(10), routes.EVAL_ROUTES)


def test_curve_length_and_rerun_identity(stack):
    _, c1, _, _ = short_training(stack)
    _, c2, _, _ = short_training(stack)
    assert len(c1.points) == 100 // 50
    assert c1.rows() == c2.rows()
    assert [p.checkpoint_index for p in c1.points] == [0, 1]


def test_no_history_router_sees_embedding_only(stack):
    agent, *_ = short_training(stack, episodes=1, history_enabled=False)
    assert agent.input_dim == stack.trunk.embedding_dim


def test_buffer_is_emptied_after_each_update(stack, monkeypatch):
    sizes, real = [], router.ppo_update

    def spy(buffer, *args):
        sizes.append(len(buffer))
        return real(buffer, *args)
    monkeypatch.setattr(router, "ppo_update", spy)
    steps = []
    real_run = router.run_episode

    def run_spy(*args, **kw):
        res = real_run(*args, **kw)
        if kw.get("mode") == "train":
            steps.append(res.summary.steps)
        return res
    monkeypatch.setattr(router, "run_episode", run_spy)
    short_training(stack, episodes=5, eval_every=50)
    assert sizes == steps


def cloud_probability(agent, stack, history_enabled):
    lr = LearnedRouter(agent, history_enabled, deterministic=False)
    res = run_episode(world(5, 2), stack, lr, seed=0)
    return res.summary.N_cloud / res.summary.steps


def test_equal_costs_push_router_toward_cloud(small_run):
    from lcroute.harness.commands import load_models
    trunk, local, cloud = load_models(small_run["cfg"], small_run["models"])
    base = Stack(trunk, local, cloud)
    flat = Stack(trunk, local, cloud, energy=costs.EnergyConfig(E_cloud=0.15, embedding_comm_energy=0.0),
                 latency=costs.LatencyConfig(model="zero", t_cloud_infer=0.0))
    rises = 0
    for seed in range(3):
        a_default, *_ = short_training(base, seed=seed, episodes=60)
        a_flat, *_ = short_training(flat, seed=seed, episodes=60)
        rises += cloud_probability(a_flat, flat, True) > cloud_probability(a_default, base, True)
    assert rises == 3
