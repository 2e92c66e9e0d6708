"""Binary local/cloud routing policy and its PPO trainer."""

from __future__ import annotations

import dataclasses
import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import costs, env, nn, policies
from .errors import ConfigError, TrainingDiverged, UsageError
from .metrics import EpisodeSummary, MetricConfig, aggregate, ens_stats
from .reward import RewardConfig, compose

log = logging.getLogger(__name__)


@dataclass
class PPOConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    update_epochs: int = 4
    minibatch_size: int = 256
    policy_lr: float = 3e-4
    value_lr: float = 1e-3
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    episodes: int = 1000
    policy_hidden: tuple = (16, 16)
    value_hidden: tuple = (256, 256)
    history_enabled: bool = True
    history_k: int = 8
    episodes_per_update: int = 1
    eval_every: int = 50
    eval_seeds: int = 10
    seed: int = 0

    def __post_init__(self):
        self.policy_hidden = tuple(self.policy_hidden)
        self.value_hidden = tuple(self.value_hidden)

    def validate(self) -> "PPOConfig":
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma must lie in (0, 1]")
        if not 0 <= self.gae_lambda <= 1:
            raise ConfigError("gae_lambda must lie in [0, 1]")
        if self.clip <= 0:
            raise ConfigError("clip must be positive")
        if self.history_k < 1 or self.episodes < 0 or self.eval_every < 1 or self.episodes_per_update < 1:
            raise ConfigError("history_k, eval_every and episodes_per_update must be >= 1")
        return self


class History:
    """Ring buffer of the last k executed actions and where they came from."""

    def __init__(self, k: int = 8):
        self.k = k
        self.entries = deque([(0.0, 0.0, 0)] * k, maxlen=k)

    def push(self, action: env.Action, source: int) -> None:
        self.entries.append((float(action.d), float(action.v), int(source)))

    def set_last(self, action: env.Action, source: int) -> None:
        self.entries[-1] = (float(action.d), float(action.v), int(source))

    def flat(self, d_m: float = 0.3, m_v: float = 1.5) -> np.ndarray:
        return np.array([x for d, v, s in self.entries for x in (d / d_m, v / m_v, float(s))])

    def sources(self) -> list[int]:
        return [s for _, _, s in self.entries]


def router_input(embedding: np.ndarray, history: History | None, scale=policies.ActionScale()) -> np.ndarray:
    if history is None:
        return np.asarray(embedding, dtype=float)
    return np.concatenate([embedding, history.flat(scale.d_m, scale.m_v)])


def input_width(embedding_dim: int, config: PPOConfig) -> int:
    return embedding_dim + (3 * config.history_k if config.history_enabled else 0)


@dataclass
class RouterAgent:
    policy_spec: nn.MLPSpec
    policy: nn.MLPWeights
    value_spec: nn.MLPSpec
    value: nn.MLPWeights
    policy_opt: nn.AdamWState
    value_opt: nn.AdamWState

    @classmethod
    def create(cls, in_dim: int, config: PPOConfig, rng: np.random.Generator) -> "RouterAgent":
        pspec = nn.MLPSpec((in_dim, *config.policy_hidden, 2), ("tanh",) * len(config.policy_hidden), "identity")
        vspec = nn.MLPSpec((in_dim, *config.value_hidden, 1), ("tanh",) * len(config.value_hidden), "identity")
        policy = nn.init_weights(pspec, rng)
        # small final layer keeps the initial routing distribution near uniform
        policy.weights[-1] *= 0.01
        return cls(pspec, policy, vspec, nn.init_weights(vspec, rng),
                   nn.AdamWState(lr=config.policy_lr, weight_decay=0.0),
                   nn.AdamWState(lr=config.value_lr, weight_decay=0.0))

    @property
    def input_dim(self) -> int:
        return self.policy_spec.layer_widths[0]

    def snapshot(self) -> tuple:
        return self.policy.copy(), self.value.copy()

    def restore(self, snap: tuple) -> None:
        self.policy, self.value = snap[0].copy(), snap[1].copy()


def softmax2(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax2(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def decide(policy: nn.MLPWeights, spec: nn.MLPSpec, state, rng: np.random.Generator | None,
           deterministic: bool = False) -> tuple[int, float]:
    """Pick 0 (local) or 1 (cloud); returns the decision and its log-probability."""
    state = np.asarray(state, dtype=float)
    if state.shape[-1] != spec.layer_widths[0]:
        raise UsageError(f"router state width {state.shape[-1]} != network input {spec.layer_widths[0]}")
    logits = nn.predict(policy, spec, state)
    logp = log_softmax2(logits)
    if deterministic:
        a = int(logp[1] > logp[0])
    else:
        a = int(rng.random() < math.exp(logp[1]))
    return a, float(logp[a])


def value(weights: nn.MLPWeights, spec: nn.MLPSpec, state) -> float:
    state = np.asarray(state, dtype=float)
    if state.shape[-1] != spec.layer_widths[0]:
        raise UsageError(f"value state width {state.shape[-1]} != network input {spec.layer_widths[0]}")
    return float(nn.predict(weights, spec, state)[0])


@dataclass
class RolloutBuffer:
    states: list = field(default_factory=list)
    decisions: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    values: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    terminal: list = field(default_factory=list)
    truncated: list = field(default_factory=list)
    # value of the state after a truncated step, used to bootstrap
    bootstrap: list = field(default_factory=list)

    def add(self, state, decision, log_prob, value_est, reward) -> None:
        self.states.append(np.asarray(state, dtype=float))
        self.decisions.append(int(decision))
        self.log_probs.append(float(log_prob))
        self.values.append(float(value_est))
        self.rewards.append(float(reward))
        self.terminal.append(False)
        self.truncated.append(False)
        self.bootstrap.append(0.0)

    def end_episode(self, terminal: bool, bootstrap_value: float = 0.0) -> None:
        if not self.states:
            return
        if terminal:
            self.terminal[-1] = True
        else:
            self.truncated[-1] = True
            self.bootstrap[-1] = float(bootstrap_value)

    def clear(self) -> None:
        for f in dataclasses.fields(self):
            getattr(self, f.name).clear()

    def __len__(self) -> int:
        return len(self.states)


def gae_advantages(buffer: RolloutBuffer, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalised advantage estimates and value targets (raw, unnormalised)."""
    n = len(buffer)
    if n == 0:
        raise ValueError("empty rollout buffer")
    if not (buffer.terminal[-1] or buffer.truncated[-1]):
        raise ValueError("last episode in the buffer is not finished")
    r = np.asarray(buffer.rewards)
    v = np.asarray(buffer.values)
    adv = np.zeros(n)
    running = 0.0
    for t in reversed(range(n)):
        if buffer.terminal[t]:
            next_v, running = 0.0, 0.0
        elif buffer.truncated[t]:
            next_v, running = buffer.bootstrap[t], 0.0
        else:
            next_v = v[t + 1]
        delta = r[t] + gamma * next_v - v[t]
        running = delta + gamma * lam * running
        adv[t] = running
    return adv, adv + v


def clipped_surrogate(ratio, advantage, clip: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample ``min(r*A, clip(r)*A)`` and its derivative w.r.t. log-ratio."""
    ratio = np.asarray(ratio, dtype=float)
    advantage = np.asarray(advantage, dtype=float)
    unclipped = ratio * advantage
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip) * advantage
    obj = np.minimum(unclipped, clipped)
    # gradient flows only where the unclipped branch is the active one
    active = unclipped <= clipped
    return obj, np.where(active, unclipped, 0.0)


def policy_loss_and_grad(logits: np.ndarray, actions: np.ndarray, old_logp: np.ndarray, adv: np.ndarray,
                         clip: float, entropy_coef: float) -> tuple[float, np.ndarray, dict]:
    """Loss ``-mean(surrogate) - c * mean(entropy)`` and its gradient w.r.t. logits."""
    m = len(actions)
    logp_all = log_softmax2(logits)
    p = np.exp(logp_all)
    logp = logp_all[np.arange(m), actions]
    ratio = np.exp(logp - old_logp)
    obj, dobj = clipped_surrogate(ratio, adv, clip)
    ent = -(p * logp_all).sum(axis=1)
    loss = -obj.mean() - entropy_coef * ent.mean()
    onehot = np.zeros_like(p)
    onehot[np.arange(m), actions] = 1.0
    d_ent = -p * (logp_all + ent[:, None])
    grad = (-dobj[:, None] * (onehot - p) - entropy_coef * d_ent) / m
    info = {"entropy": float(ent.mean()), "approx_kl": float((old_logp - logp).mean()),
            "clip_frac": float((np.abs(ratio - 1.0) > clip).mean())}
    return float(loss), grad, info


def ppo_update(buffer: RolloutBuffer, agent: RouterAgent, config: PPOConfig,
               rng: np.random.Generator) -> dict:
    """Clipped-surrogate PPO pass over the buffer; updates ``agent`` in place."""
    if len(buffer) == 0:
        raise ValueError("ppo_update needs a non-empty buffer")
    adv, returns = gae_advantages(buffer, config.gamma, config.gae_lambda)
    if len(adv) > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    states = np.stack(buffer.states)
    actions = np.asarray(buffer.decisions)
    old_logp = np.asarray(buffer.log_probs)
    n = len(states)
    stats = {"policy_loss": [], "value_loss": [], "entropy": [], "approx_kl": [], "clip_frac": []}
    for _ in range(config.update_epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.minibatch_size):
            mb = order[start:start + config.minibatch_size]
            logits, pcache = nn.forward(agent.policy, agent.policy_spec, states[mb])
            ploss, dlogits, info = policy_loss_and_grad(
                logits, actions[mb], old_logp[mb], adv[mb], config.clip, config.entropy_coef)
            v, vcache = nn.forward(agent.value, agent.value_spec, states[mb])
            err = v[:, 0] - returns[mb]
            vloss = config.value_coef * float((err ** 2).mean())
            dv = (config.value_coef * 2.0 * err / len(mb))[:, None]
            pgrads, _ = nn.backward(pcache, dlogits)
            vgrads, _ = nn.backward(vcache, dv)
            if not (math.isfinite(ploss) and math.isfinite(vloss)
                    and all(np.isfinite(g).all() for g in pgrads + vgrads)):
                raise TrainingDiverged("non-finite PPO loss", {"policy_loss": ploss, "value_loss": vloss,
                                                               "buffer_size": n})
            nn.adamw_step(agent.policy, pgrads, agent.policy_opt)
            nn.adamw_step(agent.value, vgrads, agent.value_opt)
            stats["policy_loss"].append(ploss)
            stats["value_loss"].append(vloss)
            for key in ("entropy", "approx_kl", "clip_frac"):
                stats[key].append(info[key])
    return {k: float(np.mean(vs)) for k, vs in stats.items()}


# --- routing rules -----------------------------------------------------------

class FixedRouter:
    history_enabled = True

    def __init__(self, decision: int):
        self.decision = int(decision)

    def choose(self, state, rng):
        return self.decision, 0.0, 0.0


class RandomRouter:
    history_enabled = True

    def __init__(self, p_cloud: float):
        if not 0 <= p_cloud <= 1:
            raise ValueError("p_cloud must lie in [0, 1]")
        self.p = p_cloud

    def choose(self, state, rng):
        return int(rng.random() < self.p), 0.0, 0.0


class LearnedRouter:
    def __init__(self, agent: RouterAgent, history_enabled: bool, deterministic: bool = True,
                 with_value: bool = False):
        self.agent = agent
        self.history_enabled = history_enabled
        self.deterministic = deterministic
        self.with_value = with_value

    def choose(self, state, rng):
        a, logp = decide(self.agent.policy, self.agent.policy_spec, state, rng, self.deterministic)
        v = value(self.agent.value, self.agent.value_spec, state) if self.with_value else 0.0
        return a, logp, v


@dataclass
class Stack:
    """Everything an episode needs besides the world and the router."""
    trunk: policies.SharedTrunk
    local: policies.LocalHead
    cloud: policies.CloudHead
    reward: RewardConfig = field(default_factory=RewardConfig)
    energy: costs.EnergyConfig = field(default_factory=costs.EnergyConfig)
    latency: costs.LatencyConfig = field(default_factory=costs.LatencyConfig)
    history_k: int = 8

    def m_e(self) -> float:
        peak = costs.max_step_energy(self.energy)
        if self.reward.m_e is None:
            return peak
        if self.reward.m_e < peak - 1e-12:
            raise ConfigError(f"m_e={self.reward.m_e} is below the costliest step ({peak} J)")
        return self.reward.m_e


@dataclass
class EpisodeResult:
    summary: EpisodeSummary
    trace: list
    episode_return: float
    ledger: costs.EnergyLedger
    history_sources: list = field(default_factory=list)


def run_episode(world: env.WorldConfig, stack: Stack, router, seed: int, mode: str = "eval",
                buffer: RolloutBuffer | None = None, record_trace: bool = False,
                value_fn=None) -> EpisodeResult:
    """Roll one episode, routing every decision between local and cloud.

    Each decision appends the local proposal to the history, asks the router, and
    on a cloud call holds the previously executed action for the latency ticks
    before executing the cloud action and overwriting the newest history entry.
    """
    if stack.trunk.embedding_dim != stack.local.spec.layer_widths[0] - policies.GOAL_DIM:
        raise UsageError("local head does not match the trunk embedding width")
    if stack.cloud.body_spec.layer_widths[0] != stack.trunk.embedding_dim:
        raise UsageError("cloud head does not match the trunk embedding width")
    scale = policies.ActionScale(world.d_m, world.m_v)
    m_e = stack.m_e()
    state, obs = env.new_episode(world, seed, mode)
    rng = np.random.default_rng([seed, 7919])
    history = History(stack.history_k)
    executed = env.Action(0.0, 0.0)
    ledger = costs.EnergyLedger()
    trace: list = []
    total_return = 0.0
    seconds_total = 0.0
    decisions = 0
    use_additive = stack.reward.kind == "additive"
    done = False
    outcome = None
    while not done:
        emb = policies.embed(stack.trunk, obs)
        a_local = policies.local_act(stack.local, emb, obs.goal, scale)
        history.push(a_local, costs.LOCAL)
        s_vec = router_input(emb, history if router.history_enabled else None, scale)
        decision, logp, v_est = router.choose(s_vec, rng)
        if decision == costs.CLOUD:
            chosen = policies.cloud_act(stack.cloud, emb, obs.goal, scale)
            latency = costs.sample_latency(stack.latency, rng)
            ticks = costs.latency_to_ticks(latency, stack.latency.t_cloud_infer, world.dt)
        else:
            chosen, latency, ticks = a_local, 0.0, 1
        seconds = costs.decision_time(decision, latency, stack.latency)
        joules = costs.step_energy(decision, stack.energy)
        ledger.record(decision, joules)
        seconds_total += seconds
        decisions += 1

        collided = False
        for tick in range(ticks):
            held = tick < ticks - 1
            act = executed if held else chosen
            outcome = env.step(state, act, world)
            collided |= outcome.events.collision
            done = outcome.done
            last_tick = not held or done
            breakdown = None
            if last_tick:
                breakdown = compose(outcome.d_geo, act.v, act.d, joules, collided, stack.reward, m_e)
            if record_trace:
                trace.append({
                    "step": state.step_index, "decision": decisions - 1,
                    "x": float(state.robot.position[0]), "y": float(state.robot.position[1]),
                    "heading": state.robot.heading, "d": act.d, "v": act.v,
                    "source": decision, "held": held,
                    "reward": breakdown.as_dict() if breakdown else None,
                    "d_geo": outcome.d_geo,
                    "energy": joules if tick == 0 else 0.0,
                    "seconds": seconds if tick == 0 else 0.0,
                    "events": outcome.events.as_dict(),
                })
            if done:
                break
        executed = chosen if not held else executed
        if decision == costs.CLOUD:
            history.set_last(chosen, costs.CLOUD)
        obs = outcome.observation
        r = breakdown.additive if use_additive else breakdown.total
        total_return += r
        if buffer is not None:
            buffer.add(s_vec, decision, logp, v_est, r)
    if buffer is not None:
        ev = outcome.events
        terminal = ev.reached_goal or ev.deviated or (ev.collision and mode == "train")
        boot = 0.0
        if not terminal and value_fn is not None:
            emb = policies.embed(stack.trunk, obs)
            boot = value_fn(router_input(emb, history if router.history_enabled else None, scale))
        buffer.end_episode(terminal, boot)

    summary = EpisodeSummary(
        RC=100.0 * env.route_progress(state), success=bool(outcome.events.reached_goal),
        collisions=int(state.collision_count), meters=float(state.meters_traveled),
        max_RD=float(state.max_deviation), N_local=ledger.N_local, N_cloud=ledger.N_cloud,
        energy=ledger.total_joules, decision_seconds=seconds_total, steps=decisions,
    )
    return EpisodeResult(summary, trace, total_return, ledger, history.sources())


# --- training ----------------------------------------------------------------

@dataclass
class CurvePoint:
    checkpoint_index: int
    episodes: int
    mean_reward: float
    ENS_mean: float
    ENS_std: float


@dataclass
class TrainCurve:
    points: list = field(default_factory=list)

    def rows(self) -> list[dict]:
        return [dataclasses.asdict(p) for p in self.points]


EVAL_SEED_BASE = 1_000_000
# checkpoint selection during training never sees the final evaluation cells
VALIDATION_SEED_BASE = 2_000_000


def eval_seed_cells(n: int, routes_for_eval, base: int = EVAL_SEED_BASE) -> list[tuple[int, int]]:
    """(route_index, env_seed) pairs shared by every method for paired comparison."""
    return [(routes_for_eval[i % len(routes_for_eval)], base + i) for i in range(n)]


def evaluate(world_for, stack: Stack, router, cells, metric_cfg: MetricConfig | None = None):
    results = [run_episode(world_for(r), stack, router, seed, mode="eval") for r, seed in cells]
    return results


def train_router(world_for, stack: Stack, config: PPOConfig, train_routes, eval_routes,
                 metric_cfg: MetricConfig | None = None, on_update=None):
    """Alternate on-policy collection and PPO updates; evaluate every ``eval_every`` episodes.

    ``world_for(route_index)`` builds the world config for a route.
    Returns ``(agent, curve, best_agent_snapshot, diverged)``.
    """
    config.validate()
    metric_cfg = metric_cfg or MetricConfig(E_local=stack.energy.E_local, E_cloud=stack.energy.E_cloud)
    rng = np.random.default_rng(config.seed)
    agent = RouterAgent.create(input_width(stack.trunk.embedding_dim, config), config, rng)
    stack = dataclasses.replace(stack, history_k=config.history_k)
    train_router_ = LearnedRouter(agent, config.history_enabled, deterministic=False, with_value=True)
    cells = eval_seed_cells(config.eval_seeds, list(eval_routes), VALIDATION_SEED_BASE)
    curve = TrainCurve()
    buffer = RolloutBuffer()
    best_ens, best = -math.inf, agent.snapshot()
    diverged = False
    train_routes = list(train_routes)
    for ep in range(config.episodes):
        route_idx = train_routes[int(rng.integers(len(train_routes)))]
        seed = config.seed * 100_003 + ep
        run_episode(world_for(route_idx), stack, train_router_, seed, mode="train", buffer=buffer,
                    value_fn=lambda s: value(agent.value, agent.value_spec, s))
        if (ep + 1) % config.episodes_per_update == 0:
            snap = agent.snapshot()
            try:
                info = ppo_update(buffer, agent, config, rng)
            except TrainingDiverged as exc:
                log.error("router training diverged at episode %d: %s", ep, exc.diagnostics)
                agent.restore(snap)
                diverged = True
                buffer.clear()
                break
            buffer.clear()
            if on_update is not None:
                on_update(ep, info)
        if (ep + 1) % config.eval_every == 0:
            evaluator = LearnedRouter(agent, config.history_enabled, deterministic=True)
            results = evaluate(world_for, stack, evaluator, cells)
            ens_mean, ens_std = ens_stats([r.summary for r in results], metric_cfg)
            curve.points.append(CurvePoint(len(curve.points), ep + 1,
                                           float(np.mean([r.episode_return for r in results])),
                                           ens_mean, ens_std))
            if ens_mean > best_ens:
                best_ens, best = ens_mean, agent.snapshot()
    return agent, curve, best, diverged


def summarise(results: list[EpisodeResult], metric_cfg: MetricConfig, fingerprint: str = ""):
    return aggregate([r.summary for r in results], metric_cfg, fingerprint)
