"""Navigation and energy scores for evaluation episodes."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError

REPORT_METRICS = ("ENS", "NS", "SR", "RC", "Infract.", "Energy", "FPS")


@dataclass
class EpisodeSummary:
    RC: float
    success: bool
    collisions: int
    meters: float
    max_RD: float
    N_local: int
    N_cloud: int
    energy: float
    decision_seconds: float
    steps: int

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetricConfig:
    P_I: float = 0.5
    epsilon_RD: float = 1.5
    E_local: float = 0.15
    E_cloud: float = 1.5
    pooled: bool = False

    def validate(self) -> "MetricConfig":
        if not 0 < self.P_I <= 1:
            raise ConfigError("P_I must lie in (0, 1]")
        if self.epsilon_RD <= 0:
            raise ConfigError("epsilon_RD must be positive")
        return self


@dataclass
class AggregateReport:
    ENS: float
    NS: float
    SR: float
    RC: float
    IC: float
    energy_per_meter: float
    FPS: float
    episodes: int
    fingerprint: str = ""

    def metric_row(self) -> dict:
        return {"ENS": self.ENS, "NS": self.NS, "SR": self.SR, "RC": self.RC,
                "Infract.": self.IC, "Energy": self.energy_per_meter, "FPS": self.FPS}


def deviation_penalty(max_RD: float, config: MetricConfig = MetricConfig()) -> float:
    if max_RD < 0:
        raise ValueError("max_RD must be >= 0")
    return 0.8 if max_RD > config.epsilon_RD else 1.0


def navigation_score(RC: float, IC: float, P_RD: float, config: MetricConfig = MetricConfig()) -> float:
    if not 0 <= RC <= 100 or IC < 0:
        raise ValueError("RC must be in [0, 100] and IC >= 0")
    return RC * config.P_I ** IC * P_RD


def energy_penalty(energy: float, N_local: int, N_cloud: int, config: MetricConfig = MetricConfig()) -> float:
    """``1 - energy / N_E`` clamped to [0, 1]."""
    if N_local < 0 or N_cloud < 0:
        raise ValueError("step counts must be >= 0")
    if N_local + N_cloud == 0:
        raise ValueError("energy penalty undefined for an episode without decisions")
    norm = (config.E_local + config.E_cloud) * (N_local + N_cloud)
    return min(1.0, max(0.0, 1.0 - energy / norm))


def ecological_navigation_score(P_E: float, NS: float) -> float:
    return P_E * NS


def _episode_ic(ep: EpisodeSummary) -> float:
    if ep.meters > 0:
        return ep.collisions / ep.meters
    return 0.0 if ep.collisions == 0 else math.inf


def episode_scores(ep: EpisodeSummary, config: MetricConfig = MetricConfig()) -> tuple[float, float]:
    """(NS, ENS) for one episode."""
    ns = navigation_score(ep.RC, _episode_ic(ep), deviation_penalty(ep.max_RD, config), config)
    return ns, ecological_navigation_score(energy_penalty(ep.energy, ep.N_local, ep.N_cloud, config), ns)


def aggregate(episodes: list[EpisodeSummary], config: MetricConfig = MetricConfig(),
              fingerprint: str = "") -> AggregateReport:
    """Table row over a batch of episodes.

    IC and J/m are ratios of pooled sums. NS and ENS are per-episode means unless
    ``config.pooled`` is set, in which case they come from the pooled RC and IC.
    """
    if not episodes:
        raise ValueError("aggregate needs at least one episode")
    meters = math.fsum(ep.meters for ep in episodes)
    if meters <= 0:
        raise ValueError("aggregate undefined when no distance was travelled")
    n = len(episodes)
    rc = math.fsum(ep.RC for ep in episodes) / n
    sr = 100.0 * sum(ep.success for ep in episodes) / n
    ic = sum(ep.collisions for ep in episodes) / meters
    energy = math.fsum(ep.energy for ep in episodes)
    n_local = sum(ep.N_local for ep in episodes)
    n_cloud = sum(ep.N_cloud for ep in episodes)
    if config.pooled:
        p_rd = math.fsum(deviation_penalty(ep.max_RD, config) for ep in episodes) / n
        ns = navigation_score(rc, ic, p_rd, config)
        ens = ecological_navigation_score(energy_penalty(energy, n_local, n_cloud, config), ns)
    else:
        scores = [episode_scores(ep, config) for ep in episodes]
        ns = math.fsum(s[0] for s in scores) / n
        ens = math.fsum(s[1] for s in scores) / n
    seconds = math.fsum(ep.decision_seconds for ep in episodes)
    steps = sum(ep.steps for ep in episodes)
    fps = steps / seconds if seconds > 0 else 0.0
    return AggregateReport(ENS=ens, NS=ns, SR=sr, RC=rc, IC=ic, energy_per_meter=energy / meters,
                           FPS=fps, episodes=n, fingerprint=fingerprint)


def ens_stats(episodes: list[EpisodeSummary], config: MetricConfig = MetricConfig()) -> tuple[float, float]:
    vals = np.array([episode_scores(ep, config)[1] for ep in episodes])
    return float(vals.mean()), float(vals.std())
