"""Energy accounting and stochastic communication latency."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

LOCAL, CLOUD = 0, 1

# Gaussian (mean, std) in seconds for each shipped latency profile.
LATENCY_PROFILES = {
    "paper-supp": (0.5, 0.1),
    "table-consistent": (0.1, 0.02),
}


@dataclass
class EnergyConfig:
    E_local: float = 0.15
    E_cloud: float = 1.5
    joule_per_byte: float = 6.94e-5
    raw_comm_energy: float = 1.55
    embedding_comm_energy: float = 0.02518
    # exposed for the flops-based estimator only; no default is derived from it
    joule_per_flop: float = 0.095
    payload_mode: str = "embedding"
    byte_based: bool = False
    raw_bytes: int = 480 * 480 * 3
    embedding_bytes: int = 24 * 24

    def validate(self) -> "EnergyConfig":
        for name in ("E_local", "E_cloud", "joule_per_byte", "raw_comm_energy",
                     "embedding_comm_energy", "joule_per_flop"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.E_cloud < self.E_local:
            raise ConfigError("E_cloud must be >= E_local")
        if self.payload_mode not in ("raw", "embedding"):
            raise ConfigError(f"unknown payload_mode {self.payload_mode!r}")
        return self

    def comm_energy(self, mode: str) -> float:
        if self.byte_based:
            nbytes = self.raw_bytes if mode == "raw" else self.embedding_bytes
            return nbytes * self.joule_per_byte
        return self.raw_comm_energy if mode == "raw" else self.embedding_comm_energy


@dataclass
class LatencyConfig:
    model: str = "gaussian"
    profile: str = "paper-supp"
    mu: float | None = None
    sigma: float | None = None
    pareto_xm: float = 0.1
    pareto_shape: float = 3.0
    t_local_infer: float = 0.0153
    t_cloud_infer: float = 0.040

    def __post_init__(self):
        if self.profile not in LATENCY_PROFILES:
            raise ConfigError(f"unknown latency profile {self.profile!r}")
        mu, sigma = LATENCY_PROFILES[self.profile]
        if self.mu is None:
            self.mu = mu
        if self.sigma is None:
            self.sigma = sigma

    def validate(self) -> "LatencyConfig":
        if self.model not in ("gaussian", "pareto", "zero"):
            raise ConfigError(f"unknown latency model {self.model!r}")
        if min(self.mu, self.sigma, self.t_local_infer, self.t_cloud_infer) < 0:
            raise ConfigError("latency times must be >= 0")
        if self.pareto_xm <= 0 or self.pareto_shape <= 0:
            raise ConfigError("pareto parameters must be positive")
        return self


@dataclass
class EnergyLedger:
    N_local: int = 0
    N_cloud: int = 0
    log: list = field(default_factory=list)

    @property
    def total_joules(self) -> float:
        return math.fsum(j for _, j in self.log)

    def record(self, source: int, joules: float) -> None:
        if source == CLOUD:
            self.N_cloud += 1
        else:
            self.N_local += 1
        self.log.append((source, joules))


def step_energy(source: int, config: EnergyConfig) -> float:
    """Joules charged for one decision step."""
    if source == LOCAL:
        return config.E_local
    if config.payload_mode == "embedding":
        return config.E_cloud
    # swap the communication share for the raw-payload figure
    return config.E_cloud - config.comm_energy("embedding") + config.comm_energy("raw")


def max_step_energy(config: EnergyConfig) -> float:
    return max(step_energy(LOCAL, config), step_energy(CLOUD, config))


def episode_energy(ledger: EnergyLedger, config: EnergyConfig | None = None) -> float:
    if len(ledger.log) != ledger.N_local + ledger.N_cloud:
        raise ValueError("ledger counts do not match its per-step log")
    n_cloud = sum(1 for src, _ in ledger.log if src == CLOUD)
    if n_cloud != ledger.N_cloud:
        raise ValueError("ledger cloud count does not match its per-step log")
    if config is not None and config.payload_mode == "embedding" and not config.byte_based:
        return config.E_local * ledger.N_local + config.E_cloud * ledger.N_cloud
    return math.fsum(j for _, j in ledger.log)


def sample_latency(config: LatencyConfig, rng: np.random.Generator) -> float:
    if config.model == "zero":
        return 0.0
    if config.model == "pareto":
        u = 1.0 - rng.random()  # (0, 1]
        return config.pareto_xm * u ** (-1.0 / config.pareto_shape)
    return max(0.0, config.mu + config.sigma * rng.standard_normal())


def latency_to_ticks(latency: float, extra_compute: float, dt: float) -> int:
    """Control ticks a cloud call occupies, reply tick included (minimum 1)."""
    if latency < 0 or extra_compute < 0 or dt <= 0:
        raise ValueError("latency and compute must be >= 0 and dt > 0")
    # guard against 0.3/0.1 = 2.9999999999999996 style artefacts
    ratio = (latency + extra_compute) / dt
    return max(1, math.ceil(round(ratio, 9)))


def decision_time(source: int, sampled_latency: float, config: LatencyConfig) -> float:
    if source == LOCAL:
        return config.t_local_infer
    return sampled_latency + config.t_cloud_infer
