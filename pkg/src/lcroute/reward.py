"""Per-step reward arithmetic for the routing policy.

The multiplicative form combines four bounded terms and raises the product to
``alpha`` before subtracting a separate collision penalty. The additive form is
the linear baseline used for comparison.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConfigError


@dataclass
class RewardConfig:
    alpha: float = 0.25
    epsilon: float = 0.97
    m_v: float = 1.5
    d_m: float = 0.3
    # None resolves to the costliest step under the active energy config
    m_e: float | None = None
    collision_penalty: float = 10.0
    additive_weights: tuple = (0.25, 0.25, 0.25, 1.0)
    kind: str = "multiplicative"
    use_geo: bool = True
    use_speed: bool = True
    use_energy: bool = True
    use_action: bool = True

    def __post_init__(self):
        self.additive_weights = tuple(map(float, self.additive_weights))

    def validate(self) -> "RewardConfig":
        if not 0 < self.alpha <= 1:
            raise ConfigError("alpha must lie in (0, 1]")
        if not 0 < self.epsilon < 1:
            raise ConfigError("epsilon must lie in (0, 1)")
        if self.collision_penalty <= 1:
            raise ConfigError("collision_penalty must exceed 1")
        if self.m_e is not None and self.m_e <= 0:
            raise ConfigError("m_e must be positive")
        if len(self.additive_weights) != 4:
            raise ConfigError("additive_weights needs 4 entries")
        if self.kind not in ("multiplicative", "additive"):
            raise ConfigError(f"unknown reward kind {self.kind!r}")
        return self


@dataclass
class RewardBreakdown:
    r_geo: float
    r_speed: float
    r_energy: float
    r_action: float
    r_collision_flag: float
    total: float
    additive: float = 0.0

    def as_dict(self) -> dict:
        return {"r_geo": self.r_geo, "r_speed": self.r_speed, "r_energy": self.r_energy,
                "r_action": self.r_action, "r_collision": self.r_collision_flag,
                "total": self.total, "additive": self.additive}


def geo_component(d_geo: float) -> float:
    if d_geo < 0:
        raise ValueError("d_geo must be >= 0")
    return 1.0 - math.tanh(d_geo)


def speed_component(v: float, m_v: float = 1.5) -> float:
    if not 0 <= v <= m_v:
        raise ValueError(f"speed {v} outside [0, {m_v}]")
    return v / m_v


def energy_component(e_step: float, m_e: float) -> float:
    if e_step < 0 or e_step > m_e * (1 + 1e-12):
        raise ValueError(f"step energy {e_step} outside [0, m_e={m_e}]")
    return max(0.0, 1.0 - e_step / m_e)


def action_clip(r_speed: float, d: float, d_m: float, epsilon: float = 0.97) -> float:
    return float(abs(r_speed) < epsilon and abs(d / d_m) < epsilon)


def _components(d_geo, v, d, e_step, config: RewardConfig, m_e: float):
    r_geo = geo_component(d_geo)
    r_speed = speed_component(v, config.m_v)
    r_energy = energy_component(e_step, m_e)
    r_action = action_clip(r_speed, d, config.d_m, config.epsilon)
    return r_geo, r_speed, r_energy, r_action


def compose(d_geo: float, v: float, d: float, e_step: float, collision: bool,
            config: RewardConfig, m_e: float | None = None) -> RewardBreakdown:
    """Build the full breakdown for one step.

    ``m_e`` overrides ``config.m_e`` (used when it is resolved from the energy config).
    """
    m_e = m_e if m_e is not None else config.m_e
    r_geo, r_speed, r_energy, r_action = _components(d_geo, v, d, e_step, config, m_e)
    total = compose_terms(r_geo, r_speed, r_energy, r_action, collision, config)
    additive = compose_additive(r_geo, r_speed, r_energy, collision, config)
    return RewardBreakdown(r_geo, r_speed, r_energy, r_action, float(collision), total, additive)


def compose_terms(r_geo, r_speed, r_energy, r_action, collision: bool, config: RewardConfig) -> float:
    product = 1.0
    for use, term in ((config.use_geo, r_geo), (config.use_speed, r_speed),
                      (config.use_energy, r_energy), (config.use_action, r_action)):
        if use:
            product *= term
    return product ** config.alpha - (config.collision_penalty if collision else 0.0)


def compose_additive(r_geo, r_speed, r_energy, collision: bool, config: RewardConfig) -> float:
    a_g, a_s, a_e, a_c = config.additive_weights
    return a_g * r_geo + a_s * r_speed + a_e * r_energy - (a_c * config.collision_penalty if collision else 0.0)
