"""Independent reference implementations used by the tests."""

import numpy as np

from lcroute import nn
from lcroute.router import RolloutBuffer


def brute_force_gae(buf: RolloutBuffer, gamma: float, lam: float) -> np.ndarray:
    """O(T^2) sum of discounted TD residuals up to each episode's end."""
    n = len(buf)
    v = np.asarray(buf.values)
    deltas = np.zeros(n)
    ends = []
    for t in range(n):
        if buf.terminal[t]:
            nxt = 0.0
        elif buf.truncated[t]:
            nxt = buf.bootstrap[t]
        else:
            nxt = v[t + 1]
        deltas[t] = buf.rewards[t] + gamma * nxt - v[t]
        if buf.terminal[t] or buf.truncated[t]:
            ends.append(t)
    out = np.zeros(n)
    for t in range(n):
        end = next(e for e in ends if e >= t)
        out[t] = sum((gamma * lam) ** (k - t) * deltas[k] for k in range(t, end + 1))
    return out


def random_buffer(rng, max_episodes: int = 4) -> RolloutBuffer:
    buf = RolloutBuffer()
    for _ in range(int(rng.integers(1, max_episodes + 1))):
        for _ in range(int(rng.integers(1, 30))):
            buf.add(np.zeros(1), int(rng.integers(2)), -0.7, rng.normal(), rng.normal())
        buf.end_episode(terminal=bool(rng.random() < 0.5), bootstrap_value=float(rng.normal()))
    return buf


def finite_difference_grads(weights: nn.MLPWeights, spec: nn.MLPSpec, x, upstream, h: float = 1e-6) -> list:
    """Central differences of sum(upstream * f(x)) w.r.t. every parameter, in backward's order."""
    grads = []
    for p in weights.params():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            weights.version += 1
            plus = float((nn.predict(weights, spec, x) * upstream).sum())
            p[idx] = old - h
            weights.version += 1
            minus = float((nn.predict(weights, spec, x) * upstream).sum())
            p[idx] = old
            weights.version += 1
            g[idx] = (plus - minus) / (2 * h)
        grads.append(g)
    return grads
