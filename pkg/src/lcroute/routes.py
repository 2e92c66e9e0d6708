"""Fixed route fixtures.

Each route is stored as a handful of anchor points and densified to a regular
spacing before use, so that "distance to the nearest waypoint" stays close to
the lateral distance from the path.
"""

from __future__ import annotations

import math

import numpy as np

WAYPOINT_SPACING = 0.5

_ANCHORS: list[list[tuple[float, float]]] = [
    [(0.0, 0.0), (38.0, 0.0)],
    [(0.0, 0.0), (20.0, 0.0), (20.0, 16.0)],
    [(0.0, 0.0), (12.0, 0.0), (12.0, 8.0), (26.0, 8.0)],
    [(0.0, 0.0), (10.0, 5.0), (20.0, 0.0), (30.0, 5.0)],
    [(0.0, 0.0), (15.0, 0.0), (15.0, -12.0), (27.0, -12.0)],
    [(0.0, 0.0), (0.0, 18.0), (16.0, 18.0)],
    [(0.0, 0.0), (8.0, 6.0), (18.0, 6.0), (26.0, 0.0), (34.0, 0.0)],
    [(0.0, 0.0), (25.0, 10.0)],
    [(0.0, 0.0), (10.0, 0.0), (10.0, 10.0), (20.0, 10.0), (20.0, 18.0)],
    [(0.0, 0.0), (14.0, -6.0), (28.0, 0.0), (36.0, 0.0)],
]

ROUTE_COUNT = len(_ANCHORS)
EVAL_ROUTES = (0, 2, 4, 6, 8)


def densify(anchors, spacing: float = WAYPOINT_SPACING) -> np.ndarray:
    """Resample a polyline so consecutive waypoints are at most ``spacing`` apart."""
    pts = np.asarray(anchors, dtype=float)
    out = [pts[0]]
    for a, b in zip(pts[:-1], pts[1:]):
        seg = float(np.hypot(*(b - a)))
        n = max(1, math.ceil(seg / spacing - 1e-9))
        for i in range(1, n + 1):
            out.append(a + (b - a) * (i / n))
    return np.array(out)


def route(index: int) -> np.ndarray:
    if not 0 <= index < ROUTE_COUNT:
        raise IndexError(f"route index {index} outside 0..{ROUTE_COUNT - 1}")
    return densify(_ANCHORS[index])


def polyline_length(points) -> float:
    pts = np.asarray(points, dtype=float)
    return float(np.hypot(*np.diff(pts, axis=0).T).sum())
