import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from lcroute import metrics
from lcroute.metrics import EpisodeSummary


def ep(**kw):
    base = dict(RC=100.0, success=True, collisions=0, meters=30.0, max_RD=0.2, N_local=300, N_cloud=0,
                energy=45.0, decision_seconds=300 * 0.0153, steps=300)
    base.update(kw)
    return EpisodeSummary(**base)


@pytest.mark.parametrize("rc, ic, ns", [(95.90, 0.02, 94.58), (75.23, 0.16, 67.33), (98.50, 0.03, 96.47)])
def test_navigation_score_table_rows(rc, ic, ns):
    assert metrics.navigation_score(rc, ic, 1.0) == pytest.approx(ns, abs=0.01)


def test_deviation_penalty_threshold():
    assert metrics.deviation_penalty(1.5) == 1.0
    assert metrics.deviation_penalty(1.51) == 0.8


def test_energy_penalty_examples():
    assert metrics.energy_penalty(28.5, 90, 10) == pytest.approx(1 - 28.5 / 165, abs=1e-12)
    assert metrics.energy_penalty(0.15 * 77, 77, 0) == pytest.approx(0.90909, abs=1e-5)
    assert metrics.energy_penalty(3.02482 * 50, 0, 50) == 0.0


def test_energy_penalty_needs_steps():
    with pytest.raises(ValueError):
        metrics.energy_penalty(0.0, 0, 0)


def test_perfect_local_episode():
    r = metrics.aggregate([ep()])
    assert (r.SR, r.IC, r.NS) == (100.0, 0.0, 100.0)
    assert r.ENS == pytest.approx(100 * (1 - 0.15 / 1.65))
    assert r.FPS == pytest.approx(1 / 0.0153)


def test_duplicate_episodes_do_not_change_report():
    e = ep(collisions=2, RC=80.0, max_RD=2.0, N_cloud=20, energy=45 + 20 * 1.5)
    assert metrics.aggregate([e, e]).metric_row() == pytest.approx(metrics.aggregate([e]).metric_row())


def test_ic_pools_sums_not_ratios():
    skewed = [ep(collisions=1, meters=1.0), ep(collisions=0, meters=99.0)]
    assert metrics.aggregate(skewed).IC == pytest.approx(1 / 100)


def test_pooled_mode_uses_pooled_rc_ic():
    eps = [ep(collisions=3, meters=10.0, RC=50.0), ep(collisions=0, meters=30.0)]
    r = metrics.aggregate(eps, metrics.MetricConfig(pooled=True))
    assert r.NS == pytest.approx(75.0 * 0.5 ** (3 / 40))


summaries = st.builds(
    lambda rc, col, m, rd, nl, nc, raw: ep(RC=rc, success=rc == 100.0, collisions=col, meters=m, max_RD=rd,
                                           N_local=nl, N_cloud=nc, steps=nl + nc,
                                           energy=0.15 * nl + (3.02482 if raw else 1.5) * nc,
                                           decision_seconds=0.0153 * nl + 0.54 * nc),
    st.floats(0, 100), st.integers(0, 5), st.floats(0.5, 60), st.floats(0, 3),
    st.integers(0, 400), st.integers(1, 400), st.booleans())


@given(st.lists(summaries, min_size=1, max_size=8))
def test_aggregate_matches_straight_line_recomputation(batch):
    r = metrics.aggregate(batch)
    n = len(batch)
    ns_list, ens_list = [], []
    for e in batch:
        ic = e.collisions / e.meters
        ns = e.RC * 0.5 ** ic * (0.8 if e.max_RD > 1.5 else 1.0)
        pe = 1 - e.energy / (1.65 * (e.N_local + e.N_cloud))
        ns_list.append(ns)
        ens_list.append(min(1.0, max(0.0, pe)) * ns)
    assert r.NS == pytest.approx(sum(ns_list) / n)
    assert r.ENS == pytest.approx(sum(ens_list) / n)
    assert r.ENS <= r.NS + 1e-9
    assert r.IC == pytest.approx(sum(e.collisions for e in batch) / sum(e.meters for e in batch))
    assert r.energy_per_meter == pytest.approx(sum(e.energy for e in batch) / sum(e.meters for e in batch))
    assert r.SR == pytest.approx(100 * sum(e.success for e in batch) / n)
    assert r.FPS == pytest.approx(sum(e.steps for e in batch) / sum(e.decision_seconds for e in batch))


@given(st.floats(0.1, 100), st.floats(0, 2), st.floats(0.001, 1))
def test_ns_strictly_decreasing_in_ic(rc, ic, bump):
    assert metrics.navigation_score(rc, ic + bump, 1.0) < metrics.navigation_score(rc, ic, 1.0)
    assert metrics.navigation_score(rc, ic, 0.8) <= metrics.navigation_score(rc, ic, 1.0)


def test_empty_or_stationary_batches_rejected():
    with pytest.raises(ValueError):
        metrics.aggregate([])
    with pytest.raises(ValueError):
        metrics.aggregate([ep(meters=0.0)])


def test_ens_stats():
    mean, std = metrics.ens_stats([ep(), ep(RC=50.0)])
    p = 1 - 0.15 / 1.65
    assert mean == pytest.approx(75 * p) and std == pytest.approx(25 * p)
    assert math.isfinite(std)
