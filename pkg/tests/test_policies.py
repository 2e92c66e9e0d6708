import numpy as np
import pytest

from lcroute import env, policies, routes
from lcroute.errors import UsageError
from lcroute.policies import ActionScale, ILHyper, ImitationDataset

FAST = ILHyper(epochs=30, lr=1e-3, batch_size=64)


def expert_dataset(pedestrians: int, episodes: int, seed: int = 0) -> ImitationDataset:
    obs, acts = [], []
    for k in range(episodes):
        cfg = env.WorldConfig(route=routes.route(k % routes.ROUTE_COUNT).tolist(), pedestrian_count=pedestrians)
        state, o = env.new_episode(cfg, seed * 1000 + k, "eval")
        done = False
        while not done:
            a = env.expert_action(state, cfg)
            obs.append(o.vector())
            acts.append((a.d, a.v))
            out = env.step(state, a, cfg)
            o, done = out.observation, out.done
    return ImitationDataset(np.array(obs), np.array(acts))


@pytest.fixture(scope="module")
def crowd_data():
    return expert_dataset(70, 8)


@pytest.fixture(scope="module")
def trained(crowd_data):
    trunk, cloud, cloud_report = policies.train_cloud(crowd_data, FAST)
    local, local_report = policies.train_local(crowd_data, trunk, FAST)
    return trunk, cloud, local, cloud_report, local_report


def test_action_scale_round_trip():
    scale = ActionScale()
    acts = np.array([[0.3, 1.5], [-0.15, 0.0], [0.0, 0.75]])
    y = scale.normalise(acts)
    back = np.array([[a.d, a.v] for a in map(scale.to_action, y)])
    assert np.allclose(back, acts)


def test_embed_is_pure_and_zero_trunk_gives_zero():
    trunk = policies.new_trunk(np.random.default_rng(0), zero=True)
    x = np.random.default_rng(1).random(policies.OBS_DIM)
    assert not policies.embed(trunk, x).any()
    trunk = policies.new_trunk(np.random.default_rng(0))
    assert np.array_equal(policies.embed(trunk, x), policies.embed(trunk, x))


def test_zero_local_head_steers_straight():
    head = policies.new_local(np.random.default_rng(0), zero=True)
    a = policies.local_act(head, np.zeros(32), np.zeros(2))
    assert a.d == 0.0 and a.v == pytest.approx(0.75)


@pytest.mark.parametrize("seed", range(5))
def test_actions_stay_in_bounds(seed):
    rng = np.random.default_rng(seed)
    local = policies.new_local(rng)
    cloud = policies.new_cloud(rng)
    for _ in range(20):
        emb, goal = rng.normal(0, 50, 32), rng.normal(0, 50, 2)
        for a in (policies.local_act(local, emb, goal), policies.cloud_act(cloud, emb, goal)):
            assert -0.3 <= a.d <= 0.3 and 0 <= a.v <= 1.5


def test_preset_sizes_and_capacity_order():
    rng = np.random.default_rng(0)
    trunk, local, cloud = policies.new_trunk(rng), policies.new_local(rng), policies.new_cloud(rng)
    assert trunk.spec.layer_widths == (19, 64, 32)
    assert local.spec.layer_widths == (34, 32, 2)
    assert cloud.body_spec.layer_widths == (32, 128, 128) and cloud.merge_spec.layer_widths == (130, 64, 2)
    assert local.parameter_count < cloud.parameter_count


def test_local_training_needs_a_trained_trunk(crowd_data):
    with pytest.raises(UsageError):
        policies.train_local(crowd_data, policies.new_trunk(np.random.default_rng(0)), FAST)


def test_empty_dataset_rejected():
    empty = ImitationDataset(np.zeros((0, 19)), np.zeros((0, 2)))
    with pytest.raises(ValueError):
        policies.train_cloud(empty, FAST)


def test_constant_actions_are_learned_exactly():
    rng = np.random.default_rng(0)
    obs = np.tile(rng.random(19), (512, 1))
    ds = ImitationDataset(obs, np.tile([0.1, 0.9], (512, 1)))
    trunk, cloud, _ = policies.train_cloud(ds, ILHyper(epochs=200, batch_size=64))
    pred = policies._cloud_raw(cloud, policies.embed(trunk, obs), obs[:, policies.GOAL_SLICE])
    final_loss = np.abs(pred - ActionScale().normalise(ds.actions)).mean()
    assert final_loss < 1e-3


def test_reports_have_one_entry_per_epoch(trained):
    *_, cloud_report, local_report = trained
    for r in (cloud_report, local_report):
        assert len(r.train_loss) == len(r.val_loss) == FAST.epochs
        best = np.minimum.accumulate([r.initial_val_loss, *r.val_loss])
        assert np.all(np.diff(best) <= 0)


def test_training_beats_untrained_baseline(trained, crowd_data):
    trunk, cloud, local, cloud_report, local_report = trained
    assert min(cloud_report.val_loss) < cloud_report.initial_val_loss
    assert min(local_report.val_loss) < local_report.initial_val_loss
    untrained = policies.new_local(np.random.default_rng(5))
    assert policies.validation_loss(crowd_data, trunk, local, FAST) < \
        policies.validation_loss(crowd_data, trunk, untrained, FAST)


def test_trunk_frozen_during_local_training(trained, crowd_data):
    trunk = trained[0]
    before = trunk.weights.digest()
    policies.train_local(crowd_data, trunk, ILHyper(epochs=2))
    assert trunk.weights.digest() == before


def test_cloud_fits_crowd_data_at_least_as_well_as_local(trained, crowd_data):
    trunk, cloud, local, *_ = trained
    assert policies.validation_loss(crowd_data, trunk, cloud, FAST) <= \
        policies.validation_loss(crowd_data, trunk, local, FAST)


def test_trained_trunk_separates_observations(trained, crowd_data):
    trunk = trained[0]
    a, b = crowd_data.observations[0], crowd_data.observations[-1]
    assert not np.array_equal(policies.embed(trunk, a), policies.embed(trunk, b))


def test_model_sizes_mismatch_rejected(trained, crowd_data):
    with pytest.raises(UsageError):
        policies.train_local(crowd_data, trained[0], FAST, policies.ModelSizes(embedding_dim=16))
