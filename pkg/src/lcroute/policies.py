"""Local and cloud navigation policies sharing one feature trunk.

The trunk and the cloud continuation are trained together by behaviour cloning
under an L1 objective. The trunk is then frozen and a small local head is fitted
on top of its embedding.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .env import Action, Observation
from .errors import ConfigError, UsageError

OBS_DIM = 19
GOAL_DIM = 2
# observation layout: rays..., goal_x, goal_y, speed_norm
GOAL_SLICE = slice(-3, -1)


@dataclass
class ActionScale:
    d_m: float = 0.3
    m_v: float = 1.5

    def to_action(self, y: np.ndarray) -> Action:
        """Map a tanh-bounded head output to a clamped action."""
        d = self.d_m * float(y[0])
        v = self.m_v * (float(y[1]) + 1.0) / 2.0
        return Action(d=min(self.d_m, max(-self.d_m, d)), v=min(self.m_v, max(0.0, v)))

    def normalise(self, actions: np.ndarray) -> np.ndarray:
        """Actions (d, v) in physical units -> head-output units in [-1, 1]."""
        a = np.asarray(actions, dtype=float)
        return np.stack([a[:, 0] / self.d_m, 2.0 * a[:, 1] / self.m_v - 1.0], axis=1)


@dataclass
class SharedTrunk:
    spec: nn.MLPSpec
    weights: nn.MLPWeights
    trained: bool = False

    @property
    def embedding_dim(self) -> int:
        return self.spec.layer_widths[-1]


@dataclass
class LocalHead:
    spec: nn.MLPSpec
    weights: nn.MLPWeights

    @property
    def parameter_count(self) -> int:
        return self.weights.param_count()


@dataclass
class CloudHead:
    body_spec: nn.MLPSpec
    body: nn.MLPWeights
    merge_spec: nn.MLPSpec
    merge: nn.MLPWeights

    @property
    def parameter_count(self) -> int:
        return self.body.param_count() + self.merge.param_count()


@dataclass
class ImitationDataset:
    observations: np.ndarray
    actions: np.ndarray
    seeds: list = field(default_factory=list)
    density: str = ""

    def __len__(self) -> int:
        return len(self.observations)


@dataclass
class ModelSizes:
    embedding_dim: int = 32
    trunk_hidden: int = 64
    local_hidden: int = 32
    cloud_body: tuple = (128, 128)
    cloud_merge_hidden: int = 64

    def __post_init__(self):
        self.cloud_body = tuple(int(w) for w in self.cloud_body)

    def validate(self) -> "ModelSizes":
        widths = (self.embedding_dim, self.trunk_hidden, self.local_hidden, self.cloud_merge_hidden, *self.cloud_body)
        if not self.cloud_body or min(widths) < 1:
            raise ConfigError("model widths must be positive and cloud_body non-empty")
        return self


@dataclass
class ILHyper:
    epochs: int = 200
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 128
    val_fraction: float = 0.1
    seed: int = 0


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    initial_val_loss: float = float("nan")
    best_epoch: int = -1
    parameter_count: int = 0
    wall_seconds: float = 0.0

    def as_dict(self) -> dict:
        return {"train_loss": self.train_loss, "val_loss": self.val_loss,
                "initial_val_loss": self.initial_val_loss, "best_epoch": self.best_epoch,
                "parameter_count": self.parameter_count, "wall_seconds": self.wall_seconds}


def trunk_spec(embedding_dim: int = 32, hidden: int = 64, obs_dim: int = OBS_DIM) -> nn.MLPSpec:
    return nn.MLPSpec((obs_dim, hidden, embedding_dim), ("tanh",), "tanh")


def local_spec(embedding_dim: int = 32, hidden: int = 32) -> nn.MLPSpec:
    return nn.MLPSpec((embedding_dim + GOAL_DIM, hidden, 2), ("tanh",), "tanh")


def cloud_specs(embedding_dim: int = 32, body=(128, 128), merge_hidden: int = 64) -> tuple[nn.MLPSpec, nn.MLPSpec]:
    body_spec = nn.MLPSpec((embedding_dim, *body), ("relu",) * (len(body) - 1), "tanh")
    merge_spec = nn.MLPSpec((body[-1] + GOAL_DIM, merge_hidden, 2), ("relu",), "tanh")
    return body_spec, merge_spec


def new_trunk(rng, sizes: ModelSizes = ModelSizes(), obs_dim: int = OBS_DIM, zero: bool = False) -> SharedTrunk:
    spec = trunk_spec(sizes.embedding_dim, sizes.trunk_hidden, obs_dim)
    return SharedTrunk(spec, nn.init_weights(spec, rng, zero=zero))


def new_local(rng, sizes: ModelSizes = ModelSizes(), zero: bool = False) -> LocalHead:
    spec = local_spec(sizes.embedding_dim, sizes.local_hidden)
    return LocalHead(spec, nn.init_weights(spec, rng, zero=zero))


def new_cloud(rng, sizes: ModelSizes = ModelSizes(), zero: bool = False) -> CloudHead:
    body_spec, merge_spec = cloud_specs(sizes.embedding_dim, sizes.cloud_body, sizes.cloud_merge_hidden)
    return CloudHead(body_spec, nn.init_weights(body_spec, rng, zero=zero),
                     merge_spec, nn.init_weights(merge_spec, rng, zero=zero))


def _obs_array(obs) -> np.ndarray:
    return obs.vector() if isinstance(obs, Observation) else np.asarray(obs, dtype=float)


def embed(trunk: SharedTrunk, obs) -> np.ndarray:
    return nn.predict(trunk.weights, trunk.spec, _obs_array(obs))


def _local_raw(head: LocalHead, embedding, goal) -> np.ndarray:
    x = np.concatenate([embedding, goal], axis=-1)
    return nn.predict(head.weights, head.spec, x)


def _cloud_raw(head: CloudHead, embedding, goal) -> np.ndarray:
    h = nn.predict(head.body, head.body_spec, embedding)
    return nn.predict(head.merge, head.merge_spec, np.concatenate([h, goal], axis=-1))


def local_act(head: LocalHead, embedding, goal, scale: ActionScale = ActionScale()) -> Action:
    return scale.to_action(_local_raw(head, embedding, goal))


def cloud_act(head: CloudHead, embedding, goal, scale: ActionScale = ActionScale()) -> Action:
    return scale.to_action(_cloud_raw(head, embedding, goal))


def _split(n: int, hyper: ILHyper) -> tuple[np.ndarray, np.ndarray]:
    idx = np.random.default_rng(hyper.seed).permutation(n)
    n_val = max(1, int(round(n * hyper.val_fraction))) if n > 1 else 0
    return idx[n_val:], idx[:n_val] if n_val else idx


def _cloud_loss(trunk, cloud, obs, target, need_grad: bool):
    emb, c_trunk = nn.forward(trunk.weights, trunk.spec, obs)
    h, c_body = nn.forward(cloud.body, cloud.body_spec, emb)
    y, c_merge = nn.forward(cloud.merge, cloud.merge_spec, np.concatenate([h, obs[:, GOAL_SLICE]], axis=1))
    loss, g = nn.l1_loss(y, target)
    if not need_grad:
        return loss, None
    g_merge, gx = nn.backward(c_merge, g)
    g_body, gh = nn.backward(c_body, gx[:, :h.shape[1]])
    g_trunk, _ = nn.backward(c_trunk, gh)
    return loss, g_trunk + g_body + g_merge


def _local_loss(head, emb, goal, target, need_grad: bool):
    y, cache = nn.forward(head.weights, head.spec, np.concatenate([emb, goal], axis=1))
    loss, g = nn.l1_loss(y, target)
    if not need_grad:
        return loss, None
    grads, _ = nn.backward(cache, g)
    return loss, grads


def _fit(loss_fn, nets, n_train_idx, val_idx, hyper: ILHyper, report: TrainReport, rng):
    opt = nn.AdamWState(lr=hyper.lr, weight_decay=hyper.weight_decay)
    report.initial_val_loss = loss_fn(val_idx, False)[0]
    best = report.initial_val_loss
    best_params = [n.copy() for n in nets]
    for epoch in range(hyper.epochs):
        order = rng.permutation(n_train_idx)
        total, count = 0.0, 0
        for start in range(0, len(order), hyper.batch_size):
            batch = order[start:start + hyper.batch_size]
            loss, grads = loss_fn(batch, True)
            nn.adamw_step(nets, grads, opt)
            total += loss * len(batch)
            count += len(batch)
        report.train_loss.append(total / max(count, 1))
        val = loss_fn(val_idx, False)[0]
        report.val_loss.append(val)
        if val < best:
            best, report.best_epoch = val, epoch
            best_params = [n.copy() for n in nets]
    for net, saved in zip(nets, best_params):
        net.weights, net.biases = saved.weights, saved.biases
        net.version += 1


def train_cloud(dataset: ImitationDataset, hyper: ILHyper = ILHyper(), sizes: ModelSizes = ModelSizes(),
                scale: ActionScale = ActionScale()) -> tuple[SharedTrunk, CloudHead, TrainReport]:
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    t0 = time.perf_counter()
    rng = np.random.default_rng(hyper.seed)
    obs = np.asarray(dataset.observations, dtype=float)
    trunk = new_trunk(rng, sizes, obs_dim=obs.shape[1])
    cloud = new_cloud(rng, sizes)
    target = scale.normalise(dataset.actions)
    train_idx, val_idx = _split(len(obs), hyper)
    report = TrainReport()

    def loss_fn(idx, need_grad):
        return _cloud_loss(trunk, cloud, obs[idx], target[idx], need_grad)

    _fit(loss_fn, [trunk.weights, cloud.body, cloud.merge], train_idx, val_idx, hyper, report, rng)
    trunk.trained = True
    report.parameter_count = cloud.parameter_count
    report.wall_seconds = time.perf_counter() - t0
    return trunk, cloud, report


def train_local(dataset: ImitationDataset, trunk: SharedTrunk, hyper: ILHyper = ILHyper(),
                sizes: ModelSizes | None = None, scale: ActionScale = ActionScale()) -> tuple[LocalHead, TrainReport]:
    if not trunk.trained:
        raise UsageError("train_local needs a trained (frozen) trunk")
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    t0 = time.perf_counter()
    rng = np.random.default_rng(hyper.seed + 1)
    sizes = sizes or ModelSizes()
    if sizes.embedding_dim != trunk.embedding_dim:
        raise UsageError("model sizes disagree with the trunk embedding width")
    head = new_local(rng, sizes)
    obs = np.asarray(dataset.observations, dtype=float)
    emb = nn.predict(trunk.weights, trunk.spec, obs)  # trunk is read, never written
    goal = obs[:, GOAL_SLICE]
    target = scale.normalise(dataset.actions)
    train_idx, val_idx = _split(len(obs), hyper)
    report = TrainReport()

    def loss_fn(idx, need_grad):
        return _local_loss(head, emb[idx], goal[idx], target[idx], need_grad)

    _fit(loss_fn, [head.weights], train_idx, val_idx, hyper, report, rng)
    report.parameter_count = head.parameter_count
    report.wall_seconds = time.perf_counter() - t0
    return head, report


def validation_loss(dataset: ImitationDataset, trunk: SharedTrunk, head, hyper: ILHyper = ILHyper(),
                    scale: ActionScale = ActionScale()) -> float:
    """L1 on the held-out split for either head type."""
    obs = np.asarray(dataset.observations, dtype=float)
    _, val_idx = _split(len(obs), hyper)
    target = scale.normalise(dataset.actions)[val_idx]
    emb = nn.predict(trunk.weights, trunk.spec, obs[val_idx])
    goal = obs[val_idx, GOAL_SLICE]
    y = _local_raw(head, emb, goal) if isinstance(head, LocalHead) else _cloud_raw(head, emb, goal)
    return nn.l1_loss(y, target)[0]
