"""Dense MLP kernels with hand-written reverse-mode gradients and AdamW."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError

ACTIVATIONS = ("tanh", "relu", "identity")
OUTPUT_ACTIVATIONS = ("identity", "tanh", "softmax")
CHECKPOINT_FORMAT = "lcroute.mlp"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MLPSpec:
    layer_widths: tuple
    activation: tuple
    output_activation: str = "identity"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        act = self.activation
        if isinstance(act, str):
            act = (act,) * max(0, len(widths) - 2)
        object.__setattr__(self, "layer_widths", widths)
        object.__setattr__(self, "activation", tuple(act))
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise ValueError("an MLP needs >= 1 layer and positive widths")
        if len(self.activation) != len(widths) - 2:
            raise ValueError("one activation per hidden layer expected")
        if any(a not in ACTIVATIONS for a in self.activation):
            raise ValueError(f"activations must be among {ACTIVATIONS}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"output activation must be among {OUTPUT_ACTIVATIONS}")
        if self.output_activation == "softmax" and widths[-1] != 2:
            raise ValueError("softmax output is defined over 2 classes")

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    def to_dict(self) -> dict:
        return {"layer_widths": list(self.layer_widths), "activation": list(self.activation),
                "output_activation": self.output_activation}

    @classmethod
    def from_dict(cls, d: dict) -> "MLPSpec":
        return cls(tuple(d["layer_widths"]), tuple(d["activation"]), d["output_activation"])


@dataclass
class MLPWeights:
    weights: list
    biases: list
    version: int = 0

    def params(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params()))

    def copy(self) -> "MLPWeights":
        return MLPWeights([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.version)

    def digest(self) -> str:
        h = hashlib.sha256()
        for p in self.params():
            h.update(np.ascontiguousarray(p, dtype=np.float64).tobytes())
        return h.hexdigest()


@dataclass
class ForwardCache:
    weights: MLPWeights
    spec: MLPSpec
    version: int
    inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    output: np.ndarray | None = None
    squeeze: bool = False


def init_weights(spec: MLPSpec, rng: np.random.Generator, zero: bool = False) -> MLPWeights:
    """He init ahead of relu layers, Xavier elsewhere."""
    ws, bs = [], []
    acts = list(spec.activation) + [spec.output_activation]
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.layer_widths[i], spec.layer_widths[i + 1]
        if zero:
            w = np.zeros((fan_in, fan_out))
        elif acts[i] == "relu":
            w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
        else:
            w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / (fan_in + fan_out))
        ws.append(w)
        bs.append(np.zeros(fan_out))
    return MLPWeights(ws, bs)


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "softmax":
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)
    return z


def _act_grad(name: str, z: np.ndarray, a: np.ndarray, g: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return g * (1.0 - a * a)
    if name == "relu":
        return g * (z > 0)
    if name == "softmax":
        return a * (g - (g * a).sum(axis=-1, keepdims=True))
    return g


def forward(weights: MLPWeights, spec: MLPSpec, x) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.shape[-1] != spec.layer_widths[0]:
        raise UsageError(f"input width {x.shape[-1]} does not match first layer {spec.layer_widths[0]}")
    cache = ForwardCache(weights, spec, weights.version, squeeze=squeeze)
    acts = list(spec.activation) + [spec.output_activation]
    h = x
    for w, b, name in zip(weights.weights, weights.biases, acts):
        cache.inputs.append(h)
        z = h @ w + b
        cache.pre.append(z)
        h = _act(name, z)
    cache.output = h
    return (h[0] if squeeze else h), cache


def predict(weights: MLPWeights, spec: MLPSpec, x) -> np.ndarray:
    return forward(weights, spec, x)[0]


def backward(cache: ForwardCache, upstream) -> tuple[list, np.ndarray]:
    """Gradients of ``sum(upstream * output)`` w.r.t. params and input.

    Returns ``([dW0, db0, dW1, db1, ...], d_input)``.
    """
    if cache.weights.version != cache.version:
        raise UsageError("stale forward cache: weights changed since the forward pass")
    g = np.asarray(upstream, dtype=float)
    if cache.squeeze and g.ndim == 1:
        g = g[None, :]
    if g.shape != cache.output.shape:
        raise UsageError(f"upstream gradient shape {g.shape} != output shape {cache.output.shape}")
    acts = list(cache.spec.activation) + [cache.spec.output_activation]
    grads = [None] * (2 * cache.spec.n_layers)
    out = cache.output
    for i in reversed(range(cache.spec.n_layers)):
        a = out if i == cache.spec.n_layers - 1 else cache.inputs[i + 1]
        g = _act_grad(acts[i], cache.pre[i], a, g)
        grads[2 * i] = cache.inputs[i].T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ cache.weights.weights[i].T
    return grads, (g[0] if cache.squeeze else g)


def l1_loss(prediction, target) -> tuple[float, np.ndarray]:
    """Mean absolute error and its subgradient (sign(0) = 0)."""
    p = np.asarray(prediction, dtype=float)
    t = np.asarray(target, dtype=float)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    diff = p - t
    n = diff.size
    return float(np.abs(diff).sum() / n), np.sign(diff) / n


@dataclass
class AdamWState:
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    m: list | None = None
    v: list | None = None


def adamw_step(nets, grads: list, opt: AdamWState):
    """In-place AdamW update over one or more ``MLPWeights``.

    ``grads`` is the flat list matching ``[p for net in nets for p in net.params()]``.
    Decay is decoupled and applied before the moment update.
    """
    nets = [nets] if isinstance(nets, MLPWeights) else list(nets)
    params = [p for net in nets for p in net.params()]
    if len(params) != len(grads):
        raise ValueError("gradient list does not match parameters")
    if opt.m is None:
        opt.m = [np.zeros_like(p) for p in params]
        opt.v = [np.zeros_like(p) for p in params]
    b1, b2 = opt.betas
    opt.step += 1
    c1 = 1.0 - b1 ** opt.step
    c2 = 1.0 - b2 ** opt.step
    for p, g, m, v in zip(params, grads, opt.m, opt.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if opt.weight_decay:
            p -= opt.lr * opt.weight_decay * p
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    for net in nets:
        net.version += 1
    return nets, opt


def to_document(weights: MLPWeights, spec: MLPSpec, meta: dict | None = None) -> dict:
    layers = []
    for w, b in zip(weights.weights, weights.biases):
        layers.append({"weight": {"shape": list(w.shape), "values": w.ravel().tolist()},
                       "bias": {"shape": list(b.shape), "values": b.ravel().tolist()}})
    return {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
            "spec": spec.to_dict(), "layers": layers, "meta": meta or {}}


def from_document(doc: dict) -> tuple[MLPWeights, MLPSpec, dict]:
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError("not a recognised MLP checkpoint document")
    spec = MLPSpec.from_dict(doc["spec"])
    ws, bs = [], []
    for layer in doc["layers"]:
        ws.append(np.array(layer["weight"]["values"], dtype=float).reshape(layer["weight"]["shape"]))
        bs.append(np.array(layer["bias"]["values"], dtype=float).reshape(layer["bias"]["shape"]))
    if len(ws) != spec.n_layers:
        raise ValueError("checkpoint layer count does not match its spec")
    for i, w in enumerate(ws):
        if w.shape != (spec.layer_widths[i], spec.layer_widths[i + 1]):
            raise ValueError(f"layer {i} weight shape {w.shape} inconsistent with spec")
    return MLPWeights(ws, bs), spec, doc.get("meta", {})


def dumps_document(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))
