"""The operational commands behind the CLI. Each writes into one output directory."""

from __future__ import annotations

import copy
import dataclasses
import logging
from pathlib import Path

import numpy as np

from .. import costs, env, policies
from ..errors import ConfigError, UsageError
from ..metrics import episode_scores
from ..router import (EVAL_SEED_BASE, FixedRouter, LearnedRouter, RandomRouter, Stack, eval_seed_cells,
                      input_width, run_episode, summarise, train_router)
from . import store
from .config import SCHEMA_VERSION, RunConfig, density_count

log = logging.getLogger(__name__)

COLLECT_SEED_BASE = 3_000_000
ROUTER_VARIANTS = ("unilcd", "unilcd-no-history", "additive")
METHODS = ("unilcd", "unilcd-no-history", "local-only", "cloud-only", "random:p", "additive")


def parse_densities(spec: str) -> list[str]:
    names = list(env.DENSITY_PRESETS) if spec == "all" else [s.strip() for s in spec.split(",") if s.strip()]
    for name in names:
        density_count(name)
    if not names:
        raise ConfigError("no density given")
    return names


# --- collect -------------------------------------------------------------------

def cmd_collect(cfg: RunConfig, densities: list[str], episodes: int, out_dir) -> Path:
    """Run the expert on ``episodes`` episodes per density and write the demonstrations."""
    if episodes < 0:
        raise ConfigError("episodes must be >= 0")
    out_dir = store.ensure_dir(out_dir)
    route_ids = list(cfg.collect.routes)
    records, k = [], 0
    for name in densities:
        count = density_count(name)
        for _ in range(episodes):
            route_idx = route_ids[k % len(route_ids)]
            seed = COLLECT_SEED_BASE + cfg.seed * 100_003 + k
            world = cfg.world(route_idx, count)
            state, obs = env.new_episode(world, seed, "eval")
            o_list, a_list = [], []
            done = False
            while not done:
                act = env.expert_action(state, world)
                o_list.append(obs.vector())
                a_list.append((act.d, act.v))
                outcome = env.step(state, act, world)
                obs, done = outcome.observation, outcome.done
            records.append({"meta": {"index": k, "density": name, "pedestrian_count": count,
                                     "route": route_idx, "seed": seed},
                            "observations": o_list, "actions": a_list})
            k += 1
    header = {"schema_version": SCHEMA_VERSION, "fingerprint": cfg.fingerprint(), "seed": cfg.seed,
              "obs_dim": cfg.env.ray_count + 3, "densities": densities, "density": ",".join(densities)}
    path = store.write_dataset(out_dir / "dataset.jsonl", header, records)
    store.write_manifest(out_dir, "collect", cfg.fingerprint(), cfg.seed)
    log.info("collected %d episodes, %d samples", len(records), sum(len(r["actions"]) for r in records))
    return path


# --- imitation -------------------------------------------------------------------

def _report_doc(report: policies.TrainReport) -> dict:
    doc = report.as_dict()
    doc.pop("wall_seconds")  # wall time would break byte-identical reruns
    return doc


def cmd_train_il(cfg: RunConfig, dataset_path, out_dir) -> dict:
    """Fit trunk + cloud head, freeze the trunk, fit the local head; write three checkpoints."""
    dataset, header, _ = store.read_dataset(Path(dataset_path), obs_dim=cfg.env.ray_count + 3)
    if len(dataset) == 0:
        raise UsageError(f"dataset {dataset_path} holds no samples")
    out_dir = store.ensure_dir(out_dir)
    scale = policies.ActionScale(cfg.env.d_m, cfg.env.m_v)
    sizes, hyper = cfg.models.sizes, cfg.models.il
    trunk, cloud, cloud_report = policies.train_cloud(dataset, hyper, sizes, scale)
    log.info("cloud policy trained in %.1fs (val %.4f -> %.4f)", cloud_report.wall_seconds,
             cloud_report.initial_val_loss, min(cloud_report.val_loss, default=float("nan")))
    trunk_digest = trunk.weights.digest()
    local, local_report = policies.train_local(dataset, trunk, hyper, sizes, scale)
    if trunk.weights.digest() != trunk_digest:
        raise RuntimeError("trunk changed while fitting the local head")
    log.info("local policy trained in %.1fs (val %.4f -> %.4f)", local_report.wall_seconds,
             local_report.initial_val_loss, min(local_report.val_loss, default=float("nan")))
    store.save_trunk(out_dir / "trunk.json", trunk)
    store.save_local(out_dir / "local.json", local, trunk_digest)
    store.save_cloud(out_dir / "cloud.json", cloud, trunk_digest)
    reports = {"cloud": _report_doc(cloud_report), "local": _report_doc(local_report),
               "dataset_fingerprint": header.get("fingerprint"), "samples": len(dataset)}
    store.write_json(out_dir / "il_report.json", reports)
    store.write_manifest(out_dir, "train-il", cfg.fingerprint(), cfg.seed, {
        "checkpoints": {name: store.sha256_file(out_dir / f"{name}.json") for name in ("trunk", "local", "cloud")},
        "trunk_digest": trunk_digest})
    return reports


def load_models(cfg: RunConfig, models_dir) -> tuple[policies.SharedTrunk, policies.LocalHead, policies.CloudHead]:
    models_dir = Path(models_dir)
    for name in ("trunk", "local", "cloud"):
        if not (models_dir / f"{name}.json").exists():
            raise UsageError(f"missing checkpoint {models_dir / (name + '.json')}")
    trunk = store.load_trunk(models_dir / "trunk.json")
    local, local_meta = store.load_local(models_dir / "local.json")
    cloud, cloud_meta = store.load_cloud(models_dir / "cloud.json")
    digest = trunk.weights.digest()
    if local_meta.get("trunk_digest") != digest or cloud_meta.get("trunk_digest") != digest:
        raise UsageError("local/cloud checkpoints were trained against a different trunk")
    if trunk.embedding_dim != cfg.models.sizes.embedding_dim:
        raise UsageError(f"checkpoint embedding_dim {trunk.embedding_dim} does not match "
                         f"config ({cfg.models.sizes.embedding_dim})")
    if trunk.spec.layer_widths[0] != cfg.env.ray_count + 3:
        raise UsageError("checkpoint observation width does not match env.ray_count")
    return trunk, local, cloud


def make_stack(cfg: RunConfig, models) -> Stack:
    trunk, local, cloud = models
    return Stack(trunk, local, cloud, reward=copy.deepcopy(cfg.reward), energy=copy.deepcopy(cfg.costs.energy),
                 latency=copy.deepcopy(cfg.costs.latency), history_k=cfg.ppo.history_k)


# --- router training -------------------------------------------------------------

def variant_config(cfg: RunConfig, variant: str) -> RunConfig:
    if variant not in ROUTER_VARIANTS:
        raise ConfigError(f"unknown router variant {variant!r}")
    cfg = copy.deepcopy(cfg)
    if variant == "unilcd-no-history":
        cfg.ppo.history_enabled = False
    if variant == "additive":
        cfg.reward.kind = "additive"
    return cfg


def cmd_train_rl(cfg: RunConfig, models_dir, out_dir, variant: str = "unilcd") -> dict:
    """Train the router on top of frozen imitation checkpoints; write curve and checkpoints."""
    cfg = variant_config(cfg, variant)
    models = load_models(cfg, models_dir)
    out_dir = store.ensure_dir(out_dir)
    stack = make_stack(cfg, models)
    count = density_count(cfg.eval.train_density)

    def world_for(route_idx):
        return cfg.world(route_idx, count)

    metric_cfg = cfg.eval.metrics
    agent, curve, best, diverged = train_router(world_for, stack, cfg.ppo, cfg.eval.train_routes,
                                                cfg.eval.routes, metric_cfg)
    meta = {"variant": variant, "history_enabled": cfg.ppo.history_enabled, "history_k": cfg.ppo.history_k,
            "embedding_dim": cfg.models.sizes.embedding_dim, "reward_kind": cfg.reward.kind,
            "fingerprint": cfg.fingerprint(), "diverged": diverged}
    store.save_router(out_dir / "router.json", agent, meta)
    best_agent = copy.deepcopy(agent)
    best_agent.restore(best)
    store.save_router(out_dir / "router_best.json", best_agent, meta)
    store.write_text(out_dir / "curve.csv", store.csv_text(store.CURVE_COLUMNS, curve.rows()))
    store.write_manifest(out_dir, "train-rl", cfg.fingerprint(), cfg.seed, {"variant": variant})
    return {"curve": curve.rows(), "diverged": diverged, "input_width": agent.input_dim}


# --- evaluation --------------------------------------------------------------------

def parse_method(method: str) -> tuple[str, float | None]:
    if method.startswith("random:"):
        try:
            p = float(method.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad random method {method!r}; expected random:<p>") from None
        if not 0 <= p <= 1:
            raise ConfigError("random:p needs p in [0, 1]")
        return "random", p
    if method not in METHODS or method == "random:p":
        raise ConfigError(f"unknown method {method!r}; expected one of {list(METHODS)}")
    return method, None


def eval_config(cfg: RunConfig, method: str, profile: str | None = None, payload: str | None = None) -> RunConfig:
    """Apply the per-method payload convention and any CLI overrides."""
    name, _ = parse_method(method)
    cfg = copy.deepcopy(cfg)
    cfg.costs.energy.payload_mode = payload or ("raw" if name == "cloud-only" else "embedding")
    if profile is not None:
        cfg.costs.latency = dataclasses.replace(cfg.costs.latency, profile=profile, mu=None, sigma=None)
    if name == "additive":
        cfg.reward.kind = "additive"
    return cfg.validate()


def _router_for(name: str, p, router_dir, cfg: RunConfig):
    if name == "local-only":
        return FixedRouter(costs.LOCAL)
    if name == "cloud-only":
        return FixedRouter(costs.CLOUD)
    if name == "random":
        return RandomRouter(p)
    if router_dir is None:
        raise UsageError(f"method {name} needs a router checkpoint directory")
    path = Path(router_dir) / "router.json"
    if not path.exists():
        raise UsageError(f"missing router checkpoint {path}")
    agent, meta = store.load_router(path)
    if meta.get("variant") != name:
        raise UsageError(f"{path} holds a {meta.get('variant')!r} router, not {name!r}")
    want = input_width(cfg.models.sizes.embedding_dim,
                       dataclasses.replace(cfg.ppo, history_enabled=meta["history_enabled"], history_k=meta["history_k"]))
    if agent.input_dim != want:
        raise UsageError(f"router input width {agent.input_dim} does not match the config ({want})")
    cfg.ppo.history_k = meta["history_k"]
    return LearnedRouter(agent, meta["history_enabled"], deterministic=True)


def cmd_eval(cfg: RunConfig, method: str, density: str, out_dir, models_dir, router_dir=None,
             profile: str | None = None, payload: str | None = None, write_traces: bool = True) -> dict:
    """Deterministic evaluation over eval routes x episodes; returns the report row."""
    name, p = parse_method(method)
    cfg = eval_config(cfg, method, profile, payload)
    count = density_count(density)
    models = load_models(cfg, models_dir)
    router = _router_for(name, p, router_dir, cfg)
    stack = make_stack(cfg, models)
    out_dir = store.ensure_dir(out_dir)
    n = len(cfg.eval.routes) * cfg.eval.episodes_per_route
    if n == 0:
        raise ConfigError("evaluation needs at least one episode")
    cells = eval_seed_cells(n, list(cfg.eval.routes), EVAL_SEED_BASE)
    fingerprint = cfg.fingerprint()
    results, summaries, trace_lines = [], [], []
    for i, (route_idx, seed) in enumerate(cells):
        res = run_episode(cfg.world(route_idx, count), stack, router, seed, mode="eval", record_trace=write_traces)
        results.append(res)
        ns, ens = episode_scores(res.summary, cfg.eval.metrics)
        summaries.append(store.dumps({"episode": i, "route": route_idx, "seed": seed, **res.summary.as_dict(),
                                      "NS": ns, "ENS": ens, "return": res.episode_return}))
        trace_lines.extend(store.dumps({"episode": i, **rec}) for rec in res.trace)
    report = summarise(results, cfg.eval.metrics, fingerprint)
    row = {"method": method, "density": density, **report.metric_row(), "episodes": report.episodes,
           "schema_version": SCHEMA_VERSION, "fingerprint": fingerprint}
    store.write_text(out_dir / "summaries.jsonl", "\n".join(summaries) + "\n")
    if write_traces:
        store.write_text(out_dir / "traces.jsonl", "\n".join(trace_lines) + "\n")
    store.write_text(out_dir / "report.csv", store.csv_text(store.REPORT_COLUMNS, [row]))
    store.write_manifest(out_dir, "eval", fingerprint, cfg.seed,
                         {"method": method, "density": density, "payload_mode": cfg.costs.energy.payload_mode,
                          "latency_profile": cfg.costs.latency.profile})
    row["_results"] = results
    return row


# --- report ------------------------------------------------------------------------

def cmd_report(in_dirs, out_dir) -> list[dict]:
    """Merge report rows (and any training curves) from several run directories."""
    in_dirs = [Path(d) for d in in_dirs]
    if not in_dirs:
        raise UsageError("report needs at least one input directory")
    rows, curves = [], []
    for d in in_dirs:
        if (d / "report.csv").exists():
            rows.extend(store.read_csv(d / "report.csv"))
        if (d / "curve.csv").exists():
            variant = store.read_json(d / "manifest.json").get("variant", d.name) if (d / "manifest.json").exists() else d.name
            curves.extend({"method": variant, "run": d.name, **r} for r in store.read_csv(d / "curve.csv"))
    if not rows:
        raise UsageError("no report rows found in the input directories")
    versions = {r.get("schema_version") for r in rows}
    if len(versions) != 1:
        raise UsageError(f"inconsistent schema versions across inputs: {sorted(map(str, versions))}")
    out_dir = store.ensure_dir(out_dir)
    store.write_text(out_dir / "report.csv", store.csv_text(store.REPORT_COLUMNS, rows))
    if curves:
        store.write_text(out_dir / "curves.csv",
                         store.csv_text(("method", "run", *store.CURVE_COLUMNS), curves))
    store.write_manifest(out_dir, "report", "", 0, {"inputs": [d.name for d in in_dirs]})
    return rows
