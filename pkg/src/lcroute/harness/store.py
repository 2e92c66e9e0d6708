"""On-disk formats: datasets, checkpoints, traces, reports and manifests."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from pathlib import Path

import numpy as np

from .. import __version__, nn, policies
from ..errors import UsageError
from ..metrics import REPORT_METRICS
from ..router import RouterAgent

DATASET_KIND = "lcroute.dataset"
CLOUD_KIND = "lcroute.cloud"
ROUTER_KIND = "lcroute.router"
REPORT_COLUMNS = ("method", "density", *REPORT_METRICS, "episodes", "schema_version", "fingerprint")
CURVE_COLUMNS = ("checkpoint_index", "episodes", "mean_reward", "ENS_mean", "ENS_std")


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def ensure_dir(path: Path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {path}: {exc.strerror}") from None
    return path


def write_text(path: Path, text: str) -> Path:
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot write {path}: {exc.strerror}") from None
    return Path(path)


def write_json(path: Path, obj) -> Path:
    return write_text(path, json.dumps(obj, sort_keys=True, indent=2) + "\n")


def read_json(path: Path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"missing file {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path} is not valid JSON: {exc}") from None


# --- datasets ------------------------------------------------------------------

def write_dataset(path: Path, header: dict, episodes: list[dict]) -> Path:
    """JSONL: one file header, then per episode a header line followed by its samples.

    ``episodes`` items carry ``meta`` (dict), ``observations`` and ``actions``.
    """
    lines = [dumps({"kind": DATASET_KIND, **header, "episodes": len(episodes)})]
    for ep in episodes:
        lines.append(dumps({"episode": ep["meta"], "samples": len(ep["actions"])}))
        for o, a in zip(ep["observations"], ep["actions"]):
            lines.append(dumps({"o": [float(x) for x in o], "a": [float(x) for x in a]}))
    return write_text(path, "\n".join(lines) + "\n")


def read_dataset(path: Path, obs_dim: int | None = None) -> tuple[policies.ImitationDataset, dict, list[dict]]:
    try:
        fh = open(path, encoding="utf-8")
    except FileNotFoundError:
        raise UsageError(f"missing dataset {path}") from None
    with fh:
        header = json.loads(fh.readline() or "null")
        if not isinstance(header, dict) or header.get("kind") != DATASET_KIND:
            raise UsageError(f"{path} is not a dataset file")
        if obs_dim is not None and header.get("obs_dim") != obs_dim:
            raise UsageError(f"dataset observation width {header.get('obs_dim')} does not match config ({obs_dim})")
        obs, acts, metas = [], [], []
        for line in fh:
            rec = json.loads(line)
            if "episode" in rec:
                metas.append(rec["episode"])
                continue
            obs.append(rec["o"])
            acts.append(rec["a"])
    width = header["obs_dim"]
    ds = policies.ImitationDataset(np.asarray(obs, dtype=float).reshape(-1, width),
                                   np.asarray(acts, dtype=float).reshape(-1, 2),
                                   seeds=[m["seed"] for m in metas], density=header.get("density", ""))
    return ds, header, metas


# --- checkpoints ---------------------------------------------------------------

def save_trunk(path: Path, trunk: policies.SharedTrunk) -> str:
    digest = trunk.weights.digest()
    write_text(path, nn.dumps_document(nn.to_document(trunk.weights, trunk.spec, {"role": "trunk", "digest": digest})))
    return digest


def load_trunk(path: Path) -> policies.SharedTrunk:
    w, spec, meta = nn.from_document(read_json(path))
    if meta.get("digest") != w.digest():
        raise UsageError(f"{path}: trunk weights do not match their recorded digest")
    return policies.SharedTrunk(spec, w, trained=True)


def save_local(path: Path, head: policies.LocalHead, trunk_digest: str) -> None:
    meta = {"role": "local", "trunk_digest": trunk_digest}
    write_text(path, nn.dumps_document(nn.to_document(head.weights, head.spec, meta)))


def load_local(path: Path) -> tuple[policies.LocalHead, dict]:
    w, spec, meta = nn.from_document(read_json(path))
    return policies.LocalHead(spec, w), meta


def save_cloud(path: Path, head: policies.CloudHead, trunk_digest: str) -> None:
    doc = {"format": CLOUD_KIND, "meta": {"role": "cloud", "trunk_digest": trunk_digest},
           "body": nn.to_document(head.body, head.body_spec), "merge": nn.to_document(head.merge, head.merge_spec)}
    write_text(path, dumps(doc))


def load_cloud(path: Path) -> tuple[policies.CloudHead, dict]:
    doc = read_json(path)
    if doc.get("format") != CLOUD_KIND:
        raise UsageError(f"{path} is not a cloud checkpoint")
    body, body_spec, _ = nn.from_document(doc["body"])
    merge, merge_spec, _ = nn.from_document(doc["merge"])
    return policies.CloudHead(body_spec, body, merge_spec, merge), doc["meta"]


def save_router(path: Path, agent: RouterAgent, meta: dict) -> None:
    doc = {"format": ROUTER_KIND, "meta": meta,
           "policy": nn.to_document(agent.policy, agent.policy_spec),
           "value": nn.to_document(agent.value, agent.value_spec)}
    write_text(path, dumps(doc))


def load_router(path: Path) -> tuple[RouterAgent, dict]:
    doc = read_json(path)
    if doc.get("format") != ROUTER_KIND:
        raise UsageError(f"{path} is not a router checkpoint")
    policy, pspec, _ = nn.from_document(doc["policy"])
    val, vspec, _ = nn.from_document(doc["value"])
    agent = RouterAgent(pspec, policy, vspec, val, nn.AdamWState(), nn.AdamWState())
    return agent, doc["meta"]


# --- tables --------------------------------------------------------------------

def csv_text(columns, rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: row[k] for k in columns})
    return buf.getvalue()


def read_csv(path: Path) -> list[dict]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            return list(csv.DictReader(fh))
    except FileNotFoundError:
        raise UsageError(f"missing file {path}") from None


def write_manifest(out_dir: Path, command: str, fingerprint: str, seed: int, extra: dict | None = None) -> Path:
    """List every file in ``out_dir`` (the manifest aside) with its sha256."""
    out_dir = Path(out_dir)
    files = {p.relative_to(out_dir).as_posix(): sha256_file(p)
             for p in sorted(out_dir.rglob("*")) if p.is_file() and p.name != "manifest.json"}
    doc = {"tool": "lcroute", "tool_version": __version__, "command": command,
           "fingerprint": fingerprint, "seed": seed, "files": files, **(extra or {})}
    return write_json(out_dir / "manifest.json", doc)
