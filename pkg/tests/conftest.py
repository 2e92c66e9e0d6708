import json
from pathlib import Path

import pytest

from lcroute.harness import commands
from lcroute.harness.config import from_dict

_CRITERIA: dict = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    _CRITERIA[number] = (passed, detail)


@pytest.fixture
def criterion():
    return record_criterion


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        passed, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


SMALL = {"models": {"il": {"epochs": 3}}, "ppo": {"episodes": 100}, "eval": {"episodes_per_route": 2}}


def small_config(**overrides):
    doc = json.loads(json.dumps(SMALL))
    for section, values in overrides.items():
        doc.setdefault(section, {}).update(values)
    return from_dict(doc)


def run_small_pipeline(root: Path, cfg=None) -> dict:
    """Collect -> imitation -> router for a tiny config; returns the directories."""
    cfg = cfg or small_config()
    data = commands.cmd_collect(cfg, ["low", "high"], 2, root / "data")
    commands.cmd_train_il(cfg, data, root / "models")
    commands.cmd_train_rl(cfg, root / "models", root / "router")
    return {"cfg": cfg, "data": data, "models": root / "models", "router": root / "router"}


@pytest.fixture(scope="session")
def small_run(tmp_path_factory):
    return run_small_pipeline(tmp_path_factory.mktemp("small"))
