import json
from importlib import resources

import pytest

from rct.harness import TrainConfig


def bundled(name):
    return str(resources.files("rct") / "configs" / name)


TINY = {
    "dataset": {"kind": "synthetic", "n_classes": 3, "n_features": 4, "n_samples": 120,
                "noise": 0.4, "seed": 5},
    "model": [{"type": "dense", "units": 8, "name": "fc1"}, {"type": "relu"},
              {"type": "dense", "units": 3, "name": "fc2"}],
    "lr": 0.1,
    "batch_size": 16,
    "epochs": 3,
    "seed": 1,
}


@pytest.fixture
def tiny_dict():
    return json.loads(json.dumps(TINY))


@pytest.fixture
def tiny_config(tiny_dict):
    return TrainConfig.from_dict(tiny_dict)


@pytest.fixture
def tiny_path(tmp_path, tiny_dict):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(tiny_dict))
    return str(path)


_CRITERIA_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_CRITERIA_KEY] = []


@pytest.fixture
def criterion(request, capsys):
    """Record one acceptance criterion: prints its PASS/FAIL line and returns ``ok``."""
    lines = request.config.stash[_CRITERIA_KEY]

    def record(number, title, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title}: {detail}"
        lines.append((number, line))
        with capsys.disabled():
            print("\n" + line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_CRITERIA_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
