import hashlib
import json
import os
import time
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

import constraint_aware
from constraint_aware import ppo
from constraint_aware.execution import Policy

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# directory for the session-trained policy; defaults to pytest's cache dir
CACHE_ENV = "CAPOLICY_TEST_CACHE"

ACCEPTANCE: dict[int, str] = {}


def _cache_key(cfg: ppo.TrainConfig) -> str:
    """Config plus package sources, so any code change retrains."""
    h = hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode())
    for src in sorted(Path(constraint_aware.__file__).parent.glob("*.py")):
        h.update(src.read_bytes())
    return h.hexdigest()[:16]


class Trained:
    def __init__(self, root: Path, cfg: ppo.TrainConfig):
        self.root = root
        self.cfg = cfg
        self.weights = root / "policy.capw"
        self.rewards = ppo.read_learning_curve(root / "learning_curve.csv")
        self.train_seconds = json.loads((root / "timing.json").read_text())["train_seconds"]
        self.policy = Policy.load(self.weights)


@pytest.fixture(scope="session")
def trained(request) -> Trained:
    """One default-config training run per session, reused across sessions."""
    cfg = ppo.TrainConfig()
    base = Path(os.environ[CACHE_ENV]) if os.environ.get(CACHE_ENV) else request.config.cache.mkdir("trained")
    root = base / _cache_key(cfg)
    if not (root / "timing.json").exists():
        t0 = time.perf_counter()
        result = ppo.train(cfg)
        seconds = time.perf_counter() - t0
        ppo.save_training(root, result, cfg)
        (root / "timing.json").write_text(json.dumps({"train_seconds": seconds}))
    return Trained(root, cfg)


@pytest.fixture
def acceptance():
    """Record one pass/fail line per criterion, then assert it."""

    def record(number: int, title: str, ok: bool, detail: str):
        line = f"ACCEPTANCE {number} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
        ACCEPTANCE[number] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
