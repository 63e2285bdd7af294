import numpy as np
import pytest
from hypothesis import settings

from namid.config import TrainRunConfig

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")


@pytest.fixture(autouse=True)
def _stable_env(monkeypatch):
    monkeypatch.delenv("NAMID_SEED", raising=False)
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")


@pytest.fixture
def tiny_config() -> TrainRunConfig:
    """A few-second run on the two-Gaussian toy."""
    return TrainRunConfig(
        data_kind="two_gaussians", dim=8, n_train=160, n_test=80, hidden=(16,),
        epochs=2, batch_size=32, lr=0.05, eps=0.1, train_steps=3,
        est_epochs=2, est_batch=32, est_patches=4, est_feat=4, est_hidden=8,
        surrogate_hidden=(12,), poc_steps=(0, 1, 3), eval_steps=5,
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[VERDICTS] = []


@pytest.fixture
def verdict(request):
    """Record and print one PASS/FAIL line per acceptance criterion."""

    def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
        line = f"{'PASS' if ok else 'FAIL'} [{number:>2}] {title}" + (f": {detail}" if detail else "")
        request.config.stash[VERDICTS].append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
