import numpy as np
import pytest
import torch

from hazemeta.datagen import GenConfig, SceneBank, default_domains
from hazemeta.trainer import TrainConfig, set_deterministic


@pytest.fixture(autouse=True, scope="session")
def _deterministic():
    set_deterministic(True)


@pytest.fixture
def domains():
    return default_domains()


@pytest.fixture(scope="session")
def small_bank():
    return SceneBank.procedural(12, GenConfig(height=40, width=40), seed=7)


@pytest.fixture
def tiny_config():
    """Cheap config for end-to-end plumbing tests."""
    return TrainConfig(crop_size=32, scene_size=40, scene_bank_size=8, samples_per_task=2,
                       max_steps=3, checkpoint_every=2)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def random_image(rng, h=32, w=32):
    return rng.uniform(0.0, 1.0, size=(h, w, 3)).astype(np.float32)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(0)


_CRITERIA = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record an acceptance outcome, then assert it."""
    log = request.config.stash.setdefault(_CRITERIA, [])

    def record(number: int, ok: bool, detail: str):
        log.append((number, bool(ok), detail))
        assert ok, f"criterion {number}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter, config):
    log = config.stash.get(_CRITERIA, [])
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(log, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
