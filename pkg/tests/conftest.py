import numpy as np
import pytest
import torch

from m3ae import data as D
from m3ae.network import UNetConfig, build_model

_CRITERIA = []


def record_criterion(number, title, passed, detail=""):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title}" + (f" ({detail})" if detail else "")
    _CRITERIA.append(line)
    print(line)
    return passed


@pytest.fixture
def criterion():
    return record_criterion


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def phantom_subjects():
    cfg = D.PhantomConfig(subject_count=3, volume_side=32, seed=5)
    return [D.Subject(D.preprocess(v), l, f"case_{i}") for i, (v, l) in enumerate(D.generate_phantom(cfg))]


@pytest.fixture
def toy_model():
    """Two-level, four-channel network in double precision."""
    cfg = UNetConfig(in_channels=4, base_channels=4, levels=2, blocks_per_level=1)
    return build_model(cfg, seed=0).double()


class ForcedRng:
    """Generator wrapper whose first ``integers`` calls return preset values."""

    def __init__(self, forced, seed=0):
        self._forced = list(forced)
        self._rng = np.random.default_rng(seed)

    def integers(self, *args, **kwargs):
        if self._forced:
            return self._forced.pop(0)
        return self._rng.integers(*args, **kwargs)

    def __getattr__(self, name):
        return getattr(self._rng, name)


@pytest.fixture
def forced_rng():
    return ForcedRng


def central_difference(fn, tensor, index, h=1e-6):
    flat = tensor.data.view(-1)
    orig = flat[index].item()
    flat[index] = orig + h
    up = fn().item()
    flat[index] = orig - h
    down = fn().item()
    flat[index] = orig
    return (up - down) / (2 * h)


def relative_error(a, b, floor=1e-10):
    # the floor keeps structurally zero gradients (a conv bias feeding a norm) from reading as 100% error
    return abs(a - b) / max(abs(a), abs(b), floor)


@pytest.fixture
def fd():
    return central_difference


@pytest.fixture
def rel_err():
    return relative_error


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
