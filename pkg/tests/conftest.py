import numpy as np
import pytest

from paumer import numerics as nx
from paumer.model import ModelConfig, init_params


def finite_difference(f, arr: np.ndarray, idx, h: float = 1e-5) -> float:
    """Central difference of scalar ``f()`` w.r.t. ``arr[idx]`` (mutated in place, restored)."""
    old = arr[idx]
    arr[idx] = old + h
    up = f()
    arr[idx] = old - h
    down = f()
    arr[idx] = old
    return (up - down) / (2 * h)


def rel_err(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig(image_height=16, image_width=16, patch_size=4, embed_dim=8, num_layers=4,
                       num_heads=2, num_classes=3)


@pytest.fixture
def tiny_params(tiny_config):
    params = init_params(tiny_config, 7)
    # Larger weights than the 0.02 init so entropies and logits are spread out.
    r = np.random.default_rng(11)
    for p in params.values():
        p.data = p.data + r.normal(0, 0.3, p.shape)
    return params


@pytest.fixture
def tiny_images(rng):
    return rng.random((2, 16, 16, 3))


def leaf(data):
    return nx.Tensor(np.array(data, dtype=np.float64), requires_grad=True)


# One line per acceptance criterion, printed at the end of the run.
ACCEPTANCE_LINES: dict[str, str] = {}


def record_acceptance(criterion: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[criterion] = f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
