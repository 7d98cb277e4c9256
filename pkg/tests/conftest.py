import numpy as np
import pytest
import torch

from rmgn.atelier import generate_dataset
from rmgn.training import TrainConfig

torch.set_num_threads(1)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: multi-minute training runs")


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def tiny_config():
    """Reduced model: K = L = 2 on 8x6 images."""
    return TrainConfig(
        steps=3, seed=0, batch_size=1, n_fake=2, learning_rate=1e-2,
        resolution=(8, 6), gen_levels=2, warp_levels=2,
        gen_channels=(4, 8), warp_channels=(4, 6), warp_hidden=6,
        embedder_channels=(4, 8), checkpoint_interval=2,
    )


@pytest.fixture
def tiny_manifest():
    return generate_dataset(3, 5, size=(8, 6))


@pytest.fixture
def small_config():
    """Cheap but full-depth model on 32x24 images."""
    return TrainConfig(
        steps=4, seed=3, batch_size=1, n_fake=2, learning_rate=1e-3,
        resolution=(32, 24), gen_channels=(4, 8, 8, 8), warp_channels=(4, 4, 6, 6),
        warp_hidden=6, embedder_channels=(4, 8, 8), checkpoint_interval=2,
    )


@pytest.fixture
def small_manifest():
    return generate_dataset(3, 9, size=(32, 24))


def central_difference(f, x: torch.Tensor, index, step=1e-3) -> float:
    """d f / d x[index] by central differences; restores x afterwards."""
    with torch.no_grad():
        orig = x[index].item()
        x[index] = orig + step
        hi = float(f())
        x[index] = orig - step
        lo = float(f())
        x[index] = orig
    return (hi - lo) / (2 * step)


def relative_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / scale)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
