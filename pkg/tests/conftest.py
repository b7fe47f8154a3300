import numpy as np
import pytest

from team.data import SyntheticSpec, generate_synthetic
from team.decoupling import ArchSpec, DecoupleConfig, DenseModel, decouple
from team.engine import Affine, Conv, Flatten, MaxPool, ReLU


def small_arch(class_count=10):
    layers = (
        Conv(8, 1, 3), ReLU(), MaxPool(2, 2),
        Conv(8, 8, 3), ReLU(),
        Conv(8, 8, 3, pad=1), ReLU(),
        Flatten(), Affine(8 * 3 * 3, class_count),
    )
    return ArchSpec((1, 12, 12), layers, 3, class_count)


def randomize_biases(model, rng, scale=0.1):
    for b in model.blocks[1::2]:
        b.value[:] = rng.standard_normal(b.value.shape) * scale


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def calib10():
    return generate_synthetic(SyntheticSpec(10, 6, 12, 0.2), seed=3)


@pytest.fixture
def dense10(rng):
    model = DenseModel.init(small_arch(10), seed=7)
    randomize_biases(model, rng)
    return model


@pytest.fixture
def global10(dense10, calib10):
    return decouple(dense10, DecoupleConfig(2, 0.25, 10), calib10)


@pytest.fixture(scope="session")
def separable10():
    return generate_synthetic(SyntheticSpec(10, 20, 12, 0.05), seed=5)


@pytest.fixture(scope="session")
def trained10(separable10):
    from team.training import train_dense
    model, _ = train_dense(DenseModel.init(small_arch(10), seed=7), separable10, 5, 8, 0.1, 0)
    return model


@pytest.fixture
def trained_global10(trained10, separable10):
    return decouple(trained10, DecoupleConfig(2, 0.25, 10), separable10)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
