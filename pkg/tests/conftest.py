import numpy as np
import pytest

from dynsubnet import archs, nn

from ._helpers import splits

ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture(scope="session")
def toy_splits():
    return splits(classes=4, samples=600, size=8, separation=0.8, seed=0)


@pytest.fixture(scope="session")
def trained_convnet(toy_splits):
    model = nn.build_model(archs.convnet6(4), 4, seed=0, input_shape=(3, 8, 8))
    nn.train_epochs(model, toy_splits.train, nn.TrainHyper(0.05, 0.9, 64, 0), 4)
    return model


@pytest.fixture
def convnet(trained_convnet):
    return trained_convnet.copy()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
