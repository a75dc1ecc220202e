import numpy as np
import pytest

from pxray.nn import Conv2D, Dense, PolicyNetwork, ReLU, SpatialSoftmax

GROUPS_2J = {"joint_pos": (0, 2), "joint_vel": (2, 4), "ee_pos": (4, 6), "ee_vel": (6, 8)}


def tiny_net(rng=None, bias=True, image_shape=(5, 5, 1)):
    """Conv -> spatial softmax -> dense(ReLU) -> dense, 2 joints."""
    rng = rng or np.random.default_rng(3)
    h, w, c = image_shape
    conv = Conv2D(rng.normal(size=(3, 3, c, 2)), bias=rng.normal(size=2) if bias else None)
    ho, wo, co = conv.output_shape(h, w)
    d_in = 2 * co + 8
    fusion = [Dense(rng.normal(size=(d_in, 6)), rng.normal(size=6) if bias else np.zeros(6)), ReLU(),
              Dense(rng.normal(size=(6, 2)), rng.normal(size=2) if bias else np.zeros(2))]
    return PolicyNetwork(image_shape, 8, dict(GROUPS_2J), [conv, SpatialSoftmax(ho, wo, co)], fusion)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def net():
    return tiny_net()


# acceptance criteria append "PASS ..." / "FAIL ..." lines here; echoed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
