import numpy as np
import pytest

from diffucd.data import BitemporalScene
from diffucd.synthetic import SynthConfig, generate_scene


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_scene():
    return generate_scene(SynthConfig(C=8, H=20, W=20, seed=3, n_blobs=3))


@pytest.fixture
def random_scene(rng):
    t1 = rng.random((4, 9, 11), dtype=np.float32)
    t2 = rng.random((4, 9, 11), dtype=np.float32)
    labels = rng.integers(0, 3, size=(9, 11)).astype(np.uint8)
    return BitemporalScene(t1, t2, labels, name="rand")


def pytest_terminal_summary(terminalreporter):
    try:
        import test_acceptance
    except ImportError:
        return
    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.RESULTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
