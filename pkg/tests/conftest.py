import numpy as np
import pytest

from despeckle.imagecore import SYNTH_KINDS, synth_image, synthetic_dataset
from despeckle.nn import SgdConfig
from despeckle.sddpm import TrainConfig, train

# 4 synthetic 32x32 images, T = 50, 10 epochs x 30 steps = 300 SGD steps
TINY_CONFIG = TrainConfig(
    epochs=10,
    T=50,
    patch_size=32,
    batch_size=16,
    patches_per_epoch=480,
    sgd=SgdConfig(initial_lr=0.05),
    seed=0,
)

_acceptance_results = {}


@pytest.fixture(scope="session")
def tiny_run():
    """The reference tiny training run, shared by every test that needs a trained model."""
    dataset = synthetic_dataset(4, 32, seed=0)
    model, trace = train(dataset, TINY_CONFIG)
    return model, trace


@pytest.fixture(scope="session")
def tiny_model(tiny_run):
    return tiny_run[0]


@pytest.fixture(scope="session")
def test_images():
    """20 held-out synthetic images (seeds disjoint from the training set)."""
    return [synth_image(SYNTH_KINDS[i % len(SYNTH_KINDS)], 32, seed=1000 + i) for i in range(20)]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def record_criterion():
    def record(number, name, passed, detail=""):
        _acceptance_results[number] = (name, passed, detail)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance_results):
        name, passed, detail = _acceptance_results[number]
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] {number:2d}. {name}  {detail}")
