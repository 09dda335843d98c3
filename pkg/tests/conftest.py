import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gapnet.dataio import make_blob_dataset
from gapnet.tensorcore import Tensor

settings.register_profile("default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def blob_root(tmp_path_factory):
    return make_blob_dataset(tmp_path_factory.mktemp("blobs") / "ds", n=8, size=64, seed=0)


@pytest.fixture(scope="session")
def clip_root(tmp_path_factory):
    return make_blob_dataset(tmp_path_factory.mktemp("clips") / "ds", n=2, size=64, seed=1, video_frames=4)


def pytest_terminal_summary(terminalreporter):
    from .test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS):
            terminalreporter.write_line(line)
