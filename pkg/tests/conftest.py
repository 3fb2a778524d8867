import numpy as np
import pytest

from svflab.episodes import SplitPlan, episode_stream
from svflab.model import Backbone, SegHead, build_fss_model
from svflab.training import TrainConfig

SMALL = 32


@pytest.fixture(scope="session")
def plan():
    return SplitPlan.default(0, SMALL)


@pytest.fixture(scope="session")
def backbone():
    return Backbone.init(0)


@pytest.fixture
def small_cfg():
    return TrainConfig(epochs=2, episodes_per_epoch=4, batch_size=2, val_episodes=4, image_size=SMALL)


@pytest.fixture
def make_model(backbone):
    def make(strategy, dtype=np.float64, seed=0):
        return build_fss_model(backbone, SegHead.init(seed, 96), strategy, dtype)
    return make


@pytest.fixture(scope="session")
def small_episodes(plan):
    return episode_stream(plan, "test", 1, 0, 4, image_size=SMALL)


_ACCEPTANCE: list[str] = []


@pytest.fixture
def acceptance(capsys):
    """report(n, ok, detail): one PASS/FAIL line per criterion, live and in the final summary."""
    def report(n, ok, detail):
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok
    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
