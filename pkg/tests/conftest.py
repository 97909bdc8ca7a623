import numpy as np
import pytest
from hypothesis import settings

from streamforge.causal_student import SamplerGrid, StudentParams
from streamforge.condition_pipeline import make_condition
from streamforge.diffusion_core import GaussianWorld, NoiseSchedule
from streamforge.rng import substream

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def sched():
    return NoiseSchedule(48)


@pytest.fixture
def grid():
    return SamplerGrid()


@pytest.fixture
def world():
    return GaussianWorld.random(substream(7, "world"), img_saturation=1.0, audio_saturation=2.0)


@pytest.fixture
def small_world():
    return GaussianWorld.random(substream(7, "small-world"), d=3, d_c=2, F=6)


@pytest.fixture
def cond():
    return make_condition(substream(7, "cond"), "clean", 21, 4)


@pytest.fixture
def small_cond():
    return make_condition(substream(7, "small-cond"), "clean", 6, 2)


@pytest.fixture
def student():
    return StudentParams.init(substream(7, "student"), 4, 8, 4, 0.3)


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record ``(number, ok, detail)`` for the end-of-run acceptance summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE, {})

    def record(n: int, ok: bool, detail: str) -> bool:
        lines[n] = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(lines[n])
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
