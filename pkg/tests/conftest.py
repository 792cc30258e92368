import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ottakit import model as M
from ottakit.engine import PretrainedModel
from ottakit.signals import SOURCE, SynthConfig, fit_norm, labeled_pairs, synth_population

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# compact geometry used by most engine/harness tests
SMALL = dict(L=64, d=16, h=8, E=1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_synth():
    return SynthConfig(L=SMALL["L"], d=SMALL["d"], T=40, n_init=10, drift_delta=15.0,
                       source_ranges=((0.4, 1.3), (0.15, 0.7), (0.05, 0.45)))


@pytest.fixture(scope="session")
def small_pretrained(small_synth):
    src = synth_population(small_synth.replace(T=4, n_init=0), SOURCE, 32)
    stats = fit_norm(labeled_pairs(src))
    p = M.init_params(SMALL["d"], SMALL["h"], SMALL["L"] // SMALL["d"], SMALL["E"], rng=0)
    p = M.pretrain(p, src, stats, epochs=15, rng=1)
    return PretrainedModel(p, stats)


# ---------------------------------------------------------------------------
# acceptance summary: one PASS/FAIL line per criterion at the end of the run
# ---------------------------------------------------------------------------

ACCEPTANCE_LINES = {}


@pytest.fixture
def acceptance():
    """``record(number, passed, detail)`` stores and prints one criterion line."""

    def record(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
