import numpy as np
import pandas as pd
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_bundle():
    from pfsnap.synth import SynthConfig, generate_panel

    return generate_panel(SynthConfig(n_individuals=300, seed=11))


@pytest.fixture(scope="session")
def written_bundle(tmp_path_factory, small_bundle):
    from pfsnap.synth import write_bundle

    out = tmp_path_factory.mktemp("bundle")
    return write_bundle(small_bundle, out)


def toy_panel(n_ind=6, n_waves=4, seed=0):
    """Small balanced panel with two crossed effects and a cluster column."""
    rng = np.random.default_rng(seed)
    ids = np.repeat(np.arange(n_ind), n_waves)
    years = np.tile(2000 + 2 * np.arange(n_waves), n_ind)
    x1 = rng.normal(size=ids.size)
    x2 = rng.normal(size=ids.size)
    y = 1.0 + 0.5 * x1 - 0.25 * x2 + 0.3 * ids - 0.1 * (years - 2000) + rng.normal(scale=0.3, size=ids.size)
    w = rng.uniform(0.5, 2.0, size=ids.size)
    return pd.DataFrame({"individual_id": ids, "wave_year": years, "x1": x1, "x2": x2, "y": y, "w": w})


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
