import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from trackcert.controller import CurveSampler, load_policy
from trackcert.dynamics import make_model
from trackcert.reference import load_reference
from trackcert.scenario import load_spec

FIXTURES = Path(__file__).resolve().parents[1] / "src" / "trackcert" / "fixtures"

settings.register_profile("default", max_examples=50, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


class Bench:
    """One fixture scenario: model, policy, reference, spec and the benchmark input/disturbance boxes."""

    def __init__(self, name, kind, verify="verify.json"):
        self.dir = FIXTURES / name
        self.cfg = json.loads((self.dir / verify).read_text())
        self.model = make_model(kind)
        self.policy = load_policy(self.dir / self.cfg["policy"])
        self.spec = load_spec(self.dir / self.cfg["spec"])
        self.tau = load_reference(self.dir / self.cfg["reference"], self.model.state_dim)
        self.K = self.cfg["K"]
        self.xi_half = np.asarray(self.cfg["X_I"]["half_width"], dtype=float)
        self.w_half = np.asarray(self.cfg["W"]["half_width"], dtype=float)


@pytest.fixture(scope="session")
def unicycle():
    return Bench("unicycle", "unicycle3")


@pytest.fixture(scope="session")
def planar_quad():
    return Bench("planar_quad", "planar_quad", "verify_below.json")


@pytest.fixture(scope="session")
def planar_quad_above():
    return Bench("planar_quad", "planar_quad", "verify_above.json")


def sampler_reference(kind, seed=5, K=100):
    m = make_model(kind)
    return CurveSampler(m, K=K)(np.random.default_rng(seed))


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, collected from test user properties."""
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            if getattr(rep, "when", None) != "call":
                continue
            lines += [v for k, v in getattr(rep, "user_properties", []) if k == "acceptance"]
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1][1:])):
            terminalreporter.write_line(line)
