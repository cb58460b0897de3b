import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from kslab.fields import Grid, ScalarField
from kslab.model import CoefficientField, Params

settings.register_profile("kslab", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("kslab")


@pytest.fixture
def unit_coeffs():
    return CoefficientField.constant(1.0, 1.0)


def make_params(chi=0.2, lam=1.0, mu=1.0, dim=1, L=math.pi, n=64):
    return Params(chi=chi, lam=lam, mu=mu, dim=dim, box_half_length=L, grid_points=n)


def field_from(grid: Grid, fn) -> ScalarField:
    return ScalarField.from_function(grid, fn)


def smooth_positive(grid: Grid, rng: np.random.Generator, low=0.2, high=2.0, modes=5) -> ScalarField:
    """Random trigonometric field rescaled into [low, high]."""
    s = np.zeros(grid.shape)
    for _ in range(modes):
        k = rng.integers(1, modes + 1, size=grid.dim)
        s = s + rng.normal() * np.cos(sum(np.pi / grid.L * kk * c for kk, c in zip(k, grid.coords))
                                      + rng.uniform(0, 2 * np.pi))
    s = (s - s.min()) / (s.max() - s.min())
    return ScalarField(low + (high - low) * s, grid)


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip("."))):
            terminalreporter.write_line(line)
