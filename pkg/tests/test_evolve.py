import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kslab.evolve import (BlowupDetected, InsufficientStates, PositivityLoss, State, continue_integration,
                          integrate, load_trajectory, mild_residual, reaction_step, step)
from kslab.fields import Grid, ScalarField
from kslab.model import CoefficientField, constant, separable
from kslab.oracles import logistic_closed_form, pointwise_lower_bound

from conftest import make_params, smooth_positive


def hetero(chi=0.2, n=64, t_amp=0.2):
    coeffs = CoefficientField(separable(1.5, space=[(0.3, 1.0)], time=[(t_amp, 2 * math.pi)]),
                              separable(1.0, space=[(0.2, 2.0, 0.5)]), period=1.0)
    return coeffs, make_params(chi=chi, n=n)


class TestStep:
    def test_logistic_one_unit(self, unit_coeffs):
        p = make_params(chi=0.0)
        g = Grid.from_params(p)
        traj = integrate(ScalarField.full(g, 0.5), 0.0, 1.0, unit_coeffs, p)
        exact = 0.5 / (0.5 + 0.5 * math.exp(-1))
        np.testing.assert_allclose(traj.final.u.values, exact, rtol=1e-13)
        assert exact == pytest.approx(0.7311, abs=1e-4)

    @pytest.mark.parametrize("chi", [0.0, 0.3, 0.9])
    def test_fixed_point(self, chi):
        coeffs = CoefficientField.constant(2.0, 1.0)
        p = make_params(chi=chi)
        s = State.from_u(0.0, ScalarField.full(Grid.from_params(p), 2.0), p)
        for _ in range(20):
            s = step(s, 0.05, coeffs, p)
        np.testing.assert_allclose(s.u.values, 2.0, rtol=1e-13)
        np.testing.assert_allclose(s.v.values, 2.0 * p.mu / p.lam, rtol=1e-13)

    def test_zero_stays_zero(self, unit_coeffs):
        p = make_params()
        s = State.from_u(0.0, ScalarField.full(Grid.from_params(p), 0.0), p)
        s = step(s, 0.1, unit_coeffs, p)
        assert np.all(s.u.values == 0) and np.all(s.v.values == 0)

    def test_positivity_loss(self, unit_coeffs):
        p = make_params()
        g = Grid.from_params(p)
        vals = np.ones(g.shape)
        vals[:20] = -1e-3
        with pytest.raises(PositivityLoss) as exc:
            step(State.from_u(0.0, ScalarField(vals, g), p), 0.01, unit_coeffs, p)
        assert exc.value.t == pytest.approx(0.01)

    def test_clamp_warns(self, unit_coeffs, caplog):
        p = make_params(chi=0.0, n=16)
        g = Grid.from_params(p)
        vals = np.zeros(g.shape)
        vals[3] = -1e-9
        with caplog.at_level(logging.WARNING, logger="kslab.evolve"):
            s = step(State.from_u(0.0, ScalarField(vals, g), p), 1e-4, unit_coeffs, p)
        assert s.u.min() == 0.0
        assert any("clamping" in r.message for r in caplog.records)

    def test_blowup_cap(self, unit_coeffs):
        p = make_params()
        s = State.from_u(0.0, ScalarField.full(Grid.from_params(p), 0.5), p)
        with pytest.raises(BlowupDetected):
            step(s, 0.1, unit_coeffs, p, blowup_cap=0.4)

    def test_reaction_exact(self):
        u = np.array([0.0, 0.3, 2.0])
        np.testing.assert_allclose(reaction_step(u, 1.3, 0.7, 0.4), logistic_closed_form(u, 1.3, 0.7, 0.4),
                                   rtol=1e-14)


class TestIntegrate:
    def test_zero_horizon(self, unit_coeffs):
        p = make_params()
        traj = integrate(ScalarField.full(Grid.from_params(p), 1.0), 2.0, 0.0, unit_coeffs, p, 0.1)
        assert len(traj.states) == 1 and traj.times[0] == 2.0

    def test_store_times_exact(self, unit_coeffs):
        p = make_params()
        traj = integrate(ScalarField.full(Grid.from_params(p), 0.3), 0.0, 1.0, unit_coeffs, p, 0.25)
        assert list(traj.times) == [0.0, 0.25, 0.5, 0.75, 1.0]
        assert len(traj.min_u) == len(traj.dt_history) == len(traj.max_u)
        assert np.all(np.diff(traj.step_times) > 0)

    def test_rejects_negative_data(self, unit_coeffs):
        p = make_params()
        with pytest.raises(ValueError):
            integrate(ScalarField.full(Grid.from_params(p), -1.0), 0, 1, unit_coeffs, p)

    def test_warns_without_h1(self):
        p = make_params(chi=2.0)
        with pytest.warns(RuntimeWarning):
            integrate(ScalarField.full(Grid.from_params(p), 0.1), 0, 0.01, CoefficientField.constant(1, 1), p)

    def test_sup_bound_and_envelope(self, unit_coeffs):
        p = make_params(chi=0.2, n=128, L=10.0)
        g = Grid.from_params(p)
        u0 = smooth_positive(g, np.random.default_rng(7), 0.0, 3.0)
        traj = integrate(u0, 0.0, 5.0, unit_coeffs, p, 0.05)
        sup = traj.sup_norms()
        assert sup.max() <= max(u0.norm_inf(), 1.25) + 1e-6
        assert np.all(sup <= u0.norm_inf() * np.exp(traj.times) + 1e-6)

    def test_asymptotic_bound(self):
        coeffs, p = hetero(chi=0.2)
        u0 = smooth_positive(Grid.from_params(p), np.random.default_rng(2), 0.1, 5.0)
        traj = integrate(u0, 0.0, 15.0, coeffs, p)
        bound = coeffs.a_sup / (coeffs.b_inf - p.chi_mu)
        assert traj.final.u.norm_inf() <= 1.01 * bound

    def test_checkpoint_resume(self, tmp_path):
        coeffs, p = hetero(n=32)
        u0 = smooth_positive(Grid.from_params(p), np.random.default_rng(3))
        full = integrate(u0, 0.0, 2.0, coeffs, p, 0.5)
        half = integrate(u0, 0.0, 1.0, coeffs, p, 0.5)
        half.save(tmp_path / "ck")
        resumed = continue_integration(load_trajectory(tmp_path / "ck"), 1.0, 0.5)
        assert list(resumed.times) == list(full.times)
        np.testing.assert_array_equal(resumed.final.u.values, full.final.u.values)

    def test_second_order(self):
        coeffs, p = hetero(chi=0.3, n=64, t_amp=0.4)
        g = Grid.from_params(p)
        u0 = smooth_positive(g, np.random.default_rng(5), 0.5, 1.5)

        def run(nsteps):
            s = State.from_u(0.0, u0, p)
            for i in range(nsteps):
                s = step(s, 1.0 / nsteps, coeffs, p)
            return s.u.values

        ref = run(640)
        errs = [np.abs(run(n) - ref).max() for n in (10, 20, 40)]
        orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
        assert orders.min() >= 1.8, (errs, orders)


class TestMildResidual:
    def test_fixed_point(self):
        coeffs = CoefficientField.constant(1.5, 1.0)
        p = make_params(chi=0.4)
        traj = integrate(ScalarField.full(Grid.from_params(p), 1.5), 0.0, 1.0, coeffs, p, 0.1)
        assert mild_residual(traj, 0.0) <= 1e-8

    def test_logistic(self, unit_coeffs):
        p = make_params(chi=0.0, n=16)
        traj = integrate(ScalarField.full(Grid.from_params(p), 0.2), 0.0, 2.0, unit_coeffs, p, 0.05)
        assert mild_residual(traj, 0.5) <= 1e-4
        # the stored states themselves agree with the exact logistic curve
        exact = logistic_closed_form(0.2, 1.0, 1.0, traj.times)
        assert np.abs(traj.u_stack()[:, 0] - exact).max() < 1e-5

    def test_zero(self, unit_coeffs):
        p = make_params()
        traj = integrate(ScalarField.full(Grid.from_params(p), 0.0), 0.0, 1.0, unit_coeffs, p, 0.1)
        assert mild_residual(traj, 0.2) == 0.0

    def test_chemotaxis_consistency(self):
        coeffs, p = hetero(chi=0.2)
        u0 = smooth_positive(Grid.from_params(p), np.random.default_rng(9))
        coarse = integrate(u0, 0.0, 2.0, coeffs, p, 0.1)
        fine = integrate(u0, 0.0, 2.0, coeffs, p, 0.025)
        r1, r2 = mild_residual(coarse, 0.5), mild_residual(fine, 0.5)
        assert r2 < r1 / 3

    def test_insufficient(self, unit_coeffs):
        p = make_params()
        traj = integrate(ScalarField.full(Grid.from_params(p), 0.5), 0.0, 1.0, unit_coeffs, p, 1.0)
        with pytest.raises(InsufficientStates):
            mild_residual(traj, 0.0)
        traj = integrate(ScalarField.full(Grid.from_params(p), 0.5), 0.0, 1.0, unit_coeffs, p, 0.25)
        with pytest.raises(InsufficientStates):
            mild_residual(traj, 0.0, window=0.3)


# --- property suites ------------------------------------------------------------

@st.composite
def problems(draw, chi_max=0.4):
    seed = draw(st.integers(0, 2 ** 31))
    rng = np.random.default_rng(seed)
    chi = draw(st.floats(0.0, chi_max))
    dim = draw(st.sampled_from([1, 1, 2]))
    n = 32 if dim == 1 else 16
    a = separable(rng.uniform(0.8, 2.0), space=[(rng.uniform(0, 0.3), [1.0] * dim)],
                  time=[(rng.uniform(0, 0.3), 2 * math.pi)])
    b = separable(rng.uniform(1.0, 2.0), space=[(rng.uniform(0, 0.3), [0.0] * (dim - 1) + [1.0])])
    coeffs = CoefficientField(a, b, period=1.0)
    p = make_params(chi=chi, dim=dim, n=n, lam=rng.uniform(0.5, 2), mu=rng.uniform(0.5, 1.5))
    return coeffs, p, rng


@pytest.mark.filterwarnings("ignore:b_inf <= chi")
@settings(max_examples=100)
@given(problems(chi_max=1.0))
def test_positivity(case):
    coeffs, p, rng = case
    g = Grid.from_params(p)
    vals = smooth_positive(g, rng, 0.0, 4.0).values
    vals[vals < 1.0] = 0.0  # patches of exact zeros
    traj = integrate(ScalarField(vals, g), 0.0, 0.5, coeffs, p, 0.1)
    assert min(traj.min_u) >= 0.0
    assert all(s.u.min() >= 0.0 for s in traj.states)


@settings(max_examples=100)
@given(problems())
def test_comparison_order_chi_zero(case):
    coeffs, p, rng = case
    p = p.with_chi(0.0)
    g = Grid.from_params(p)
    lo = smooth_positive(g, rng, 0.0, 2.0)
    hi = ScalarField(lo.values + smooth_positive(g, rng, 0.0, 1.0).values, g)
    t1 = integrate(lo, 0.0, 0.5, coeffs, p, 0.1)
    t2 = integrate(hi, 0.0, 0.5, coeffs, p, 0.1)
    for s1, s2 in zip(t1.states, t2.states):
        assert np.all(s1.u.values <= s2.u.values + 1e-14)


@settings(max_examples=100)
@given(problems(), st.floats(0.2, 1.5))
def test_lemma_lower_bound(case, T):
    coeffs, p, rng = case
    g = Grid.from_params(p)
    u0 = smooth_positive(g, rng, 0.05, 2.0)
    traj = integrate(u0, 0.0, T, coeffs, p, T / 5)
    for s in traj.states:
        t = min(s.t, T)
        bound = pointwise_lower_bound(u0.min(), u0.norm_inf(), T, t, coeffs)
        assert s.u.min() >= bound - 1e-6
