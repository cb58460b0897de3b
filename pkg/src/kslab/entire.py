"""Strictly positive entire solutions: steady states, periodic orbits, pullback limits."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.optimize import NoConvergence, newton_krylov

from . import elliptic
from .elliptic import spectral
from .evolve import CoefficientSampler, State, integrate, rhs, step
from .fields import Grid, ScalarField, read_field, write_field
from .model import (CoefficientField, HypothesisError, Params, attraction_rectangle, model_from_config,
                    model_to_config, sup_bound, validate_coefficients)
from .oracles import BoundCheck, BoundsReport, lemma_threshold

log = logging.getLogger(__name__)

REFINE = 4


class ConvergenceError(RuntimeError):
    def __init__(self, msg, history=()):
        super().__init__(msg)
        self.history = list(history)


@dataclass(eq=False)
class EntireSolution:
    """An entire solution sampled on the grid.

    kind is "steady" (one state), "periodic" (states over one period, the first
    at phase 0 and the last at phase T) or "window" (states over [t_start, 0]).
    """

    kind: str
    states: list
    params: Params
    coeffs: CoefficientField
    period: float | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("steady", "periodic", "window"):
            raise ValueError(f"unknown representation {self.kind!r}")
        if self.kind == "periodic" and not (self.period and self.period > 0):
            raise ValueError("periodic representation needs a positive period")

    @property
    def grid(self) -> Grid:
        return self.states[0].u.grid

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.states])

    def at(self, t: float) -> State:
        """Slice at time t (linear interpolation between stored states)."""
        if self.kind == "steady":
            s = self.states[0]
            return State(t, s.u, s.v)
        times = self.times
        tt = t
        if self.kind == "periodic":
            tt = times[0] + math.fmod(t - times[0], self.period)
            if tt < times[0]:
                tt += self.period
        elif t < times[0] - 1e-9 or t > times[-1] + 1e-9:
            raise ValueError(f"t={t} outside the stored window [{times[0]}, {times[-1]}]")
        j = int(np.clip(np.searchsorted(times, tt, side="right") - 1, 0, len(times) - 2))
        t0, t1 = times[j], times[j + 1]
        w = 0.0 if t1 == t0 else float(np.clip((tt - t0) / (t1 - t0), 0.0, 1.0))
        if w == 0.0:
            s = self.states[j]
            return State(t, s.u, s.v)
        u = (1 - w) * self.states[j].u.values + w * self.states[j + 1].u.values
        v = (1 - w) * self.states[j].v.values + w * self.states[j + 1].v.values
        return State(t, ScalarField(u, self.grid), ScalarField(v, self.grid))

    # statistics ----------------------------------------------------------------

    def _slices(self):
        return [s.u.values for s in self.states]

    @property
    def u_inf(self) -> float:
        return min(float(u.min()) for u in self._slices())

    @property
    def u_sup(self) -> float:
        return max(float(u.max()) for u in self._slices())

    def is_space_homogeneous(self, rtol: float = 1e-12) -> bool:
        return all(float(u.max() - u.min()) <= rtol * max(1.0, float(u.max())) for u in self._slices())

    def gradient_stats(self) -> dict:
        """sup‖∇u⁺‖ and sup‖∇ln u⁺‖ over stored slices, each with a refinement error bar.

        The error bar is the change in the sup when the slice is Fourier-interpolated
        onto a grid REFINE times finer.
        """
        grid = self.grid
        fine = Grid(grid.dim, grid.n * REFINE, grid.L)
        g0 = gl0 = g1 = gl1 = 0.0
        for u in self._slices():
            mag = _grad_mag(u, grid)
            g0, gl0 = max(g0, float(mag.max())), max(gl0, float((mag / u).max()))
            uf = u
            for axis in range(grid.dim):
                uf = signal.resample(uf, fine.n, axis=axis)
            magf = _grad_mag(uf, fine)
            g1, gl1 = max(g1, float(magf.max())), max(gl1, float((magf / uf).max()))
        return {"C0": g0, "C0_err": abs(g1 - g0), "grad_log_sup": gl0, "grad_log_err": abs(gl1 - gl0)}

    def stats(self) -> dict:
        out = {"kind": self.kind, "u_inf": self.u_inf, "u_sup": self.u_sup}
        out.update(self.gradient_stats())
        return out

    def residual(self) -> float:
        """Sup-norm residual of the u equation, scaled by 1/a_sup.

        Steady: the semi-discrete right-hand side. Otherwise the time derivative is
        taken by fourth-order central differences of uniformly stored slices.
        """
        grid, params = self.grid, self.params
        sampler = CoefficientSampler(self.coeffs, grid)
        scale = 1.0 / self.coeffs.a_sup
        if self.kind == "steady":
            s = self.states[0]
            return scale * float(np.abs(rhs(s.u.values, s.t, grid, params, sampler)).max())
        times = self.times
        dts = np.diff(times)
        if len(times) < 5 or np.ptp(dts) > 1e-9 * dts.mean():
            raise ValueError("residual needs at least five uniformly spaced slices")
        d = dts.mean()
        u = self._slices()
        worst = 0.0
        for k in range(2, len(u) - 2):
            dudt = (-u[k + 2] + 8 * u[k + 1] - 8 * u[k - 1] + u[k - 2]) / (12 * d)
            r = dudt - rhs(u[k], times[k], grid, params, sampler)
            worst = max(worst, float(np.abs(r).max()))
        return scale * worst

    # persistence ------------------------------------------------------------------

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        names = []
        for i, s in enumerate(self.states):
            name = f"uplus_{i:06d}.bin"
            write_field(d / name, s.u)
            names.append(name)
        manifest = {"kind": "entire", "representation": self.kind, "period": self.period,
                    "model": model_to_config(self.params, self.coeffs),
                    "times": [float(t) for t in self.times], "fields": names,
                    "diagnostics": _jsonable(self.diagnostics)}
        (d / "entire.json").write_text(json.dumps(manifest, indent=1))

    @classmethod
    def load(cls, directory) -> "EntireSolution":
        d = Path(directory)
        m = json.loads((d / "entire.json").read_text())
        params, coeffs = model_from_config(m["model"])
        states = [State.from_u(t, read_field(d / f), params) for t, f in zip(m["times"], m["fields"])]
        return cls(m["representation"], states, params, coeffs, m["period"], m.get("diagnostics", {}))


def _grad_mag(u, grid):
    return np.sqrt(sum(g ** 2 for g in elliptic.gradient_values(u, grid)))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def _require_h1(coeffs, params):
    if not validate_coefficients(coeffs, params).holds_H1:
        raise HypothesisError("entire solutions are constructed under b_inf > chi*mu")
    coeffs.check_box(params)


def _initial_guess(coeffs, grid, t=0.0):
    a, b = coeffs.on_grid(grid.coords, t)
    return ScalarField(np.broadcast_to(a / b, grid.shape).astype(float), grid)


def _certify_positive(u_min, coeffs):
    floor = 1e-6 * coeffs.a_inf / coeffs.b_sup
    if not u_min >= floor:
        raise ConvergenceError(f"minimum {u_min:.3e} below positivity floor {floor:.3e}")


# ---------------------------------------------------------------------------
# steady states
# ---------------------------------------------------------------------------


def find_steady_state(coeffs: CoefficientField, params: Params, *, u_init: ScalarField | None = None,
                      burn_in: float = 20.0, tol: float = 1e-8, max_iter: int = 60) -> EntireSolution:
    """Positive steady state for time-independent coefficients.

    Long-time integration brings the iterate near the attracting equilibrium, then
    Newton-Krylov drives the semi-discrete right-hand side (the stepper's own
    operators) to zero.  The residual is preconditioned by (2 - Δ_h)^{-1}.
    """
    if not coeffs.autonomous:
        raise ValueError("steady states need time-independent coefficients")
    _require_h1(coeffs, params)
    grid = Grid.from_params(params)
    sampler = CoefficientSampler(coeffs, grid)
    sp = spectral(grid)
    u0 = u_init if u_init is not None else _initial_guess(coeffs, grid)
    # a/b is already the equilibrium when nothing varies in space
    if burn_in > 0 and not (coeffs.space_homogeneous and u_init is None):
        u0 = integrate(u0, 0.0, burn_in, coeffs, params).final.u
    F = lambda u: rhs(u, 0.0, grid, params, sampler)
    res0 = float(np.abs(F(u0.values)).max())
    u = u0.values
    if res0 > 1e-3 * tol:
        shift = 2.0
        G = lambda u: sp.inv(sp.fwd(F(u)) / (shift - sp.fd_symbol))
        try:
            u = newton_krylov(G, u0.values, f_tol=1e-3 * tol, maxiter=max_iter)
        except NoConvergence as exc:
            u = exc.args[0]
            raise ConvergenceError(f"Newton-Krylov stalled, residual {np.abs(F(u)).max():.3e}",
                                   [float(np.abs(F(u)).max())]) from None
    res = float(np.abs(F(u)).max())
    uf = ScalarField(u, grid)
    state = State.from_u(0.0, uf, params)
    hres = elliptic.helmholtz_residual(state.u, state.v, params)
    if max(res, hres) > tol:
        raise ConvergenceError(f"steady residual {max(res, hres):.3e} exceeds {tol:.1e}", [res])
    _certify_positive(uf.min(), coeffs)
    return EntireSolution("steady", [state], params, coeffs,
                          diagnostics={"residual_u": res, "residual_v": hres, "initial_residual": res0})


# ---------------------------------------------------------------------------
# periodic orbits
# ---------------------------------------------------------------------------


def period_map(u: ScalarField, T: float, steps: int, coeffs, params, t0: float = 0.0,
               store: int | None = None):
    """Apply the time-T map with a fixed number of equal steps.

    Returns the end state and, if ``store`` is given, ``store + 1`` uniformly
    spaced states (``steps`` must be divisible by ``store``).
    """
    grid = u.grid
    sampler = CoefficientSampler(coeffs, grid)
    state = State.from_u(t0, u, params)
    dt = T / steps
    kept = [state] if store else None
    every = steps // store if store else None
    if store and steps % store:
        raise ValueError("steps must be a multiple of store")
    cap = 10.0 * max(u.norm_inf(), sup_bound(coeffs, params))
    for i in range(1, steps + 1):
        state = step(state, dt, coeffs, params, sampler=sampler, blowup_cap=cap)
        state = State(t0 + i * dt, state.u, state.v)
        if store and i % every == 0:
            kept.append(state)
    return state, kept


def steps_for(T: float, dt_max: float) -> int:
    return max(1, math.ceil(T / dt_max - 1e-9))


def find_periodic_entire_solution(coeffs: CoefficientField, params: Params, *, period: float | None = None,
                                  u_init: ScalarField | None = None, dt_max: float = 0.02,
                                  tol: float = 1e-7, max_iter: int = 300, theta: float = 0.8,
                                  theta_fallback: float = 0.3, warm_periods: int = 3,
                                  store: int | None = None) -> EntireSolution:
    """Fixed point of the period map by damped Picard iteration.

    Each application of the map uses the same number of equal steps, so the
    discrete map is a fixed function and its fixed point is well defined.
    """
    T = period if period is not None else coeffs.period
    if T is None:
        if coeffs.autonomous:
            T = 1.0
        else:
            raise ValueError("time-dependent coefficients need a period")
    if coeffs.period is not None and not coeffs.autonomous:
        ratio = T / coeffs.period
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ValueError("period must be a multiple of the coefficient period")
    _require_h1(coeffs, params)
    grid = Grid.from_params(params)
    steps = steps_for(T, dt_max)
    if store is None:
        store = steps
    steps = math.ceil(steps / store) * store
    u = u_init if u_init is not None else _initial_guess(coeffs, grid)
    for _ in range(warm_periods):
        u = period_map(u, T, steps, coeffs, params)[0].u
    history = []
    th = theta
    for it in range(max_iter):
        pu = period_map(u, T, steps, coeffs, params)[0].u
        disp = float(np.abs(pu.values - u.values).max())
        history.append(disp)
        if disp <= tol:
            break
        if len(history) > 1 and disp > history[-2] and th != theta_fallback:
            th = theta_fallback
        u = ScalarField((1 - th) * u.values + th * pu.values, grid)
    else:
        raise ConvergenceError(f"period map displacement {history[-1]:.3e} after {max_iter} iterations", history)
    # store the orbit through the converged point
    _, states = period_map(u, T, steps, coeffs, params, store=store)
    final_disp = float(np.abs(states[-1].u.values - u.values).max())
    _certify_positive(min(s.u.min() for s in states), coeffs)
    return EntireSolution("periodic", states, params, coeffs, period=T,
                          diagnostics={"displacements": history, "displacement": final_disp,
                                       "iterations": len(history), "steps_per_period": steps})


# ---------------------------------------------------------------------------
# pullback construction
# ---------------------------------------------------------------------------


def pullback_start(coeffs: CoefficientField, T: float) -> float:
    """Constant launch value δ₀ = min(M_T, a_inf / (2 b_sup))."""
    return min(lemma_threshold(T, coeffs), coeffs.a_inf / (2.0 * coeffs.b_sup))


def pullback_entire_solution(coeffs: CoefficientField, params: Params, k_list, T: float, *,
                             dt_max: float = 0.02, store: int | None = None) -> EntireSolution:
    """Time-0 slices of solutions launched from δ₀ at times -kT, k in ``k_list``.

    Returns the deepest run over its last ``k_list[0]`` periods, i.e. on
    [-k_list[0] T, 0].  The sup-norm increments between consecutive depths are
    reported; a non-decreasing tail is flagged rather than accepted.
    """
    ks = [int(k) for k in k_list]
    if len(ks) < 2 or any(b <= a for a, b in zip(ks, ks[1:])) or ks[0] < 1:
        raise ValueError("k_list must hold at least two increasing positive depths")
    _require_h1(coeffs, params)
    grid = Grid.from_params(params)
    delta0 = pullback_start(coeffs, T)
    steps = steps_for(T, dt_max)
    if store is None:
        store = steps
    steps = math.ceil(steps / store) * store
    slices = []
    window = []
    for k in ks:
        u = ScalarField.full(grid, delta0)
        deepest = k == ks[-1]
        for n in range(k, 0, -1):
            keep = deepest and n <= ks[0]
            st, kept = period_map(u, T, steps, coeffs, params, t0=-n * T, store=store if keep else None)
            if keep:
                window.extend(kept if not window else kept[1:])
            u = st.u
        slices.append(u)
    increments = [float(np.abs(b.values - a.values).max()) for a, b in zip(slices, slices[1:])]
    tail = increments[-3:]
    cauchy = all(b <= a or b < 1e-12 for a, b in zip(tail, tail[1:]))
    if not cauchy:
        warnings.warn(f"pullback increments are not decreasing: {increments}", RuntimeWarning, stacklevel=2)
    _certify_positive(min(s.u.min() for s in window), coeffs)
    return EntireSolution("window", window, params, coeffs, period=None,
                          diagnostics={"k_list": ks, "increments": increments, "cauchy": cauchy,
                                       "delta0": delta0, "steps_per_period": steps})


def construct_entire_solution(coeffs: CoefficientField, params: Params, **kw) -> EntireSolution:
    """Pick the construction matching the coefficients' time dependence."""
    if coeffs.autonomous:
        return find_steady_state(coeffs, params, **kw)
    if coeffs.period is not None:
        return find_periodic_entire_solution(coeffs, params, **kw)
    T = kw.pop("T", 1.0)
    k_list = kw.pop("k_list", (10, 20, 30))
    return pullback_entire_solution(coeffs, params, k_list, T, **kw)


# ---------------------------------------------------------------------------
# certification
# ---------------------------------------------------------------------------


def certify_entire_bounds(sol: EntireSolution, coeffs: CoefficientField, params: Params,
                          rel_tol: float = 0.01, band_tol: float | None = None) -> BoundsReport:
    """Check positivity, the range of sup u⁺ and, under H2, the attraction rectangle.

    sup u⁺ must lie in [a_inf/b_sup, a_sup/(b_inf - χμ)] up to ``rel_tol`` relative;
    pointwise values must lie in [M_lower, M_upper] up to ``band_tol`` (default
    1e-6 a_sup).
    """
    rep = validate_coefficients(coeffs, params)
    if band_tol is None:
        band_tol = 1e-6 * coeffs.a_sup
    u_inf, u_sup = sol.u_inf, sol.u_sup
    checks = [BoundCheck("inf u+ > 0", u_inf, 0.0, None)]
    if rep.holds_H1:
        lo = coeffs.a_inf / coeffs.b_sup
        hi = sup_bound(coeffs, params)
        checks.append(BoundCheck("sup u+ range", u_sup, lo * (1 - rel_tol), hi * (1 + rel_tol)))
    if rep.holds_H2:
        m_lo, m_hi = attraction_rectangle(coeffs, params)
        checks.append(BoundCheck("inf u+ >= M_lower", u_inf, m_lo - band_tol, None))
        checks.append(BoundCheck("sup u+ <= M_upper", u_sup, None, m_hi + band_tol))
    # a strictly positive check fails at zero margin only for u_inf == 0
    if u_inf <= 0:
        checks[0] = BoundCheck("inf u+ > 0", u_inf, math.nextafter(0.0, 1.0), None)
    return BoundsReport(provenance="entire-solution range and attraction rectangle", checks=checks)
