"""Strang-split time stepping for the parabolic-elliptic chemotaxis system.

One step of size dt is the symmetric composition

    D(dt/2) A(dt/2) R(dt) A(dt/2) D(dt/2)

D: exact exponential of the three-point Laplacian (FFT diagonal);
A: chemotactic transport -χ∇·(u∇v), MUSCL/minmod upwind fluxes with SSP-RK2,
   v re-solved at every stage;
R: pointwise logistic flow u' = u(a - bu), exact, coefficients frozen at t + dt/2.

Each sub-flow maps nonnegative data to nonnegative data (A under its CFL limit),
so the composition does too.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import elliptic
from .elliptic import spectral
from .fields import Grid, ScalarField, read_field, write_field
from .model import CoefficientField, Params, model_from_config, model_to_config, sup_bound, validate_coefficients

log = logging.getLogger(__name__)

CLAMP_SILENT = 1e-12
CLAMP_WARN = 1e-8
CFL_FACTOR = 0.4
# Courant number per transport sub-cycle; MUSCL + minmod stays positive below 1/2
SUBSTEP_COURANT = 0.4
DEFAULT_DT_MAX = 0.02
# FFT roundoff (~1e-16) in the far field would otherwise grow like e^{a t} in
# regions where u is essentially zero; values below this fraction of a_sup/b_inf
# are set to zero after each step.  Absolute, so the step stays order preserving.
NOISE_CUTOFF = 1e-13


class StepError(RuntimeError):
    """Base class for failures inside a time step; ``t`` is the time of the failing step."""

    def __init__(self, msg, t=None):
        super().__init__(msg if t is None else f"{msg} (at t={t:.17g})")
        self.t = t


class PositivityLoss(StepError):
    pass


class BlowupDetected(StepError):
    pass


class InsufficientStates(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class State:
    t: float
    u: ScalarField
    v: ScalarField

    @classmethod
    def from_u(cls, t: float, u: ScalarField, params: Params) -> "State":
        return cls(float(t), u, elliptic.solve_helmholtz(u, params))


class CoefficientSampler:
    """Evaluates (a, b) on a grid, caching the arrays for autonomous coefficients."""

    def __init__(self, coeffs: CoefficientField, grid: Grid):
        self.coeffs = coeffs
        self.grid = grid
        self._cache = coeffs.on_grid(grid.coords, 0.0) if coeffs.autonomous else None

    def __call__(self, t: float):
        if self._cache is not None:
            return self._cache
        return self.coeffs.on_grid(self.grid.coords, t)


# ---------------------------------------------------------------------------
# sub-flows
# ---------------------------------------------------------------------------


def _minmod(a, b):
    return np.where(a * b > 0, np.sign(a) * np.minimum(np.abs(a), np.abs(b)), 0.0)


def transport_rate(u: np.ndarray, vh: np.ndarray, grid: Grid, chi: float) -> tuple[np.ndarray, float]:
    """-χ∇·(u∇v) by upwind MUSCL fluxes; also returns max face speed.

    ``vh`` is the rfftn transform of v.
    """
    h = grid.h
    out = np.zeros_like(u)
    vmax = 0.0
    for axis, dv in enumerate(elliptic.face_gradient_values(vh, grid)):
        w = chi * dv
        vmax = max(vmax, float(np.abs(w).max()))
        up = np.roll(u, -1, axis)
        slope = _minmod(u - np.roll(u, 1, axis), up - u)
        left = u + 0.5 * slope
        right = np.roll(u - 0.5 * slope, -1, axis)
        flux = np.maximum(w, 0.0) * left + np.minimum(w, 0.0) * right
        out -= (flux - np.roll(flux, 1, axis)) / h
    return out, vmax


def _transport_rhs(u, grid, params):
    sp = spectral(grid)
    vh = params.mu * sp.fwd(u) / (params.lam + sp.k2)
    return transport_rate(u, vh, grid, params.chi)


def transport_step(u: np.ndarray, tau: float, grid: Grid, params: Params) -> np.ndarray:
    """Advance u_t = -χ∇·(u∇v) by tau with SSP-RK2, sub-cycling to respect the CFL limit."""
    rate, vmax = _transport_rhs(u, grid, params)
    courant = tau * vmax * grid.dim / grid.h
    m = max(1, math.ceil(courant / SUBSTEP_COURANT - 1e-12))
    ts = tau / m
    for i in range(m):
        if i:
            rate, _ = _transport_rhs(u, grid, params)
        u1 = u + ts * rate
        rate1, _ = _transport_rhs(u1, grid, params)
        u = 0.5 * u + 0.5 * (u1 + ts * rate1)
    return u


def reaction_step(u: np.ndarray, a, b, dt: float) -> np.ndarray:
    """Exact solution of u' = u(a - bu) over dt for frozen a > 0, b."""
    e = np.exp(-a * dt)
    return u / (e + b * u * (-np.expm1(-a * dt)) / a)


def rhs(u: np.ndarray, t: float, grid: Grid, params: Params, sampler: CoefficientSampler) -> np.ndarray:
    """Semi-discrete right-hand side Δ_h u - χ∇·(u∇v) + u(a - bu) with the stepper's operators."""
    a, b = sampler(t)
    out = elliptic.fd_laplacian(u, grid) + u * (a - b * u)
    if params.chi > 0:
        out += _transport_rhs(u, grid, params)[0]
    return out


def max_speed(state: State, params: Params) -> float:
    """Largest chemotactic velocity χ|∂v/∂x_d| over nodes and axes."""
    if params.chi == 0:
        return 0.0
    grads = elliptic.gradient_values(state.v.values, state.u.grid)
    return params.chi * max(float(np.abs(g).max()) for g in grads)


def stable_dt(state: State, params: Params, dt_max: float = DEFAULT_DT_MAX) -> float:
    vmax = max_speed(state, params)
    if vmax == 0:
        return dt_max
    return min(dt_max, CFL_FACTOR * state.u.grid.h / (state.u.grid.dim * vmax))


def _blowup_cap(u0_norm, coeffs, params):
    if validate_coefficients(coeffs, params).holds_H1:
        return 10.0 * max(u0_norm, sup_bound(coeffs, params))
    return 1e8 * max(u0_norm, 1.0)


def step(state: State, dt: float, coeffs: CoefficientField, params: Params, *,
         sampler: CoefficientSampler | None = None, blowup_cap: float | None = None) -> State:
    """Advance ``state`` by dt and return the new state (with fresh v)."""
    grid = state.u.grid
    t = state.t
    if sampler is None:
        sampler = CoefficientSampler(coeffs, grid)
    if blowup_cap is None:
        blowup_cap = _blowup_cap(state.u.norm_inf(), coeffs, params)
    u = elliptic.heat_step(state.u.values, grid, 0.5 * dt)
    if params.chi > 0:
        u = transport_step(u, 0.5 * dt, grid, params)
    a, b = sampler(t + 0.5 * dt)
    u = reaction_step(u, a, b, dt)
    if params.chi > 0:
        u = transport_step(u, 0.5 * dt, grid, params)
    u = elliptic.heat_step(u, grid, 0.5 * dt)

    if not np.all(np.isfinite(u)):
        raise BlowupDetected("non-finite density", t + dt)
    umin = float(u.min())
    if umin < 0:
        if umin < -CLAMP_WARN:
            raise PositivityLoss(f"density dipped to {umin:.3e}", t + dt)
        if umin < -CLAMP_SILENT:
            log.warning("clamping negative undershoot %.3e at t=%.6g", umin, t + dt)
        u = np.maximum(u, 0.0)
    u = np.where(u < NOISE_CUTOFF * coeffs.a_sup / coeffs.b_inf, 0.0, u)
    umax = float(u.max())
    if umax > blowup_cap:
        raise BlowupDetected(f"sup norm {umax:.6g} exceeds cap {blowup_cap:.6g}", t + dt)
    ufield = ScalarField(u, grid)
    return State(t + dt, ufield, elliptic.solve_helmholtz(ufield, params))


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class Trajectory:
    states: list
    params: Params
    coeffs: CoefficientField
    dt_history: list = field(default_factory=list)
    min_u: list = field(default_factory=list)
    max_u: list = field(default_factory=list)
    step_times: list = field(default_factory=list)

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.states])

    @property
    def final(self) -> State:
        return self.states[-1]

    @property
    def grid(self) -> Grid:
        return self.states[0].u.grid

    def u_stack(self) -> np.ndarray:
        return np.stack([s.u.values for s in self.states])

    def sup_norms(self) -> np.ndarray:
        return np.array([s.u.norm_inf() for s in self.states])

    def inf_values(self) -> np.ndarray:
        return np.array([s.u.min() for s in self.states])

    def save(self, directory):
        save_trajectory(self, directory)


def integrate(u0: ScalarField, t0: float, horizon: float, coeffs: CoefficientField, params: Params,
              store_every: float | None = None, *, dt_max: float = DEFAULT_DT_MAX,
              max_retries: int = 5) -> Trajectory:
    """Integrate from (t0, u0) over [t0, t0 + horizon].

    Steps land exactly on the store times t0 + j*store_every and on the final time.
    The step size is the smaller of ``dt_max`` and the transport CFL bound; a step
    that loses positivity is retried with half the step, up to ``max_retries`` times.
    """
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    if u0.min() < 0:
        raise ValueError("initial density must be nonnegative")
    coeffs.check_box(params)
    if not validate_coefficients(coeffs, params).holds_H1:
        warnings.warn("b_inf <= chi*mu: global boundedness is not guaranteed", RuntimeWarning, stacklevel=2)
    state = State.from_u(t0, u0, params)
    traj = Trajectory([state], params, coeffs)
    _advance(traj, horizon, store_every, dt_max, max_retries)
    return traj


def continue_integration(traj: Trajectory, horizon: float, store_every: float | None = None, *,
                         dt_max: float = DEFAULT_DT_MAX, max_retries: int = 5) -> Trajectory:
    """Extend a (possibly reloaded) trajectory in place by ``horizon``."""
    _advance(traj, horizon, store_every, dt_max, max_retries)
    return traj


def _advance(traj, horizon, store_every, dt_max, max_retries):
    params, coeffs = traj.params, traj.coeffs
    state = traj.final
    grid = state.u.grid
    t0 = state.t
    t_end = t0 + horizon
    sampler = CoefficientSampler(coeffs, grid)
    cap = _blowup_cap(traj.states[0].u.norm_inf(), coeffs, params)
    if store_every is None or store_every <= 0:
        marks = [t_end]
    else:
        nmarks = max(1, int(math.floor(horizon / store_every + 1e-9)))
        marks = [t0 + j * store_every for j in range(1, nmarks + 1)]
        if t_end - marks[-1] > 1e-12 * max(1.0, abs(t_end)):
            marks.append(t_end)
        else:
            marks[-1] = t_end
    if horizon == 0:
        return traj
    for mark in marks:
        while mark - state.t > 1e-12 * max(1.0, abs(mark)):
            dt = stable_dt(state, params, dt_max)
            remaining = mark - state.t
            # avoid a sliver step just before the mark
            if dt >= remaining or remaining - dt < 1e-3 * dt:
                dt = remaining
                landing = True
            else:
                landing = False
            for attempt in range(max_retries + 1):
                try:
                    new = step(state, dt, coeffs, params, sampler=sampler, blowup_cap=cap)
                    break
                except PositivityLoss:
                    if attempt == max_retries:
                        raise
                    dt *= 0.5
                    landing = False
            if landing:
                new = State(mark, new.u, new.v)
            state = new
            traj.dt_history.append(dt)
            traj.step_times.append(state.t)
            traj.min_u.append(state.u.min())
            traj.max_u.append(state.u.max())
        traj.states.append(state)
    return traj


# ---------------------------------------------------------------------------
# mild (variation of constants) consistency check
# ---------------------------------------------------------------------------


def _phi12(z):
    z = np.asarray(z, dtype=float)
    small = np.abs(z) < 1e-3
    zs = np.where(small, 1.0, z)
    em1 = np.expm1(zs)
    phi1 = np.where(small, 1 + z / 2 + z * z / 6, em1 / zs)
    phi2 = np.where(small, 0.5 + z / 6 + z * z / 24, (em1 - zs) / zs ** 2)
    return phi1, phi2


def mild_residual(traj: Trajectory, sample_t: float, window: float = 1.0) -> float:
    """Sup-norm gap between both sides of the variation-of-constants formula.

    Over [t_i, t_j] (t_i the stored time nearest ``sample_t``, t_j the last stored
    time within ``window`` of it) compares u(t_j) with

        S(t_j - t_i) u(t_i) + ∫ S(t_j - s) [-χ∇·(u∇v) + (a + 1 - bu) u](s) ds,

    S the semigroup of Δ_h - 1.  The integrand is interpolated linearly between
    stored states and integrated exactly against S.
    """
    times = traj.times
    if times.size < 3:
        raise InsufficientStates("need at least three stored states")
    if sample_t < times[0] - 1e-12 or sample_t > times[-1] + 1e-12:
        raise ValueError(f"sample time {sample_t} outside the trajectory")
    i0 = int(np.argmin(np.abs(times - sample_t)))
    i1 = int(np.searchsorted(times, times[i0] + window + 1e-12, side="right") - 1)
    if i1 - i0 < 2:
        raise InsufficientStates(f"fewer than three stored states in [{times[i0]}, {times[i0] + window}]")
    params, coeffs = traj.params, traj.coeffs
    grid = traj.grid
    sp = spectral(grid)
    sym = sp.fd_symbol - 1.0
    sampler = CoefficientSampler(coeffs, grid)

    def integrand(state):
        u = state.u.values
        a, b = sampler(state.t)
        g = (a + 1.0 - b * u) * u
        if params.chi > 0:
            rate, _ = transport_rate(u, sp.fwd(state.v.values), grid, params.chi)
            g = g + rate
        return sp.fwd(g)

    t_end = times[i1]
    rhs = np.exp(sym * (t_end - times[i0])) * sp.fwd(traj.states[i0].u.values)
    g_prev = integrand(traj.states[i0])
    for k in range(i0, i1):
        g_next = integrand(traj.states[k + 1])
        delta = times[k + 1] - times[k]
        phi1, phi2 = _phi12(sym * delta)
        piece = delta * ((phi1 - phi2) * g_prev + phi2 * g_next)
        rhs = rhs + np.exp(sym * (t_end - times[k + 1])) * piece
        g_prev = g_next
    return float(np.abs(sp.inv(rhs) - traj.states[i1].u.values).max())


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_trajectory(traj: Trajectory, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = []
    for i, s in enumerate(traj.states):
        name = f"u_{i:06d}.bin"
        write_field(d / name, s.u)
        files.append(name)
    manifest = {
        "kind": "trajectory",
        "model": model_to_config(traj.params, traj.coeffs),
        "times": [float(t) for t in traj.times],
        "fields": files,
        "dt_history": [float(x) for x in traj.dt_history],
        "step_times": [float(x) for x in traj.step_times],
        "min_u": [float(x) for x in traj.min_u],
        "max_u": [float(x) for x in traj.max_u],
    }
    (d / "trajectory.json").write_text(json.dumps(manifest, indent=1))


def load_trajectory(directory) -> Trajectory:
    d = Path(directory)
    manifest = json.loads((d / "trajectory.json").read_text())
    params, coeffs = model_from_config(manifest["model"])
    states = [State.from_u(t, read_field(d / f), params) for t, f in zip(manifest["times"], manifest["fields"])]
    return Trajectory(states, params, coeffs, list(manifest["dt_history"]), list(manifest["min_u"]),
                      list(manifest["max_u"]), list(manifest["step_times"]))
