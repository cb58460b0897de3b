"""Measured side: ratio dynamics, decay rates, contraction factors, fronts, χ-perturbation."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .entire import EntireSolution, construct_entire_solution
from .evolve import StepError, Trajectory, integrate
from .fields import ScalarField
from .model import CoefficientField, HypothesisError, Params, attraction_rectangle, validate_coefficients
from .oracles import contraction_closed_form, perturbation_bound, perturbation_K

log = logging.getLogger(__name__)

NOISE_FLOOR = 1e-12


class BoxTooSmall(RuntimeError):
    pass


class NoFront(RuntimeError):
    pass


@dataclass
class DecayFit:
    alpha: float
    M: float
    residual: float
    status: str  # "ok" or "NoDecay"
    n_points: int = 0


@dataclass
class StaircaseLevel:
    n: int
    bound: float
    status: str  # "pass" or "Indeterminate"
    first_time: float | None


@dataclass
class StabilityReport:
    times: np.ndarray
    series: np.ndarray
    v_series: np.ndarray
    fit: DecayFit | None = None
    rho: float | None = None
    C0: float | None = None
    C0_err: float | None = None
    C1: float | None = None
    staircase: list = field(default_factory=list)

    @property
    def alpha_hat(self):
        return None if self.fit is None else self.fit.alpha


@dataclass
class PerturbationReport:
    chi: list
    gaps: list
    ratios: list
    entire_gaps: list
    bounds: list
    K: float
    errors: dict = field(default_factory=dict)

    @property
    def ratio_spread(self) -> float:
        """max/min - 1 over the finite gap/χ ratios."""
        r = [x for x in self.ratios if x is not None and math.isfinite(x)]
        return max(r) / min(r) - 1.0 if r and min(r) > 0 else math.inf

    @property
    def bound_holds(self) -> list:
        return [g is not None and g <= b for g, b in zip(self.entire_gaps, self.bounds)]


# ---------------------------------------------------------------------------
# ratio dynamics and decay
# ---------------------------------------------------------------------------


def ratio_series(traj: Trajectory, sol: EntireSolution) -> StabilityReport:
    """‖u/u⁺ - 1‖ and ‖v/v⁺ - 1‖ at every stored time of the trajectory."""
    if traj.grid != sol.grid:
        raise ValueError(f"grid mismatch: trajectory {traj.grid} vs entire solution {sol.grid}")
    times, us, vs = [], [], []
    for s in traj.states:
        ref = sol.at(s.t)
        times.append(s.t)
        us.append(float(np.abs(s.u.values / ref.u.values - 1.0).max()))
        vs.append(float(np.abs(s.v.values / ref.v.values - 1.0).max()))
    return StabilityReport(np.array(times), np.array(us), np.array(vs))


def fit_decay_rate(series, times=None, floor: float = NOISE_FLOOR) -> DecayFit:
    """Fit series ≈ M e^{-alpha t} by least squares on log values over the tail half.

    Values at or below ``floor`` are roundoff and are dropped.  A tail that is not
    decaying gives status "NoDecay".
    """
    y = np.asarray(series, dtype=float)
    t = np.arange(y.size, dtype=float) if times is None else np.asarray(times, dtype=float)
    if y.shape != t.shape:
        raise ValueError("series and times differ in length")
    tail = slice(y.size // 2, None)
    ty, yy = t[tail], y[tail]
    keep = yy > floor
    ty, yy = ty[keep], yy[keep]
    if ty.size < 3:
        return DecayFit(math.nan, math.nan, math.nan, "NoDecay", int(ty.size))
    A = np.vstack([np.ones_like(ty), ty]).T
    coef, *_ = np.linalg.lstsq(A, np.log(yy), rcond=None)
    resid = float(np.sqrt(np.mean((A @ coef - np.log(yy)) ** 2)))
    alpha, M = -float(coef[1]), float(np.exp(coef[0]))
    scale = max(1.0, float(np.abs(np.log(yy)).max()))
    status = "ok" if alpha * (ty[-1] - ty[0]) > 1e-9 * scale else "NoDecay"
    return DecayFit(alpha, M, resid, status, int(ty.size))


# ---------------------------------------------------------------------------
# contraction factor and χ0
# ---------------------------------------------------------------------------


def contraction_details(sol: EntireSolution, params: Params, coeffs: CoefficientField) -> dict:
    if params.chi == 0:
        return {"rho": 0.0, "C0": 0.0, "C0_err": 0.0, "C1": 1.0, "homogeneous": sol.is_space_homogeneous()}
    homogeneous = sol.is_space_homogeneous()
    g = sol.gradient_stats()
    C0 = 0.0 if homogeneous else g["C0"]
    rho, C1 = contraction_closed_form(params, coeffs, C0, sol.u_inf, sol.u_sup, homogeneous)
    return {"rho": rho, "C0": C0, "C0_err": 0.0 if homogeneous else g["C0_err"], "C1": C1,
            "homogeneous": homogeneous}


def contraction_factor(sol: EntireSolution, params: Params, coeffs: CoefficientField) -> float:
    """ρ = χμ C1 u⁺_sup / ((b_inf - χμ) u⁺_inf), C1 = 1 + C0 √N / (u⁺_inf √λ).

    Space-homogeneous u⁺ gives χμ / (b_inf - χμ).
    """
    return contraction_details(sol, params, coeffs)["rho"]


@dataclass
class Chi0Result:
    chi0: float
    bracket: tuple
    rho: dict  # grid χ -> ρ


def chi0_surrogate(coeffs: CoefficientField, params: Params, chi_grid, *, tol: float | None = None,
                   builder=construct_entire_solution, max_bisect: int = 40) -> Chi0Result | None:
    """Upper end of the range of χ over which ρ < 1, located on a grid and refined by bisection.

    Returns None when ρ >= 1 already at the smallest grid point.  The reported
    value is the smallest χ found with ρ >= 1 (within ``tol`` of the last
    passing one), i.e. an upper estimate of the supremum.
    """
    grid = sorted(float(c) for c in chi_grid)
    cap = coeffs.b_inf / params.mu
    bad = [c for c in grid if not 0 < c < cap]
    if bad:
        raise ValueError(f"chi values {bad} outside (0, b_inf/mu = {cap})")
    if tol is None:
        tol = (min(np.diff(grid)) if len(grid) > 1 else grid[0]) / 64.0

    cache = {}

    def rho_at(chi):
        if chi not in cache:
            p = params.with_chi(chi)
            cache[chi] = contraction_factor(builder(coeffs, p), p, coeffs)
        return cache[chi]

    lo = None
    hi = None
    for c in grid:
        if rho_at(c) < 1:
            lo = c
        else:
            hi = c
            break
    if lo is None:
        return None
    if hi is None:
        return Chi0Result(lo, (lo, None), {c: cache[c] for c in grid if c in cache})
    rho_grid = {c: cache[c] for c in grid if c in cache}
    for _ in range(max_bisect):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        if rho_at(mid) < 1:
            lo = mid
        else:
            hi = mid
    return Chi0Result(hi, (lo, hi), rho_grid)


# ---------------------------------------------------------------------------
# staircase
# ---------------------------------------------------------------------------


def staircase_check(traj: Trajectory, sol: EntireSolution, params: Params, coeffs: CoefficientField,
                    n_max: int = 3, eps: float | None = None) -> list[StaircaseLevel]:
    """First times after which ‖U - 1‖ stays below each level of the geometric staircase.

    Level n: ρⁿ a_sup / ((b_inf - χμ) u⁺_sup) + ε, with u⁺_inf in place of u⁺_sup
    for space-homogeneous u⁺; ε defaults to 0.01 a_sup / (b_inf - χμ).  A level
    not reached (and held) by the end of the run is "Indeterminate".
    """
    det = contraction_details(sol, params, coeffs)
    rho = det["rho"]
    if not rho < 1:
        raise HypothesisError(f"staircase needs a contraction factor below 1 (rho = {rho:.6g})")
    gap = coeffs.b_inf - params.chi_mu
    if eps is None:
        eps = 0.01 * coeffs.a_sup / gap
    denom_u = sol.u_inf if det["homogeneous"] else sol.u_sup
    base = coeffs.a_sup / (gap * denom_u)
    rep = ratio_series(traj, sol)
    out = []
    for n in range(1, n_max + 1):
        bound = rho ** n * base + eps
        above = np.nonzero(rep.series > bound)[0]
        if above.size == 0:
            out.append(StaircaseLevel(n, bound, "pass", float(rep.times[0])))
        elif above[-1] == rep.series.size - 1:
            out.append(StaircaseLevel(n, bound, "Indeterminate", None))
        else:
            out.append(StaircaseLevel(n, bound, "pass", float(rep.times[above[-1] + 1])))
    return out


def stability_report(traj: Trajectory, sol: EntireSolution, n_max: int = 3) -> StabilityReport:
    rep = ratio_series(traj, sol)
    rep.fit = fit_decay_rate(rep.series, rep.times)
    det = contraction_details(sol, traj.params, traj.coeffs)
    rep.rho, rep.C0, rep.C0_err, rep.C1 = det["rho"], det["C0"], det["C0_err"], det["C1"]
    if rep.rho < 1:
        rep.staircase = staircase_check(traj, sol, traj.params, traj.coeffs, n_max)
    return rep


# ---------------------------------------------------------------------------
# fronts
# ---------------------------------------------------------------------------


def default_threshold(coeffs: CoefficientField, params: Params) -> float:
    if validate_coefficients(coeffs, params).holds_H2:
        return 0.5 * attraction_rectangle(coeffs, params)[0]
    return coeffs.a_inf / (4.0 * coeffs.b_sup)


def front_positions(x: np.ndarray, profiles: np.ndarray, threshold: float, min_cells: int = 10) -> np.ndarray:
    """Rightmost crossing of ``threshold`` in each row of ``profiles`` (linear interpolation)."""
    n = x.size
    pos = np.empty(len(profiles))
    for j, u in enumerate(profiles):
        above = np.nonzero(u >= threshold)[0]
        if above.size == 0:
            raise NoFront(f"profile {j} never reaches threshold {threshold:.6g}")
        i = int(above[-1])
        if n - 1 - i < min_cells:
            raise BoxTooSmall(f"front within {n - 1 - i} cells of the boundary in profile {j}")
        w = (u[i] - threshold) / (u[i] - u[i + 1])
        pos[j] = x[i] + w * (x[i + 1] - x[i])
    return pos


@dataclass
class FrontSpeed:
    speed: float
    times: np.ndarray
    positions: np.ndarray
    fit_residual: float
    threshold: float


def front_speed(traj: Trajectory, threshold: float | None = None, min_cells: int = 10) -> FrontSpeed:
    """Speed of the rightward front from a linear fit over the last third of stored times.

    In two dimensions the profile along the first axis through the box centre is used.
    """
    if threshold is None:
        threshold = default_threshold(traj.coeffs, traj.params)
    grid = traj.grid
    profiles = traj.u_stack()
    if grid.dim == 2:
        profiles = profiles[:, :, grid.n // 2]
    return front_speed_from_profiles(traj.times, grid.axis, profiles, threshold, min_cells)


def front_speed_from_profiles(times, x, profiles, threshold, min_cells: int = 10) -> FrontSpeed:
    times = np.asarray(times, dtype=float)
    pos = front_positions(np.asarray(x), np.asarray(profiles), threshold, min_cells)
    start = (2 * times.size) // 3
    tt, pp = times[start:], pos[start:]
    if tt.size < 2:
        raise ValueError("need at least two stored times in the last third of the run")
    coef = np.polyfit(tt, pp, 1)
    resid = float(np.sqrt(np.mean((np.polyval(coef, tt) - pp) ** 2)))
    return FrontSpeed(float(coef[0]), times, pos, resid, float(threshold))


# ---------------------------------------------------------------------------
# attraction rectangle
# ---------------------------------------------------------------------------


def rectangle_check(traj: Trajectory, burn_in: float, tol: float = 0.02) -> dict:
    """Range of u after ``burn_in`` against [M_lower - tol, M_upper + tol]."""
    m_lo, m_hi = attraction_rectangle(traj.coeffs, traj.params)
    late = [s for s in traj.states if s.t >= traj.states[0].t + burn_in]
    if not late:
        raise ValueError("no stored states after the burn-in time")
    u_min = min(s.u.min() for s in late)
    u_max = max(s.u.max() for s in late)
    return {"M_lower": m_lo, "M_upper": m_hi, "u_min": u_min, "u_max": u_max, "tol": tol,
            "passed": bool(u_min >= m_lo - tol and u_max <= m_hi + tol)}


# ---------------------------------------------------------------------------
# χ perturbation
# ---------------------------------------------------------------------------


def _pert_task(args):
    u0, chi, horizon, coeffs, params, store_every, dt_max, entire_kw = args
    p = params.with_chi(chi)
    try:
        traj = integrate(u0, 0.0, horizon, coeffs, p, store_every, dt_max=dt_max)
        sol = construct_entire_solution(coeffs, p, **entire_kw)
    except (StepError, RuntimeError, ValueError) as exc:
        return chi, None, None, f"{type(exc).__name__}: {exc}"
    return chi, traj.u_stack(), sol, None


def _entire_gap(sol, ref, t_probe):
    return max(float(np.abs(sol.at(t).u.values - ref.at(t).u.values).max()) for t in t_probe)


def perturbation_study(u0: ScalarField, chi_list, horizon: float, coeffs: CoefficientField, params: Params, *,
                       store_every: float = 0.1, dt_max: float = 0.02, workers: int = 1,
                       entire_kw: dict | None = None) -> PerturbationReport:
    """Gaps between χ > 0 runs and the χ = 0 run, and between the entire solutions.

    Runs are independent and may go to a process pool; results are collected in
    the order of ``chi_list`` whatever the worker count.
    """
    chis = [float(c) for c in chi_list]
    cap = coeffs.b_inf / params.mu
    if any(not 0 < c < cap for c in chis):
        raise ValueError(f"chi values must lie in (0, {cap})")
    if not u0.min() > 0:
        raise ValueError("initial density must be strictly positive")
    entire_kw = dict(entire_kw or {})
    tasks = [(u0, c, horizon, coeffs, params, store_every, dt_max, entire_kw) for c in [0.0] + chis]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_pert_task, tasks))
    else:
        results = [_pert_task(t) for t in tasks]
    _, ref_u, ref_sol, err = results[0]
    if err is not None:
        raise RuntimeError(f"chi = 0 reference run failed: {err}")
    gstats = ref_sol.gradient_stats()
    K = perturbation_K(params, gstats["grad_log_sup"])
    if ref_sol.kind == "steady":
        t_probe = [0.0]
    else:
        t_probe = list(ref_sol.times)
    gaps, ratios, egaps, bounds, errors = [], [], [], [], {}
    for chi, u_stack, sol, err in results[1:]:
        p = params.with_chi(chi)
        bounds.append(perturbation_bound(chi, p, coeffs, ref_sol.u_inf, ref_sol.u_sup, K))
        if err is not None:
            errors[chi] = err
            gaps.append(None)
            ratios.append(None)
            egaps.append(None)
            continue
        gap = float(np.abs(u_stack - ref_u).max())
        gaps.append(gap)
        ratios.append(gap / chi)
        egaps.append(_entire_gap(sol, ref_sol, t_probe))
    return PerturbationReport(chis, gaps, ratios, egaps, bounds, K, errors)
