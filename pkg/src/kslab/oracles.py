"""Closed-form bounds: comparison ODEs, persistence estimates, spreading speeds."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from .model import CoefficientField, HypothesisError, Params, validate_coefficients


@dataclass
class BoundCheck:
    name: str
    value: float
    lower: float | None
    upper: float | None

    @property
    def margin(self) -> float:
        """Distance to the nearest violated/limiting edge; negative means violated."""
        m = math.inf
        if self.lower is not None:
            m = min(m, self.value - self.lower)
        if self.upper is not None:
            m = min(m, self.upper - self.value)
        return m

    @property
    def passed(self) -> bool:
        return self.margin >= 0


@dataclass
class BoundsReport:
    """Predicted envelopes (sampled in time) and/or pass-fail bound checks."""

    provenance: str
    times: np.ndarray | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    lower_limit: float | None = None
    upper_limit: float | None = None
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def rows(self):
        return [{"check": c.name, "value": c.value, "lower": c.lower, "upper": c.upper,
                 "margin": c.margin, "passed": c.passed} for c in self.checks]


@dataclass
class SpreadingReport:
    c_minus_star: float | None
    c_plus_star: float
    h3_slack: float
    measured_speed: float | None = None

    @property
    def h3_holds(self) -> bool:
        return self.h3_slack > 0


# ---------------------------------------------------------------------------
# scalar logistic equations
# ---------------------------------------------------------------------------


def _growth_factor(alpha, t):
    """(1 - e^{-alpha t}) / alpha, continuous at alpha = 0."""
    if alpha == 0:
        return t
    return -np.expm1(-alpha * t) / alpha


def logistic_closed_form(u0: float, alpha: float, beta: float, t):
    """Solution of u' = u(alpha - beta u), u(0) = u0, at times t >= 0."""
    t = np.asarray(t, dtype=float)
    return u0 / (np.exp(-alpha * t) + beta * u0 * _growth_factor(alpha, t))


def logistic_ode(u0: float, a_fn, b_fn, t_eval, t0: float = 0.0, rtol: float = 1e-11):
    """Integrate u' = u(a(t) - b(t)u) with DOP853 (time-dependent coefficients)."""
    t_eval = np.asarray(t_eval, dtype=float)
    sol = integrate.solve_ivp(lambda t, u: u * (a_fn(t) - b_fn(t) * u), (t0, float(t_eval[-1])), [u0],
                              method="DOP853", t_eval=t_eval, rtol=rtol, atol=1e-14)
    if not sol.success:
        raise RuntimeError(sol.message)
    return sol.y[0]


def periodic_logistic_orbit(a_fn, b_fn, T: float, t=0.0) -> float:
    """Value at time t of the positive T-periodic solution of u' = u(a(t) - b(t)u).

    With w = 1/u the equation is linear, w' = -a w + b, whose periodic solution is
    w(t) = ∫_{t-T}^{t} e^{-∫_s^t a} b(s) ds / (1 - e^{-∫_0^T a}).
    Requires ∫_0^T a > 0.
    """
    A = lambda s0, s1: integrate.quad(a_fn, s0, s1, epsabs=1e-14, epsrel=1e-13, limit=200)[0]
    total = A(0.0, T)
    if not total > 0:
        raise ValueError("mean growth rate over a period must be positive")
    num = integrate.quad(lambda s: math.exp(-A(s, t)) * b_fn(s), t - T, t, epsabs=1e-14, epsrel=1e-13,
                         limit=200)[0]
    return (1.0 - math.exp(-total)) / num


def comparison_envelopes(u_inf0: float, u_sup0: float, uplus_inf: float, uplus_sup: float,
                         coeffs: CoefficientField, params: Params, horizon: float,
                         n_samples: int = 201) -> BoundsReport:
    """Sub/super logistic envelopes driven by an entire solution's range [u⁺_inf, u⁺_sup].

    lower:  u' = u(a_inf - χμ u⁺_sup - (b_sup - χμ) u)
    upper:  u' = u(a_sup - χμ u⁺_inf - (b_inf - χμ) u)
    The coefficients are constants, so both are solved in closed form.
    """
    cm = params.chi_mu
    if not coeffs.b_sup > cm:
        raise HypothesisError("comparison envelopes need b_sup > chi*mu")
    if not validate_coefficients(coeffs, params).holds_H1:
        raise HypothesisError("comparison envelopes need b_inf > chi*mu")
    if min(u_inf0, u_sup0, uplus_inf, uplus_sup) <= 0 or horizon < 0:
        raise ValueError("inputs must be positive")
    if u_inf0 > u_sup0 or uplus_inf > uplus_sup:
        raise ValueError("inf values must not exceed sup values")
    al, bl = coeffs.a_inf - cm * uplus_sup, coeffs.b_sup - cm
    au, bu = coeffs.a_sup - cm * uplus_inf, coeffs.b_inf - cm
    t = np.linspace(0.0, horizon, n_samples)
    return BoundsReport(
        provenance="comparison logistic envelopes",
        times=t,
        lower=logistic_closed_form(u_inf0, al, bl, t),
        upper=logistic_closed_form(u_sup0, au, bu, t),
        lower_limit=max(al, 0.0) / bl,
        upper_limit=max(au, 0.0) / bu,
    )


# ---------------------------------------------------------------------------
# persistence estimates
# ---------------------------------------------------------------------------


def lemma_threshold(T: float, coeffs: CoefficientField) -> float:
    """M_T = a_inf e^{-a_sup T} / b_sup."""
    if T < 0:
        raise ValueError("T must be nonnegative")
    return coeffs.a_inf * math.exp(-coeffs.a_sup * T) / coeffs.b_sup


def pointwise_lower_bound(u0_inf: float, u0_sup: float, T: float, t: float, coeffs: CoefficientField) -> float:
    """u0_inf exp(t (a_inf - b_sup ‖u0‖ e^{T a_sup})), valid on 0 <= t <= T."""
    if t < 0 or t > T:
        raise ValueError(f"need 0 <= t <= T (t={t}, T={T})")
    rate = coeffs.a_inf - coeffs.b_sup * u0_sup * math.exp(T * coeffs.a_sup)
    return u0_inf * math.exp(t * rate)


def dirichlet_principal_eigenvalue(L: float, a0: float, N: int) -> float:
    """First eigenvalue of -Δ - a0 on (-L, L)^N with zero boundary values."""
    if not L > 0:
        raise ValueError("L must be positive")
    return N * (math.pi / (2.0 * L)) ** 2 - a0


def dirichlet_threshold(a0: float, N: int) -> float:
    """Half-width L0 beyond which the principal eigenvalue is negative."""
    if not a0 > 0:
        raise ValueError("a0 must be positive")
    return 0.5 * math.pi * math.sqrt(N / a0)


def spreading_speeds(coeffs: CoefficientField, params: Params) -> SpreadingReport:
    rep = validate_coefficients(coeffs, params)
    if not rep.holds_H1:
        raise HypothesisError("spreading speeds need b_inf > chi*mu")
    cm = params.chi_mu
    a_inf, a_sup = coeffs.a_inf, coeffs.a_sup
    gap = coeffs.b_inf - cm
    drift = cm * math.sqrt(params.dim) * a_sup / (2.0 * gap * math.sqrt(params.lam))
    c_plus = 2.0 * math.sqrt(a_sup) + drift
    c_minus = None
    if rep.holds_H3:
        c_minus = 2.0 * math.sqrt(a_inf - cm * a_sup / gap) - drift
    return SpreadingReport(c_minus, c_plus, rep.slack_H3)


def remark12_bound(m_u0: float, coeffs: CoefficientField, params: Params) -> float:
    """(a_sup - χμ m) / (b_inf - χμ): refined sup bound given a persistence level m."""
    if m_u0 < 0:
        raise ValueError("m must be nonnegative")
    gap = coeffs.b_inf - params.chi_mu
    if not gap > 0:
        raise HypothesisError("b_inf - chi*mu must be positive")
    return (coeffs.a_sup - params.chi_mu * m_u0) / gap


def perturbation_bound(chi: float, params: Params, coeffs: CoefficientField, u0_inf: float, u0_sup: float,
                       K: float) -> float:
    """Bound on sup |u⁺_χ - u⁺_0| in terms of the χ=0 entire solution's range and K."""
    cm = chi * params.mu
    gap = coeffs.b_inf - cm
    if not gap > 0:
        raise HypothesisError("b_inf - chi*mu must be positive")
    return cm * coeffs.a_sup * u0_sup * K / (gap * coeffs.b_inf * u0_inf)


def perturbation_K(params: Params, grad_log_sup: float) -> float:
    return 2.0 + math.sqrt(params.dim) / math.sqrt(params.lam) * grad_log_sup


def contraction_closed_form(params: Params, coeffs: CoefficientField, C0: float, uplus_inf: float,
                            uplus_sup: float, homogeneous: bool = False) -> tuple[float, float]:
    """(ρ, C1) for given entire-solution statistics."""
    cm = params.chi_mu
    gap = coeffs.b_inf - cm
    if not gap > 0:
        raise HypothesisError("b_inf - chi*mu must be positive")
    if homogeneous:
        return cm / gap, 1.0
    C1 = 1.0 + C0 * math.sqrt(params.dim) / (uplus_inf * math.sqrt(params.lam))
    return cm * C1 * uplus_sup / (gap * uplus_inf), C1
