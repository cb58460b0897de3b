"""Model constants, logistic coefficients and the closed-form quantities built from them.

The system being simulated is

    u_t = Δu - χ ∇·(u ∇v) + u (a(x,t) - b(x,t) u)
    0   = Δv - λ v + μ u

on the periodic box [-L, L)^N.  Everything in this module is cheap and exact:
coefficient envelopes, the hypotheses on (χ, μ, a, b), the attraction rectangle
and the asymptotic sup bound.
"""

from __future__ import annotations

import math
from fractions import Fraction
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np
from scipy import optimize

COEFFICIENT_KINDS = ("constant", "separable-periodic", "tabulated")

# relative widening applied to sampled (non-analytic) envelopes
ENVELOPE_MARGIN = 1e-9


class HypothesisError(ValueError):
    """Raised when coefficients or constants violate a required hypothesis."""


@dataclass(frozen=True)
class Params:
    """Model constants and the discretisation of the periodic box."""

    chi: float
    lam: float
    mu: float
    dim: int = 1
    box_half_length: float = math.pi
    grid_points: int = 128

    def __post_init__(self):
        problems = []
        if not self.chi >= 0:
            problems.append(f"chi must be >= 0 (got {self.chi})")
        if not self.lam > 0:
            problems.append(f"lambda must be > 0 (got {self.lam})")
        if not self.mu > 0:
            problems.append(f"mu must be > 0 (got {self.mu})")
        if self.dim not in (1, 2):
            problems.append(f"dim must be 1 or 2 (got {self.dim})")
        if not self.box_half_length > 0:
            problems.append(f"box half-length must be > 0 (got {self.box_half_length})")
        n = self.grid_points
        if int(n) != n or n < 16 or n % 2:
            problems.append(f"grid_points must be an even integer >= 16 (got {n})")
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def chi_mu(self) -> float:
        return self.chi * self.mu

    @property
    def spacing(self) -> float:
        return 2.0 * self.box_half_length / self.grid_points

    def with_chi(self, chi: float) -> "Params":
        return replace(self, chi=float(chi))

    def with_grid(self, grid_points: int) -> "Params":
        return replace(self, grid_points=int(grid_points))


# ---------------------------------------------------------------------------
# single coefficient functions
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Coefficient:
    """One logistic coefficient (a or b) as a function of (x, t).

    ``params`` depends on ``kind``:

    constant
        ``{"value": c}``
    separable-periodic
        ``{"mean": m, "space": [{"amp", "k", "phase"}...], "time": [{"amp", "omega", "phase"}...]}``
        evaluating to ``m + Σ amp cos(k·x + phase) + Σ amp sin(omega t + phase)``
    tabulated
        ``{"x": [nodes per axis] | None, "t": nodes | None, "values": array}``
        with ``values`` shaped ``(len(t),) + spatial shape`` (t axis omitted when
        ``t`` is None).  Multilinear interpolation, periodic in x over the node span.
    """

    kind: str
    params: dict
    inf: float = field(init=False)
    sup: float = field(init=False)
    exact_envelope: bool = field(init=False)

    def __post_init__(self):
        if self.kind not in COEFFICIENT_KINDS:
            raise ValueError(f"unknown coefficient kind {self.kind!r}; expected one of {COEFFICIENT_KINDS}")
        getattr(self, "_init_" + self.kind.replace("-", "_"))()

    # -- construction helpers -------------------------------------------------
    def _set(self, name, value):
        object.__setattr__(self, name, value)

    def _init_constant(self):
        c = float(self.params["value"])
        self._set("inf", c)
        self._set("sup", c)
        self._set("exact_envelope", True)

    def _init_separable_periodic(self):
        p = self.params
        mean = float(p.get("mean", 0.0))
        space = [dict(amp=float(s["amp"]), k=[float(v) for v in np.atleast_1d(s["k"])],
                      phase=float(s.get("phase", 0.0))) for s in p.get("space", [])]
        time = [dict(amp=float(s["amp"]), omega=float(s["omega"]), phase=float(s.get("phase", 0.0)))
                for s in p.get("time", [])]
        self._set("_mean", mean)
        self._set("_space", space)
        self._set("_time", time)
        dims = {len(s["k"]) for s in space}
        if len(dims) > 1:
            raise ValueError("spatial terms mix wave-vector lengths")
        self._set("_space_dim", dims.pop() if dims else None)
        if len(space) <= 1 and len(time) <= 1:
            # one term per independent variable: extremes of each term are attained
            spread = sum(abs(s["amp"]) for s in space) + sum(abs(s["amp"]) for s in time)
            lo, hi = mean - spread, mean + spread
            exact = True
        else:
            s_lo, s_hi = _sample_space_extrema(space)
            t_lo, t_hi = _sample_time_extrema(time)
            lo, hi = mean + s_lo + t_lo, mean + s_hi + t_hi
            lo -= ENVELOPE_MARGIN * abs(lo)
            hi += ENVELOPE_MARGIN * abs(hi)
            exact = False
        self._set("inf", float(lo))
        self._set("sup", float(hi))
        self._set("exact_envelope", exact)

    def _init_tabulated(self):
        p = self.params
        values = np.asarray(p["values"], dtype=float)
        t_nodes = None if p.get("t") is None else np.asarray(p["t"], dtype=float)
        x_nodes = None if p.get("x") is None else [np.asarray(ax, dtype=float) for ax in p["x"]]
        expected = ()
        if t_nodes is not None:
            if t_nodes.ndim != 1 or t_nodes.size < 2 or np.any(np.diff(t_nodes) <= 0):
                raise ValueError("tabulated t nodes must be strictly increasing with >= 2 entries")
            expected += (t_nodes.size,)
        if x_nodes is not None:
            for ax in x_nodes:
                if ax.ndim != 1 or ax.size < 2 or np.any(np.diff(ax) <= 0):
                    raise ValueError("tabulated x nodes must be strictly increasing with >= 2 entries")
            expected += tuple(ax.size for ax in x_nodes)
        if values.shape != expected:
            raise ValueError(f"tabulated values have shape {values.shape}, expected {expected}")
        if not np.all(np.isfinite(values)):
            raise HypothesisError("tabulated coefficient has non-finite entries")
        self._set("_values", values)
        self._set("_t", t_nodes)
        self._set("_x", x_nodes)
        # multilinear interpolation attains its extremes at the nodes
        self._set("inf", float(values.min()))
        self._set("sup", float(values.max()))
        self._set("exact_envelope", True)

    # -- properties -----------------------------------------------------------
    @property
    def time_dependent(self) -> bool:
        if self.kind == "separable-periodic":
            return bool(self._time)
        if self.kind == "tabulated":
            return self._t is not None
        return False

    @property
    def space_dependent(self) -> bool:
        if self.kind == "separable-periodic":
            return bool(self._space)
        if self.kind == "tabulated":
            return self._x is not None
        return False

    def check_period(self, period: float) -> bool:
        """True when the coefficient is ``period``-periodic in time."""
        if not self.time_dependent:
            return True
        if self.kind == "separable-periodic":
            for term in self._time:
                cycles = term["omega"] * period / (2 * math.pi)
                if abs(cycles - round(cycles)) > 1e-9 * max(1.0, abs(cycles)) or round(cycles) == 0:
                    return False
            return True
        span = self._t[-1] - self._t[0]
        return abs(span - period) <= 1e-12 * period

    def check_box(self, dim: int, box_half_length: float):
        """Reject spatial structure that is not periodic on the box."""
        L = box_half_length
        if self.kind == "separable-periodic":
            if self._space_dim is not None and self._space_dim != dim:
                raise ValueError(f"spatial terms are {self._space_dim}-dimensional, box is {dim}-dimensional")
            for term in self._space:
                for k in term["k"]:
                    m = k * L / math.pi
                    if abs(m - round(m)) > 1e-8 * max(1.0, abs(m)):
                        raise ValueError(f"wavenumber {k} is not periodic on the box [-{L}, {L})")
        elif self.kind == "tabulated" and self._x is not None:
            if len(self._x) != dim:
                raise ValueError(f"tabulated table is {len(self._x)}-dimensional, box is {dim}-dimensional")
            for ax in self._x:
                if abs((ax[-1] - ax[0]) - 2 * L) > 1e-9 * L:
                    raise ValueError("tabulated x nodes must span the full box [-L, L]")

    # -- evaluation -----------------------------------------------------------
    def evaluate(self, coords: Sequence[np.ndarray], t: float, period: float | None = None):
        """Evaluate on broadcastable coordinate arrays ``coords`` (one per axis) at time t."""
        shape = np.broadcast_shapes(*[np.shape(c) for c in coords]) if coords else ()
        if self.kind == "constant":
            return np.full(shape, self.inf)
        if self.kind == "separable-periodic":
            out = np.full(shape, self._mean)
            for term in self._space:
                phase = term["phase"] + sum(k * c for k, c in zip(term["k"], coords))
                out = out + term["amp"] * np.cos(phase)
            for term in self._time:
                out = out + term["amp"] * math.sin(term["omega"] * t + term["phase"])
            return out
        return self._eval_table(coords, t, period, shape)

    def _eval_table(self, coords, t, period, shape):
        table = self._values
        if self._t is not None:
            t0, t1 = self._t[0], self._t[-1]
            tt = t
            if period is not None:
                tt = t0 + (t - t0) % (t1 - t0)
            elif tt < t0 - 1e-12 or tt > t1 + 1e-12:
                raise ValueError(f"time {t} outside the tabulated range [{t0}, {t1}]")
            tt = min(max(tt, t0), t1)
            j = int(np.clip(np.searchsorted(self._t, tt, side="right") - 1, 0, self._t.size - 2))
            w = (tt - self._t[j]) / (self._t[j + 1] - self._t[j])
            table = (1 - w) * table[j] + w * table[j + 1]
        if self._x is None:
            return np.full(shape, float(table))
        pts = []
        for ax, c in zip(self._x, coords):
            span = ax[-1] - ax[0]
            pts.append(ax[0] + np.mod(np.broadcast_to(c, shape) - ax[0], span))
        return _multilinear(self._x, table, pts)

    def to_config(self) -> dict:
        return {"kind": self.kind, "params": _jsonable(self.params)}


def _multilinear(axes, table, pts):
    """Multilinear interpolation of ``table`` on tensor nodes ``axes`` at points ``pts``."""
    out = 0.0
    idx, wts = [], []
    for ax, p in zip(axes, pts):
        j = np.clip(np.searchsorted(ax, p, side="right") - 1, 0, ax.size - 2)
        w = (p - ax[j]) / (ax[j + 1] - ax[j])
        idx.append(j)
        wts.append(w)
    dim = len(axes)
    for corner in range(2 ** dim):
        weight = 1.0
        sel = []
        for d in range(dim):
            bit = (corner >> d) & 1
            sel.append(idx[d] + bit)
            weight = weight * (wts[d] if bit else 1 - wts[d])
        out = out + weight * table[tuple(sel)]
    return out


def _common_period(freqs, max_den=64):
    """Smallest common period of cosines with angular frequencies ``freqs``, or None."""
    freqs = [abs(f) for f in freqs if f != 0]
    if not freqs:
        return None
    base = min(freqs)
    den = 1
    for f in freqs:
        r = Fraction(f / base).limit_denominator(max_den)
        if abs(float(r) - f / base) > 1e-12 * (f / base):
            return None
        den = den * r.denominator // math.gcd(den, r.denominator)
    return 2 * math.pi * den / base


def _polish(fn, starts, bounds):
    """Refine candidate maximisers of fn with a bounded local search."""
    best = max(fn(x) for x in starts)
    for x0 in starts:
        res = optimize.minimize(lambda x: -fn(x), x0, method="L-BFGS-B", bounds=bounds,
                                options={"ftol": 1e-15, "gtol": 1e-12})
        best = max(best, -float(res.fun))
    return best


def _extrema_on_torus(fn_vec, periods, per_axis):
    """Min and max of a smooth periodic function by dense sampling plus local polishing."""
    axes = [np.linspace(0, P, n, endpoint=False) for P, n in zip(periods, per_axis)]
    mesh = np.meshgrid(*axes, indexing="ij")
    vals = fn_vec(mesh)
    out = []
    for sign in (1.0, -1.0):
        flat = (sign * vals).ravel()
        top = np.argsort(flat)[-8:]
        starts = [np.array([m.ravel()[i] for m in mesh]) for i in top]
        steps = [P / n for P, n in zip(periods, per_axis)]
        f = lambda x: sign * float(fn_vec([np.array(c) for c in x]))
        best = -math.inf
        for x0 in starts:
            bounds = [(c - 2 * h, c + 2 * h) for c, h in zip(x0, steps)]
            best = max(best, _polish(f, [x0], bounds))
        out.append(sign * best)
    hi, lo = out
    return lo, hi


def _sample_space_extrema(space):
    if not space:
        return 0.0, 0.0
    dim = len(space[0]["k"])
    periods, per_axis = [], []
    for d in range(dim):
        comps = [s["k"][d] for s in space]
        P = _common_period(comps)
        if P is None:
            nonzero = [abs(c) for c in comps if c != 0]
            P = 2 * math.pi / min(nonzero) * 64 if nonzero else 1.0
        kmax = max((abs(c) for c in comps), default=0.0)
        n = int(min(8192 if dim == 1 else 512, max(64, 32 * kmax * P / (2 * math.pi))))
        periods.append(P)
        per_axis.append(n)

    def fn(xs):
        return sum(s["amp"] * np.cos(s["phase"] + sum(k * c for k, c in zip(s["k"], xs))) for s in space)

    return _extrema_on_torus(fn, periods, per_axis)


def _sample_time_extrema(time):
    """Extremes over t of Σ amp sin(ω t + phase).

    Commensurate frequencies: sampled and polished over the common period.
    Otherwise the terms are treated as rationally independent, so the phases come
    arbitrarily close to any combination and the sup is Σ|amp| (inf -Σ|amp|).
    """
    if not time:
        return 0.0, 0.0
    const = sum(s["amp"] * math.sin(s["phase"]) for s in time if s["omega"] == 0)
    moving = [s for s in time if s["omega"] != 0]
    if not moving:
        return const, const
    P = _common_period([s["omega"] for s in moving])
    if P is None:
        spread = sum(abs(s["amp"]) for s in moving)
        return const - spread, const + spread
    wmax = max(abs(s["omega"]) for s in moving)
    n = int(min(200_000, max(256, 32 * wmax * P / (2 * math.pi))))

    def fn(ts):
        t = ts[0]
        return const + sum(s["amp"] * np.sin(s["omega"] * t + s["phase"]) for s in moving)

    return _extrema_on_torus(fn, [P], [n])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# ---------------------------------------------------------------------------
# coefficient pair
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CoefficientField:
    """The pair (a, b) with cached envelopes and an optional temporal period."""

    a: Coefficient
    b: Coefficient
    period: float | None = None

    def __post_init__(self):
        if self.period is not None:
            if not self.period > 0:
                raise ValueError("period must be positive")
            for name, c in (("a", self.a), ("b", self.b)):
                if not c.check_period(self.period):
                    raise ValueError(f"coefficient {name} is not {self.period}-periodic in time")

    # convenience constructors
    @classmethod
    def constant(cls, a: float, b: float) -> "CoefficientField":
        return cls(Coefficient("constant", {"value": a}), Coefficient("constant", {"value": b}))

    @classmethod
    def from_config(cls, cfg: dict) -> "CoefficientField":
        a = Coefficient(cfg["a"]["kind"], dict(cfg["a"].get("params", {})))
        b = Coefficient(cfg["b"]["kind"], dict(cfg["b"].get("params", {})))
        period = cfg.get("period")
        return cls(a, b, None if period is None else float(period))

    def to_config(self) -> dict:
        return {"a": self.a.to_config(), "b": self.b.to_config(), "period": self.period}

    @property
    def kind(self) -> str:
        kinds = {self.a.kind, self.b.kind}
        if kinds == {"constant"}:
            return "constant"
        if "tabulated" in kinds:
            return "tabulated"
        return "separable-periodic"

    a_inf = property(lambda self: self.a.inf)
    a_sup = property(lambda self: self.a.sup)
    b_inf = property(lambda self: self.b.inf)
    b_sup = property(lambda self: self.b.sup)

    @property
    def autonomous(self) -> bool:
        return not (self.a.time_dependent or self.b.time_dependent)

    @property
    def space_homogeneous(self) -> bool:
        return not (self.a.space_dependent or self.b.space_dependent)

    def check_box(self, params: Params):
        self.a.check_box(params.dim, params.box_half_length)
        self.b.check_box(params.dim, params.box_half_length)

    def on_grid(self, coords, t: float):
        """Return (a, b) arrays evaluated on coordinate arrays at time t."""
        return (self.a.evaluate(coords, t, self.period), self.b.evaluate(coords, t, self.period))


# ---------------------------------------------------------------------------
# hypotheses and closed forms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HypothesisReport:
    holds_H1: bool
    holds_H2: bool
    holds_H3: bool
    slack_H1: float
    slack_H2: float
    slack_H3: float

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def check_envelopes(coeffs: CoefficientField):
    """Raise HypothesisError naming the first envelope that is non-positive or unbounded."""
    for name in ("a_inf", "a_sup", "b_inf", "b_sup"):
        val = getattr(coeffs, name)
        if not math.isfinite(val):
            raise HypothesisError(f"envelope {name} is not finite ({val})")
        if val <= 0:
            raise HypothesisError(f"envelope {name} must be positive (got {val})")


def h3_factor(coeffs: CoefficientField, params: Params) -> float:
    """Multiplier of χμ on the right of the spreading hypothesis."""
    a_inf, a_sup = coeffs.a_inf, coeffs.a_sup
    root = 1.0 + math.sqrt(1.0 + params.dim * a_inf / (4.0 * params.lam))
    return 1.0 + root * a_sup / (2.0 * a_inf)


def validate_coefficients(coeffs: CoefficientField, params: Params) -> HypothesisReport:
    """Evaluate the three hypotheses as exact slacks (left minus right side)."""
    check_envelopes(coeffs)
    cm = params.chi_mu
    b_inf = coeffs.b_inf
    s1 = b_inf - cm
    s2 = b_inf - (1.0 + coeffs.a_sup / coeffs.a_inf) * cm
    s3 = b_inf - h3_factor(coeffs, params) * cm
    return HypothesisReport(s1 > 0, s2 > 0, s3 > 0, s1, s2, s3)


def sup_bound(coeffs: CoefficientField, params: Params) -> float:
    """Asymptotic bound a_sup / (b_inf - χμ) on the sup norm of u."""
    den = coeffs.b_inf - params.chi_mu
    if not den > 0:
        raise HypothesisError(f"b_inf - chi*mu = {den} must be positive")
    return coeffs.a_sup / den


def attraction_rectangle(coeffs: CoefficientField, params: Params) -> tuple[float, float]:
    """Lower and upper edges (M_lower, M_upper) of the band attracting positive solutions."""
    rep = validate_coefficients(coeffs, params)
    if not rep.holds_H2:
        raise HypothesisError(f"attraction rectangle needs H2 (slack {rep.slack_H2:.6g} <= 0)")
    cm = params.chi_mu
    a_inf, a_sup, b_inf, b_sup = coeffs.a_inf, coeffs.a_sup, coeffs.b_inf, coeffs.b_sup
    den = (b_sup - cm) * (b_inf - cm) - cm * cm
    lower = ((b_inf - cm) * a_inf - cm * a_sup) / den
    upper = ((b_sup - cm) * a_sup - cm * a_inf) / den
    return lower, upper


def sample_coefficient(coeffs: CoefficientField, which: str, x: Any, t: float, params: Params | None = None) -> float:
    """Evaluate a or b at a single point."""
    if which not in ("a", "b"):
        raise ValueError("which must be 'a' or 'b'")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if params is not None:
        L = params.box_half_length
        if x.size != params.dim or np.any(x < -L) or np.any(x >= L):
            raise ValueError(f"point {x} is not inside the box [-{L}, {L})^{params.dim}")
    coef = coeffs.a if which == "a" else coeffs.b
    return float(coef.evaluate(tuple(np.array(v) for v in x), t, coeffs.period))


# ---------------------------------------------------------------------------
# config round trip
# ---------------------------------------------------------------------------


def params_to_config(params: Params) -> dict:
    return {"chi": params.chi, "lambda": params.lam, "mu": params.mu, "dim": params.dim,
            "box": params.box_half_length, "grid": params.grid_points}


def params_from_config(cfg: dict) -> Params:
    return Params(chi=float(cfg["chi"]), lam=float(cfg["lambda"]), mu=float(cfg["mu"]),
                  dim=int(cfg.get("dim", 1)), box_half_length=float(cfg.get("box", math.pi)),
                  grid_points=int(cfg.get("grid", 128)))


def model_to_config(params: Params, coeffs: CoefficientField) -> dict:
    cfg = params_to_config(params)
    cfg.update(coeffs.to_config())
    return cfg


def model_from_config(cfg: dict) -> tuple[Params, CoefficientField]:
    cfg = unflatten(cfg)
    return params_from_config(cfg), CoefficientField.from_config(cfg)


def unflatten(cfg: dict) -> dict:
    """Turn dotted keys ("a.kind") into nested dictionaries."""
    out: dict = {}
    for key, val in cfg.items():
        if isinstance(val, dict):
            val = unflatten(val)
        parts = key.split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        if isinstance(val, dict) and isinstance(node.get(parts[-1]), dict):
            node[parts[-1]].update(val)
        else:
            node[parts[-1]] = val
    return out


def separable(mean: float, space=(), time=()) -> Coefficient:
    """Shorthand for a separable-periodic coefficient.

    ``space`` items are ``(amp, k)`` or ``(amp, k, phase)`` with ``k`` a float or
    wave vector; ``time`` items are ``(amp, omega)`` or ``(amp, omega, phase)``.
    """
    sp = [{"amp": s[0], "k": list(np.atleast_1d(s[1]).astype(float)), "phase": s[2] if len(s) > 2 else 0.0}
          for s in space]
    tm = [{"amp": s[0], "omega": s[1], "phase": s[2] if len(s) > 2 else 0.0} for s in time]
    return Coefficient("separable-periodic", {"mean": mean, "space": sp, "time": tm})


def constant(value: float) -> Coefficient:
    return Coefficient("constant", {"value": value})
