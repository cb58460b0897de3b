"""Config-driven experiment runs producing self-describing artifact directories."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import analysis, entire, oracles, plotting, reports
from .evolve import integrate, save_trajectory
from .fields import Grid, ScalarField, write_field
from .model import (CoefficientField, HypothesisError, Params, attraction_rectangle, model_from_config,
                    sup_bound, unflatten, validate_coefficients)

log = logging.getLogger(__name__)

KINDS = ("simulate", "entire", "stability", "spreading", "perturbation", "oracle-audit")
INITIAL_KINDS = ("constant", "bump", "random-band")
NEEDS_HORIZON = ("simulate", "stability", "spreading", "perturbation")
MANIFEST = "manifest.json"
FIGURE_SUFFIXES = (".png",)


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid experiment config:\n  - " + "\n  - ".join(self.problems))


class IncompatibleRuns(ValueError):
    pass


@dataclass
class ExperimentConfig:
    kind: str
    params: Params
    coeffs: CoefficientField
    initial: dict
    horizon: float
    output: str | None
    ladder: list = field(default_factory=list)
    store_every: float = 0.5
    dt_max: float = 0.02
    options: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, cfg: dict) -> "ExperimentConfig":
        cfg = unflatten(copy.deepcopy(cfg))
        problems = []
        kind = cfg.get("kind")
        if kind not in KINDS:
            problems.append(f"kind must be one of {KINDS} (got {kind!r})")
        params = coeffs = None
        model = cfg.get("model")
        if not isinstance(model, dict):
            problems.append("model section missing")
        else:
            try:
                params, coeffs = model_from_config(model)
                coeffs.check_box(params)
            except (KeyError, TypeError) as exc:
                problems.append(f"model: missing or malformed entry {exc}")
            except ValueError as exc:
                problems.extend(f"model: {line.strip(' -')}" for line in str(exc).splitlines() if line.strip())
        initial = cfg.get("initial", {"kind": "constant", "value": None})
        if not isinstance(initial, dict):
            problems.append("initial must be a mapping")
            initial = {}
        ikind = initial.get("kind", "constant")
        if ikind not in INITIAL_KINDS:
            problems.append(f"initial.kind must be one of {INITIAL_KINDS} (got {ikind!r})")
        if ikind == "random-band" and initial.get("seed") is None:
            problems.append("initial.seed is mandatory for random-band initial data")
        horizon = cfg.get("horizon")
        if kind in NEEDS_HORIZON:
            if horizon is None:
                problems.append(f"horizon is required for kind {kind!r}")
            elif not (isinstance(horizon, (int, float)) and horizon >= 0):
                problems.append("horizon must be a nonnegative number")
        if kind == "perturbation":
            chis = cfg.get("chi_list")
            if not chis:
                problems.append("chi_list is required for kind 'perturbation'")
            elif coeffs is not None and params is not None:
                cap = coeffs.b_inf / params.mu
                bad = [c for c in chis if not 0 < float(c) < cap]
                if bad:
                    problems.append(f"chi_list entries {bad} outside (0, b_inf/mu)")
        ladder = cfg.get("ladder") or []
        if any(not (isinstance(n, int) and n >= 4) for n in ladder):
            problems.append("ladder must list integer grid sizes >= 4")
        store_every = cfg.get("store_every", 0.5)
        if not (isinstance(store_every, (int, float)) and store_every > 0):
            problems.append("store_every must be positive")
        dt_max = cfg.get("dt_max", 0.02)
        if not (isinstance(dt_max, (int, float)) and dt_max > 0):
            problems.append("dt_max must be positive")
        output = cfg.get("output")
        if output is not None and not _writable(Path(output)):
            problems.append(f"output directory {output} is not writable")
        if problems:
            raise ConfigError(problems)
        known = {"kind", "model", "initial", "horizon", "output", "ladder", "store_every", "dt_max"}
        options = {k: v for k, v in cfg.items() if k not in known}
        return cls(kind, params, coeffs, initial, float(horizon or 0.0), output, list(ladder),
                   float(store_every), float(dt_max), options, cfg)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            data = yaml.safe_load(fh)
        if not isinstance(data, dict):
            raise ConfigError([f"{path}: top level must be a mapping"])
        return cls.from_dict(data)


def _writable(path: Path) -> bool:
    p = path.resolve()
    while not p.exists():
        p = p.parent
    return p.is_dir() and os.access(p, os.W_OK)


# ---------------------------------------------------------------------------
# initial data
# ---------------------------------------------------------------------------


def make_initial(spec: dict, grid: Grid, coeffs: CoefficientField) -> ScalarField:
    kind = spec.get("kind", "constant")
    if kind == "constant":
        value = spec.get("value")
        if value is None:
            value = coeffs.a_inf / coeffs.b_sup
        return ScalarField.full(grid, float(value))
    if kind == "bump":
        centre = np.broadcast_to(np.asarray(spec.get("center", 0.0), dtype=float), (grid.dim,))
        width = float(spec.get("width", 1.0))
        height = float(spec.get("height", coeffs.a_inf / coeffs.b_sup))
        r = np.sqrt(sum((c - x0) ** 2 for c, x0 in zip(grid.coords, centre)))
        vals = np.where(r < width, height * np.cos(0.5 * np.pi * np.minimum(r / width, 1.0)) ** 2, 0.0)
        return ScalarField(np.broadcast_to(vals, grid.shape).astype(float), grid)
    if kind == "random-band":
        return random_band(grid, int(spec["seed"]), float(spec.get("low", 0.5)), float(spec.get("high", 1.5)),
                           int(spec.get("modes", 6)))
    raise ValueError(f"unknown initial kind {kind!r}")


def random_band(grid: Grid, seed: int, low: float, high: float, modes: int = 6) -> ScalarField:
    """Smooth random field with range exactly [low, high] (low Fourier modes, seeded)."""
    if not high > low:
        raise ValueError("random-band needs high > low")
    rng = np.random.default_rng(seed)
    s = np.zeros(grid.shape)
    base = np.pi / grid.L
    for _ in range(modes):
        k = rng.integers(1, modes + 1, size=grid.dim)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.normal()
        s = s + amp * np.cos(sum(base * kk * c for kk, c in zip(k, grid.coords)) + phase)
    s = (s - s.min()) / (s.max() - s.min()) if s.max() > s.min() else np.zeros(grid.shape)
    return ScalarField(low + (high - low) * s, grid)


# ---------------------------------------------------------------------------
# run kinds
# ---------------------------------------------------------------------------


def _entire_for(cfg: ExperimentConfig, params: Params) -> entire.EntireSolution:
    opts = dict(cfg.options.get("entire", {}) or {})
    method = opts.pop("method", "auto")
    if method == "auto":
        return entire.construct_entire_solution(cfg.coeffs, params, **opts)
    if method == "steady":
        return entire.find_steady_state(cfg.coeffs, params, **opts)
    if method == "periodic":
        return entire.find_periodic_entire_solution(cfg.coeffs, params, **opts)
    if method == "pullback":
        k_list = opts.pop("k_list", (10, 20, 30))
        T = opts.pop("T", cfg.coeffs.period or 1.0)
        return entire.pullback_entire_solution(cfg.coeffs, params, k_list, T, **opts)
    raise ValueError(f"unknown entire method {method!r}")


def _simulate_one(args):
    cfg, n = args
    params = cfg.params.with_grid(n)
    grid = Grid.from_params(params)
    u0 = make_initial(cfg.initial, grid, cfg.coeffs)
    return n, integrate(u0, 0.0, cfg.horizon, cfg.coeffs, params, cfg.store_every, dt_max=cfg.dt_max)


def _pool_map(fn, tasks, workers):
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as ex:
            return list(ex.map(fn, tasks))
    return [fn(t) for t in tasks]


def run_simulate(cfg: ExperimentConfig, out: Path, workers: int):
    ladder = cfg.ladder or [cfg.params.grid_points]
    results = _pool_map(_simulate_one, [(cfg, n) for n in ladder], workers)
    rep = validate_coefficients(cfg.coeffs, cfg.params)
    finals = {}
    for n, traj in results:
        sub = out / f"res_{n}"
        save_trajectory(traj, sub / "checkpoint")
        finals[n] = traj.final.u.values
        if cfg.horizon == 0:
            continue
        t = traj.times
        sup = traj.sup_norms()
        u0n = traj.states[0].u.norm_inf()
        cols = {"t": t, "sup_u": sup, "inf_u": traj.inf_values(),
                "growth_envelope": u0n * np.exp(cfg.coeffs.a_sup * t)}
        if rep.holds_H1:
            cols["sup_bound"] = np.full(t.size, max(u0n, sup_bound(cfg.coeffs, traj.params)))
        reports.write_columns(sub / "diagnostics.csv", cols)
        summary = {"grid": n, "final_time": t[-1], "max_sup_u": sup.max(), "min_inf_u": traj.inf_values().min(),
                   "steps": len(traj.dt_history)}
        if rep.holds_H2:
            rect = analysis.rectangle_check(traj, burn_in=float(cfg.options.get("burn_in", 0.5 * cfg.horizon)))
            reports.write_rows(sub / "rectangle.csv", [rect])
            summary.update({k: rect[k] for k in ("M_lower", "M_upper", "u_min", "u_max", "passed")})
        (sub / "summary.txt").write_text(reports.summary_block(f"simulate (grid {n})", summary))
        bounds = {k: cols[k] for k in ("sup_bound",) if k in cols}
        plotting.plot_series(sub / "sup_norm.png", t, {"sup u": sup, "inf u": cols["inf_u"]}, bounds)
        if traj.grid.dim == 1:
            plotting.plot_profiles(sub / "profiles.png", traj.grid.axis, traj.u_stack(), t)
        else:
            plotting.plot_field2d(sub / "final.png", traj.grid, traj.final.u.values, f"u at t={t[-1]:.4g}")
    if len(ladder) > 1:
        rows = []
        for n1, n2 in zip(ladder, ladder[1:]):
            a, b = finals[n1], finals[n2]
            if n2 % n1 == 0:
                r = n2 // n1
                b = b[(slice(None, None, r),) * b.ndim]
                rows.append({"coarse": n1, "fine": n2, "max_abs_diff": float(np.abs(a - b).max())})
        if rows:
            reports.write_rows(out / "convergence.csv", rows)


def run_entire(cfg: ExperimentConfig, out: Path, workers: int):
    sol = _entire_for(cfg, cfg.params)
    sol.save(out / "entire")
    stats = sol.stats()
    cert = entire.certify_entire_bounds(sol, cfg.coeffs, cfg.params)
    reports.write_rows(out / "stats.csv", [stats])
    reports.write_rows(out / "certification.csv", cert.rows())
    diag = {k: v for k, v in sol.diagnostics.items() if not isinstance(v, (list, tuple))}
    summary = dict(stats)
    summary.update(diag)
    summary["certified"] = cert.passed
    (out / "summary.txt").write_text(reports.summary_block("entire solution", summary))
    for key in ("displacements", "increments"):
        seq = sol.diagnostics.get(key)
        if seq:
            reports.write_columns(out / f"{key}.csv", {"iteration": np.arange(1, len(seq) + 1), key: seq})
            plotting.plot_series(out / f"{key}.png", np.arange(1, len(seq) + 1), {key: seq}, logy=True,
                                 xlabel="iteration")
    plotting.plot_state(out / "uplus.png", sol.grid, sol.states[0].u.values, "u+ (first stored slice)")


def run_stability(cfg: ExperimentConfig, out: Path, workers: int):
    sol = _entire_for(cfg, cfg.params)
    grid = Grid.from_params(cfg.params)
    u0 = make_initial(cfg.initial, grid, cfg.coeffs)
    traj = integrate(u0, 0.0, cfg.horizon, cfg.coeffs, cfg.params, cfg.store_every, dt_max=cfg.dt_max)
    rep = analysis.stability_report(traj, sol, int(cfg.options.get("n_max", 3)))
    fit = rep.fit
    fitted = fit.M * np.exp(-fit.alpha * rep.times) if fit.status == "ok" else np.full(rep.times.size, np.nan)
    reports.write_columns(out / "series.csv", {"t": rep.times, "U_minus_1": rep.series, "V_minus_1": rep.v_series,
                                               "fit": fitted})
    reports.write_rows(out / "staircase.csv", [vars(s) for s in rep.staircase])
    summary = {"alpha_hat": fit.alpha, "M_hat": fit.M, "fit_residual": fit.residual, "fit_status": fit.status,
               "fit_points": fit.n_points, "fit_window": "tail half of stored times", "rho": rep.rho,
               "C0": rep.C0, "C0_err": rep.C0_err, "C1": rep.C1, "final_U_minus_1": rep.series[-1],
               "observed_min_u": min(traj.min_u) if traj.min_u else traj.states[0].u.min()}
    reports.write_rows(out / "stability.csv", [summary])
    (out / "summary.txt").write_text(reports.summary_block("stability", summary))
    positive = np.where(rep.series > 0, rep.series, np.nan)
    plotting.plot_series(out / "ratio_series.png", rep.times, {"|U-1|": positive, "fit": fitted}, logy=True)


def run_spreading(cfg: ExperimentConfig, out: Path, workers: int):
    grid = Grid.from_params(cfg.params)
    u0 = make_initial(cfg.initial, grid, cfg.coeffs)
    traj = integrate(u0, 0.0, cfg.horizon, cfg.coeffs, cfg.params, cfg.store_every, dt_max=cfg.dt_max)
    fs = analysis.front_speed(traj, cfg.options.get("threshold"))
    sr = oracles.spreading_speeds(cfg.coeffs, cfg.params)
    sr.measured_speed = fs.speed
    reports.write_columns(out / "front.csv", {"t": fs.times, "position": fs.positions})
    row = {"measured_speed": fs.speed, "fit_residual": fs.fit_residual, "threshold": fs.threshold,
           "c_minus_star": sr.c_minus_star, "c_plus_star": sr.c_plus_star, "h3_slack": sr.h3_slack}
    reports.write_rows(out / "speeds.csv", [row])
    (out / "summary.txt").write_text(reports.summary_block("spreading", row))
    bounds = {"c+* t": sr.c_plus_star * fs.times + fs.positions[0]}
    if sr.c_minus_star is not None:
        bounds["c-* t"] = sr.c_minus_star * fs.times + fs.positions[0]
    plotting.plot_series(out / "front.png", fs.times, {"front": fs.positions}, bounds, ylabel="x")
    if grid.dim == 1:
        plotting.plot_profiles(out / "profiles.png", grid.axis, traj.u_stack(), traj.times)


def run_perturbation(cfg: ExperimentConfig, out: Path, workers: int):
    grid = Grid.from_params(cfg.params)
    u0 = make_initial(cfg.initial, grid, cfg.coeffs)
    rep = analysis.perturbation_study(u0, cfg.options["chi_list"], cfg.horizon, cfg.coeffs, cfg.params,
                                      store_every=cfg.store_every, dt_max=cfg.dt_max, workers=workers,
                                      entire_kw=cfg.options.get("entire"))
    rows = [{"chi": c, "gap": g, "gap_over_chi": r, "entire_gap": e, "bound": b, "bound_holds": h,
             "error": rep.errors.get(c)}
            for c, g, r, e, b, h in zip(rep.chi, rep.gaps, rep.ratios, rep.entire_gaps, rep.bounds,
                                        rep.bound_holds)]
    reports.write_rows(out / "perturbation.csv", rows)
    summary = {"K": rep.K, "ratio_spread": rep.ratio_spread, "all_bounds_hold": all(rep.bound_holds),
               "failed_runs": len(rep.errors)}
    (out / "summary.txt").write_text(reports.summary_block("perturbation", summary))
    ok = [i for i, g in enumerate(rep.gaps) if g is not None]
    if ok:
        plotting.plot_series(out / "gaps.png", [rep.chi[i] for i in ok],
                             {"sup gap": [rep.gaps[i] for i in ok], "entire gap": [rep.entire_gaps[i] for i in ok]},
                             {"bound": [rep.bounds[i] for i in ok]}, xlabel="chi")
    if rep.errors:
        raise RuntimeError(f"perturbation runs failed: {rep.errors}")


def oracle_rows(cfg: ExperimentConfig) -> list[dict]:
    """Every closed-form quantity for the configured model."""
    params, coeffs = cfg.params, cfg.coeffs
    rep = validate_coefficients(coeffs, params)
    rows = [{"quantity": f"slack_{h}", "value": getattr(rep, f"slack_{h}")} for h in ("H1", "H2", "H3")]
    T = float(cfg.options.get("T", 1.0))
    add = lambda q, v: rows.append({"quantity": q, "value": v})
    if rep.holds_H1:
        add("sup_bound", sup_bound(coeffs, params))
    if rep.holds_H2:
        lo, hi = attraction_rectangle(coeffs, params)
        add("M_lower", lo)
        add("M_upper", hi)
    if rep.holds_H1:
        sr = oracles.spreading_speeds(coeffs, params)
        add("c_plus_star", sr.c_plus_star)
        add("c_minus_star", sr.c_minus_star)
    add("M_T", oracles.lemma_threshold(T, coeffs))
    grid = Grid.from_params(params)
    u0 = make_initial(cfg.initial, grid, coeffs)
    add("lemma_lower_bound_at_T", oracles.pointwise_lower_bound(u0.min(), u0.norm_inf(), T, T, coeffs))
    add("sigma_L", oracles.dirichlet_principal_eigenvalue(params.box_half_length, coeffs.a_inf, params.dim))
    add("L0", oracles.dirichlet_threshold(coeffs.a_inf, params.dim))
    if rep.holds_H1:
        add("remark_bound_m_observed", oracles.remark12_bound(min(u0.min(), coeffs.a_sup / params.chi_mu)
                                                              if params.chi_mu > 0 else u0.min(), coeffs, params))
        if coeffs.kind == "constant":
            uplus = coeffs.a_sup / coeffs.b_sup
            rho, C1 = oracles.contraction_closed_form(params, coeffs, 0.0, uplus, uplus, homogeneous=True)
            K, u0inf, u0sup = 2.0, uplus, uplus
            C0 = 0.0
        else:
            sol = _entire_for(cfg, params)
            det = analysis.contraction_details(sol, params, coeffs)
            rho, C1, C0 = det["rho"], det["C1"], det["C0"]
            ref = _entire_for(cfg, params.with_chi(0.0))
            K = oracles.perturbation_K(params, ref.gradient_stats()["grad_log_sup"])
            u0inf, u0sup = ref.u_inf, ref.u_sup
        add("C0", C0)
        add("C1", C1)
        add("rho", rho)
        add("K", K)
        add("perturbation_bound", oracles.perturbation_bound(params.chi, params, coeffs, u0inf, u0sup, K))
    return rows


def run_oracle_audit(cfg: ExperimentConfig, out: Path, workers: int):
    rows = oracle_rows(cfg)
    reports.write_rows(out / "oracles.csv", rows, ["quantity", "value"])
    (out / "summary.txt").write_text(reports.summary_block("closed forms", {r["quantity"]: r["value"]
                                                                          for r in rows}))


RUNNERS = {"simulate": run_simulate, "entire": run_entire, "stability": run_stability,
           "spreading": run_spreading, "perturbation": run_perturbation, "oracle-audit": run_oracle_audit}


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def content_files(directory: Path) -> dict:
    """sha256 of every data file (manifest and figures excluded), keyed by relative path."""
    out = {}
    for p in sorted(directory.rglob("*")):
        if p.is_file() and p.name != MANIFEST and p.suffix not in FIGURE_SUFFIXES:
            out[p.relative_to(directory).as_posix()] = _sha256(p)
    return out


def content_hash(files: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(files):
        h.update(name.encode() + b"\0" + files[name].encode() + b"\n")
    return h.hexdigest()


def _write_manifest(out: Path, cfg: ExperimentConfig, status: str, error: str | None = None):
    files = content_files(out)
    manifest = {"kind": cfg.kind, "status": status, "config": cfg.raw, "content_hash": content_hash(files),
                "files": files}
    if error:
        manifest["error"] = error
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True, default=str))
    return manifest


def run(config, out=None, workers: int = 1) -> Path:
    """Execute an experiment and return its artifact directory."""
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.from_dict(config)
    target = out if out is not None else cfg.output
    if target is None:
        raise ConfigError(["no output directory (set 'output' or pass out=)"])
    out = Path(target)
    if not _writable(out):
        raise ConfigError([f"output directory {out} is not writable"])
    out.mkdir(parents=True, exist_ok=True)
    _write_manifest(out, cfg, "running")
    try:
        RUNNERS[cfg.kind](cfg, out, max(1, int(workers)))
    except Exception as exc:
        _write_manifest(out, cfg, "failed", "".join(traceback.format_exception_only(type(exc), exc)).strip())
        raise
    _write_manifest(out, cfg, "complete")
    return out


def load_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"{directory} has no {MANIFEST}")
    m = json.loads(path.read_text())
    for key in ("kind", "status", "content_hash", "files"):
        if key not in m:
            raise ValueError(f"{path}: manifest lacks {key!r}")
    return m


def _as_float(s):
    try:
        return float(s)
    except ValueError:
        return None


def compare(dir1, dir2, rtol: float = 1e-9, atol: float = 1e-12) -> list[dict]:
    """Per-column differences between the CSV reports of two runs of the same kind.

    Only differing columns (or files present in one run only) are listed, so a
    run compared with itself gives an empty list.
    """
    m1, m2 = load_manifest(dir1), load_manifest(dir2)
    if m1["kind"] != m2["kind"]:
        raise IncompatibleRuns(f"cannot compare a {m1['kind']!r} run with a {m2['kind']!r} run")
    d1, d2 = Path(dir1), Path(dir2)
    csvs = sorted({f for f in list(m1["files"]) + list(m2["files"]) if f.endswith(".csv")})
    diffs = []
    for name in csvs:
        if name not in m1["files"] or name not in m2["files"]:
            diffs.append({"file": name, "column": None, "issue": "present in one run only"})
            continue
        if m1["files"][name] == m2["files"][name]:
            continue
        r1, r2 = reports.read_rows(d1 / name), reports.read_rows(d2 / name)
        if len(r1) != len(r2):
            diffs.append({"file": name, "column": None, "issue": f"row count {len(r1)} vs {len(r2)}"})
            continue
        cols = list(r1[0]) if r1 else []
        for col in cols:
            a = [_as_float(r.get(col, "")) for r in r1]
            b = [_as_float(r.get(col, "")) for r in r2]
            if any(x is None for x in a + b):
                if [r.get(col) for r in r1] != [r.get(col) for r in r2]:
                    diffs.append({"file": name, "column": col, "issue": "non-numeric values differ"})
                continue
            a, b = np.array(a), np.array(b)
            both_nan = np.isnan(a) & np.isnan(b)
            d = np.where(both_nan, 0.0, np.abs(a - b))
            if not np.any(d > 0):
                continue
            scale = np.maximum(np.abs(a), np.abs(b))
            worst = float(np.nanmax(d))
            rel = float(np.nanmax(np.where(scale > 0, d / np.where(scale > 0, scale, 1), 0.0)))
            ok = bool(np.all(d <= atol + rtol * scale))
            diffs.append({"file": name, "column": col, "max_abs_diff": worst, "max_rel_diff": rel,
                          "within_tol": ok})
    return diffs
