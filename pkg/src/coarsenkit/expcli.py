"""Scenario runner and command line front end.

A scenario is a JSON object::

    {"name": "lsw_subcritical_p1",
     "pair": {"kind": "lsw"},
     "profile": {"kind": "power_law", "p": 1},
     "model": "characteristics",          # or "quadratic_uv", "quadratic_reduced"
     "t_end": 50,
     "cadence": 0.5,
     "solver": {"n": 4000, "s_floor": 1e-30},
     "probes": [0.0, 0.25, 0.5, 0.75, 0.9],
     "tracers": [0.5, 0.9],
     "checks": {"decay_window": [5, 15]},
     "outputs": {"series": "lsw_subcritical_p1.csv", "summary": "lsw_subcritical_p1.json"}}

A profile of kind ``self_similar`` with a ``kappa`` entry starts the run
from the stationary solution of the pair.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import charsolve, coeffs, profiles, quadmodel, selfsimilar
from .errors import CoarsenError, ConfigError

MODELS = ("characteristics", "quadratic_uv", "quadratic_reduced")
BASE_COLUMNS = ("t", "kappa", "kappa_avg", "mass", "w0", "meanX", "F0")
_SCENARIO_KEYS = {"name", "pair", "profile", "model", "t_end", "cadence", "solver", "probes",
                  "tracers", "checks", "outputs", "description"}
_CHECK_KEYS = {"decay_window", "kappa_window"}

# invariant tolerances
TOL_MASS = 1e-6
TOL_MEAN = 1e-6
TOL_G = 1e-8
TOL_TRACER = 1e-3
TOL_H0 = 1e-8
TOL_RESIDUAL = 1e-8


# -- scenarios -------------------------------------------------------------------------

@dataclass
class Scenario:
    name: str
    pair_spec: dict
    profile_spec: dict
    model: str = "characteristics"
    t_end: float = 10.0
    cadence: float = 0.5
    solver: dict = field(default_factory=dict)
    probes: tuple = (0.0, 0.25, 0.5, 0.75, 0.9)
    tracers: tuple = ()
    checks: dict = field(default_factory=dict)
    series_path: str = ""
    summary_path: str = ""

    @classmethod
    def from_dict(cls, cfg: dict) -> "Scenario":
        unknown = set(cfg) - _SCENARIO_KEYS
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        for key in ("name", "pair", "profile", "t_end"):
            if key not in cfg:
                raise ConfigError(f"scenario is missing {key!r}")
        model = str(cfg.get("model", "characteristics")).lower()
        if model not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}, got {model!r}")
        t_end = float(cfg["t_end"])
        cadence = float(cfg.get("cadence", 0.5))
        if not t_end > 0 or not cadence > 0:
            raise ConfigError("t_end and cadence must be positive")
        checks = dict(cfg.get("checks", {}))
        if set(checks) - _CHECK_KEYS:
            raise ConfigError(f"unknown checks: {sorted(set(checks) - _CHECK_KEYS)}")
        name = str(cfg["name"])
        outputs = dict(cfg.get("outputs", {}))
        sc = cls(
            name=name, pair_spec=dict(cfg["pair"]), profile_spec=dict(cfg["profile"]), model=model,
            t_end=t_end, cadence=cadence, solver=dict(cfg.get("solver", {})),
            probes=tuple(float(x) for x in cfg.get("probes", cls.probes)),
            tracers=tuple(float(x) for x in cfg.get("tracers", ())), checks=checks,
            series_path=str(outputs.get("series", f"{name}.csv")),
            summary_path=str(outputs.get("summary", f"{name}.json")),
        )
        sc.pair()
        sc.profile()  # fail early on bad specs
        charsolve.SolverOptions.from_config(sc.solver)
        return sc

    def pair(self) -> coeffs.CoefficientPair:
        return coeffs.from_config(self.pair_spec)

    def profile(self) -> profiles.Profile:
        spec = dict(self.profile_spec)
        if str(spec.get("kind", "")).lower() == "self_similar":
            if "kappa" not in spec:
                raise ConfigError("a self_similar profile needs 'kappa'")
            return selfsimilar.build_selfsimilar(self.pair(), float(spec["kappa"])).as_profile()
        return profiles.build(spec)


def load_scenario(path: str | Path) -> Scenario:
    with open(path) as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return Scenario.from_dict(cfg)


def checkpoint_times(t_end: float, cadence: float) -> np.ndarray:
    n = int(math.floor(t_end / cadence + 1e-9))
    times = [0.0] + [cadence * (k + 1) for k in range(n)]
    if times[-1] < t_end - 1e-9:
        times.append(t_end)
    return np.array(times)


# -- series I/O ------------------------------------------------------------------------

def series_header(probes: Sequence[float]) -> list[str]:
    return [*BASE_COLUMNS, *(f"beta@{x:g}" for x in probes), *(f"g@{x:g}" for x in probes)]


def emit_series(rows: Sequence[Sequence[float]], probes: Sequence[float], path: str | Path) -> None:
    """Write rows as CSV with 17 significant digits, so that parsing returns the same doubles."""
    header = series_header(probes)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            if len(row) != len(header):
                raise ConfigError(f"row has {len(row)} entries, header has {len(header)}")
            fh.write(",".join("%.17g" % float(v) for v in row) + "\n")


def read_series(path: str | Path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        data = [[float(v) for v in row] for row in reader if row]
    return header, np.array(data, dtype=float).reshape(len(data), len(header))


class MisalignedError(ConfigError):
    """Two series do not share their checkpoint times."""


def compare_runs(a: str | Path, b: str | Path, columns: Sequence[str] | None = None,
                 t_tol: float = 1e-9) -> dict:
    """Per-column max abs and max rel differences over the common time range.

    Every checkpoint of either series inside the overlap must have a partner
    within ``t_tol``.
    """
    ha, da = read_series(a)
    hb, db = read_series(b)
    ta, tb = da[:, 0], db[:, 0]
    lo, hi = max(ta.min(), tb.min()), min(ta.max(), tb.max())
    ia = np.flatnonzero((ta >= lo - t_tol) & (ta <= hi + t_tol))
    ib = np.flatnonzero((tb >= lo - t_tol) & (tb <= hi + t_tol))
    if ia.size == 0 or ia.size != ib.size or np.max(np.abs(ta[ia] - tb[ib])) > t_tol:
        raise MisalignedError("checkpoint times do not line up")
    cols = list(columns) if columns else [c for c in ha if c in hb and c != "t"]
    report = {"rows": int(ia.size), "t_range": [float(lo), float(hi)], "columns": {}}
    for c in cols:
        if c not in ha or c not in hb:
            raise ConfigError(f"column {c!r} missing from one of the series")
        x, y = da[ia, ha.index(c)], db[ib, hb.index(c)]
        both = np.isfinite(x) & np.isfinite(y)
        diff = np.abs(x[both] - y[both])
        scale = np.maximum(np.abs(x[both]), np.abs(y[both]))
        rel = np.divide(diff, scale, out=np.zeros_like(diff), where=scale > 0)
        report["columns"][c] = {
            "max_abs": float(diff.max()) if diff.size else math.nan,
            "max_rel": float(rel.max()) if rel.size else math.nan,
            "compared": int(both.sum()),
        }
    return report


# -- predictions -----------------------------------------------------------------------

def predicted_kappa(pair: coeffs.CoefficientPair, profile: profiles.Profile) -> float | None:
    """Large-time kappa suggested by the data's boundary behaviour, or None."""
    if isinstance(profile, selfsimilar.SelfSimilarProfile):
        return profile.solution.kappa
    beta0 = getattr(profile, "beta0_limit", None)
    if profile.support_end < 1.0:
        if beta0 is None or pair.phi_superlinear_at_0:
            return None
        slope0 = float(pair.slopes_x(np.array([0.0]))[0][0])
        return 0.0 if beta0 * (1.0 + slope0) < 1.0 else None
    if beta0 is None:
        return None
    if beta0 >= 1.0:
        return coeffs.kappa_zero(pair)
    return (1.0 / beta0 - 1.0 + abs(pair.phi1)) / abs(pair.psi1)


def _matching_stationary(pair, kappa):
    if kappa is None:
        return None
    try:
        return selfsimilar.build_selfsimilar(pair, kappa)
    except CoarsenError:
        return None


def _log_slope(ts, ks, window) -> float:
    t = np.asarray(ts)
    k = np.asarray(ks)
    sel = (t >= window[0] - 1e-12) & (t <= window[1] + 1e-12) & (k > 0)
    if np.count_nonzero(sel) < 2:
        return math.nan
    return float(np.polyfit(t[sel], np.log(k[sel]), 1)[0])


def _finite(v):
    """JSON-safe float."""
    v = float(v)
    return v if math.isfinite(v) else None


# -- runners ---------------------------------------------------------------------------

def _h0_check(profile, probes) -> dict:
    b = profile.support_end
    xs = [x for x in probes if 0.0 <= x < b] + [0.99 * b, 0.999 * b]
    res = profiles.h0_identity_residual(profile, xs)
    return {"value": res, "tol": TOL_H0, "pass": bool(res <= TOL_H0)}


def _run_characteristics(sc: Scenario, pair, profile):
    opts = charsolve.SolverOptions.from_config(
        {**sc.solver, "probe_xs": sc.probes, "tracer_xs": sc.tracers, "cadence": sc.cadence})
    res = charsolve.run(profile, pair, sc.t_end, opts)
    rows = [d.row() for d in res.series]
    kt, kv = res.kappa_history
    series = res.series
    times = np.array([d.t for d in series])
    kappas = np.array([d.kappa for d in series])

    inv = {}
    inv["node_ordering"] = {"pass": all(d.nodes_ordered for d in series)}
    F0 = np.array([d.F0 for d in series])
    inv["F0_monotone"] = {"pass": bool(np.all(np.diff(F0) >= -1e-12) and F0[-1] <= profile.support_end)}
    g_min, decay_ok = math.inf, True
    probes = np.asarray(sc.probes)
    for d in series:
        fin = np.isfinite(d.g)
        if np.any(fin):
            g_min = min(g_min, float(np.min(d.g[fin])))
        outer = fin & (probes >= 0.5)
        gs = d.g[outer]
        if gs.size >= 2 and np.any(np.diff(gs) > TOL_G):
            decay_ok = False
    inv["g_nonnegative"] = {"value": _finite(g_min), "tol": TOL_G,
                            "pass": bool(g_min >= -TOL_G) if math.isfinite(g_min) else True}
    inv["g_boundary_decay"] = {"pass": decay_ok}
    mean_gap = max(abs(d.meanX * d.w0t - 1.0) for d in series)
    inv["meanX_w0"] = {"value": mean_gap, "tol": TOL_MEAN, "pass": bool(mean_gap <= TOL_MEAN)}
    mass_drift = max(abs(d.mass_direct - 1.0) for d in series)
    inv["mass"] = {"value": mass_drift, "tol": TOL_MASS, "pass": bool(mass_drift <= TOL_MASS)}
    tracer_gap = max((abs(b - p) for rows_ in res.tracer_checks for (_, _, b, p) in rows_), default=0.0)
    inv["beta_transport"] = {"value": tracer_gap, "tol": TOL_TRACER, "pass": bool(tracer_gap <= TOL_TRACER),
                             "tracers": len(res.tracers)}
    inv["h0_identity"] = _h0_check(profile, sc.probes)

    extra = {
        "mass_drift": mass_drift,
        "mass_projected_drift": max(abs(d.mass - 1.0) for d in series),
        "kappa_f1_gap": max(abs(d.kappa_f1 - d.kappa) for d in series if math.isfinite(d.kappa_f1)),
        "final_meanX": series[-1].meanX,
        "final_F0": series[-1].F0,
    }
    return rows, times, kappas, (np.asarray(kt), np.asarray(kv)), series, inv, extra


def _quad_times(sc: Scenario) -> tuple[np.ndarray, np.ndarray]:
    chk = checkpoint_times(sc.t_end, sc.cadence)
    fine = np.linspace(0.0, sc.t_end, int(round(20 * sc.t_end)) + 1)
    return chk, np.unique(np.concatenate([chk, fine]))


def _running_avg(t, k):
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (k[1:] + k[:-1]) * np.diff(t))])
    with np.errstate(invalid="ignore", divide="ignore"):
        avg = np.where(t > 0, cum / np.where(t > 0, t, 1.0), k[0])
    return avg


def _run_quadratic_uv(sc: Scenario, pair, profile):
    chk, fine = _quad_times(sc)
    qs = quadmodel.integrate_uv(profile, pair, sc.t_end, t_eval=fine)
    avg = _running_avg(qs.t, qs.kappa)
    idx = np.searchsorted(qs.t, chk - 1e-12)
    nprobe = len(sc.probes)
    rows, F0s = [], []
    b = profile.support_end
    for k in idx:
        st = qs[k]
        F0 = float(quadmodel.closed_form_F(st, pair, 0.0))
        d = b - F0
        w0t = math.exp(st.t + float(profile.ln_w_d(d))) if d > 0 else math.nan
        F0s.append(F0)
        rows.append([st.t, st.kappa, avg[k], 1.0 + st.residual, w0t, 1.0 / w0t, F0,
                     *([math.nan] * (2 * nprobe))])
    co = quadmodel.coefficients(pair)
    inv = {}
    res_max = float(np.max(np.abs(qs.residual)))
    inv["uv_residual"] = {"value": res_max, "tol": TOL_RESIDUAL, "pass": bool(res_max <= TOL_RESIDUAL)}
    a = co.a_of(qs.u, qs.v)
    inv["a_nonnegative"] = {"value": float(a.min()), "pass": bool(a.min() >= -1e-12)}
    inv["v_nondecreasing"] = {"pass": bool(np.all(np.diff(qs.v) >= -1e-12))}
    lower = qs.u - 1.0 + abs(pair.phi1) * qs.v
    inv["u_lower_bound"] = {"value": float(lower.min()), "pass": bool(lower.min() >= -1e-12)}
    inv["F0_monotone"] = {"pass": bool(np.all(np.diff(F0s) >= -1e-12))}
    inv["h0_identity"] = _h0_check(profile, sc.probes)
    extra = {"final_u": float(qs.u[-1]), "final_v": float(qs.v[-1]), "final_meanX": rows[-1][5],
             "final_F0": rows[-1][6]}
    if getattr(profile, "beta0_limit", None) == 1.0:
        cc = quadmodel.critical_constants(pair)
        track = quadmodel.critical_track(profile, pair, sc.t_end, series=qs)
        last = track[-1]
        extra.update(tau=_finite(last["tau"]), tau0=cc.tau0, dy_dt_over_g=_finite(last["dy_dt_over_g"]),
                     limiting_mean=cc.limiting_mean, alpha=cc.alpha, beta_const=cc.beta_const)
        if last["active"]:
            slope, intercept = quadmodel.fit_lag_coefficients(qs[len(qs) - 1], pair,
                                                              xs=tuple(np.linspace(0.0, 0.5, 11)))
            extra.update(lag_slope=slope, lag_intercept=intercept)
    return rows, qs.t[idx], qs.kappa[idx], (qs.t, qs.kappa), None, inv, extra


def _run_quadratic_reduced(sc: Scenario, pair, profile):
    chk, fine = _quad_times(sc)
    rs = quadmodel.integrate_reduced(profile, pair, sc.t_end, t_eval=fine)
    avg = _running_avg(rs.t, rs.kappa)
    idx = np.searchsorted(rs.t, chk - 1e-12)
    nprobe = len(sc.probes)
    rows = [[rs.t[k], rs.kappa[k], avg[k], *([math.nan] * (4 + 2 * nprobe))] for k in idx]
    inv = {
        "xi_nonnegative": {"value": float(rs.xi.min()), "pass": bool(rs.xi.min() >= -1e-12)},
        "eta_in_unit_interval": {"pass": bool(np.all((rs.eta > 0) & (rs.eta <= 1.0 + 1e-12)))},
        "h0_identity": _h0_check(profile, sc.probes),
    }
    extra = {"final_xi": float(rs.xi[-1]), "final_eta": float(rs.eta[-1])}
    return rows, rs.t[idx], rs.kappa[idx], (rs.t, rs.kappa), None, inv, extra


_RUNNERS = {
    "characteristics": _run_characteristics,
    "quadratic_uv": _run_quadratic_uv,
    "quadratic_reduced": _run_quadratic_reduced,
}


def run_scenario(sc: Scenario, out_dir: str | Path | None = None) -> dict:
    """Run one scenario, write its CSV and JSON under ``out_dir`` and return the summary."""
    pair, profile = sc.pair(), sc.profile()
    rows, times, kappas, (kt, kv), diags, inv, extra = _RUNNERS[sc.model](sc, pair, profile)

    k_pred = predicted_kappa(pair, profile)
    late = kt >= min(1.0, sc.t_end)
    summary = {
        "name": sc.name,
        "model": sc.model,
        "pair": pair.describe(),
        "profile": profile.describe() if hasattr(profile, "describe") else sc.profile_spec,
        "t_end": sc.t_end,
        "kappa_initial": float(kappas[0]),
        "kappa_final": float(kappas[-1]),
        "kappa_avg": float(rows[-1][2]),
        "kappa_predicted": k_pred,
        "kappa_zero": coeffs.kappa_zero(pair),
        "kappa_min_after_1": float(np.min(kv[late])),
        "kappa_max_after_1": float(np.max(kv[late])),
        "checkpoints": [{"t": float(t), "kappa": float(k), "kappa_avg": float(r[2])}
                        for t, k, r in zip(times, kappas, rows)],
    }
    summary.update(extra)

    sol = _matching_stationary(pair, k_pred)
    if diags is not None and sol is not None:
        sel = [i for i, x in enumerate(sc.probes) if x <= 0.9]
        final = diags[-1]
        gaps = [abs(final.beta[i] - sol.beta_at(sc.probes[i])) for i in sel if math.isfinite(final.beta[i])]
        summary["beta_sup_gap"] = max(gaps) if gaps else None
        summary["beta_sup_gap_history"] = [
            max((abs(d.beta[i] - sol.beta_at(sc.probes[i])) for i in sel if math.isfinite(d.beta[i])),
                default=None) for d in diags]

    if diags is not None:
        # kappa <= C2(delta) wherever 1 - <X_t> >= delta
        delta = 0.5
        c2 = coeffs.kappa_upper_bound(pair, delta)
        applicable = [d.kappa for d in diags if 1.0 - d.meanX >= delta]
        summary["sandwich"] = {
            "delta": delta, "C2": c2, "checkpoints_applicable": len(applicable),
            "max_kappa_applicable": max(applicable) if applicable else None,
            "pass": bool(all(k <= c2 for k in applicable)),
        }

    window = sc.checks.get("decay_window")
    if window:
        summary["kappa_log_slope"] = _log_slope(kt, kv, window)
        summary["decay_window"] = list(window)
        if profile.support_end < 1.0 and not pair.phi_superlinear_at_0:
            slope0 = float(pair.slopes_x(np.array([0.0]))[0][0])
            summary["predicted_log_slope"] = -(1.0 - profile.beta0_limit * (1.0 + slope0))

    summary["invariants"] = inv
    summary["invariants_pass"] = all(v["pass"] for v in inv.values())

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        emit_series(rows, sc.probes, out / sc.series_path)
        with open(out / sc.summary_path, "w") as fh:
            json.dump(_jsonable(summary), fh, indent=2, sort_keys=True)
            fh.write("\n")
    return summary


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return _finite(obj)
    return obj


def _worker(args):
    path, out_dir = args
    sc = load_scenario(path)
    summary = run_scenario(sc, out_dir)
    return sc.name, bool(summary["invariants_pass"])


def worker_count(n_jobs: int) -> int:
    cap = os.environ.get("COARSENKIT_THREADS")
    limit = int(cap) if cap and cap.isdigit() and int(cap) > 0 else (os.cpu_count() or 1)
    return max(1, min(n_jobs, limit))


def run_many(paths: Sequence[str | Path], out_dir: str | Path) -> list[tuple[str, bool]]:
    jobs = [(str(p), str(out_dir)) for p in paths]
    workers = worker_count(len(jobs))
    if workers == 1:
        return [_worker(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_worker, jobs))


# -- command line ----------------------------------------------------------------------

def _load_json(path):
    with open(path) as fh:
        return json.load(fh)


def _cmd_run(args) -> int:
    results = run_many(args.scenarios, args.out)
    for name, ok in results:
        print(f"{name}: {'ok' if ok else 'INVARIANT FAILURE'}")
    return 0 if all(ok for _, ok in results) else 1


def _cmd_compare(args) -> int:
    cols = args.cols.split(",") if args.cols else None
    report = compare_runs(Path(args.out) / args.a if args.out else args.a,
                          Path(args.out) / args.b if args.out else args.b, cols)
    print(json.dumps(_jsonable(report), indent=2, sort_keys=True))
    return 0


def _cmd_validate(args) -> int:
    pair = coeffs.from_config(_load_json(args.pair))
    report = coeffs.validate_conditions(pair)
    print(json.dumps(_jsonable({"pair": pair.describe(), "passed": report.passed,
                                "checks": report.checks, "details": report.details}),
                     indent=2, sort_keys=True, default=str))
    return 0 if report.passed else 1


def _cmd_selfsim(args) -> int:
    pair = coeffs.from_config(_load_json(args.pair))
    sol = selfsimilar.build_selfsimilar(pair, args.kappa)
    xs = np.concatenate([np.linspace(0.0, 0.9, 91)[:-1], 1.0 - np.geomspace(0.1, 1e-6, 51)])
    lines = ["x,w,beta"] + ["%.17g,%.17g,%.17g" % (x, sol.w(x), sol.beta_at(x)) for x in xs]
    text = "\n".join(lines) + "\n"
    if args.csv:
        target = Path(args.out) / args.csv if args.out else Path(args.csv)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coarsenkit", description=__doc__.split("\n")[0])
    p.add_argument("--out", default=None, help="directory that output paths are relative to")
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="run scenario files")
    r.add_argument("scenarios", nargs="+")
    r.set_defaults(func=_cmd_run)

    c = sub.add_parser("compare", help="diff two series CSV files")
    c.add_argument("a")
    c.add_argument("b")
    c.add_argument("--cols", default=None, help="comma separated column names")
    c.set_defaults(func=_cmd_compare)

    v = sub.add_parser("validate", help="check the structural conditions of a pair")
    v.add_argument("pair")
    v.set_defaults(func=_cmd_validate)

    s = sub.add_parser("selfsim", help="tabulate a stationary profile")
    s.add_argument("pair")
    s.add_argument("--kappa", type=float, required=True)
    s.add_argument("--csv", default=None)
    s.set_defaults(func=_cmd_selfsim)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.cmd == "run" and args.out is None:
        args.out = "."
    try:
        return args.func(args)
    except CoarsenError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
