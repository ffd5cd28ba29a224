"""Batch experiment driver.

A run is described by a JSON config::

    {"subcommand": "check-potential",
     "potential": "potential.json",
     "params": {"delta": 0.1},
     "seed": 0}

``potential`` is a path (relative to the config file) to a JSON potential
as written by :meth:`AnalyticPotential.to_json`, an inline object of the
same shape, or ``{"example": {"n": 2, "s": 1, "delta": 0.1, "radius": 12}}``.
Every subcommand writes ``<subcommand>.json`` (summary, sorted keys) and
``<subcommand>.csv`` (fixed columns, floats with 17 significant digits).

Exit codes: 0 when every check of the run passes, 2 when a check fails,
1 on usage or configuration errors.
"""

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import constants
from .errors import KamresError
from .potential import AnalyticPotential, TrigSeries, example_potential, lattice_projection

log = logging.getLogger("kamres")

SUBCOMMANDS = ("check-potential", "resonance-atlas", "normal-form", "action-profile",
               "structure-pipeline", "twist-scan", "kam-budget")
OUT_ENV = "KAMRES_OUT"
FORMATS = ("csv", "json", "both")

# Parameters that must be strictly positive when present (as must every ``*_tol``).
POSITIVE = ("epsilon", "delta", "theta", "mu", "tol", "K", "Kbig", "alpha", "r",
            "samples", "angles", "count", "radius")
DECOUPLED = ("K", "Kbig", "alpha")


class UsageError(Exception):
    pass


@dataclass
class ExperimentConfig:
    subcommand: str
    potential: object = None
    params: dict = field(default_factory=dict)
    seed: int = 0
    workers: int = 1
    out: str = None
    format: str = "both"
    base_dir: str = "."

    @property
    def n(self):
        if "n" in self.params:
            return int(self.params["n"])
        return self.potential.n if self.potential is not None else 2

    def get(self, key, default=None):
        return self.params.get(key, default)


def _defaults(n):
    return {"nu": n + 2, "theta": 1e-2, "mu": 1e-2, "samples": 100000, "delta": 0.1,
            "tol": 1e-10}


def _load_potential(spec, base_dir):
    if spec is None:
        return None
    if isinstance(spec, str):
        path = Path(spec)
        if not path.is_absolute():
            path = Path(base_dir) / path
        try:
            spec = json.loads(path.read_text())
        except OSError as exc:
            raise UsageError(f"cannot read potential {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"malformed potential JSON {path}: {exc}") from None
    if not isinstance(spec, dict):
        raise UsageError("potential must be a path or an object")
    if "example" in spec:
        e = spec["example"]
        return example_potential(int(e.get("n", 2)), float(e.get("s", 1.0)),
                                 float(e.get("delta", 0.1)), int(e["radius"]))
    try:
        return AnalyticPotential.from_json(spec)
    except (KamresError, KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"invalid potential: {exc}") from None


def load_config(path=None, data=None, base_dir="."):
    """Parse, default and validate a config; every offending field is reported.

    Either ``path`` or an already parsed ``data`` object is given; relative
    potential paths resolve against ``base_dir`` (the config's directory).
    """
    if data is None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"malformed config JSON: {exc}") from None
        base_dir = str(Path(path).parent)
    if not isinstance(data, dict):
        raise UsageError("config must be a JSON object")
    bad = []
    sub = data.get("subcommand")
    if sub not in SUBCOMMANDS:
        bad.append(f"subcommand (unknown {sub!r}; expected one of {', '.join(SUBCOMMANDS)})")
    params = data.get("params", {})
    if not isinstance(params, dict):
        bad.append("params (must be an object)")
        params = {}
    for key in [k for k in params if k in POSITIVE or k.endswith("_tol")]:
        v = params.get(key)
        if v is not None and not (isinstance(v, (int, float)) and not isinstance(v, bool)
                                  and v > 0):
            bad.append(f"params.{key} (must be positive, got {v!r})")
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2 ** 64:
        bad.append(f"seed (must be an unsigned 64-bit integer, got {seed!r})")
    workers = data.get("workers", 1)
    if not isinstance(workers, int) or workers < 1:
        bad.append(f"workers (must be a positive integer, got {workers!r})")
    fmt = data.get("format", "both")
    if fmt not in FORMATS:
        bad.append(f"format (must be csv, json or both, got {fmt!r})")
    if bad:
        raise UsageError("invalid config: " + "; ".join(bad))
    cfg = ExperimentConfig(subcommand=sub, params=dict(params), seed=seed, workers=workers,
                           out=data.get("out"), format=fmt, base_dir=base_dir)
    cfg.potential = _load_potential(data.get("potential"), base_dir)
    for key, v in _defaults(cfg.n).items():
        cfg.params.setdefault(key, v)
    if cfg.params.get("epsilon") is not None and any(k in params for k in DECOUPLED):
        log.warning("both epsilon and decoupled zone parameters given; "
                    "the decoupled values K, Kbig, alpha take precedence")
        cfg.params["zone_mode"] = "decoupled"
    return cfg


# ---------------------------------------------------------------------------
# report emission

def _cell(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None:
        return ""
    if isinstance(v, (tuple, list)):
        return " ".join(_cell(x) for x in v)
    return str(v)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k) if not isinstance(k, tuple) else " ".join(map(str, k)): _jsonable(v)
                for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating,)):
        obj = float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, Fraction):
        return str(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return "inf" if obj > 0 else ("-inf" if obj < 0 else "nan")
    return obj


def csv_text(columns, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        if isinstance(row, dict):
            row = [row.get(c) for c in columns]
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def json_text(summary):
    return json.dumps(_jsonable(summary), sort_keys=True, indent=2, allow_nan=False) + "\n"


def emit_report(results, out_dir, name, fmt="both"):
    """Write ``name.csv`` and/or ``name.json`` into ``out_dir``; returns the paths.

    ``results`` holds ``summary`` (any JSON-able object), ``columns`` and
    ``rows`` (lists or dicts keyed by column).
    """
    if fmt not in FORMATS:
        raise UsageError(f"unknown format {fmt!r}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from None
    paths = []
    items = []
    if fmt in ("csv", "both"):
        items.append((out / f"{name}.csv", csv_text(results["columns"], results["rows"])))
    if fmt in ("json", "both"):
        items.append((out / f"{name}.json", json_text(results["summary"])))
    for path, text in items:
        try:
            path.write_text(text)
        except OSError as exc:
            raise UsageError(f"cannot write {path}: {exc}") from None
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# subcommands; each returns (passed, results)

def _need_potential(cfg):
    if cfg.potential is None:
        raise UsageError(f"{cfg.subcommand} needs a potential")
    return cfg.potential


def _vector(cfg, key, default=None):
    v = cfg.get(key, default)
    if v is None:
        raise UsageError(f"params.{key} is required for {cfg.subcommand}")
    return tuple(int(x) for x in v)


def _domain(cfg):
    from .normalform import Box
    d = cfg.get("domain")
    if d is None:
        raise UsageError(f"params.domain ([lo, hi]) is required for {cfg.subcommand}")
    try:
        return Box(list(map(float, d[0])), list(map(float, d[1])))
    except (KamresError, TypeError, ValueError, IndexError) as exc:
        raise UsageError(f"invalid params.domain: {exc}") from None


def _zone_params(cfg):
    from .zones import decoupled_params, params_from_epsilon
    n = cfg.n
    if all(cfg.get(k) is not None for k in DECOUPLED):
        return decoupled_params(n, cfg.get("K"), cfg.get("Kbig"), cfg.get("alpha"),
                                cfg.get("nu"))
    if cfg.get("epsilon") is None:
        raise UsageError("zone parameters need epsilon or all of K, Kbig, alpha")
    return params_from_epsilon(cfg.get("epsilon"), cfg.get("nu"), n)


def run_check_potential(cfg):
    from .potential import check_genericity
    f = _need_potential(cfg)
    rep = check_genericity(f, cfg.get("delta"), c=constants.GENERICITY_C)
    rows = []
    for k, d in rep.details.items():
        rows.append({"k": k, "derivative_floor": d.get("derivative_floor"),
                     "energy_gap": d.get("energy_gap")})
    summary = {"potential": f.to_json(), "report": rep.to_json()}
    return rep.passed, {"summary": summary, "columns": ["k", "derivative_floor", "energy_gap"],
                        "rows": rows}


def run_resonance_atlas(cfg):
    from .zones import atlas_rows, covering_check
    params = _zone_params(cfg)
    if params.enumeration_size > 10 ** 7:
        raise UsageError(f"zone enumeration too large ({params.enumeration_size} vectors)")
    N = int(cfg.get("samples"))
    rep = covering_check(params, N, seed=cfg.seed, strict=False, workers=cfg.workers)
    rows = atlas_rows(params, int(cfg.get("atlas_rows", min(N, 2000))), seed=cfg.seed)
    n = params.n
    cols = [f"y{i + 1}" for i in range(n)] + ["zone", "witness_k", "min_resonance_value"]
    summary = {"params": params.to_json(), "covering": rep.to_json(), "seed": cfg.seed}
    return rep.violations == 0, {"summary": summary, "columns": cols, "rows": rows}


def run_normal_form(cfg):
    from .normalform import Hamiltonian, Quadratic, StateFunction, normal_form_iterate
    f = _need_potential(cfg)
    k = _vector(cfg, "k")
    eps = cfg.get("epsilon")
    if eps is None:
        raise UsageError("params.epsilon is required for normal-form")
    h = Quadratic.identity(f.n)
    H = Hamiltonian(h, StateFunction.from_potential(h, f, eps))
    rep = normal_form_iterate(H, k, cfg.get("alpha"), float(cfg.get("cutoff", 2)), _domain(cfg),
                              float(cfg.get("r", 0.1)), f.s)
    cols = ["step", "theta", "f_norm", "fK_norm", "fstar_norm", "bound", "holds", "orders",
            "terms", "dropped"]
    rows = [[i, s.theta, s.f_norm, s.fK_norm, s.fstar_norm.inflated, s.bound, s.holds,
             s.orders, s.terms, s.dropped] for i, s in enumerate(rep.step_reports)]
    return rep.bounds_hold, {"summary": rep.to_json(), "columns": cols, "rows": rows}


def _profile(cfg):
    """The pendulum profile: ``-cos`` by default, else the lattice projection."""
    f = cfg.potential
    if f is None:
        return TrigSeries.cos(-1.0), 1.0
    if f.n == 1:
        return TrigSeries({k[0]: c for k, c in f.coeffs.items()}), f.s
    k = _vector(cfg, "k")
    return lattice_projection(f, k).series, f.s


def run_action_profile(cfg):
    from .pendulum import ActionBranch, PendulumSystem, action_profile_rows
    F0, s0 = _profile(cfg)
    system = PendulumSystem(F0=F0, s0=s0)
    npts = int(cfg.get("points", 9))
    span = float(cfg.get("rotation_span", 4.0))
    energies = {}
    edges = []
    for i in range(2 * system.N + 1):
        br = ActionBranch(system, i)
        lo, hi = br.window()
        a = lo if math.isfinite(lo) else hi - span
        b = hi if math.isfinite(hi) else lo + span
        energies[i] = list(a + (b - a) * (np.arange(1, npts + 1) / (npts + 1)))
        edges.extend((i, E) for E in (lo, hi) if math.isfinite(E))
    rows = [dict(r, kind="interior") for r in action_profile_rows(system, energies)]
    for i, E in edges:
        # action at a separatrix energy: the finite limit of the branch
        br = ActionBranch(system, i)
        rows.append({"branch": i, "E": float(E), "P": br.action(E), "dPdE": math.inf,
                     "in_window": False, "kind": "separatrix"})
    rows.sort(key=lambda r: (r["branch"], r["E"]))
    ok = all(math.isfinite(r["P"]) for r in rows)
    cols = ["branch", "kind", "E", "P", "dPdE", "in_window"]
    summary = {"profile": F0.to_json(), "critical_points": list(map(float, system.x0)),
               "critical_values": list(map(float, system.E0)), "rows": len(rows)}
    return ok, {"summary": summary, "columns": cols, "rows": rows}


def _pipeline_branch(args):
    cfg_data, base_dir, index = args
    cfg = load_config(data=cfg_data, base_dir=base_dir)
    return _pipeline_one(cfg, _effective(cfg), index)


def _effective(cfg):
    from .structure import effective_hamiltonian
    f = _need_potential(cfg)
    k = _vector(cfg, "k")
    eps = cfg.get("epsilon")
    if eps is None:
        raise UsageError("params.epsilon is required for structure-pipeline")
    return effective_hamiltonian(f, k, eps, float(cfg.get("delta_k", 1.0)), _domain(cfg),
                                 float(cfg.get("r", 0.1)), f.s, float(cfg.get("cutoff", 2)),
                                 alpha=cfg.get("alpha"))


def _pipeline_one(cfg, eff, index):
    from .structure import (IntegratedChart, action_grid, chart_jacobian, symplectic_defect,
                            verify_integrated)
    chart = IntegratedChart(eff, index, theta=cfg.get("theta"))
    grid = action_grid(chart, n_hat=int(cfg.get("grid_hat", 3)), n_act=int(cfg.get("grid_act", 7)))
    rep = verify_integrated(chart, grid, n_angles=int(cfg.get("angles", 64)), seed=cfg.seed,
                            hessian=False)
    rng = np.random.default_rng(cfg.seed)
    p = grid[len(grid) // 2]
    q = rng.uniform(0, 2 * np.pi, len(p))
    sym = symplectic_defect(chart_jacobian(chart, p, q))
    return {"branch": index, "kind": chart.kind, **rep.to_json(), "symplectic_defect": sym,
            "grid_points": len(grid)}


def run_structure_pipeline(cfg):
    from .potential import morse_analyze
    from .structure import cippa_check, hans_check
    eff = _effective(cfg)
    branches = cfg.get("branches")
    if branches is None:
        branches = list(range(2 * morse_analyze(eff.F0, eff.s0).N + 1))
    tol_sym = float(cfg.get("symplectic_tol", 1e-7))
    if cfg.workers > 1 and len(branches) > 1:
        data = {"subcommand": cfg.subcommand, "potential": cfg.potential.to_json(),
                "params": {k: v for k, v in cfg.params.items() if k != "zone_mode"},
                "seed": cfg.seed}
        with ProcessPoolExecutor(max_workers=min(cfg.workers, len(branches))) as pool:
            rows = list(pool.map(_pipeline_branch,
                                 [(data, cfg.base_dir, i) for i in branches]))
    else:
        rows = [_pipeline_one(cfg, eff, i) for i in branches]
    rng = np.random.default_rng(cfg.seed)
    L = eff.L
    M = rng.normal(size=(eff.frame.n, eff.frame.n))
    M = M + M.T
    cippa = cippa_check(L, lambda y: M + np.diag(np.sin(y)), rng.normal(size=eff.frame.n))
    hans = hans_check()
    tol = cfg.get("tol")
    ok = (all(r["passed"] and r["symplectic_defect"] <= tol_sym for r in rows)
          and cippa <= tol and max(hans.values()) <= tol)
    cols = ["branch", "kind", "grid_points", "spread", "spread_full", "budget",
            "remainder_norm", "closure", "symplectic_defect", "passed"]
    summary = {"effective_hamiltonian": eff.to_json(), "branches": rows,
               "cippa": cippa, "hans": hans, "symplectic_tol": tol_sym, "identity_tol": tol}
    return ok, {"summary": summary, "columns": cols, "rows": rows}


def run_twist_scan(cfg):
    from .kamtwist import twist_baseline, twist_reference
    from .lattice import build_frame, is_primitive, normalize_generator
    n = cfg.n
    count = int(cfg.get("count", 100))
    radius = int(cfg.get("radius", 30))
    rng = np.random.default_rng(cfg.seed)
    rows = []
    while len(rows) < count:
        k = tuple(int(v) for v in rng.integers(-radius, radius + 1, n))
        if not any(k) or not is_primitive(k):
            continue
        k = normalize_generator(k)[0]
        fr = build_frame(k)
        det = twist_baseline(fr)
        expected = Fraction(2 ** n, fr.kappa ** n)
        rows.append({"k": k, "kappa": fr.kappa, "det": str(det), "expected": str(expected),
                     "match": det == expected})
    ok = all(r["match"] for r in rows)
    summary = {"n": n, "count": count, "radius": radius, "seed": cfg.seed,
               "mismatches": sum(not r["match"] for r in rows),
               "reference": twist_reference(n)}
    return ok, {"summary": summary, "columns": ["k", "kappa", "det", "expected", "match"],
                "rows": rows}


def run_kam_budget(cfg):
    from .kamtwist import nontorus_budget
    n = cfg.n
    eps_list = cfg.get("epsilons") or [cfg.get("epsilon", 1e-40)]
    nu = cfg.params.get("budget_nu")
    reports = []
    for e in eps_list:
        rep = nontorus_budget(float(e), n=n, s=float(cfg.get("s", 1.0)), nu=nu,
                              delta=float(cfg.get("delta_k", 1.0)), strict=False)
        reports.append(rep.to_json())
    totals = [r["log_total"] for r in reports]
    ok = all(math.isfinite(t) for t in totals) and all(
        a > b for a, b in zip(totals, totals[1:]))
    cols = ["epsilon", "log_total", "exponent_a", "log_omega0_remainder", "log_omega1_sum",
            "log_omega2_bound", "conditions_passed"]
    rows = [{**r, "conditions_passed": all(c["ok"] for c in r["conditions"].values())}
            for r in reports]
    return ok, {"summary": {"n": n, "budgets": reports, "decreasing": ok},
                "columns": cols, "rows": rows}


RUNNERS = {
    "check-potential": run_check_potential,
    "resonance-atlas": run_resonance_atlas,
    "normal-form": run_normal_form,
    "action-profile": run_action_profile,
    "structure-pipeline": run_structure_pipeline,
    "twist-scan": run_twist_scan,
    "kam-budget": run_kam_budget,
}


def dispatch(cfg):
    """Run the configured subcommand and write its reports; returns the exit code."""
    runner = RUNNERS.get(cfg.subcommand)
    if runner is None:
        raise UsageError(f"unknown subcommand {cfg.subcommand!r}")
    out = cfg.out or os.environ.get(OUT_ENV) or "kamres_out"
    try:
        passed, results = runner(cfg)
    except KamresError as exc:
        log.error("%s failed: %s", cfg.subcommand, exc)
        results = {"summary": {"error": type(exc).__name__, "message": str(exc)},
                   "columns": ["error"], "rows": []}
        passed = False
    results["summary"] = {"subcommand": cfg.subcommand, "passed": bool(passed),
                          "constants_version": constants.VERSION,
                          "config": {"params": cfg.params, "seed": cfg.seed},
                          "result": results["summary"]}
    emit_report(results, out, cfg.subcommand, cfg.format)
    return 0 if passed else 2


def build_parser():
    p = argparse.ArgumentParser(prog="kamres", description=__doc__.split("\n")[0])
    p.add_argument("subcommand", nargs="?", help="overrides the config subcommand")
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--seed", type=int, help="RNG seed (unsigned 64-bit)")
    p.add_argument("--workers", type=int, help="worker processes")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./kamres_out)")
    p.add_argument("--format", choices=FORMATS, help="report formats")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config:
            try:
                data = json.loads(Path(args.config).read_text())
            except OSError as exc:
                raise UsageError(f"cannot read config {args.config}: {exc}") from None
            except json.JSONDecodeError as exc:
                raise UsageError(f"malformed config JSON: {exc}") from None
            base = str(Path(args.config).parent)
        elif args.subcommand:
            data, base = {}, "."
        else:
            raise UsageError("give a subcommand or --config")
        if not isinstance(data, dict):
            raise UsageError("config must be a JSON object")
        for key in ("subcommand", "seed", "workers", "out", "format"):
            v = getattr(args, key)
            if v is not None:
                data[key] = v
        return dispatch(load_config(data=data, base_dir=base))
    except UsageError as exc:
        print(f"kamres: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
