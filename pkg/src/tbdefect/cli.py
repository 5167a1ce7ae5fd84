"""Command-line front end.

Every subcommand takes an optional JSON run configuration (see
``DEFAULT_CONFIG``), writes its artifacts to the output directory, and exits
with 0 (all tolerances met), 2 (bad configuration or domain error), 3 (solver
did not converge) or 4 (a tolerance or rate check failed).
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dislocation import SCREW_PARAMS, ScrewDislocation
from .equilibrium import NonConvergenceError
from .lattice import BravaisLattice, DefectKind
from .model import ModelParams, QoIKind
from .observables import fermi_level_bloch, fermi_level_supercell
from .studies import (TRIANGULAR, PointDefectSetup, RecordLog, count_insensitivity_study,
                      decay_profile, displacement_convergence_study, dislocation_study,
                      ensemble_equivalence_study, format_value, identity_suite, invariance_suite,
                      locality_probe, mu_convergence_study, pointwise_limit_probe)

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_TOLERANCE = 0, 2, 3, 4

DEFAULT_CONFIG = {
    "schema_version": SCHEMA_VERSION,
    "model": {},
    "lattice": {"type": "chain", "A": None},
    "defect": {"kind": "vacancy", "position": None},
    "bc": {"type": "clamped", "buffer_c": None, "buffer_min": None},
    "study": {"R": [10, 20, 40, 80, 160], "ne_offset": 0.0, "gamma": 1.0, "discard": 2,
              "R_ref": None, "Ne": None, "mode": "canonical", "tau": None},
    "fermi": {"n_k": 16, "sizes": None, "tol": 1e-6},
    "locality": {"n_sites": 80, "site": 40, "kind": "number", "periodic": True,
                 "R": [8, 16, 24, 32, 40, 48, 64, 80]},
    "dislocation": {"b3": 2.0, "core": [0.5, math.sqrt(3.0) / 6.0], "r_core": 2.0,
                    "R": [8, 12, 16, 22], "R_b": 2.0},
    "output": "tbdefect-out",
    "seed": 0,
}

LATTICES = {"chain": lambda: np.eye(1), "square": lambda: np.eye(2),
            "triangular": lambda: TRIANGULAR.copy()}


class ConfigError(ValueError):
    """The run configuration failed validation."""


def _merge(defaults: dict, given: dict, path: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        where = f"{path}{key}"
        if key not in defaults:
            raise ConfigError(f"unknown key {where!r}")
        if key == "model":
            if not isinstance(value, dict):
                raise ConfigError("'model' must be a table")
            out[key] = dict(value)
        elif isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be a table")
            out[key] = _merge(defaults[key], value, where + ".")
        else:
            out[key] = value
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Read, merge with defaults and validate a JSON run configuration."""
    given = {}
    if path is not None:
        try:
            given = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        if not isinstance(given, dict):
            raise ConfigError("config must be a JSON object")
    cfg = _merge(DEFAULT_CONFIG, given)
    if overrides:
        cfg = _merge(cfg, overrides)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    if cfg["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}")
    try:
        ModelParams.from_dict(cfg["model"])
    except (KeyError, TypeError, ValueError) as err:
        raise ConfigError(f"model: {err}") from err
    lat = cfg["lattice"]
    if lat["type"] not in LATTICES and lat["A"] is None:
        raise ConfigError(f"lattice.type must be one of {sorted(LATTICES)} or give lattice.A")
    if cfg["defect"]["kind"] not in ("vacancy", "interstitial", "none"):
        raise ConfigError("defect.kind must be vacancy, interstitial or none")
    if cfg["bc"]["type"] not in ("clamped", "torus"):
        raise ConfigError("bc.type must be clamped or torus")
    st = cfg["study"]
    Rs = st["R"]
    if not (isinstance(Rs, list) and Rs and all(isinstance(r, (int, float)) and r > 0 for r in Rs)):
        raise ConfigError("study.R must be a non-empty list of positive numbers")
    if any(b <= a for a, b in zip(Rs, Rs[1:])):
        raise ConfigError("study.R must be strictly increasing")
    if st["mode"] not in ("canonical", "grand"):
        raise ConfigError("study.mode must be canonical or grand")
    if not st["gamma"] > 0:
        raise ConfigError("study.gamma must be positive")
    try:
        QoIKind.parse(cfg["locality"]["kind"])
    except (KeyError, ValueError) as err:
        raise ConfigError(f"locality.kind: {err}") from err


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------

def _lattice(cfg) -> BravaisLattice:
    lat = cfg["lattice"]
    A = np.array(lat["A"], float) if lat["A"] is not None else LATTICES[lat["type"]]()
    return BravaisLattice(np.atleast_2d(A))


def _params(cfg, default: ModelParams | None = None) -> ModelParams:
    base = (default or ModelParams()).as_dict()
    base.update(cfg["model"])
    return ModelParams.from_dict(base)


def _defect(cfg, dim: int) -> DefectKind:
    d = cfg["defect"]
    pos = d["position"] if d["position"] is not None else [0.0] * dim
    if d["kind"] == "vacancy":
        return DefectKind.vacancy(pos)
    if d["kind"] == "interstitial":
        return DefectKind.interstitial(pos)
    return DefectKind()


def build_setup(cfg) -> PointDefectSetup:
    lat = _lattice(cfg)
    kw = {k: v for k, v in cfg["bc"].items() if k != "type" and v is not None}
    kw["bc"] = cfg["bc"]["type"]
    kw["gamma"] = float(cfg["study"]["gamma"])
    # 2D: a fixed two-site buffer and a smaller force-constant torus
    defaults = dict(buffer_c=0.0, buffer_min=2.0, fc_cells=24, fc_radius=8.0) if lat.dim == 2 else {}
    return PointDefectSetup(lat, _params(cfg), _defect(cfg, lat.dim), **{**defaults, **kw})


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------

class Run:
    """Output directory plus the provenance header shared by every artifact."""

    def __init__(self, cfg: dict, out: str | None = None):
        self.cfg = cfg
        self.dir = Path(out or cfg["output"])
        self.dir.mkdir(parents=True, exist_ok=True)
        self.header = [f"tbdefect {__version__} config {config_hash(cfg)}"]

    def path(self, name: str) -> Path:
        return self.dir / name

    def log(self, name: str, extra=()) -> RecordLog:
        return RecordLog(self.path(name), self.header + list(extra))

    def table(self, name: str, columns, rows, extra=()) -> Path:
        p = self.path(name)
        with open(p, "w", newline="") as fh:
            for line in self.header + list(extra):
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(columns)
            for row in rows:
                w.writerow([format_value(v) for v in row])
        return p

    def summary(self, name: str, payload: dict) -> Path:
        p = self.path(name)
        body = {"version": __version__, "config_hash": config_hash(self.cfg), **payload}
        p.write_text(json.dumps(_jsonable(body), indent=2, sort_keys=True) + "\n")
        return p


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return None if not math.isfinite(float(x)) else float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def _status(ok: bool) -> int:
    return EXIT_OK if ok else EXIT_TOLERANCE


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_fermi_level(cfg, run: Run, workers: int = 1) -> int:
    p, lat = _params(cfg), _lattice(cfg)
    f = cfg["fermi"]
    sizes = f["sizes"] or ([64, 128, 256, 512, 1024, 2048] if lat.dim == 1 else [16, 32, 64, 128, 256])
    bloch = fermi_level_bloch(p, lat.A, n_k=int(f["n_k"]), tol=1e-12)
    cell = fermi_level_supercell(p, lat.A, sizes)
    diff = abs(bloch.mu_hom - cell.mu_hom)
    ok = diff <= float(f["tol"])
    run.table("fermi_level.csv", ["method", "resolution", "mu"],
              [("bloch", n, m) for n, m in bloch.history] +
              [("supercell", n, m) for n, m in cell.history])
    run.summary("fermi_level.json", {"study": "fermi-level", "mu_bloch": bloch.mu_hom,
                                     "mu_supercell": cell.mu_hom, "difference": diff,
                                     "tolerance": f["tol"], "pass": ok})
    print(f"mu_hom bloch {bloch.mu_hom:.15g} supercell {cell.mu_hom:.15g} diff {diff:.3g}")
    return _status(ok)


def cmd_relax(cfg, run: Run, workers: int = 1) -> int:
    setup = build_setup(cfg)
    st = cfg["study"]
    R = float(st["R"][-1])
    ne_offset = 0.0
    if st["Ne"] is not None:
        ne_offset = float(st["Ne"]) - setup.configuration(R).n_sites
    config, sol = setup.solve(R, st["mode"], ne_offset + float(st["ne_offset"]), st["tau"])
    relaxed = config.with_u(sol.u)
    relaxed.write_table(run.path("relaxed.csv"))
    run.summary("relax.json", {"study": "relax", "R": R, "n_sites": config.n_sites,
                               "mode": st["mode"], "mu": sol.mu, "mu_hom": setup.mu_hom,
                               "force_residual": sol.force_residual,
                               "count_residual": sol.count_residual,
                               "iterations": sol.iterations, "pass": True})
    print(f"relaxed R={R:g} N={config.n_sites} mu={sol.mu} iterations={sol.iterations}")
    return EXIT_OK


def _finish_study(run: Run, stem: str, res) -> int:
    run.summary(f"{stem}.json", res.summary())
    fit = res.fit
    slope = "n/a" if fit is None else f"{fit.slope:.3f} (r={fit.correlation:.3f})"
    print(f"{res.name}: fitted slope {slope}, theory {res.rate_theory}, "
          f"threshold {res.threshold}, {'PASS' if res.passed else 'FAIL'}")
    if res.error is not None:
        print(f"solver failure: {res.error}", file=sys.stderr)
        return EXIT_SOLVER
    return _status(res.passed)


def _study_extra(res_theory: float, threshold: float):
    return [f"rate_theory {res_theory!r}", f"threshold {threshold!r}"]


def cmd_mu_study(cfg, run: Run, workers: int = 1) -> int:
    setup = build_setup(cfg)
    st = cfg["study"]
    log = run.log("mu_study.csv", _study_extra(setup.rate_theory, setup.mu_threshold))
    res = mu_convergence_study(setup, st["R"], float(st["ne_offset"]), int(st["discard"]),
                               log=log, workers=workers)
    return _finish_study(run, "mu_study", res)


def cmd_disp_study(cfg, run: Run, workers: int = 1, kind: str = "self") -> int:
    setup = build_setup(cfg)
    st = cfg["study"]
    threshold = -0.35 if kind != "count" else setup.mu_threshold
    log = run.log(f"disp_{kind}.csv", _study_extra(setup.rate_theory, threshold))
    if kind == "self":
        res = displacement_convergence_study(setup, st["R"], st["R_ref"], int(st["discard"]),
                                             log=log, workers=workers)
    elif kind == "ensemble":
        res = ensemble_equivalence_study(setup, st["R"], int(st["discard"]), log=log,
                                         workers=workers)
    else:
        res = count_insensitivity_study(setup, st["R"], float(st["ne_offset"]) or -2.0,
                                        int(st["discard"]), threshold, log=log,
                                        workers=workers)[0]
    code = _finish_study(run, f"disp_{kind}", res)
    if kind == "self" and res.error is None:
        config, sol = setup.solve(st["R"][-1])
        sites = config.sites.reshape(len(config.sites), -1)
        r, strain, fit = decay_profile(sites, sol.u, setup.gamma, r_max=st["R"][-1] / 2)
        run.table("decay_profile.csv", ["r", "value"], zip(r, strain),
                  [f"rate_theory {-float(setup.dim)!r}", f"fitted {fit.slope!r}"])
        print(f"far-field decay slope {fit.slope:.3f} (theory {-setup.dim})")
    return code


def cmd_locality(cfg, run: Run, workers: int = 1) -> int:
    p = _params(cfg)
    loc = cfg["locality"]
    kind = QoIKind.parse(loc["kind"])
    n = int(loc["n_sites"])
    y = np.arange(float(n))[:, None]
    periods = [[float(n)]] if loc["periodic"] else None
    table = locality_probe(y, p, int(loc["site"]), kind, periods=periods)
    run.table("locality.csv", ["r", "value"], zip(table.r, table.values),
              [f"decay_rate {table.rate!r}"])
    values, limit = pointwise_limit_probe(BravaisLattice.cubic(1), p, loc["R"], kind)
    run.table("pointwise.csv", ["r", "value"], zip(limit.r, limit.values),
              [f"decay_rate {limit.rate!r}"])
    ok = (table.rate > 0 and table.fit.correlation >= 0.95 and limit.fit.correlation >= 0.95)
    run.summary("locality.json", {"study": "locality", "gamma_fit": table.rate,
                                  "correlation": table.fit.correlation,
                                  "pointwise_rate": limit.rate,
                                  "pointwise_correlation": limit.fit.correlation,
                                  "pass": ok})
    print(f"locality gamma_fit {table.rate:.4f} r={table.fit.correlation:.4f}; "
          f"pointwise rate {limit.rate:.4f} r={limit.fit.correlation:.4f}")
    return _status(ok)


def cmd_identities(cfg, run: Run, workers: int = 1) -> int:
    p = _params(cfg)
    checks = identity_suite(p, seed=int(cfg["seed"])) + invariance_suite(p, seed=int(cfg["seed"]))
    run.table("identities.csv", ["check", "value", "tolerance", "pass"],
              [(c.name, c.value, c.tol, c.passed) for c in checks])
    ok = all(c.passed for c in checks)
    run.summary("identities.json", {"study": "identities", "n_checks": len(checks),
                                    "failed": [c.name for c in checks if not c.passed],
                                    "pass": ok})
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.value:.3g} (tol {c.tol:g})")
    return _status(ok)


def cmd_dislocation(cfg, run: Run, workers: int = 1) -> int:
    d = cfg["dislocation"]
    disl = ScrewDislocation(b3=float(d["b3"]), core=tuple(d["core"]), r_core=float(d["r_core"]))
    p = _params(cfg, SCREW_PARAMS)
    log = run.log("dislocation.csv", _study_extra(-1.0, -0.8))
    out = dislocation_study(d["R"], disl, p, float(d["R_b"]), float(cfg["study"]["gamma"]), log=log)
    checks = {
        "slip_invariance": out.slip_gap <= 1e-8,
        "predictor_decay": abs(out.predictor_fit.slope + 1.0) <= 0.2,
        "mu_convergence": out.mu.passed,
        "relaxed_decay": out.relaxed_fit is not None and out.relaxed_fit.slope <= -1.6,
    }
    ok = all(checks.values())
    run.summary("dislocation.json", {
        **out.mu.summary(), "study": "dislocation", "mu_hom": out.mu_hom,
        "slip_gap": out.slip_gap, "predictor_slope": out.predictor_fit.slope,
        "relaxed_slope": None if out.relaxed_fit is None else out.relaxed_fit.slope,
        "checks": checks, "pass": ok})
    print(f"slip gap {out.slip_gap:.3g}; predictor slope {out.predictor_fit.slope:.3f}; "
          f"mu slope {out.mu.fit.slope if out.mu.fit else float('nan'):.3f}; relaxed slope "
          f"{out.relaxed_fit.slope if out.relaxed_fit else float('nan'):.3f}")
    if out.mu.error is not None:
        return EXIT_SOLVER
    return _status(ok)


# ---------------------------------------------------------------------------
# Plot scripts
# ---------------------------------------------------------------------------

_STUDY_PLOT = '''import csv
import matplotlib.pyplot as plt

rows = list(csv.DictReader(l for l in open({csv!r}) if not l.startswith("#")))
R = [float(r["R"]) for r in rows]
y = [float(r[{col!r}]) for r in rows]
plt.loglog(R, y, "o-", label={col!r})
guide = [y[0] * (x / R[0]) ** ({rate!r}) for x in R]
plt.loglog(R, guide, "k--", label="slope {rate:g}")
plt.xlabel("R")
plt.ylabel({col!r})
plt.legend()
plt.savefig({png!r}, dpi=150)
'''

_DECAY_PLOT = '''import csv
import matplotlib.pyplot as plt

rows = list(csv.DictReader(l for l in open({csv!r}) if not l.startswith("#")))
r = [float(x["r"]) for x in rows]
v = [abs(float(x["value"])) for x in rows]
plt.{axes}(r, v, "o", ms=3)
plt.xlabel("r")
plt.ylabel("|value|")
plt.savefig({png!r}, dpi=150)
'''


def _read_csv(path: Path):
    meta, lines = {}, []
    for line in path.read_text().splitlines():
        if line.startswith("#"):
            parts = line[1:].split()
            if len(parts) == 2:
                meta[parts[0]] = parts[1]
        elif line.strip():
            lines.append(line)
    if not lines:
        raise ValueError(f"{path}: no header row")
    rows = list(csv.DictReader(lines))
    if not rows:
        raise ValueError(f"{path}: no data rows, refusing to plot")
    return meta, rows[0].keys(), rows


def emit_plots(paths, out_dir=None) -> list:
    """Write one standalone matplotlib script per CSV; returns the script paths."""
    scripts = []
    for path in map(Path, paths):
        meta, cols, _ = _read_csv(path)
        target = Path(out_dir) if out_dir else path.parent
        png = str(path.with_suffix(".png").name)
        if "R" in cols:
            col = "du_error" if path.stem.startswith("disp_") else "mu_error"
            if col not in cols or "rate_theory" not in meta:
                raise ValueError(f"{path}: needs columns R, {col} and a rate_theory header")
            body = _STUDY_PLOT.format(csv=str(path.resolve()), col=col,
                                      rate=float(meta["rate_theory"]), png=png)
        elif {"r", "value"} <= set(cols):
            axes = "semilogy" if "decay_rate" in meta else "loglog"
            body = _DECAY_PLOT.format(csv=str(path.resolve()), axes=axes, png=png)
        else:
            raise ValueError(f"{path}: missing columns for any known plot")
        script = target / f"plot_{path.stem}.py"
        script.write_text(body)
        scripts.append(script)
    return scripts


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

COMMANDS = {
    "fermi-level": cmd_fermi_level,
    "relax": cmd_relax,
    "mu-study": cmd_mu_study,
    "disp-study": cmd_disp_study,
    "locality": cmd_locality,
    "identities": cmd_identities,
    "dislocation": cmd_dislocation,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tbdefect", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"tbdefect {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("config", nargs="?", help="JSON run configuration")
        sp.add_argument("-o", "--out", help="output directory (overrides config)")
        sp.add_argument("-j", "--workers", type=int, default=os.cpu_count() or 1,
                        help="concurrent per-R solves (default: logical cores)")
        if name == "disp-study":
            sp.add_argument("--kind", choices=("self", "ensemble", "count"), default="self")
    sp = sub.add_parser("plots", help="write matplotlib scripts for study CSV files")
    sp.add_argument("csv", nargs="+")
    sp.add_argument("-o", "--out")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "plots":
            for s in emit_plots(args.csv, args.out):
                print(s)
            return EXIT_OK
        cfg = load_config(args.config)
        run = Run(cfg, args.out)
        kw = {"kind": args.kind} if args.command == "disp-study" else {}
        return COMMANDS[args.command](cfg, run, max(1, args.workers), **kw)
    except NonConvergenceError as err:
        print(f"solver did not converge: {err}", file=sys.stderr)
        return EXIT_SOLVER
    except (ConfigError, ValueError, KeyError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
