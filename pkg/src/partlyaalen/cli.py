"""Command line: ``partlyaalen fit | gof | simulate | efficiency | rerun``.

Every run resolves its settings (defaults, then an optional TOML config, then
flags), writes its artifacts into ``--out`` and records the resolved settings in
``manifest.json``. ``partlyaalen rerun manifest.json`` repeats a run.

Exit codes: 0 success, 1 numerical failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("partlyaalen")

MANIFEST = "manifest.json"

DEFAULTS = {
    "dataset": {"path": None, "time": "time", "status": "status", "standardize": []},
    "model": {"parametric": []},
    "fit": {"mode": "partly", "tau": "auto", "Vn": "default", "weights": "plain",
            "bandwidth": None, "xi_times": [], "survival_z": None, "survival_times": []},
    "gof": {"component": 1, "test": "chisq", "windows": 4, "B": 1000, "seed": None,
            "method": "gaussian"},
    "simulate": {"scenario": "power_linear", "reps": 200, "seed": None,
                 "estimators": ["partly", "aalen"], "times": [0.5]},
    "efficiency": {"setup": {}, "curve": "are", "u_grid": [0.25, 0.5, 1.0, 2.0, 4.0],
                   "printed": False, "sieve": False, "K_grid": [10, 20, 40, 80, 160, 320],
                   "tau": 1.0, "family": "constant", "theta": None},
}
SECTIONS = {"fit": ("dataset", "model", "fit"), "gof": ("dataset", "model", "fit", "gof"),
            "simulate": ("simulate",), "efficiency": ("efficiency",)}


class UsageError(ValueError):
    """Invalid command line or configuration."""


# ---------------------------------------------------------------- parsing helpers

def _floats(text: str) -> list[float]:
    """``"0.1,0.5"`` or ``"start:stop:count"``."""
    text = text.strip()
    try:
        if ":" in text:
            a, b, m = text.split(":")
            return [float(x) for x in np.linspace(float(a), float(b), int(m))]
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"cannot parse number list '{text}'") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"cannot parse integer list '{text}'") from None


def _param(text: str) -> dict:
    """``column:family`` or ``column:family:init1,init2``."""
    parts = text.split(":")
    if len(parts) not in (2, 3) or not parts[0] or not parts[1]:
        raise UsageError(f"--param expects column:family[:init,...], got '{text}'")
    entry = {"column": parts[0], "family": parts[1]}
    if len(parts) == 3:
        entry["init"] = _floats(parts[2])
    return entry


def _setup_pairs(tokens) -> dict:
    out = {}
    for tok in tokens:
        for item in tok.split(","):
            if not item.strip():
                continue
            if "=" not in item:
                raise UsageError(f"setup entries must look like key=value, got '{item}'")
            k, v = item.split("=", 1)
            k = k.strip()
            if k not in ("c", "gamma", "alpha", "r", "p", "q", "k"):
                raise UsageError(f"unknown setup key '{k}'")
            try:
                out[k] = int(v) if k in ("r", "p", "q") else float(v)
            except ValueError:
                raise UsageError(f"setup value for '{k}' is not a number: '{v}'") from None
    return out


def _load_toml(path: str) -> dict:
    if sys.version_info >= (3, 11):
        import tomllib
    else:  # pragma: no cover
        import tomli as tomllib
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        return tomllib.loads(p.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"{path}: {exc}") from None


def _merge_config(cfg: dict, raw: dict, sections, source: str):
    for name, body in raw.items():
        if name not in cfg:
            raise UsageError(f"{source}: unknown section [{name}]")
        if name not in sections:
            continue
        if not isinstance(body, dict):
            raise UsageError(f"{source}: [{name}] must be a table")
        for key, val in body.items():
            if key not in cfg[name]:
                raise UsageError(f"{source}: unknown field '{name}.{key}'")
            cfg[name][key] = val


def _set(cfg, section, key, value):
    if value is not None:
        cfg[section][key] = value


# ---------------------------------------------------------------- argument parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="partlyaalen",
                                 description="Partly parametric additive hazard regression.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, figures=True):
        p.add_argument("--config", help="TOML file with [dataset] [model] [fit] [gof] [simulate] sections")
        p.add_argument("--out", default=".", help="output directory (default: current)")
        if figures:
            p.add_argument("--figures", action="store_true", help="also write PNG figures")

    def data_args(p):
        p.add_argument("input", nargs="?", help="CSV data file")
        p.add_argument("--time-col")
        p.add_argument("--status-col")
        p.add_argument("--param", action="append", type=_param, metavar="COL:FAMILY[:INIT]",
                       help="parametric column and family (repeatable; order defines the block)")
        p.add_argument("--standardize", type=lambda s: [c for c in s.split(",") if c])
        p.add_argument("--tau", help="upper time limit or 'auto'")
        p.add_argument("--vn", choices=("default", "optimal"), dest="Vn")
        p.add_argument("--weights", choices=("plain", "optimal", "estimated-optimal"))
        p.add_argument("--bandwidth", type=float)

    f = sub.add_parser("fit", help="Aalen, maximum likelihood or partly parametric fit")
    common(f)
    data_args(f)
    f.add_argument("--mode", choices=("aalen", "mle", "partly"))
    f.add_argument("--xi-times", type=_floats, help="times at which to write the joint covariance")
    f.add_argument("--survival-z", type=_floats, help="covariate vector for a survival curve")
    f.add_argument("--survival-times", type=_floats)

    g = sub.add_parser("gof", help="goodness-of-fit test of one parametric component")
    common(g)
    data_args(g)
    g.add_argument("--component", help="1-based parametric column, or 'all' (ks only)")
    g.add_argument("--test", choices=("chisq", "ks"))
    g.add_argument("--windows", type=int)
    g.add_argument("--B", type=int, dest="B")
    g.add_argument("--seed", type=int)
    g.add_argument("--method", choices=("gaussian", "bootstrap"))
    g.add_argument("--threads", type=int, default=1)

    s = sub.add_parser("simulate", help="Monte Carlo study from a scenario file")
    common(s, figures=False)
    s.add_argument("--scenario", help="bundled scenario name or TOML path")
    s.add_argument("--reps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--estimators", type=lambda x: [e for e in x.split(",") if e])
    s.add_argument("--times", type=_floats)
    s.add_argument("--threads", type=int, default=1)

    e = sub.add_parser("efficiency", help="closed-form efficiency curves and sieve convergence")
    common(e)
    e.add_argument("pairs", nargs="*", help="setup entries key=value (c, gamma, alpha, r, p, q, k)")
    e.add_argument("--setup", action="append", default=[], help="comma separated key=value entries")
    e.add_argument("--curve", choices=("are", "param", "backfit"))
    e.add_argument("--u-grid", type=_floats)
    e.add_argument("--printed", action="store_true", default=None,
                   help="backfit curve with the 1 - cr, 1 - cq denominators")
    e.add_argument("--sieve", action="store_true", default=None)
    e.add_argument("--K-grid", type=_ints, dest="K_grid")
    e.add_argument("--sieve-tau", type=float)
    e.add_argument("--family", help="parametric family of the sieve check")
    e.add_argument("--theta", type=_floats)

    r = sub.add_parser("rerun", help="repeat a run from its manifest")
    r.add_argument("manifest")
    r.add_argument("--out", default=None, help="output directory (default: the manifest's)")
    return ap


def resolve(args) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cmd = args.command
    cfg = copy.deepcopy(DEFAULTS)
    if getattr(args, "config", None):
        _merge_config(cfg, _load_toml(args.config), SECTIONS[cmd], args.config)
    if cmd in ("fit", "gof"):
        _set(cfg, "dataset", "path", args.input)
        _set(cfg, "dataset", "time", args.time_col)
        _set(cfg, "dataset", "status", args.status_col)
        _set(cfg, "dataset", "standardize", args.standardize)
        _set(cfg, "model", "parametric", args.param)
        tau = args.tau
        if tau is not None and tau != "auto":
            try:
                tau = float(tau)
            except ValueError:
                raise UsageError(f"--tau must be a number or 'auto', got '{tau}'") from None
        _set(cfg, "fit", "tau", tau)
        _set(cfg, "fit", "Vn", args.Vn)
        _set(cfg, "fit", "weights", args.weights)
        _set(cfg, "fit", "bandwidth", args.bandwidth)
    if cmd == "fit":
        _set(cfg, "fit", "mode", args.mode)
        _set(cfg, "fit", "xi_times", args.xi_times)
        _set(cfg, "fit", "survival_z", args.survival_z)
        _set(cfg, "fit", "survival_times", args.survival_times)
    if cmd == "gof":
        for key in ("component", "test", "windows", "B", "seed", "method"):
            _set(cfg, "gof", key, getattr(args, key))
    if cmd == "simulate":
        for key in ("scenario", "reps", "seed", "estimators", "times"):
            _set(cfg, "simulate", key, getattr(args, key))
    if cmd == "efficiency":
        setup = dict(cfg["efficiency"]["setup"])
        setup.update(_setup_pairs(args.setup + args.pairs))
        cfg["efficiency"]["setup"] = setup
        _set(cfg, "efficiency", "curve", args.curve)
        _set(cfg, "efficiency", "u_grid", args.u_grid)
        _set(cfg, "efficiency", "printed", args.printed)
        _set(cfg, "efficiency", "sieve", args.sieve)
        _set(cfg, "efficiency", "K_grid", args.K_grid)
        _set(cfg, "efficiency", "tau", args.sieve_tau)
        _set(cfg, "efficiency", "family", args.family)
        _set(cfg, "efficiency", "theta", args.theta)
    resolved = {name: cfg[name] for name in SECTIONS[cmd]}
    resolved["run"] = {"figures": bool(getattr(args, "figures", False)),
                       "threads": int(getattr(args, "threads", 1) or 1)}
    if cmd in ("fit", "gof") and resolved["dataset"]["path"]:
        resolved["dataset"]["path"] = str(Path(resolved["dataset"]["path"]).resolve())
    return resolved


# ---------------------------------------------------------------- shared steps

class Run:
    """Output directory plus the list of artifacts written so far."""

    def __init__(self, out: str | Path):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.artifacts: dict[str, str] = {}

    def write(self, name: str, text: str) -> Path:
        path = self.out / name
        path.write_text(text)
        self.artifacts[name] = hashlib.sha256(text.encode()).hexdigest()
        return path

    def figure(self, name: str, draw) -> None:
        path = draw(self.out / name)
        self.artifacts[name] = hashlib.sha256(Path(path).read_bytes()).hexdigest()

    def manifest(self, command: str, config: dict) -> None:
        import scipy
        doc = {
            "command": command,
            "config": config,
            "versions": {"partlyaalen": __version__, "numpy": np.__version__, "scipy": scipy.__version__},
            "artifacts": dict(sorted(self.artifacts.items())),
        }
        (self.out / MANIFEST).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _dataset(cfg):
    from .data import load_dataset
    from .families import block_from_spec

    d = cfg["dataset"]
    if not d["path"]:
        raise UsageError("an input CSV file is required")
    path = Path(d["path"])
    if not path.is_file():
        raise UsageError(f"input file not found: {path}")
    entries = cfg["model"]["parametric"]
    if entries:
        block, cols, theta0 = block_from_spec(entries)
    else:
        block, cols, theta0 = None, [], None
    ds = load_dataset(path.read_text(), d["time"], d["status"], parametric=cols,
                      standardize=d["standardize"])
    return ds, block, theta0


def _partly(cfg, ds, block, theta0):
    from .partly import fit_partly

    if block is None or ds.p < 1:
        raise UsageError("partly mode requires p ≥ 1")
    f = cfg["fit"]
    return fit_partly(ds, block, tau=f["tau"], Vn_choice=f["Vn"], step_b_weights=f["weights"],
                      theta_init=theta0, bandwidth=f["bandwidth"])


# ---------------------------------------------------------------- commands

def cmd_fit(cfg: dict, run: Run) -> None:
    from .data import build_time_grid

    ds, block, theta0 = _dataset(cfg)
    f = cfg["fit"]
    figures = cfg["run"]["figures"]
    mode = f["mode"]
    if mode == "aalen":
        from .aalen import fit_aalen

        fit = fit_aalen(ds, build_time_grid(ds, f["tau"]))
        run.write("A.csv", fit.to_csv())
        for w in fit.warnings:
            log.warning(w)
        if figures:
            from . import plots
            run.figure("A.png", lambda p: plots.step_paths(
                p, fit.grid.knots, fit.cumulative.values, fit.se_path().values, ds.names,
                "Aalen cumulative regression functions"))
    elif mode == "mle":
        from .mle import fit_mle

        if block is None or block.p != ds.r:
            raise UsageError(f"mle mode needs a --param family for each of the {ds.r} covariate columns")
        fit = fit_mle(ds, block, theta_init=theta0, tau=f["tau"])
        run.write("theta.csv", fit.to_csv())
        summary = {"log_likelihood": fit.log_likelihood, "converged": fit.converged,
                   "iterations": len(fit.trace) - 1, "flagged": fit.flagged}
        run.write("fit_summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    elif mode == "partly":
        fit = _partly(cfg, ds, block, theta0)
        run.write("theta.csv", fit.to_theta_csv())
        table = fit.A2_table() if ds.q else None
        if table is not None:
            run.write("A2.csv", table.to_csv())
        if f["xi_times"]:
            rows = ["time,row,col,value"]
            for t in f["xi_times"]:
                cov = fit.xi(float(t)) / fit.n
                for i in range(ds.r):
                    for j in range(ds.r):
                        rows.append(f"{float(t)!r},{ds.names[i]},{ds.names[j]},{float(cov[i, j])!r}")
            run.write("xi_t.csv", "\n".join(rows) + "\n")
        if f["survival_z"] is not None:
            from .partly import survival_curve

            times = f["survival_times"] or list(np.linspace(0.0, fit.grid.tau, 51))
            run.write("survival.csv", survival_curve(fit, f["survival_z"], times).to_csv())
        if figures and table is not None:
            from . import plots
            q = ds.q
            run.figure("A2.png", lambda p: plots.step_paths(
                p, table.knots, table.values[:, :q], table.values[:, q:], ds.names[ds.p:],
                "Backfitted cumulative regression functions"))
    else:
        raise UsageError(f"unknown fit mode '{mode}'")


def cmd_gof(cfg: dict, run: Run) -> None:
    from .gof import chi_squared_test, ks_test, monitoring_process

    ds, block, theta0 = _dataset(cfg)
    g = cfg["gof"]
    comp = g["component"]
    if isinstance(comp, str) and comp != "all":
        try:
            comp = int(comp)
        except ValueError:
            raise UsageError(f"component must be an integer or 'all', got '{comp}'") from None
    if g["test"] == "ks":
        if g["B"] is None or int(g["B"]) < 100:
            raise UsageError("B ≥ 100 required")
        if g["seed"] is None:
            raise UsageError("--seed is required for the ks test")
    elif g["test"] != "chisq":
        raise UsageError(f"unknown test '{g['test']}'")
    if g["test"] == "chisq" and comp == "all":
        raise UsageError("the chi-squared test takes a single component")
    fit = _partly(cfg, ds, block, theta0)
    if g["test"] == "chisq":
        report = chi_squared_test(fit, comp, windows=g["windows"])
    else:
        report = ks_test(fit, comp, method=g["method"], B=int(g["B"]), seed=int(g["seed"]),
                         workers=cfg["run"]["threads"])
    comps = range(1, ds.p + 1) if comp == "all" else [comp]
    for j in comps:
        mon = monitoring_process(fit, j)
        run.write(f"monitor_{j}.csv", mon.to_csv())
        if cfg["run"]["figures"]:
            from . import plots
            run.figure(f"monitor_{j}.png",
                       lambda p, mon=mon, j=j: plots.monitoring(p, mon.path.knots, mon.path.values, j=j))
    run.write("report.json", report.to_json())


def cmd_simulate(cfg: dict, run: Run) -> None:
    from .simulate import load_scenario, run_monte_carlo

    s = cfg["simulate"]
    if s["seed"] is None:
        raise UsageError("--seed is required for simulate")
    if not s["scenario"]:
        raise UsageError("--scenario is required")
    try:
        sc = load_scenario(s["scenario"])
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    mc = run_monte_carlo(sc, s["estimators"], reps=int(s["reps"]), seed=int(s["seed"]),
                         times=s["times"], workers=cfg["run"]["threads"])
    run.write("mc_table.csv", mc.to_csv())
    run.write("mc_summary.csv", mc.summary_csv())


def cmd_efficiency(cfg: dict, run: Run) -> None:
    from . import efficiency as eff

    e = cfg["efficiency"]
    figures = cfg["run"]["figures"]
    setup = {"c": 1.0, "gamma": 1.0, "alpha": 1.0, "r": 2, "p": 0, "k": 0.0}
    setup.update(e["setup"])
    try:
        gs = eff.GammaSetup(**setup)
    except TypeError as exc:
        raise UsageError(str(exc)) from None
    if e["sieve"]:
        from .families import ParametricBlock

        if gs.p < 1 or gs.q < 1:
            raise UsageError("the sieve check needs p ≥ 1 and q ≥ 1 (set p= and r=)")
        block = ParametricBlock([e["family"]] * gs.p)
        theta = e["theta"] if e["theta"] is not None else [1.0] * block.m
        rows = eff.sieve_convergence(block, np.asarray(theta, float), eff.gamma_F(gs), float(e["tau"]),
                                     e["K_grid"])
        m = block.m
        head = ["K", "relative_error"] + [f"omega11_{a + 1}_{b + 1}" for a in range(m) for b in range(m)]
        lines = [",".join(head)]
        for row in rows:
            lines.append(",".join([str(row["K"]), repr(row["relative_error"])]
                                  + [repr(float(v)) for v in row["Omega_K_11_inv"].ravel()]))
        lim = rows[0]["limit"] if rows else None
        if lim is not None:
            lines.append(",".join(["inf", repr(0.0)] + [repr(float(v)) for v in lim.ravel()]))
        run.write("sieve.csv", "\n".join(lines) + "\n")
        if figures and rows:
            from . import plots
            run.figure("sieve.png", lambda p: plots.loglog(
                p, [r_["K"] for r_ in rows], [max(r_["relative_error"], 1e-17) for r_ in rows]))
        return
    curve = e["curve"]
    if curve == "are":
        run.write("efficiency.csv", f"are\n{eff.are_weights(gs)!r}\n")
        return
    u = np.asarray(e["u_grid"], float)
    if curve == "param":
        vals = eff.ineff_parametric(gs, u)
    elif curve == "backfit":
        vals = eff.ineff_backfit(gs, u, printed=bool(e["printed"]))
    else:
        raise UsageError(f"unknown curve '{curve}'")
    lines = ["u,ratio"] + [f"{float(a)!r},{float(b)!r}" for a, b in zip(u, np.atleast_1d(vals))]
    run.write("efficiency.csv", "\n".join(lines) + "\n")
    if figures:
        from . import plots
        run.figure("efficiency.png", lambda p: plots.curve(p, u, vals, "u", f"{curve} ratio"))


COMMANDS = {"fit": cmd_fit, "gof": cmd_gof, "simulate": cmd_simulate, "efficiency": cmd_efficiency}


def execute(command: str, cfg: dict, out) -> None:
    run = Run(out)
    COMMANDS[command](cfg, run)
    run.manifest(command, cfg)


def _rerun(path: str, out):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"manifest not found: {path}")
    try:
        doc = json.loads(p.read_text())
        command, cfg = doc["command"], doc["config"]
    except (json.JSONDecodeError, KeyError) as exc:
        raise UsageError(f"{path}: not a run manifest ({exc})") from None
    if command not in COMMANDS:
        raise UsageError(f"{path}: unknown command '{command}'")
    execute(command, cfg, out if out is not None else p.parent)


def main(argv=None) -> int:
    from .aalen import HazardFloorError
    from .data import RankError
    from .mle import ConvergenceError, HazardError
    from .simulate import TooManyFailures

    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "rerun":
            _rerun(args.manifest, args.out)
        else:
            execute(args.command, resolve(args), args.out)
    except (ConvergenceError, RankError, HazardFloorError, HazardError, TooManyFailures,
            np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
