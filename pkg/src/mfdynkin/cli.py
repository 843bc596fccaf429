"""Command-line front end: run configs, scenario listing and config validation.

Exit codes: 0 when every hard invariant passes, 2 on configuration errors,
3 on invariant failures (the manifest is still written) and 4 when a fixed
point does not converge.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError, MFDynkinError, NoConvergence

EXPERIMENTS = ("validate", "meanfield", "game", "particles", "chaos")
TOP_KEYS = {"name", "scenario", "params", "coefficients", "lattice", "solver", "fixed_point",
            "experiments", "particles", "chaos", "game", "output"}
LATTICE_KEYS = {"horizon", "steps", "backend", "n_paths", "seed", "jumps"}
INVARIANT_TOL = 1e-9
OUT_ENV = "MFDYNKIN_OUT"

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT, EXIT_NOCONV = 0, 2, 3, 4


def tool_version() -> str:
    from . import __version__
    return __version__


def bundled_configs() -> list:
    return sorted(p.name[:-5] for p in resources.files("mfdynkin.configs").iterdir()
                  if p.name.endswith(".json"))


def load_config(ref: str) -> dict:
    """Read a config from a path, or by name from the bundled configs."""
    path = Path(ref)
    if path.is_file():
        text = path.read_text(encoding="utf-8")
    else:
        name = path.name[:-5] if path.name.endswith(".json") else path.name
        res = resources.files("mfdynkin.configs") / f"{name}.json"
        if not res.is_file():
            raise ConfigError(f"config {ref!r} not found (bundled: {bundled_configs()})")
        text = res.read_text(encoding="utf-8")
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return cfg


def canonical_bytes(cfg: dict) -> bytes:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8")


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_bytes(cfg)).hexdigest()


def _require(cond, msg):
    if not cond:
        raise ConfigError(msg)


def check_config(cfg: dict) -> dict:
    """Schema checks; returns the normalised experiment list and sections."""
    unknown = set(cfg) - TOP_KEYS
    _require(not unknown, f"unknown config keys {sorted(unknown)}")
    _require(("scenario" in cfg) != ("coefficients" in cfg),
             "give exactly one of 'scenario' (registered name) or 'coefficients' (inline affine spec)")
    lat = cfg.get("lattice", {})
    _require(isinstance(lat, dict), "'lattice' must be an object")
    unknown = set(lat) - LATTICE_KEYS
    _require(not unknown, f"unknown lattice keys {sorted(unknown)}")
    exps = cfg.get("experiments", ["validate", "meanfield", "game"])
    _require(isinstance(exps, list) and all(e in EXPERIMENTS for e in exps),
             f"experiments must be a list drawn from {list(EXPERIMENTS)}")
    backend = lat.get("backend", "tree")
    _require(backend in ("tree", "paths"), f"unknown backend {backend!r}")
    if backend == "paths":
        _require("seed" in lat, "a paths lattice needs a 'seed'")
    if "particles" in exps:
        _require("seed" in cfg.get("particles", {}), "the particles experiment needs a 'seed'")
    if "chaos" in exps:
        ch = cfg.get("chaos", {})
        _require("seeds" in ch and "n_grid" in ch, "the chaos experiment needs 'seeds' and 'n_grid'")
    return {"experiments": [e for e in EXPERIMENTS if e in exps]}


def build_problem(cfg: dict):
    """Coefficients, grid, jumps, lattice and fixed-point settings from a config."""
    from .lattice import JumpSpec, TimeGrid, build_tree, sample_paths
    from .meanfield import FixedPointConfig
    from .scenarios import get_scenario, make_scenario

    if "coefficients" in cfg:
        scen_name, params = "affine", dict(cfg["coefficients"])
    else:
        scen_name, params = cfg["scenario"], dict(cfg.get("params", {}))
    scen = get_scenario(scen_name)
    c = make_scenario(scen_name, **params)
    lat = {**scen.default_lattice, **cfg.get("lattice", {})}
    grid = TimeGrid(float(lat.get("horizon", 1.0)), int(lat.get("steps", 4)))
    jd = lat.get("jumps") or {}
    jumps = JumpSpec(tuple(jd.get("marks", ())), tuple(jd.get("intensities", ())))
    jumps.jump_probabilities(grid)
    if lat.get("backend", "tree") == "tree":
        lattice = build_tree(grid, jumps)
    else:
        _require("seed" in lat, "a paths lattice needs a 'seed'")
        lattice = sample_paths(grid, jumps, int(lat.get("n_paths", 256)), int(lat["seed"]))
    fp = cfg.get("fixed_point", {})
    solver = cfg.get("solver", {})
    try:
        fpc = FixedPointConfig(**{**fp, "degree": int(solver.get("degree", fp.get("degree", 2)))})
    except TypeError as exc:
        raise ConfigError(f"bad fixed_point settings: {exc}") from None
    return c, grid, jumps, lattice, fpc


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serialisable: {type(o).__name__}")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _rule_rows(player, rule):
    return [(player, m, int(j)) for m, s in enumerate(rule.stop[:-1]) for j in np.flatnonzero(s)]


class Runner:
    """Executes the selected experiments and records files and invariants."""

    def __init__(self, cfg: dict, out_dir: Path, only: str | None = None):
        self.cfg = cfg
        self.out = out_dir
        self.hash = config_hash(cfg)
        self.h8 = self.hash[:8]
        sel = check_config(cfg)["experiments"]
        if only is not None:
            if only not in EXPERIMENTS:
                raise ConfigError(f"unknown experiment {only!r}")
            sel = [only]
        self.selected = sel
        self.records = {}
        self.cache = {}

    def path(self, stem, ext):
        return self.out / f"{stem}_{self.h8}.{ext}"

    def record(self, name, files, invariants, seconds):
        hard = {k: v for k, v in invariants.items() if isinstance(v, bool) and not k.endswith("_info")}
        self.records[name] = {"files": [Path(f).name for f in files], "invariants": invariants,
                              "passed": all(hard.values()), "seconds": round(seconds, 3)}

    def problem(self):
        if "problem" not in self.cache:
            self.cache["problem"] = build_problem(self.cfg)
        return self.cache["problem"]

    def meanfield(self):
        if "mf" not in self.cache:
            from .meanfield import mean_field_value_and_saddle
            c, grid, jumps, lattice, fpc = self.problem()
            gcfg = self.cfg.get("game", {})
            self.cache["mf"] = mean_field_value_and_saddle(
                lattice, c, fpc, n_samples=int(gcfg.get("n_samples", 256)), seed=int(gcfg.get("seed", 0)))
        return self.cache["mf"]

    def run_validate(self):
        from .coefficients import validate_assumptions
        from .meanfield import check_chaos_condition, check_contraction_condition
        c, grid, jumps, lattice, fpc = self.problem()
        rep = validate_assumptions(c, lattice)
        consts = c.lipschitz.obstacle_constants
        lhs, thr, ok = check_contraction_condition(*consts, c.p)
        clhs, cok = check_chaos_condition(*consts, c.p)
        body = {"assumptions": rep.to_dict(),
                "contraction": {"lhs": lhs, "threshold": thr, "holds": ok},
                "chaos_condition": {"lhs": clhs, "holds": cok}}
        js, cs = self.path("validate", "json"), self.path("validate", "csv")
        _write_json(js, body)
        _write_csv(cs, ["check", "passed", "measured", "bound"],
                   [(k, r.passed, repr(float(r.measured)), repr(float(r.bound)))
                    for k, r in rep.checks.items()])
        return [js, cs], {"assumptions": rep.passed, "contraction": ok, "chaos_condition_info": cok}

    def run_meanfield(self):
        mf, tau, sigma, report = self.meanfield()
        res = mf.sol.residuals()
        body = {**mf.to_dict(), "saddle": report["saddle"]}
        js, cs = self.path("meanfield", "json"), self.path("meanfield", "csv")
        _write_json(js, body)
        mf.flows_to_csv(cs)
        inv = {"structural": max(res.values()) <= INVARIANT_TOL,
               "max_structural_residual": max(res.values()), "iterations": mf.iterations}
        return [js, cs], inv

    def run_game(self):
        mf, tau, sigma, report = self.meanfield()
        js, cs = self.path("game", "json"), self.path("game", "csv")
        _write_json(js, {k: v for k, v in report.items()})
        _write_csv(cs, ["player", "m", "node"], _rule_rows("tau", tau) + _rule_rows("sigma", sigma))
        inv = {"saddle": bool(report["saddle"]["passed"])}
        bf = report.get("brute_force", {})
        if "gap_to_solution" in bf:
            inv["brute_force_matches"] = bool(bf["gap_to_solution"] <= 1e-10
                                              and abs(bf["upper"] - bf["lower"]) <= 1e-10)
        return [js, cs], inv

    def run_particles(self):
        from .particles import particle_saddles, solve_particle_system
        c, grid, jumps, lattice, fpc = self.problem()
        pc = self.cfg.get("particles", {})
        ps = solve_particle_system(int(pc.get("n", 16)), grid, jumps, c, seed=int(pc["seed"]), cfg=fpc,
                                   n_paths=int(pc.get("n_paths", 256)),
                                   conditioning=pc.get("conditioning", "own"))
        _, reps = particle_saddles(ps, c, n_samples=int(pc.get("saddle_samples", 64)),
                                   seed=int(pc["seed"]))
        js, cs = self.path("particles", "json"), self.path("particles", "csv")
        _write_json(js, {**ps.to_dict(), "saddles": [r.to_dict() for r in reps]})
        ps.to_csv(cs)
        worst = max(ps.residual_summary().values())
        return [js, cs], {"structural": worst <= INVARIANT_TOL, "max_structural_residual": worst,
                          "saddles": all(r.passed for r in reps)}

    def run_chaos(self):
        from .chaos import chaos_gap_experiment
        c, grid, jumps, lattice, fpc = self.problem()
        ch = self.cfg["chaos"]
        rep = chaos_gap_experiment(ch["n_grid"], c, grid, jumps, fpc, seeds=ch["seeds"],
                                   n_paths=int(ch.get("n_paths", 256)), n_ref=ch.get("n_ref"),
                                   ref_seed=int(ch.get("ref_seed", 10_000)))
        js, cs, ps = self.path("chaos", "json"), self.path("chaos", "csv"), self.path("chaos_plot", "csv")
        _write_json(js, rep.to_dict())
        rep.to_csv(cs)
        rep.plot_csv(ps)
        vals = [r[4] for r in rep.rows]
        inv = {"nonnegative_finite": bool(np.all(np.isfinite(vals)) and min(vals) >= 0.0)}
        for m in ("G", "W_iid"):
            inv[f"trend_{m}_info"] = rep.trend(m)["passed"]
        return [js, cs, ps], inv

    def execute(self) -> int:
        self.out.mkdir(parents=True, exist_ok=True)
        started = datetime.now(timezone.utc).isoformat()
        cfg_copy = self.path("config", "json")
        cfg_copy.write_bytes(canonical_bytes(self.cfg))
        code, error = EXIT_OK, None
        try:
            for name in self.selected:
                t0 = time.perf_counter()
                files, inv = getattr(self, f"run_{name}")()
                self.record(name, files, inv, time.perf_counter() - t0)
        except NoConvergence as exc:
            code, error = EXIT_NOCONV, f"{type(exc).__name__}: {exc}"
        except ConfigError:
            raise
        except MFDynkinError as exc:
            code, error = EXIT_INVARIANT, f"{type(exc).__name__}: {exc}"
        if code == EXIT_OK and not all(r["passed"] for r in self.records.values()):
            code = EXIT_INVARIANT
        manifest = {
            "config_hash": self.hash,
            "config_copy": cfg_copy.name,
            "tool_version": tool_version(),
            "started": started,
            "finished": datetime.now(timezone.utc).isoformat(),
            "experiments": self.records,
            "file_sha256": {f: _sha256(self.out / f) for r in self.records.values() for f in r["files"]},
            "exit_code": code,
            "error": error,
        }
        self.manifest_path = self.path("manifest", "json")
        _write_json(self.manifest_path, manifest)
        if error:
            print(f"error: {error}", file=sys.stderr)
        return code


def output_dir(cfg: dict, cli_out: str | None) -> Path:
    if cli_out:
        return Path(cli_out)
    if os.environ.get(OUT_ENV):
        return Path(os.environ[OUT_ENV])
    return Path(cfg.get("output", {}).get("dir", "results"))


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    runner = Runner(cfg, output_dir(cfg, args.out), args.only)
    code = runner.execute()
    print(f"manifest: {runner.manifest_path}")
    for name, rec in runner.records.items():
        print(f"{name}: {'ok' if rec['passed'] else 'FAILED'} ({', '.join(rec['files'])})")
    return code


def cmd_validate(args) -> int:
    from .coefficients import validate_assumptions
    cfg = load_config(args.config)
    check_config(cfg)
    c, grid, jumps, lattice, fpc = build_problem(cfg)
    rep = validate_assumptions(c, lattice)
    print(f"config ok ({config_hash(cfg)[:8]}), scenario {c.name}, {grid.steps} steps, "
          f"{lattice.backend} backend")
    for name in rep.failures():
        chk = rep.checks[name]
        print(f"assumption failed: {name} (measured {chk.measured:.3g}, bound {chk.bound:.3g})")
    return EXIT_OK if rep.passed else EXIT_INVARIANT


def cmd_list(args) -> int:
    from .scenarios import list_scenarios
    for name, desc in list_scenarios():
        print(f"{name}\t{desc}")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mfdynkin", description="Mean-field Dynkin game laboratory")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run the experiments of a config")
    r.add_argument("config", help="config path or bundled config name")
    r.add_argument("--out", help="output directory")
    r.add_argument("--only", choices=EXPERIMENTS, help="run a single experiment")
    r.set_defaults(func=cmd_run)
    v = sub.add_parser("validate", help="check a config and the scenario assumptions")
    v.add_argument("config")
    v.set_defaults(func=cmd_validate)
    ls = sub.add_parser("list-scenarios", help="list registered scenarios")
    ls.set_defaults(func=cmd_list)
    return ap


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NoConvergence as exc:
        print(f"error: NoConvergence: {exc}", file=sys.stderr)
        return EXIT_NOCONV
