"""Command-line front end.

Configuration is an INI file with one section per module, overridden by
``--set section.key=value`` flags and a few shortcut flags (precedence:
flags > file > defaults).  Every key is validated before any computation.

Exit codes: 0 all embedded assertions pass, 1 assertion failure,
2 configuration error, 3 solver non-convergence.

Random draws: the run seed is expanded per check as
``numpy.random.SeedSequence(seed, spawn_key=(crc32(check_name),))`` so checks
draw independently of each other and of their order.

``FRACYAMABE_THREADS`` sets the worker count for parallel sweeps (default 1);
results are collected in submission order, so output does not depend on it.
"""

from __future__ import annotations

import argparse
import configparser
import io
import json
import math
import os
import sys
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import conformal_diag as cd
from . import extension as ext
from . import flow
from .resolvent import ResolventError, ResolventProblem, check_t_contraction, solve_resolvent
from .spectral_core import Field, FlowParams, Grid, GridError, write_field_binary

COMMANDS = ("flow-unrescaled", "flow-rescaled", "ode", "resolvent", "extension-check", "diagnostics")

EXIT_OK, EXIT_ASSERT, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3


class ConfigError(ValueError):
    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


def _int_list(text):
    return [int(t) for t in str(text).replace(",", " ").split()]


def _float_list(text):
    return [float(t) for t in str(text).replace(",", " ").split()]


# section -> key -> (parser, default)
SCHEMA = {
    "run": {
        "command": (str, None),
        "seed": (int, 0),
        "output_dir": (str, "out"),
        "snapshot_stride": (int, 0),
    },
    "params": {
        "gamma": (float, None),
        "n": (int, None),
        "q_c": (float, 0.0),
        "h": (float, 0.01),
        "tol_resolvent": (float, 1e-10),
        "max_iter": (int, 200),
    },
    "grid": {
        "dim": (int, 1),
        "points_per_axis": (int, 64),
        "side_length": (float, 2.0 * math.pi),
    },
    "flow": {
        "t_end": (float, 1.0),
        "data": (str, "cosine"),
        "level": (float, 1.0),
        "amplitude": (float, 0.5),
        "harnack_margin": (float, 0.5),
    },
    "extension": {
        "n_y": (int, 256),
        "grading": (float, 2.0),
        "y_max": (float, 0.0),
        "x_scheme": (str, "spectral"),
        "modes": (_int_list, [1, 2, 3, 4]),
        "harnack_trials": (int, 0),
    },
    "ode": {
        "N": (float, 2.0),
        "sign": (int, 1),
        "U0": (float, 1.0),
        "t_end": (float, 4.0),
        "q": (float, 1.0),
    },
    "resolvent": {
        "trials": (int, 20),
    },
    "diagnostics": {
        "trials": (int, 20),
        "q_values": (_float_list, [1.5, 2.0, 3.0]),
        "gammas": (_float_list, [0.3, 0.7]),
        "kelvin_points": (int, 1000),
        "stereo_points": (int, 10000),
    },
}

SHORTCUTS = {
    "gamma": "params.gamma",
    "n": "params.n",
    "q_c": "params.q_c",
    "h": "params.h",
    "dim": "grid.dim",
    "points": "grid.points_per_axis",
    "seed": "run.seed",
    "output_dir": "run.output_dir",
    "t_end": "flow.t_end",
}


@dataclass(frozen=True)
class RunConfig:
    values: dict

    def __getitem__(self, dotted):
        sec, key = dotted.split(".")
        return self.values[sec][key]

    @property
    def command(self) -> str:
        return self["run.command"]

    def params(self) -> FlowParams:
        p = self.values["params"]
        return FlowParams(p["gamma"], p["n"], p["q_c"], p["h"], p["tol_resolvent"], p["max_iter"])

    def grid(self) -> Grid:
        g = self.values["grid"]
        return Grid(g["dim"], g["points_per_axis"], g["side_length"])

    def echo(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        for sec in SCHEMA:
            cp[sec] = {k: _render(v) for k, v in sorted(self.values[sec].items()) if v is not None}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _render(v):
    if isinstance(v, list):
        return " ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config(path=None, overrides=None) -> RunConfig:
    """Merge defaults, an INI file and ``section.key=value`` overrides; validate everything.

    Raises :class:`ConfigError` naming the offending key.
    """
    raw: dict[str, dict[str, str]] = {}
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError("config", f"file not found: {path}")
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp.read(path)
        for sec in cp.sections():
            raw.setdefault(sec, {}).update(cp[sec])
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(item, "override must look like section.key=value")
        dotted, val = item.split("=", 1)
        if "." not in dotted:
            raise ConfigError(dotted, "override key must be section.key")
        sec, key = dotted.strip().split(".", 1)
        raw.setdefault(sec, {})[key] = val.strip()

    values = {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}
    for sec, items in raw.items():
        if sec not in SCHEMA:
            raise ConfigError(sec, f"unknown section {sec!r}")
        for key, text in items.items():
            if key not in SCHEMA[sec]:
                raise ConfigError(f"{sec}.{key}", f"unknown key {key!r}")
            parser = SCHEMA[sec][key][0]
            try:
                values[sec][key] = parser(text)
            except ValueError as exc:
                raise ConfigError(f"{sec}.{key}", f"cannot parse {text!r}: {exc}") from None
    _validate(values)
    return RunConfig(values)


def _validate(v):
    def need(key, ok, msg):
        if not ok:
            raise ConfigError(key, msg)

    cmd = v["run"]["command"]
    need("run.command", cmd is None or cmd in COMMANDS, f"command must be one of {COMMANDS}")
    need("run.snapshot_stride", v["run"]["snapshot_stride"] >= 0, "must be >= 0")
    need("run.seed", 0 <= v["run"]["seed"] < 2**64, "seed must be a 64-bit unsigned integer")
    p = v["params"]
    need("params.gamma", p["gamma"] is not None, "gamma is required")
    need("params.gamma", 0.0 < p["gamma"] < 1.0, "gamma must lie in (0,1)")
    need("params.n", p["n"] is not None, "n is required")
    need("params.n", p["n"] >= 1 and p["n"] > 2 * p["gamma"], "n must be a positive integer with n > 2*gamma")
    need("params.q_c", p["q_c"] >= 0, "q_c must be >= 0")
    need("params.h", p["h"] > 0, "h must be positive")
    need("params.tol_resolvent", p["tol_resolvent"] > 0, "must be positive")
    need("params.max_iter", p["max_iter"] >= 1, "must be >= 1")
    g = v["grid"]
    try:
        Grid(g["dim"], g["points_per_axis"], g["side_length"])
    except GridError as exc:
        raise ConfigError("grid", str(exc)) from None
    f = v["flow"]
    need("flow.t_end", f["t_end"] > 0, "t_end must be positive")
    need("flow.data", f["data"] in ("cosine", "constant", "random"), "data must be cosine, constant or random")
    need("flow.level", f["level"] >= 0, "level must be >= 0")
    need("flow.amplitude", abs(f["amplitude"]) <= f["level"] or f["data"] != "cosine",
         "cosine data needs |amplitude| <= level (nonnegative density)")
    need("flow.harnack_margin", f["harnack_margin"] >= 0, "must be >= 0")
    e = v["extension"]
    need("extension.n_y", e["n_y"] >= 2, "must be >= 2")
    need("extension.grading", e["grading"] >= 1, "grading exponent must be >= 1")
    need("extension.y_max", e["y_max"] >= 0, "must be >= 0 (0 selects the default)")
    need("extension.x_scheme", e["x_scheme"] in ext.X_SCHEMES, f"must be one of {ext.X_SCHEMES}")
    need("extension.modes", len(e["modes"]) > 0 and all(k != 0 for k in e["modes"]), "nonzero modes required")
    need("extension.modes", all(abs(k) < g["points_per_axis"] // 2 for k in e["modes"]), "modes must lie below Nyquist")
    need("extension.harnack_trials", e["harnack_trials"] >= 0, "must be >= 0")
    o = v["ode"]
    need("ode.N", o["N"] > 1, "N must exceed 1")
    need("ode.sign", o["sign"] in (1, -1), "sign must be +1 or -1")
    need("ode.U0", o["U0"] >= 0, "U0 must be >= 0")
    need("ode.t_end", o["t_end"] > 0, "t_end must be positive")
    need("ode.q", o["q"] > 0, "q must be positive")
    need("resolvent.trials", v["resolvent"]["trials"] >= 0, "must be >= 0")
    d = v["diagnostics"]
    need("diagnostics.trials", d["trials"] >= 0, "must be >= 0")
    need("diagnostics.q_values", all(q > 1 for q in d["q_values"]), "q values must exceed 1")
    need("diagnostics.gammas", all(0 < x < 1 for x in d["gammas"]), "gammas must lie in (0,1)")
    need("diagnostics.kelvin_points", d["kelvin_points"] >= 1, "must be >= 1")
    need("diagnostics.stereo_points", d["stereo_points"] >= 1, "must be >= 1")


def check_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(zlib.crc32(name.encode()),)))


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("FRACYAMABE_THREADS", "1")))
    except ValueError:
        return 1


def _initial_density(cfg: RunConfig, grid: Grid) -> np.ndarray:
    kind = cfg["flow.data"]
    level, amp = cfg["flow.level"], cfg["flow.amplitude"]
    if kind == "constant":
        return np.full(grid.shape, level)
    if kind == "cosine":
        x = grid.coordinates()[0]
        return level + amp * np.cos(2 * math.pi * x / grid.side_length)
    rng = check_rng(cfg["run.seed"], "flow.data")
    coeff = rng.standard_normal(grid.shape) * np.exp(-grid.wavevector_norm**2)
    smooth = np.fft.ifftn(coeff).real
    smooth /= max(np.max(np.abs(smooth)), 1e-300)
    return level * np.exp(abs(amp) * smooth)


# ---------------------------------------------------------------------------
# commands; each returns (report dict, list of assertion tuples)


def _cmd_flow_unrescaled(cfg, out):
    p, grid = cfg.params(), cfg.grid()
    st = flow.FlowState(0.0, Field(grid, _initial_density(cfg, grid)), p)
    trace = flow.run_unrescaled(st, p.h, cfg["flow.t_end"], snapshot_stride=cfg["run.snapshot_stride"])
    trace.write_csv(out / "trace.csv")
    _write_snapshots(trace, out)
    mass = trace.column("mass")
    energy = trace.column("dirichlet_energy")
    checks = [("energy_nonincreasing", bool(np.all(np.diff(energy) <= 1e-10 * max(energy[0], 1e-300))))]
    report = {"steps": len(trace.records) - 1, "extinct": trace.extinct,
              "extinction_time": trace.extinction_time,
              "mass_drift": float(np.max(np.abs(mass - mass[0])) / mass[0]) if mass[0] > 0 else 0.0}
    if p.q_c == 0:
        checks.append(("mass_conservation", report["mass_drift"] <= 1e-8))
    return report, checks


def _cmd_flow_rescaled(cfg, out):
    p, grid = cfg.params(), cfg.grid()
    u0 = _initial_density(cfg, grid)
    if np.min(u0) <= 0:
        raise ConfigError("flow.data", "rescaled flow needs strictly positive data")
    st = flow.FlowState(0.0, Field(grid, u0), p)
    trace = flow.run_rescaled(st, p.h, cfg["flow.t_end"], snapshot_stride=cfg["run.snapshot_stride"])
    trace.write_csv(out / "trace.csv")
    _write_snapshots(trace, out)
    vol = trace.column("volume")
    H = trace.column("harnack_quotient")
    drift = float(np.max(np.abs(vol - vol[0])) / vol[0])
    bound = H[0] * (1.0 + cfg["flow.harnack_margin"])
    report = {"steps": len(trace.records) - 1, "volume_drift": drift,
              "harnack_initial": float(H[0]), "harnack_max": float(H.max()),
              "harnack_final": float(H[-1]), "q_final": trace.q_values[-1] if trace.q_values else None}
    return report, [("volume_preservation", drift <= 1e-6), ("harnack_bound", bool(H.max() <= bound))]


def _cmd_ode(cfg, out):
    N, sign, U0 = cfg["ode.N"], cfg["ode.sign"], cfg["ode.U0"]
    q, h, t_end = cfg["ode.q"], cfg["params.h"], cfg["ode.t_end"]
    traj = flow.ode_mode(N, sign, U0, h, t_end, q=q)
    with open(out / "ode.csv", "w") as fh:
        fh.write("t,U\n")
        for t, U in zip(traj.t, traj.U):
            fh.write(f"{t!r},{U!r}\n")
    report = {"N": N, "sign": sign, "U0": U0, "q": q, "h": h, "steps": len(traj.t) - 1}
    checks = []
    if sign == 1:
        exact = N * U0 ** (N - 1.0) / (q * (N - 1.0))
        report.update(extinction_time=traj.extinction_time, closed_form=exact)
        if U0 > 0 and exact < t_end:
            ok = traj.extinction_time is not None and abs(traj.extinction_time - exact) <= 0.02 * exact
            checks.append(("extinction_time", ok))
    else:
        ts = np.linspace(0.0, t_end, 101)[1:]
        resid = float(np.max(np.abs(flow.nontrivial_branch_residual(N, ts))
                             / np.maximum(flow.nontrivial_branch(N, ts), 1e-300)))
        report.update(branch=traj.branch, final_U=float(traj.U[-1]),
                      nontrivial_final=float(flow.nontrivial_branch(N, traj.t[-1]) * q ** (1 / (N - 1))),
                      branch_residual=resid)
        checks.append(("branch_substitution", resid <= 1e-10))
    return report, checks


def _cmd_resolvent(cfg, out):
    p, grid = cfg.params(), cfg.grid()
    g = Field(grid, _initial_density(cfg, grid))
    log = io.StringIO()
    sol = solve_resolvent(ResolventProblem(g, p), log=log)
    (out / "resolvent_log.jsonl").write_text(log.getvalue())
    rng = check_rng(cfg["run.seed"], "resolvent.t_contraction")
    worst = -math.inf
    for _ in range(cfg["resolvent.trials"]):
        g1 = Field(grid, 2.0 * rng.random(grid.shape))
        g2 = Field(grid, 2.0 * rng.random(grid.shape))
        lhs, rhs = check_t_contraction(g1, g2, p)
        worst = max(worst, lhs - rhs)
    report = {"iterations": sol.iterations, "residual": sol.residual_norm, "objective": sol.objective,
              "t_contraction_trials": cfg["resolvent.trials"],
              "t_contraction_worst_excess": worst if cfg["resolvent.trials"] else None}
    checks = [("residual", sol.residual_norm <= p.tol_resolvent)]
    if cfg["resolvent.trials"]:
        checks.append(("t_contraction", worst <= 1e-8))
    return report, checks


def _cmd_extension_check(cfg, out):
    p, grid = cfg.params(), cfg.grid()
    y_max = cfg["extension.y_max"] or None
    mesh = ext.ExtensionMesh.graded(grid, p.gamma, n_y=cfg["extension.n_y"], y_max=y_max,
                                    grading=cfg["extension.grading"], x_scheme=cfg["extension.x_scheme"])
    modes = cfg["extension.modes"]
    with ThreadPoolExecutor(_workers()) as pool:
        records = list(pool.map(lambda k: ext.single_mode_error(p.gamma, k, mesh), modes))
    with open(out / "extension_convergence.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    tol = 0.01 if math.isclose(p.gamma, 0.5) else 0.02
    report = {"tolerance": tol, "max_relative_error": max(r["relative_error"] for r in records)}
    checks = [("operator_agreement", report["max_relative_error"] <= tol)]
    trials = cfg["extension.harnack_trials"]
    if trials and grid.dim <= 2:
        seed = int(check_rng(cfg["run.seed"], "extension.harnack").integers(2**63))
        hk = ext.check_harnack_fks(mesh, trials=trials, seed=seed)
        report["harnack"] = {k: hk[k] for k in ("max_ratio", "scale_factor", "scales")}
        checks.append(("harnack_scale_independence", hk["scale_factor"] <= 1.2))
    return report, checks


def _cmd_diagnostics(cfg, out):
    grid = cfg.grid()
    seed = cfg["run.seed"]
    d = cfg.values["diagnostics"]
    records = []
    rng = check_rng(seed, "diagnostics.stroock_varopoulos")
    for gam in d["gammas"]:
        for q in d["q_values"]:
            for trial in range(d["trials"]):
                v = Field(grid, np.exp(rng.standard_normal(grid.shape)))
                lhs, rhs = cd.stroock_varopoulos_check(v, gam, q)
                ok = lhs >= rhs - 1e-10 and (q != 2.0 or abs(lhs - rhs) <= 1e-12 * abs(lhs))
                records.append(cd.check_record("stroock_varopoulos",
                                               {"gamma": gam, "q": q, "trial": trial}, lhs, rhs, ok))
    n, gam = cfg["params.n"], cfg["params.gamma"]
    rng = check_rng(seed, "diagnostics.kelvin")
    pts = rng.standard_normal((d["kelvin_points"], n)) * np.exp(rng.uniform(-3, 3, (d["kelvin_points"], 1)))
    cloud = cd.PointCloudField(pts, rng.random(d["kelvin_points"]) + 0.5)
    back = cd.kelvin_transform(cd.kelvin_transform(cloud, n, gam), n, gam)
    inv_err = float(np.max(np.abs(back.values - cloud.values) / np.abs(cloud.values)))
    records.append(cd.check_record("kelvin_involution", {"n": n, "gamma": gam}, inv_err, 1e-12, inv_err <= 1e-12))
    bub = cd.PointCloudField(pts, cd.bubble(pts, n, gam))
    kb = cd.kelvin_transform(bub, n, gam)
    fix_err = float(np.max(np.abs(kb.values - cd.bubble(kb.points, n, gam)) / cd.bubble(kb.points, n, gam)))
    records.append(cd.check_record("bubble_fixed_point", {"n": n, "gamma": gam}, fix_err, 1e-12, fix_err <= 1e-12))
    rng = check_rng(seed, "diagnostics.stereographic")
    m = d["stereo_points"]
    x = rng.standard_normal((m, n))
    x *= (1e6 * rng.random((m, 1))) / np.linalg.norm(x, axis=1, keepdims=True)
    st_err = float(np.max(np.abs(np.linalg.norm(cd.stereographic_inverse(x), axis=1) - 1.0)))
    records.append(cd.check_record("stereographic_norm", {"n": n, "max_radius": 1e6}, st_err, 1e-14, st_err <= 1e-14))
    with open(out / "diagnostics.jsonl", "w") as fh:
        cd.write_jsonl(records, fh)
    failed = [r for r in records if not r["pass"]]
    report = {"checks": len(records), "failed": len(failed)}
    return report, [(r["check"], r["pass"]) for r in records]


def _write_snapshots(trace, out):
    if not trace.snapshots:
        return
    snap = out / "snapshots"
    snap.mkdir(exist_ok=True)
    for k, (_, f) in enumerate(trace.snapshots):
        write_field_binary(f, snap / f"snapshot_{k:05d}.bin")


HANDLERS = {
    "flow-unrescaled": _cmd_flow_unrescaled,
    "flow-rescaled": _cmd_flow_rescaled,
    "ode": _cmd_ode,
    "resolvent": _cmd_resolvent,
    "extension-check": _cmd_extension_check,
    "diagnostics": _cmd_diagnostics,
}


def run(cfg: RunConfig) -> int:
    """Execute ``cfg``; writes artifacts and ``report.json`` under ``run.output_dir``."""
    out = Path(cfg["run.output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.echo())
    try:
        report, checks = HANDLERS[cfg.command](cfg, out)
    except ResolventError as exc:
        _failure(out, EXIT_SOLVER, "solver_nonconvergence", str(exc), residual=exc.residual)
        return EXIT_SOLVER
    except ext.ExtensionError as exc:
        _failure(out, EXIT_SOLVER, "solver_failure", str(exc))
        return EXIT_SOLVER
    except ConfigError as exc:
        _failure(out, EXIT_CONFIG, "config_error", str(exc), key=exc.key)
        return EXIT_CONFIG
    assertions = [{"name": name, "pass": bool(ok)} for name, ok in checks]
    passed = all(a["pass"] for a in assertions)
    report = {"command": cfg.command, "passed": passed, "assertions": assertions, "results": report}
    (out / "report.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    return EXIT_OK if passed else EXIT_ASSERT


def _failure(out, code, kind, message, **extra):
    rec = {"status": kind, "exit_code": code, "message": message, **extra}
    text = json.dumps(rec, sort_keys=True)
    if out is not None:
        (out / "failure.json").write_text(text + "\n")
    print(text, file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fracyamabe", description=__doc__.split("\n\n")[0])
    ap.add_argument("command", nargs="?", choices=COMMANDS, help="overrides run.command")
    ap.add_argument("-c", "--config", help="INI configuration file")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    for flag, dotted in SHORTCUTS.items():
        ap.add_argument(f"--{flag.replace('_', '-')}", dest=f"short_{flag}", metavar="VALUE",
                        help=f"shortcut for --set {dotted}=VALUE")
    ap.add_argument("--echo", action="store_true", help="print the resolved configuration")
    ap.add_argument("--dry-run", action="store_true", help="validate and echo only")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = []
    if args.command:
        overrides.append(f"run.command={args.command}")
    for flag, dotted in SHORTCUTS.items():
        val = getattr(args, f"short_{flag}")
        if val is not None:
            overrides.append(f"{dotted}={val}")
    overrides.extend(args.overrides)
    try:
        cfg = parse_config(args.config, overrides)
    except ConfigError as exc:
        _failure(None, EXIT_CONFIG, "config_error", str(exc), key=exc.key)
        return EXIT_CONFIG
    if args.echo or args.dry_run:
        sys.stdout.write(cfg.echo())
    if args.dry_run:
        return EXIT_OK
    if cfg.command is None:
        _failure(None, EXIT_CONFIG, "config_error", f"run.command: a command is required, one of {COMMANDS}",
                 key="run.command")
        return EXIT_CONFIG
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
