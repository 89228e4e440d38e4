"""Command line front end: config files, experiment drivers and output writers.

Exit codes: 0 success, 1 failed validation, 2 configuration error, 3 Newton
failure (partial outputs written), 4 I/O error.  The output directory is
``--out``, else ``$CHNS_OUTPUT_DIR``, else ``./chns-output``.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as _dt
import json
import logging
import math
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, SimulationAborted
from .materials import load_viscosity_model
from .mesh import MeshConfig
from .solver import NewtonSettings
from .spaces import Discretization
from .timeloop import (
    CHANNEL, CONVERGENCE, DIAGNOSTIC_COLUMNS, Problem, SimulationConfig, Snapshot, build_problem,
    convergence_config, initial_state, run,
)

log = logging.getLogger("chns")

OUTPUT_ENV = "CHNS_OUTPUT_DIR"
DEFAULT_OUTPUT = "chns-output"
TIMESERIES_SCHEMA = "chns-timeseries/1"
EXIT_OK, EXIT_VALIDATION, EXIT_CONFIG, EXIT_NEWTON, EXIT_IO = 0, 1, 2, 3, 4

# -- config files -------------------------------------------------------------
# Flat ``key = value`` text, one key per line, ``#`` starts a comment.
_MESH_KEYS = ("nx", "ny", "L1", "L2")
_NEWTON_KEYS = ("abs_tol", "rel_tol", "max_iterations", "reuse_jacobian", "refresh_ratio")
_TOP_KEYS = tuple(f.name for f in dataclasses.fields(SimulationConfig) if f.name not in ("mesh", "newton"))
CONFIG_KEYS = tuple(f"mesh.{k}" for k in _MESH_KEYS) + tuple(f"newton.{k}" for k in _NEWTON_KEYS) + _TOP_KEYS


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_format_value(x) for x in v)
    return str(v)


def config_items(cfg: SimulationConfig) -> dict:
    out = {}
    for k in _MESH_KEYS:
        out[f"mesh.{k}"] = getattr(cfg.mesh, k)
    for k in _NEWTON_KEYS:
        out[f"newton.{k}"] = getattr(cfg.newton, k)
    for k in _TOP_KEYS:
        out[k] = getattr(cfg, k)
    return out


def format_config(cfg: SimulationConfig) -> str:
    lines = [f"# chns {__version__} run configuration"]
    lines += [f"{k} = {_format_value(v)}" for k, v in config_items(cfg).items()]
    return "\n".join(lines) + "\n"


def _parse_bool(s: str) -> bool:
    t = s.strip().lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_int(s: str) -> int:
    f = float(s)
    if not f.is_integer():
        raise ValueError(f"not an integer: {s!r}")
    return int(f)


def _parse_optional(conv):
    def parse(s):
        return None if s.strip().lower() in ("none", "") else conv(s)
    return parse


def _parse_pair(s: str) -> tuple:
    parts = [p for p in s.replace("(", " ").replace(")", " ").replace(",", " ").split()]
    if len(parts) != 2:
        raise ValueError(f"expected two numbers, got {s!r}")
    return tuple(float(p) for p in parts)


def _parse_str(s: str) -> str:
    return s.strip()


_PARSERS = {
    "mesh.nx": _parse_int, "mesh.ny": _parse_int, "mesh.L1": float, "mesh.L2": float,
    "newton.abs_tol": float, "newton.rel_tol": float, "newton.max_iterations": _parse_int,
    "newton.reuse_jacobian": _parse_bool, "newton.refresh_ratio": float,
    "T": float, "dt": float, "gamma": float, "s": float, "F": _parse_pair, "chi": float,
    "alpha": _parse_optional(float), "N1": float, "N2": float, "noise_amplitude": float,
    "rng_seed": _parse_int, "output_every": _parse_int, "experiment": _parse_str,
    "level": _parse_optional(_parse_int), "retry_failed_steps": _parse_bool,
    "viscosity_file": _parse_optional(_parse_str),
}
assert set(_PARSERS) == set(CONFIG_KEYS)


def parse_assignments(pairs, source: str = "<args>") -> dict:
    """``["key = value", ...]`` to typed values; unknown keys are rejected."""
    out = {}
    for lineno, raw in enumerate(pairs, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _PARSERS:
            raise ConfigError(f"{source}:{lineno}: unknown key", key=key)
        try:
            out[key] = _PARSERS[key](value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}", key=key) from exc
    return out


def build_config(values: dict, base: SimulationConfig | None = None) -> SimulationConfig:
    items = config_items(base or SimulationConfig())
    items.update(values)
    mesh = {k: items.pop(f"mesh.{k}") for k in _MESH_KEYS}
    newton = {k: items.pop(f"newton.{k}") for k in _NEWTON_KEYS}
    try:
        mesh_cfg = MeshConfig(**mesh)
    except ConfigError as exc:
        raise ConfigError(str(exc), key=exc.key or "mesh") from exc
    try:
        newton_cfg = NewtonSettings(**newton)
    except ConfigError as exc:
        raise ConfigError(str(exc), key="newton") from exc
    return SimulationConfig(mesh=mesh_cfg, newton=newton_cfg, **items)


def parse_config_text(text: str, base: SimulationConfig | None = None, source: str = "<text>") -> SimulationConfig:
    return build_config(parse_assignments(text.splitlines(), source), base)


def load_config(path, base: SimulationConfig | None = None) -> SimulationConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_config_text(text, base, source=str(path))


def channel_defaults() -> SimulationConfig:
    """Full channel: 1 x 3, T = 1000, dt = 0.01, 60 x 180 cells."""
    return SimulationConfig()


def convergence_defaults(k: int) -> SimulationConfig:
    """Level-k study run: unit square, T = 2, dt = h_k / (40 sqrt 2)."""
    return convergence_config(k)


# -- writers --------------------------------------------------------------------
def _atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def vertex_values(disc: Discretization, snap: Snapshot) -> dict:
    """Point data on every mesh vertex, the periodic slave column included."""
    mesh = disc.mesh
    vq = disc.Q.node_dofs
    vd = np.full(mesh.n_vertices, -1, dtype=np.int64)
    for a in range(3):
        vd[mesh.triangles[:, a]] = disc.V.cell_dofs[:, a]
    n2 = disc.n2

    def p2_at_vertices(c):
        return np.where(vd >= 0, c[np.maximum(vd, 0)], 0.0)

    out = {"phi": snap.phi[vq]}
    if snap.mu is not None:
        out["mu"] = snap.mu[vq]
        out["p"] = snap.p[vq]
    out["u"] = np.column_stack([p2_at_vertices(snap.u[:n2]), p2_at_vertices(snap.u[n2:])])
    return out


def write_vtk(path, disc: Discretization, snap: Snapshot) -> None:
    """Legacy ASCII unstructured grid (VTK 3.0) with point data."""
    mesh = disc.mesh
    vals = vertex_values(disc, snap)
    nv, nt = mesh.n_vertices, mesh.n_triangles
    lines = ["# vtk DataFile Version 3.0", f"chns step {snap.step} t {snap.t!r}", "ASCII",
             "DATASET UNSTRUCTURED_GRID", f"POINTS {nv} double"]
    lines += [f"{x!r} {y!r} 0.0" for x, y in mesh.vertices]
    lines.append(f"CELLS {nt} {4 * nt}")
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    lines.append(f"CELL_TYPES {nt}")
    lines += ["5"] * nt
    lines.append(f"POINT_DATA {nv}")
    for name in ("phi", "mu", "p"):
        if name in vals:
            lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            lines += [repr(float(v)) for v in vals[name]]
    lines.append("VECTORS u double")
    lines += [f"{ux!r} {uy!r} 0.0" for ux, uy in vals["u"]]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_vtk_points(path) -> tuple[int, int]:
    """Point and cell counts of a legacy file written by :func:`write_vtk`."""
    npts = ncell = -1
    with open(path) as fh:
        for line in fh:
            if line.startswith("POINTS"):
                npts = int(line.split()[1])
            elif line.startswith("CELLS"):
                ncell = int(line.split()[1])
    return npts, ncell


def write_timeseries(path, traj) -> None:
    cols = list(DIAGNOSTIC_COLUMNS)
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema={TIMESERIES_SCHEMA}\n")
        w = csv.writer(fh)
        w.writerow(cols)
        w.writerow([0, 0.0, repr(traj.initial_mass), repr(traj.initial_energy)] + [""] * (len(cols) - 4))
        d = traj.diagnostics
        for i in range(traj.n_recorded_steps):
            w.writerow([d[c][i] if c in ("step", "newton_iters") else repr(float(d[c][i])) for c in cols])


def read_timeseries(path) -> dict:
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if first != f"# schema={TIMESERIES_SCHEMA}":
            raise ValueError(f"{path}: unknown timeseries schema {first!r}")
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) if r[k] != "" else np.nan for r in rows]) for k in rows[0]} if rows else {}


@dataclasses.dataclass
class RunManifest:
    config: dict
    code_version: str
    rng_seed: int
    started: str
    finished: str = ""
    exit_status: str = ""
    exit_code: int = -1
    message: str = ""
    files: list = dataclasses.field(default_factory=list)

    def write(self, outdir: Path) -> Path:
        outdir = Path(outdir)
        self.files = sorted(
            ({"name": p.name, "bytes": p.stat().st_size} for p in outdir.iterdir()
             if p.is_file() and p.name != "manifest.json" and not p.name.endswith(".tmp")),
            key=lambda e: e["name"],
        )
        path = outdir / "manifest.json"
        _atomic_write(path, json.dumps(dataclasses.asdict(self), indent=2, default=_json_default) + "\n")
        return path


def _json_default(v):
    if isinstance(v, tuple):
        return list(v)
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    raise TypeError(f"cannot serialize {type(v)}")


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def output_dir(arg: str | None) -> Path:
    return Path(arg or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT)


def simulate(cfg: SimulationConfig, outdir: Path, stop_step: int | None = None) -> int:
    """Run one configuration, streaming snapshots; returns an exit code."""
    manifest = RunManifest(config=config_items(cfg), code_version=__version__, rng_seed=cfg.rng_seed,
                           started=_now())
    try:
        outdir.mkdir(parents=True, exist_ok=True)
        (outdir / "config.txt").write_text(format_config(cfg))
    except OSError as exc:
        log.error("cannot prepare output directory %s: %s", outdir, exc)
        return EXIT_IO
    pb: Problem = build_problem(cfg)
    N = cfg.n_steps if stop_step is None else min(stop_step, cfg.n_steps)

    def snapshot(n, t, state):
        write_vtk(outdir / f"snapshot_{n:07d}.vtk", pb.disc, Snapshot.of(n, t, state))

    def on_step(n, t, state, row):
        if n % cfg.output_every == 0 or n == N:
            snapshot(n, t, state)

    code, traj = EXIT_OK, None
    try:
        st0 = initial_state(cfg, pb.disc)
        snapshot(0, 0.0, st0)
        traj = run(cfg, problem=pb, state=st0, on_step=on_step, keep_snapshots=False, stop_step=stop_step)
        manifest.exit_status = "completed" if traj.completed else "stopped"
    except SimulationAborted as exc:
        traj = exc.trajectory
        code = EXIT_NEWTON
        manifest.exit_status, manifest.message = "newton_failure", str(exc)
        log.error("%s", exc)
    except OSError as exc:
        code = EXIT_IO
        manifest.exit_status, manifest.message = "io_error", f"{getattr(exc, 'filename', '')}: {exc}"
        log.error("I/O error: %s", exc)
    try:
        if traj is not None:
            write_timeseries(outdir / "timeseries.csv", traj)
        manifest.finished, manifest.exit_code = _now(), code
        manifest.write(outdir)
    except OSError as exc:
        log.error("cannot write outputs to %s: %s", outdir, exc)
        return EXIT_IO
    return code


# -- viscosity table and validation ------------------------------------------------
def viscosity_table(rates, phis, path=None) -> str:
    model = load_viscosity_model(path)
    lines = ["# eta(rate, phi); rows: shear rate, columns: phi",
             "rate," + ",".join(f"{p:g}" for p in phis)]
    for g in rates:
        vals = model(np.full(len(phis), g), np.asarray(phis))
        lines.append(f"{g:.6e}," + ",".join(f"{v:.9e}" for v in vals))
    return "\n".join(lines) + "\n"


def validate_suite() -> list[tuple[str, bool, str]]:
    """Fast structural checks of meshes, spaces and materials."""
    from .materials import CHI_SEGREGATING, FloryHugginsParams, fh_minima, potential_f
    from .mesh import build_channel_mesh, validate_admissibility
    from .spaces import P1, P2, eval_reference_basis, quadrature_rule

    results = []

    def check(name, ok, detail=""):
        results.append((name, bool(ok), detail))

    for cfg in (MeshConfig(20, 60, 1.0, 3.0), MeshConfig(8, 8)):
        rep = validate_admissibility(build_channel_mesh(cfg))
        check(f"mesh {cfg.nx}x{cfg.ny} admissible", rep.passed, "; ".join(rep.failures))
    for deg in range(1, 7):
        q = quadrature_rule(deg)
        xy = q.points[:, 1:]
        worst = 0.0
        for i in range(deg + 1):
            for j in range(deg + 1 - i):
                exact = math.factorial(i) * math.factorial(j) / math.factorial(i + j + 2)
                worst = max(worst, abs(q.weights @ (xy[:, 0] ** i * xy[:, 1] ** j) - exact))
        check(f"quadrature degree {deg}", worst < 1e-13, f"max error {worst:.2e}")
    pts = quadrature_rule(6).points
    for kind in (P1, P2):
        v, g = eval_reference_basis(kind, pts)
        check(f"{kind} partition of unity", np.abs(v.sum(axis=1) - 1).max() < 1e-14
              and np.abs(g.sum(axis=-2)).max() < 1e-13)
    fh = FloryHugginsParams(CHI_SEGREGATING)
    lo, hi = fh_minima(fh)
    check("Flory-Huggins minima", abs(lo - 0.1) < 1e-9 and abs(hi - 0.9) < 1e-9, f"({lo}, {hi})")
    a = fh.cutoff
    for x in (a, 1 - a):
        sides = potential_f(np.array([x - 1e-13, x + 1e-13]), fh)[:3]
        jump = max(abs(np.diff(c)[0]) for c in sides)
        check(f"potential C2 at {x:.3f}", jump < 1e-10, f"jump {jump:.1e}")
    model = load_viscosity_model()
    rate = np.logspace(-4, 4, 50)
    ok = True
    for phi in np.linspace(0, 1, 21):
        eta = model(rate, np.full_like(rate, phi))
        ok &= bool(np.all(eta > 0) and np.all(np.diff(eta) <= 0))
    check("viscosity positive and shear-thinning", ok)
    return results


# -- entry point ------------------------------------------------------------------
def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="chns", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="count", default=0)
    ap.add_argument("--version", action="version", version=f"chns {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def run_opts(p):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one key")
        p.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or ./{DEFAULT_OUTPUT})")
        p.add_argument("--steps", type=int, help="stop after this many steps")
        p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")

    p = sub.add_parser("channel", help="sheared channel run")
    run_opts(p)
    p = sub.add_parser("convergence", help="convergence-study level run, or the full study")
    p.add_argument("--k", type=int, default=0, help="refinement level of a single run")
    p.add_argument("--study", help="comma-separated levels; runs the self-convergence study")
    p.add_argument("--reference", type=int, help="reference level (default: finest in --study)")
    p.add_argument("--time-comparison", choices=("coarse", "fine"), default="coarse")
    run_opts(p)
    p = sub.add_parser("viscosity-table", help="tabulate eta(rate, phi)")
    p.add_argument("--rates", default="1e-4,1e-3,1e-2,1e-1,1,10,100")
    p.add_argument("--phis", default="0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1")
    p.add_argument("--params", help="alternative parameter file")
    p.add_argument("--out", help="write to this file instead of stdout")
    sub.add_parser("validate", help="mesh, space and material self-checks")
    return ap


def _resolve_config(args, base: SimulationConfig) -> SimulationConfig:
    cfg = base
    if args.config:
        cfg = load_config(args.config, cfg)
    if args.set:
        cfg = build_config(parse_assignments(args.set, "--set"), cfg)
    return cfg


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "viscosity-table":
            rates = [float(v) for v in args.rates.split(",")]
            phis = [float(v) for v in args.phis.split(",")]
            text = viscosity_table(rates, phis, args.params)
            if args.out:
                Path(args.out).write_text(text)
            else:
                sys.stdout.write(text)
            return EXIT_OK
        if args.command == "validate":
            res = validate_suite()
            for name, ok, detail in res:
                print(f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else ""))
            return EXIT_OK if all(ok for _, ok, _ in res) else EXIT_VALIDATION
        if args.command == "channel":
            cfg = _resolve_config(args, channel_defaults())
        else:
            if args.study:
                return _study(args)
            cfg = _resolve_config(args, convergence_defaults(args.k))
        if args.print_config:
            sys.stdout.write(format_config(cfg))
            return EXIT_OK
        return simulate(cfg, output_dir(args.out), stop_step=args.steps)
    except SimulationAborted as exc:
        print(f"simulation aborted: {exc}", file=sys.stderr)
        return EXIT_NEWTON
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {getattr(exc, 'filename', '') or ''} {exc}", file=sys.stderr)
        return EXIT_IO


def _study(args) -> int:
    from .analysis import self_convergence_study

    try:
        levels = sorted(int(v) for v in args.study.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad level list {args.study!r}", key="study") from exc
    base = _resolve_config(args, convergence_defaults(levels[0]))
    overrides = {k: v for k, v in config_items(base).items() if k in ("gamma", "s", "F", "chi", "alpha", "N1", "N2")}
    if args.print_config:
        sys.stdout.write(format_config(base))
        return EXIT_OK
    reports = self_convergence_study(levels, args.reference, T=base.T, newton=base.newton,
                                     modes=(args.time_comparison,), **overrides)
    outdir = output_dir(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    rep = reports[args.time_comparison]
    rep.to_csv(outdir / "eoc.csv")
    text = rep.to_text()
    (outdir / "eoc.txt").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
