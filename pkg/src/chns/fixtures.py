"""Golden diagnostics fixtures for regression tests.

Fixtures hold per-step diagnostics (not fields) of small deterministic runs
plus a viscosity table.  They are rewritten only by

    python -m chns.fixtures regenerate

which logs what it writes; ``python -m chns.fixtures verify`` checks them.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import logging
import math
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .materials import load_viscosity_model
from .mesh import MeshConfig
from .solver import NewtonSettings
from .timeloop import SimulationConfig, build_problem, run

log = logging.getLogger(__name__)

SIM_COLUMNS = ("step", "t", "mass", "energy", "mean_div", "proj_div", "pressure_mean", "r", "newton_iters")
VISC_RATES = (0.0, 1e-3, 1e-1, 1.0, 10.0)
VISC_PHIS = (-0.2, 0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.8, 1.0, 1.5)


def _stationary_config() -> SimulationConfig:
    return SimulationConfig(mesh=MeshConfig(8, 8), T=0.05, dt=0.01, F=(0.0, 0.0), noise_amplitude=0.0,
                            output_every=1)


def _channel_config() -> SimulationConfig:
    return SimulationConfig(mesh=MeshConfig(20, 60, 1.0, 3.0), T=0.1, dt=0.01, rng_seed=2024,
                            output_every=10, newton=NewtonSettings())


@dataclass(frozen=True)
class FixtureSpec:
    name: str
    kind: str  # "simulation" | "viscosity"
    description: str
    rtol: float
    atol: float
    mass_drift: float | None = None
    config: SimulationConfig | None = None
    stationary: bool = False


FIXTURES = {
    "stationary": FixtureSpec(
        "stationary", "simulation", "phi = lower well, u = 0, F = 0 on an 8x8 unit square; 5 steps",
        rtol=0.0, atol=0.0, config=_stationary_config(), stationary=True),
    "channel10": FixtureSpec(
        "channel10", "simulation", "20x60 channel, seeded noise, 10 full-Newton steps",
        rtol=1e-8, atol=1e-13, mass_drift=1e-9, config=_channel_config()),
    "viscosity": FixtureSpec(
        "viscosity", "viscosity", "blended viscosity on a (rate, phi) grid",
        rtol=1e-12, atol=0.0),
}


def _config_hash(spec: FixtureSpec) -> str:
    if spec.config is None:
        payload = repr((VISC_RATES, VISC_PHIS, load_viscosity_model().fits))
    else:
        from .cli import format_config

        payload = format_config(spec.config).split("\n", 1)[1] + f"stationary={spec.stationary}\n"
    return hashlib.sha256(payload.encode()).hexdigest()


def compute_fixture(spec: FixtureSpec) -> tuple[list[str], np.ndarray]:
    """Column names and the table of values the fixture records."""
    if spec.kind == "viscosity":
        model = load_viscosity_model()
        rows = [(g, p, float(model(g, p))) for g in VISC_RATES for p in VISC_PHIS]
        return ["rate", "phi", "eta"], np.array(rows)
    cfg = spec.config
    pb = build_problem(cfg)
    state = None
    if spec.stationary:
        from .assembly import SystemState

        state = SystemState.zeros(pb.disc)
        state.phi[:] = pb.ctx.materials.fh.phi_star
    traj = run(cfg, problem=pb, state=state, keep_snapshots=False)
    d = traj.diagnostics
    rows = [[0, 0.0, traj.initial_mass, traj.initial_energy, np.nan, np.nan, np.nan, np.nan, 0]]
    for i in range(traj.n_recorded_steps):
        rows.append([d[c][i] for c in SIM_COLUMNS])
    return list(SIM_COLUMNS), np.array(rows, dtype=float)


def fixture_dir() -> Path:
    return Path(str(resources.files("chns").joinpath("data/fixtures")))


def write_fixture(spec: FixtureSpec, path: Path | None = None) -> Path:
    cols, table = compute_fixture(spec)
    path = path or fixture_dir() / f"{spec.name}.txt"
    stamp = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    head = [
        f"# fixture: {spec.name}",
        f"# description: {spec.description}",
        f"# config_sha256: {_config_hash(spec)}",
        f"# generated: {stamp} by `python -m chns.fixtures regenerate`",
        f"# rtol: {spec.rtol!r}",
        f"# atol: {spec.atol!r}",
    ]
    if spec.mass_drift is not None:
        head.append(f"# mass_drift: {spec.mass_drift!r}")
    body = [",".join(cols)] + [",".join(repr(float(v)) for v in row) for row in table]
    path.write_text("\n".join(head + body) + "\n")
    log.warning("wrote fixture %s (%d rows) to %s", spec.name, len(table), path)
    return path


def read_fixture(path) -> tuple[dict, list[str], np.ndarray]:
    meta, lines = {}, []
    for raw in Path(path).read_text().splitlines():
        if raw.startswith("#"):
            k, _, v = raw[1:].partition(":")
            meta[k.strip()] = v.strip()
        elif raw.strip():
            lines.append(raw)
    cols = lines[0].split(",")
    table = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    return meta, cols, table


@dataclass
class FixtureResult:
    name: str
    passed: bool
    max_deviation: float = 0.0
    messages: list = field(default_factory=list)


@dataclass
class FixtureReport:
    results: list

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> list[str]:
        return [r.name for r in self.results if not r.passed]

    def __str__(self) -> str:
        return "\n".join(
            f"{'PASS' if r.passed else 'FAIL'} {r.name} (max deviation {r.max_deviation:.2e})"
            + "".join(f"\n    {m}" for m in r.messages)
            for r in self.results
        )


def verify_fixture(spec: FixtureSpec, path: Path | None = None) -> FixtureResult:
    path = path or fixture_dir() / f"{spec.name}.txt"
    res = FixtureResult(spec.name, True)
    if not path.exists():
        return FixtureResult(spec.name, False, math.inf, [f"missing fixture file {path}"])
    meta, cols, expected = read_fixture(path)
    if meta.get("config_sha256") != _config_hash(spec):
        res.passed = False
        res.messages.append("configuration changed since the fixture was generated")
    got_cols, got = compute_fixture(spec)
    if got_cols != cols or got.shape != expected.shape:
        res.passed = False
        res.messages.append(f"shape mismatch: {got.shape} vs {expected.shape}")
        res.max_deviation = math.inf
        return res
    rtol, atol = float(meta.get("rtol", spec.rtol)), float(meta.get("atol", spec.atol))
    both_nan = np.isnan(got) & np.isnan(expected)
    dev = np.where(both_nan, 0.0, np.abs(got - expected))
    res.max_deviation = float(np.max(dev)) if dev.size else 0.0
    bad = ~(both_nan | (dev <= atol + rtol * np.abs(expected)))
    if np.any(bad):
        r, c = np.argwhere(bad)[0]
        res.passed = False
        res.messages.append(f"{cols[c]} in row {r}: got {got[r, c]!r}, expected {expected[r, c]!r}")
    if "mass_drift" in meta:
        mass = got[:, cols.index("mass")]
        drift = float(np.max(np.abs(mass - mass[0])))
        if drift > float(meta["mass_drift"]):
            res.passed = False
            res.messages.append(f"mass drift {drift:.2e} exceeds {meta['mass_drift']}")
    return res


def verify_fixtures(names=None) -> FixtureReport:
    names = list(FIXTURES) if names is None else list(names)
    return FixtureReport([verify_fixture(FIXTURES[n]) for n in names])


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="python -m chns.fixtures", description="golden fixture maintenance")
    ap.add_argument("action", choices=("verify", "regenerate"))
    ap.add_argument("names", nargs="*", help=f"subset of {', '.join(FIXTURES)}")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    names = args.names or list(FIXTURES)
    unknown = [n for n in names if n not in FIXTURES]
    if unknown:
        ap.error(f"unknown fixtures: {unknown}")
    if args.action == "regenerate":
        for n in names:
            write_fixture(FIXTURES[n])
        return 0
    report = verify_fixtures(names)
    print(report)
    return 0 if report.passed else 1


if __name__ == "__main__":
    sys.exit(main())
