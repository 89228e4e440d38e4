"""Time marching, initial data and trajectory recording.

Time semantics of a trajectory: phi and u are continuous and piecewise
linear in time, interpolating the step values; mu, p and r are piecewise
constant, the value of step n living on (t_{n-1}, t_n].  Consequently mu, p
and r have no value at t = 0 and are reported as ``None`` there.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .assembly import StepContext, SystemState
from .errors import ConfigError, NewtonConvergenceError, SimulationAborted
from .materials import CHI_SEGREGATING, FloryHugginsParams, MaterialModel, load_viscosity_model
from .mesh import Mesh, MeshConfig, build_channel_mesh, build_convergence_mesh
from .solver import NewtonSettings, NewtonSolver
from .spaces import Discretization, interpolate_nodal

log = logging.getLogger(__name__)

CHANNEL, CONVERGENCE = "channel", "convergence"
TIME_SEMANTICS = {"phi": "linear", "u": "linear", "mu": "constant", "p": "constant", "r": "constant"}
DIAGNOSTIC_COLUMNS = (
    "step", "t", "mass", "energy", "mean_div", "proj_div", "pressure_mean", "r",
    "newton_iters", "newton_final_increment",
)


@dataclass(frozen=True)
class SimulationConfig:
    """One run.  For ``experiment="convergence"`` the mesh is derived from ``level``.

    Noise is drawn per scalar degree of freedom from numpy's PCG64 bit
    generator seeded with ``rng_seed``, uniform in [-noise_amplitude, noise_amplitude].
    """

    mesh: MeshConfig = MeshConfig(60, 180, 1.0, 3.0)
    T: float = 1000.0
    dt: float = 0.01
    gamma: float = 0.001
    s: float = 0.1
    F: tuple = (0.01, 0.0)
    chi: float = CHI_SEGREGATING
    alpha: float | None = None
    N1: float = 15.0
    N2: float = 15.0
    noise_amplitude: float = 0.001
    rng_seed: int = 0
    output_every: int = 100
    experiment: str = CHANNEL
    level: int | None = None
    newton: NewtonSettings = NewtonSettings()
    retry_failed_steps: bool = False
    viscosity_file: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "F", tuple(float(v) for v in self.F))
        if len(self.F) != 2:
            raise ConfigError("body force needs two components", key="F")
        if not (self.T > 0 and math.isfinite(self.T)):
            raise ConfigError(f"must be positive, got {self.T}", key="T")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ConfigError(f"must be positive, got {self.dt}", key="dt")
        m = self.T / self.dt
        if abs(m - round(m)) > 1e-9 * max(1.0, m) or round(m) < 1:
            raise ConfigError(f"T/dt = {m!r} is not a positive integer", key="dt")
        for key in ("gamma", "s"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"must be positive, got {getattr(self, key)}", key=key)
        if not self.noise_amplitude >= 0:
            raise ConfigError(f"must be >= 0, got {self.noise_amplitude}", key="noise_amplitude")
        if int(self.output_every) < 1:
            raise ConfigError(f"must be >= 1, got {self.output_every}", key="output_every")
        if self.experiment not in (CHANNEL, CONVERGENCE):
            raise ConfigError(f"unknown experiment {self.experiment!r}", key="experiment")
        if self.experiment == CONVERGENCE and (self.level is None or self.level < 0):
            raise ConfigError("convergence runs need a level k >= 0", key="level")
        if self.experiment == CONVERGENCE:
            n = 2 ** (self.level + 3)
            object.__setattr__(self, "mesh", MeshConfig(n, n, 1.0, 1.0))
        try:
            FloryHugginsParams(self.chi, self.N1, self.N2, self.alpha)
        except ConfigError as exc:
            raise ConfigError(str(exc), key="chi/alpha/N1/N2") from exc

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    def replace(self, **changes) -> "SimulationConfig":
        return dataclasses.replace(self, **changes)


def convergence_config(k: int, T: float = 2.0, **overrides) -> SimulationConfig:
    """Level-k convergence run: unit square, 2^(k+3) cells per side, dt = h_k / (40 sqrt 2)."""
    dt = 1.0 / (40.0 * 2 ** (k + 3))
    base = dict(T=T, dt=dt, experiment=CONVERGENCE, level=k, output_every=1, noise_amplitude=0.0)
    base.update(overrides)
    return SimulationConfig(**base)


@dataclass
class Problem:
    cfg: SimulationConfig
    mesh: Mesh
    disc: Discretization
    ctx: StepContext


def build_problem(cfg: SimulationConfig) -> Problem:
    mesh = build_convergence_mesh(cfg.level) if cfg.experiment == CONVERGENCE else build_channel_mesh(cfg.mesh)
    disc = Discretization(mesh)
    fh = FloryHugginsParams(cfg.chi, cfg.N1, cfg.N2, cfg.alpha)
    mat = MaterialModel(fh, load_viscosity_model(cfg.viscosity_file))
    ctx = StepContext(cfg.dt, cfg.gamma, cfg.s, cfg.F, mat, disc)
    return Problem(cfg, mesh, disc, ctx)


def init_channel(cfg: SimulationConfig, disc: Discretization) -> SystemState:
    if cfg.experiment != CHANNEL:
        raise ConfigError("init_channel needs a channel experiment", key="experiment")
    state = SystemState.zeros(disc)
    a = cfg.noise_amplitude
    if a > 0:
        rng = np.random.Generator(np.random.PCG64(cfg.rng_seed))
        state.phi = 0.5 + rng.uniform(-a, a, size=disc.n1)
    else:
        state.phi = np.full(disc.n1, 0.5)
    return state


def convergence_phi0(x, y):
    return 0.5 + 0.001 * np.cos(6 * np.pi * x) * np.cos(2 * np.pi * y)


def init_convergence(cfg: SimulationConfig, disc: Discretization) -> SystemState:
    if cfg.experiment != CONVERGENCE:
        raise ConfigError("init_convergence needs a convergence experiment", key="experiment")
    state = SystemState.zeros(disc)
    state.phi = interpolate_nodal(convergence_phi0, disc.Q)
    return state


def initial_state(cfg: SimulationConfig, disc: Discretization) -> SystemState:
    return init_channel(cfg, disc) if cfg.experiment == CHANNEL else init_convergence(cfg, disc)


@dataclass
class Snapshot:
    step: int
    t: float
    phi: np.ndarray
    u: np.ndarray
    mu: np.ndarray | None
    p: np.ndarray | None
    r: float | None

    @classmethod
    def of(cls, step, t, state: SystemState) -> "Snapshot":
        if step == 0:
            return cls(0, t, state.phi.copy(), state.u.copy(), None, None, None)
        return cls(step, t, state.phi.copy(), state.u.copy(), state.mu.copy(), state.p.copy(), float(state.r))


@dataclass
class Trajectory:
    """Snapshots every ``output_every`` steps (plus the last), diagnostics every step."""

    cfg: SimulationConfig
    snapshots: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=lambda: {c: [] for c in DIAGNOSTIC_COLUMNS})
    initial_mass: float = float("nan")
    initial_energy: float = float("nan")
    final_state: SystemState | None = None
    completed: bool = False
    time_semantics: dict = field(default_factory=lambda: dict(TIME_SEMANTICS))

    @property
    def n_recorded_steps(self) -> int:
        return len(self.diagnostics["step"])

    def column(self, name: str) -> np.ndarray:
        return np.asarray(self.diagnostics[name], dtype=float)

    def _record(self, row: dict):
        for c in DIAGNOSTIC_COLUMNS:
            self.diagnostics[c].append(row[c])


def save_state(path, state: SystemState, step: int, t: float) -> None:
    np.savez(path, phi=state.phi, mu=state.mu, u=state.u, p=state.p, r=state.r, step=step, t=t)


def load_state(path) -> tuple[SystemState, int, float]:
    with np.load(path) as z:
        st = SystemState(z["phi"].copy(), z["mu"].copy(), z["u"].copy(), z["p"].copy(), float(z["r"]))
        return st, int(z["step"]), float(z["t"])


StepCallback = Callable[[int, float, SystemState, dict], None]


def run(cfg: SimulationConfig, *, problem: Problem | None = None, state: SystemState | None = None,
        start_step: int = 0, on_step: StepCallback | None = None, keep_snapshots: bool = True,
        stop_step: int | None = None) -> Trajectory:
    """March from ``start_step`` (default: the initial data) to step N.

    ``on_step(n, t_n, state_n, row)`` is called after every converged step.  On
    Newton failure a :class:`SimulationAborted` carrying the partial trajectory
    is raised.
    """
    pb = problem or build_problem(cfg)
    disc, ctx = pb.disc, pb.ctx
    asm = ctx.assembler
    N = cfg.n_steps if stop_step is None else min(int(stop_step), cfg.n_steps)
    if state is None:
        if start_step != 0:
            raise ValueError("a restart needs the state at start_step")
        state = initial_state(cfg, disc)
    state.check(disc)
    traj = Trajectory(cfg)
    traj.initial_mass = float(disc.ones_p1 @ state.phi)
    traj.initial_energy = asm.energy(state)
    if keep_snapshots:
        traj.snapshots.append(Snapshot.of(start_step, start_step * cfg.dt, state))
    solver = NewtonSolver(ctx, cfg.newton)
    for n in range(start_step + 1, N + 1):
        t = n * cfg.dt
        try:
            new, rep = solver.step(state)
        except NewtonConvergenceError as exc:
            if not cfg.retry_failed_steps:
                traj.final_state = state
                raise SimulationAborted(f"step {n} (t={t:g}) failed: {exc}", trajectory=traj, cause=exc) from exc
            log.warning("step %d failed (%s); retrying with full Newton", n, exc)
            retry = NewtonSolver(ctx, dataclasses.replace(cfg.newton, reuse_jacobian=False,
                                                          max_iterations=2 * cfg.newton.max_iterations))
            try:
                new, rep = retry.step(state)
            except NewtonConvergenceError as exc2:
                traj.final_state = state
                raise SimulationAborted(f"step {n} (t={t:g}) failed after retry: {exc2}",
                                        trajectory=traj, cause=exc2) from exc2
            solver.reset()
        d = asm.diagnostics(new)
        row = dict(step=n, t=t, energy=asm.energy(new), newton_iters=rep.iterations,
                   newton_final_increment=rep.final_increment, **d)
        traj._record(row)
        state = new
        if keep_snapshots and (n % cfg.output_every == 0 or n == N):
            traj.snapshots.append(Snapshot.of(n, t, state))
        if on_step is not None:
            on_step(n, t, state, row)
        if n % 100 == 0:
            log.info("step %d/%d t=%g energy=%.6e newton=%d", n, N, t, row["energy"], rep.iterations)
    traj.final_state = state
    traj.completed = N == cfg.n_steps
    return traj
