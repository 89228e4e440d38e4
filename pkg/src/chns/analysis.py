"""Self-convergence errors against a reference level and EOC tables.

Errors are ``z_ref - z_k`` on the reference mesh, the level-k field being
injected exactly (coarse P1/P2 functions are polynomials on each fine
triangle of a nested mesh).

Time comparison.  In the default ``"coarse"`` mode the comparison grid is the
level-k time grid, which nests into the reference grid.  phi and u are
compared at the coarse nodes and integrated in time as piecewise linear
functions; mu and p take on each coarse interval (t_{K-1}, t_K] the level-k
value and the reference value of the fine interval ending at t_K.  The
``"fine"`` mode instead evaluates the level-k trajectory at every reference
step with its own time semantics and integrates on the reference grid.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .solver import NewtonSettings
from .spaces import P1, P2, Discretization
from .timeloop import build_problem, convergence_config, initial_state, run

log = logging.getLogger(__name__)

NORMS = ("phi_Linf_H1", "u_Linf_L2", "mu_L2_H1", "p_L2_L2", "u_L2_H1")
NORM_LABELS = {
    "phi_Linf_H1": "|e_phi|_Linf(H1)",
    "u_Linf_L2": "|e_u|_Linf(L2)",
    "mu_L2_H1": "|e_mu|_L2(H1)",
    "p_L2_L2": "|e_p|_L2(L2)",
    "u_L2_H1": "|e_u|_L2(H1)",
}
MODES = ("coarse", "fine")


def eoc(err_coarse: float, err_fine: float) -> float:
    """Experimental order log2(e_{k-1} / e_k)."""
    if not (err_coarse > 0 and err_fine > 0):
        raise ValueError(f"EOC needs positive errors, got {err_coarse!r}, {err_fine!r}")
    return math.log2(err_coarse / err_fine)


# -- injection ----------------------------------------------------------------
def _check_nested(coarse: Discretization, fine: Discretization):
    cm, fm = coarse.mesh, fine.mesh
    if not (cm.is_structured() and fm.is_structured()):
        raise ValueError("injection needs structured meshes")
    if not (math.isclose(cm.L1, fm.L1) and math.isclose(cm.L2, fm.L2)):
        raise ValueError("meshes cover different domains")
    if fm.nx % cm.nx or fm.ny % cm.ny or fm.nx // cm.nx != fm.ny // cm.ny:
        raise ValueError(f"meshes are not nested: {cm.nx}x{cm.ny} into {fm.nx}x{fm.ny}")


def prolongation(coarse: Discretization, fine: Discretization, kind: str) -> sp.csr_matrix:
    """Matrix mapping coarse coefficients of a P1 or P2 field to fine ones."""
    _check_nested(coarse, fine)
    space = fine.Q if kind == P1 else fine.V
    return coarse.evaluation_matrix(kind, space.dof_coords)


def inject_to_reference(coeffs: np.ndarray, coarse: Discretization, fine: Discretization,
                        kind: str) -> np.ndarray:
    """Re-represent a coarse field on the nested fine mesh.

    For ``kind == P2`` a stacked ``[ux | uy]`` vector is accepted as well.
    """
    E = prolongation(coarse, fine, kind)
    c = np.asarray(coeffs, dtype=float)
    if kind == P2 and len(c) == 2 * E.shape[1]:
        n = E.shape[1]
        return np.concatenate([E @ c[:n], E @ c[n:]])
    return E @ c


# -- time norms ---------------------------------------------------------------
def _inner(gram, a, b):
    return float(a @ (gram @ b)) if gram is not None else float(a @ b)


def linf_in_time(values, gram=None) -> float:
    """max_k |v_k| over the given node values."""
    return max((math.sqrt(max(_inner(gram, v, v), 0.0)) for v in values), default=0.0)


def l2_in_time(times, values, gram=None, semantics: str = "linear") -> float:
    """L2-in-time norm of a trajectory sampled at ``times``.

    ``linear``: values are node values of a piecewise linear function.
    ``constant``: ``values[k]`` lives on (t_{k-1}, t_k]; ``values[0]`` is unused.
    """
    t = np.asarray(times, dtype=float)
    if len(values) != len(t):
        raise ValueError("times and values differ in length")
    total = 0.0
    for k in range(1, len(t)):
        dt = t[k] - t[k - 1]
        if dt <= 0:
            raise ValueError("times must be increasing")
        b = values[k]
        if semantics == "linear":
            a = values[k - 1]
            total += dt / 3.0 * (_inner(gram, a, a) + _inner(gram, a, b) + _inner(gram, b, b))
        elif semantics == "constant":
            total += dt * _inner(gram, b, b)
        else:
            raise ValueError(f"unknown time semantics {semantics!r}")
    return math.sqrt(max(total, 0.0))


class SpaceTimeAccumulator:
    """Streaming version of the five space-time error norms on one mesh."""

    def __init__(self, disc: Discretization):
        self.disc = disc
        n2 = disc.n2
        self._K1 = disc.mass_p1 + disc.stiffness_p1
        M2, K2 = disc.mass_p2, disc.mass_p2 + disc.stiffness_p2
        self._M2 = sp.block_diag([M2, M2], format="csr")
        self._K2 = sp.block_diag([K2, K2], format="csr")
        self._M1 = disc.mass_p1
        self._n2 = n2
        self.phi_linf = 0.0
        self.u_linf = 0.0
        self._u_h1_sq = 0.0
        self._mu_sq = 0.0
        self._p_sq = 0.0
        self._prev_u = None

    def add_node(self, dt_prev: float, e_phi: np.ndarray, e_u: np.ndarray):
        """Node values of phi and u; ``dt_prev`` is the distance to the previous node."""
        self.phi_linf = max(self.phi_linf, math.sqrt(max(_inner(self._K1, e_phi, e_phi), 0.0)))
        self.u_linf = max(self.u_linf, math.sqrt(max(_inner(self._M2, e_u, e_u), 0.0)))
        Kb = self._K2 @ e_u
        bb = float(e_u @ Kb)
        if self._prev_u is not None:
            a, Ka, aa = self._prev_u
            self._u_h1_sq += dt_prev / 3.0 * (aa + float(a @ Kb) + bb)
        self._prev_u = (e_u, Kb, bb)

    def add_interval(self, dt: float, e_mu: np.ndarray, e_p: np.ndarray):
        self._mu_sq += dt * _inner(self._K1, e_mu, e_mu)
        self._p_sq += dt * _inner(self._M1, e_p, e_p)

    def result(self) -> dict:
        return {
            "phi_Linf_H1": self.phi_linf,
            "u_Linf_L2": self.u_linf,
            "mu_L2_H1": math.sqrt(max(self._mu_sq, 0.0)),
            "p_L2_L2": math.sqrt(max(self._p_sq, 0.0)),
            "u_L2_H1": math.sqrt(max(self._u_h1_sq, 0.0)),
        }


def spacetime_norms(disc: Discretization, times, phi, u, mu, p) -> dict:
    """The five norms of an error trajectory given at ``times``.

    ``phi``/``u`` hold node values (piecewise linear in time); ``mu``/``p``
    hold interval values with entry 0 unused (piecewise constant).
    """
    t = np.asarray(times, dtype=float)
    if not (len(phi) == len(u) == len(mu) == len(p) == len(t)):
        raise ValueError("error trajectory fields are sampled on different grids")
    acc = SpaceTimeAccumulator(disc)
    for k in range(len(t)):
        dt = t[k] - t[k - 1] if k else 0.0
        acc.add_node(dt, phi[k], u[k])
        if k:
            acc.add_interval(dt, mu[k], p[k])
    return acc.result()


# -- study --------------------------------------------------------------------
@dataclass
class ErrorReport:
    levels: list
    reference: int
    errors: dict = field(default_factory=dict)  # norm -> per-level list
    time_comparison: str = "coarse"
    T: float = float("nan")

    @property
    def eocs(self) -> dict:
        out = {}
        for name in NORMS:
            e = self.errors[name]
            out[name] = [float("nan")] + [
                eoc(e[i - 1], e[i]) if e[i - 1] > 0 and e[i] > 0 else float("nan") for i in range(1, len(e))
            ]
        return out

    def header(self) -> str:
        return (f"self-convergence against level {self.reference}, T={self.T:g}, "
                f"time comparison: {self.time_comparison}")

    def rows(self):
        eo = self.eocs
        for i, k in enumerate(self.levels):
            row = {"k": k}
            for name in NORMS:
                row[name] = self.errors[name][i]
                row[name + "_eoc"] = eo[name][i]
            yield row

    def to_csv(self, path) -> None:
        cols = ["k"] + [c for name in NORMS for c in (name, name + "_eoc")]
        with open(path, "w", newline="") as fh:
            fh.write(f"# {self.header()}\n")
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for row in self.rows():
                w.writerow({c: (f"{v:.6e}" if isinstance(v, float) else v) for c, v in row.items()})

    def to_text(self) -> str:
        heads = ["k"] + [h for name in NORMS for h in (NORM_LABELS[name], "EOC")]
        body = []
        for row in self.rows():
            cells = [str(row["k"])]
            for name in NORMS:
                cells.append(f"{row[name]:.3e}")
                e = row[name + "_eoc"]
                cells.append("---" if math.isnan(e) else f"{e:.3f}")
            body.append(cells)
        widths = [max(len(r[i]) for r in [heads] + body) for i in range(len(heads))]
        fmt = " | ".join("{:>%d}" % w for w in widths)
        lines = [f"# {self.header()}", fmt.format(*heads), "-+-".join("-" * w for w in widths)]
        lines += [fmt.format(*r) for r in body]
        return "\n".join(lines) + "\n"


@dataclass
class _Level:
    k: int
    disc: Discretization
    ratio: int
    dt: float
    phi: list
    u: list
    mu: list
    p: list
    P1: sp.csr_matrix | None = None
    P2: sp.csr_matrix | None = None

    def inject(self, kind, c):
        E = self.P1 if kind == P1 else self.P2
        if kind == P2:
            n = E.shape[1]
            return np.concatenate([E @ c[:n], E @ c[n:]])
        return E @ c


def _collect(k: int, T: float, newton: NewtonSettings, **overrides) -> _Level:
    cfg = convergence_config(k, T=T, newton=newton, **overrides)
    pb = build_problem(cfg)
    lv = _Level(k, pb.disc, 0, cfg.dt, [], [], [None], [None])

    def keep(n, t, st, row):
        lv.phi.append(st.phi.copy())
        lv.u.append(st.u.copy())
        lv.mu.append(st.mu.copy())
        lv.p.append(st.p.copy())

    st0 = initial_state(cfg, pb.disc)
    lv.phi.append(st0.phi.copy())
    lv.u.append(st0.u.copy())
    run(cfg, problem=pb, state=st0, on_step=keep, keep_snapshots=False)
    return lv


def self_convergence_study(levels=(0, 1, 2, 3), reference: int | None = None, T: float = 2.0,
                           newton: NewtonSettings = NewtonSettings(), modes=("coarse",),
                           **overrides) -> dict:
    """Run every level, then stream the reference run and accumulate errors.

    Returns ``{mode: ErrorReport}``; the reference level itself is not listed.
    """
    levels = sorted(levels)
    reference = max(levels) if reference is None else reference
    coarse_levels = [k for k in levels if k < reference]
    if not coarse_levels:
        raise ValueError("need at least one level below the reference")
    for m in modes:
        if m not in MODES:
            raise ValueError(f"unknown time comparison mode {m!r}")

    ref_cfg = convergence_config(reference, T=T, newton=newton, **overrides)
    ref = build_problem(ref_cfg)
    data = []
    for k in coarse_levels:
        log.info("running level %d", k)
        lv = _collect(k, T, newton, **overrides)
        lv.ratio = 2 ** (reference - k)
        lv.P1 = prolongation(lv.disc, ref.disc, P1)
        lv.P2 = prolongation(lv.disc, ref.disc, P2)
        data.append(lv)
    acc = {(m, lv.k): SpaceTimeAccumulator(ref.disc) for m in modes for lv in data}
    dtf = ref_cfg.dt

    def compare(n, phi, u, mu, p):
        for lv in data:
            m = lv.ratio
            if "coarse" in modes and n % m == 0:
                K = n // m
                a = acc["coarse", lv.k]
                a.add_node(lv.dt if K else 0.0, phi - lv.inject(P1, lv.phi[K]), u - lv.inject(P2, lv.u[K]))
                if K:
                    a.add_interval(lv.dt, mu - lv.inject(P1, lv.mu[K]), p - lv.inject(P1, lv.p[K]))
            if "fine" in modes:
                a = acc["fine", lv.k]
                K0, j = divmod(n, m)
                if j == 0:
                    cphi, cu = lv.phi[K0], lv.u[K0]
                else:
                    th = j / m
                    cphi = (1 - th) * lv.phi[K0] + th * lv.phi[K0 + 1]
                    cu = (1 - th) * lv.u[K0] + th * lv.u[K0 + 1]
                a.add_node(dtf if n else 0.0, phi - lv.inject(P1, cphi), u - lv.inject(P2, cu))
                if n:
                    K = -(-n // m)  # interval (t_{K-1}, t_K] containing (t_{n-1}, t_n]
                    a.add_interval(dtf, mu - lv.inject(P1, lv.mu[K]), p - lv.inject(P1, lv.p[K]))

    st0 = initial_state(ref_cfg, ref.disc)
    compare(0, st0.phi, st0.u, None, None)
    log.info("running reference level %d", reference)
    run(ref_cfg, problem=ref, state=st0, keep_snapshots=False,
        on_step=lambda n, t, st, row: compare(n, st.phi, st.u, st.mu, st.p))

    out = {}
    for mode in modes:
        rep = ErrorReport(coarse_levels, reference, time_comparison=mode, T=T)
        res = [acc[mode, k].result() for k in coarse_levels]
        rep.errors = {name: [r[name] for r in res] for name in NORMS}
        out[mode] = rep
    return out
