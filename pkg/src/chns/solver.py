"""Sparse direct solves and the Newton driver for one time step."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .assembly import StepContext, SystemState
from .errors import ConfigError, NewtonConvergenceError, SingularMatrixError

log = logging.getLogger(__name__)

# SuperLU options, fixed so fill-in and timings are reproducible.  The
# Jacobian has a symmetric pattern, so minimum degree on A^T + A is used.
# The pressure and multiplier rows have zero diagonals; letting threshold
# pivoting pick off-diagonal rows there destroys the ordering (fill grows
# roughly 8x per mesh refinement).  The fast path therefore shifts exact
# zero diagonals by a tiny amount, takes diagonal pivots and recovers the
# unperturbed solution by iterative refinement.  If a probe solve does not
# reach the backward-error target, the matrix is refactored with threshold
# partial pivoting.
ORDERING = "MMD_AT_PLUS_A"
PIVOT_THRESHOLD = 0.01
STATIC_SHIFT = 1e-12
BACKWARD_TOL = 1e-10
REFINE_STEPS = 5


class LUFactorization:
    """Sparse LU with backward-error-guarded iterative refinement.

    ``pivoting`` is ``"static"`` for the shifted diagonal-pivot path and
    ``"threshold"`` for the partial-pivoting fallback.
    """

    def __init__(self, A, pivoting: str = "auto"):
        if pivoting not in ("auto", "static", "threshold"):
            raise ValueError(f"unknown pivoting mode {pivoting!r}")
        A = sp.csr_matrix(A)
        if A.shape[0] != A.shape[1]:
            raise ValueError(f"matrix must be square, got {A.shape}")
        self.A = A
        self.norm_inf = float(abs(A).sum(axis=1).max()) if A.nnz else 0.0
        empty_rows = np.flatnonzero(np.diff(A.indptr) == 0)
        if len(empty_rows) or A.nnz == 0:
            row = int(empty_rows[0]) if len(empty_rows) else 0
            raise SingularMatrixError(f"matrix is structurally singular: row {row} is empty", row=row)
        self.backward_error = None
        if pivoting == "static":
            self._factor_static()
            return
        if pivoting == "auto":
            try:
                self._factor_static()
                if self._probe():
                    return
            except SingularMatrixError:
                pass
            self._lu = None
            log.debug("static pivoting rejected; refactoring with threshold pivoting")
        self._factor(self.A, PIVOT_THRESHOLD)
        self.pivoting = "threshold"

    def _factor(self, M, threshold):
        try:
            self._lu = splu(M.tocsc(), permc_spec=ORDERING, diag_pivot_thresh=threshold,
                            options=dict(SymmetricMode=True))
        except RuntimeError as exc:
            raise SingularMatrixError(f"matrix is singular: {exc}") from exc
        diag_u = self._lu.U.diagonal()
        small = np.flatnonzero(np.abs(diag_u) <= np.finfo(float).eps * max(self.norm_inf, 1e-300))
        if len(small):
            row = int(self._lu.perm_r.argsort()[small[0]]) if small[0] < len(self._lu.perm_r) else None
            raise SingularMatrixError(f"matrix is numerically singular near pivot row {row}", row=row)

    def _factor_static(self):
        zero = self.A.diagonal() == 0
        M = self.A - sp.diags(STATIC_SHIFT * self.norm_inf * zero) if zero.any() else self.A
        self._factor(M, 0.0)
        self.pivoting = "static"

    def _probe(self) -> bool:
        b = np.random.Generator(np.random.PCG64(0)).uniform(-1.0, 1.0, self.A.shape[0])
        self.solve(b)
        ok = self.backward_error <= BACKWARD_TOL
        self.backward_error = None
        return ok

    @property
    def fill(self) -> int:
        return int(self._lu.L.nnz + self._lu.U.nnz)

    def solve(self, b: np.ndarray, refine: int = REFINE_STEPS) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        x = self._lu.solve(b)
        bnorm = float(np.abs(b).max()) if b.size else 0.0
        best, prev = x, np.inf
        for _ in range(refine + 1):
            res = b - self.A @ x
            err = float(np.abs(res).max()) / (self.norm_inf * float(np.abs(x).max()) + bnorm + 1e-300)
            if not err < prev:  # stagnated or diverged; keep the best iterate
                break
            best, prev = x, err
            if err <= BACKWARD_TOL * 1e-4:
                break
            x = x + self._lu.solve(res)
        self.backward_error = prev
        return best


def lu_factorize(A, pivoting: str = "auto") -> LUFactorization:
    return LUFactorization(A, pivoting)


@dataclass(frozen=True)
class NewtonSettings:
    """Stopping rule and Jacobian policy.

    With ``reuse_jacobian`` the factorization is kept across iterations and
    time steps (a chord method) and refreshed once the observed contraction
    ratio of successive increments exceeds ``refresh_ratio``.  The converged
    solution solves the same discrete system; only the path differs.
    """

    abs_tol: float = 1e-10
    rel_tol: float = 1e-9
    max_iterations: int = 50
    reuse_jacobian: bool = False
    refresh_ratio: float = 0.1

    def __post_init__(self):
        if not (self.abs_tol > 0 and self.rel_tol > 0):
            raise ConfigError("Newton tolerances must be positive")
        if int(self.max_iterations) < 1:
            raise ConfigError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if not (0 < self.refresh_ratio < 1):
            raise ConfigError(f"refresh_ratio must lie in (0, 1), got {self.refresh_ratio}")


@dataclass
class NewtonReport:
    iterations: int = 0
    abs_increments: list = field(default_factory=list)
    rel_increments: list = field(default_factory=list)
    residual_norm: float = float("nan")
    criterion: str = ""
    backward_errors: list = field(default_factory=list)
    factorizations: int = 0

    @property
    def final_increment(self) -> float:
        return self.abs_increments[-1] if self.abs_increments else float("nan")


def increment_norm(ctx: StepContext, x: np.ndarray) -> float:
    """L2(Omega) norm of the (phi, mu, u) part of a packed vector."""
    disc, L = ctx.disc, ctx.assembler.layout
    s = disc.l2_norm_p1(x[L.phi]) ** 2 + disc.l2_norm_p1(x[L.mu]) ** 2 + disc.l2_norm_vel(x[L.u]) ** 2
    return float(np.sqrt(s))


class NewtonSolver:
    """Per-run Newton driver; holds the cached factorization in reuse mode.

    Not safe to share between concurrent callers.
    """

    def __init__(self, ctx: StepContext, settings: NewtonSettings = NewtonSettings()):
        self.ctx = ctx
        self.settings = settings
        self._lu: LUFactorization | None = None
        self.factorizations = 0

    def reset(self):
        self._lu = None

    def _factorize(self, frozen, x, report):
        self._lu = None  # release the old factors first
        self._lu = lu_factorize(self.ctx.assembler.jacobian(frozen, x))
        self.factorizations += 1
        report.factorizations += 1

    def step(self, prev: SystemState, guess: SystemState | None = None) -> tuple[SystemState, NewtonReport]:
        """Advance one step; the initial guess is the previous level unless given."""
        st = self.settings
        asm = self.ctx.assembler
        L = asm.layout
        frozen = asm.freeze(prev)
        x = L.pack(guess if guess is not None else prev)
        report = NewtonReport()
        fresh = False
        for it in range(1, st.max_iterations + 1):
            res = asm.residual(frozen, x)
            if self._lu is None or not st.reuse_jacobian:
                self._factorize(frozen, x, report)
                fresh = True
            dx = self._lu.solve(-res)
            report.backward_errors.append(self._lu.backward_error)
            x = x + dx
            a = increment_norm(self.ctx, dx)
            n = increment_norm(self.ctx, x)
            rel = a / n if n > 0 else (0.0 if a == 0 else np.inf)
            report.iterations = it
            report.abs_increments.append(a)
            report.rel_increments.append(rel)
            log.debug("newton it=%d abs=%.3e rel=%.3e", it, a, rel)
            if not np.all(np.isfinite(x)):
                break
            if a < st.abs_tol or rel < st.rel_tol:
                report.criterion = "absolute" if a < st.abs_tol else "relative"
                report.residual_norm = float(np.linalg.norm(asm.residual(frozen, x)))
                inc = report.abs_increments
                if len(inc) >= 2 and inc[-1] > inc[-2]:
                    log.warning("Newton increments grew on the last iteration: %.3e -> %.3e", inc[-2], inc[-1])
                if st.reuse_jacobian and self._contraction(report) > st.refresh_ratio:
                    self._lu = None  # refactor at the start of the next step
                return L.unpack(x), report
            if st.reuse_jacobian and not fresh and it >= 2 and self._contraction(report) > st.refresh_ratio:
                self._lu = None
        raise NewtonConvergenceError(
            f"Newton did not converge in {report.iterations} iterations "
            f"(last increment {report.final_increment:.3e})",
            iterate=L.unpack(x), history=report,
        )

    @staticmethod
    def _contraction(report: NewtonReport) -> float:
        inc = report.abs_increments
        if len(inc) < 2 or inc[-2] == 0:
            return 0.0
        return inc[-1] / inc[-2]


def newton_solve(prev: SystemState, ctx: StepContext, settings: NewtonSettings = NewtonSettings(),
                 guess: SystemState | None = None) -> tuple[SystemState, NewtonReport]:
    """One step with a fresh solver (no factorization carried over)."""
    return NewtonSolver(ctx, settings).step(prev, guess)
