"""Residual, Jacobian, energy and diagnostics of one implicit time step.

Unknown/residual layout (global vector)::

    [ mu (n1) | phi (n1) | u_x (n2) | u_y (n2) | p (n1) | r (1) ]

Residual rows in the same slots hold, in order, the chemical-potential
equation, the phase-field transport equation, the two momentum components,
the weak divergence constraint and the zero-mean pressure row.

Viscosity and mobility are evaluated at the previous time level and are
therefore constant during the Newton iteration of a step; they live in a
:class:`FrozenStep` together with the other previous-level data.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .materials import MaterialModel, shear_rate
from .spaces import Discretization


@dataclass
class SystemState:
    phi: np.ndarray
    mu: np.ndarray
    u: np.ndarray
    p: np.ndarray
    r: float = 0.0

    def copy(self) -> "SystemState":
        return SystemState(self.phi.copy(), self.mu.copy(), self.u.copy(), self.p.copy(), float(self.r))

    @classmethod
    def zeros(cls, disc: Discretization) -> "SystemState":
        n1, n2 = disc.n1, disc.n2
        return cls(np.zeros(n1), np.zeros(n1), np.zeros(2 * n2), np.zeros(n1), 0.0)

    def check(self, disc: Discretization) -> None:
        n1, n2 = disc.n1, disc.n2
        shapes = {"phi": n1, "mu": n1, "u": 2 * n2, "p": n1}
        for name, n in shapes.items():
            v = getattr(self, name)
            if v.shape != (n,):
                raise ValueError(f"state.{name} has shape {v.shape}, expected ({n},)")
            if not np.all(np.isfinite(v)):
                raise ValueError(f"state.{name} has non-finite entries")
        if not np.isfinite(self.r):
            raise ValueError("state.r is not finite")


@dataclass
class Layout:
    n1: int
    n2: int

    @property
    def size(self) -> int:
        return 3 * self.n1 + 2 * self.n2 + 1

    @property
    def mu(self):
        return slice(0, self.n1)

    @property
    def phi(self):
        return slice(self.n1, 2 * self.n1)

    @property
    def u(self):
        return slice(2 * self.n1, 2 * self.n1 + 2 * self.n2)

    @property
    def p(self):
        return slice(2 * self.n1 + 2 * self.n2, 3 * self.n1 + 2 * self.n2)

    @property
    def r(self) -> int:
        return 3 * self.n1 + 2 * self.n2

    def pack(self, s: SystemState) -> np.ndarray:
        return np.concatenate([s.mu, s.phi, s.u, s.p, [s.r]])

    def unpack(self, x: np.ndarray) -> SystemState:
        return SystemState(
            phi=x[self.phi].copy(), mu=x[self.mu].copy(), u=x[self.u].copy(), p=x[self.p].copy(),
            r=float(x[self.r]),
        )


@dataclass
class StepContext:
    dt: float
    gamma: float
    s: float
    F: tuple
    materials: MaterialModel
    disc: Discretization

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not (self.gamma > 0 and self.s > 0):
            raise ValueError("gamma and s must be positive")
        self.F = tuple(float(v) for v in self.F)
        if len(self.F) != 2:
            raise ValueError("body force must have two components")

    @cached_property
    def assembler(self) -> "Assembler":
        return Assembler(self)


@dataclass
class FrozenStep:
    """Previous-level quantities at quadrature points."""

    prev: SystemState
    phi_n: np.ndarray  # (nt, nq)
    u_n: np.ndarray  # (nt, nq, 2)
    dcav_n: np.ndarray  # (nt, nq)
    mob: np.ndarray  # (nt, nq)
    eta: np.ndarray  # (nt, nq)
    trace_phi_n: np.ndarray  # (nb, nbq)
    step_data: np.ndarray | None = field(default=None, repr=False)  # frozen Jacobian part, lazy


class _Block:
    """Global placement of a family of element matrices of shape (nt, na, nb)."""

    def __init__(self, rows, cols):
        self.rows_local = rows
        self.cols_local = cols
        r = np.broadcast_to(rows[:, :, None], (rows.shape[0], rows.shape[1], cols.shape[1]))
        c = np.broadcast_to(cols[:, None, :], r.shape)
        self.mask = ((r >= 0) & (c >= 0)).ravel()
        self.r = r.ravel()[self.mask]
        self.c = c.ravel()[self.mask]
        self.pos = None


def _with(off, d):
    return np.where(d >= 0, d + off, -1)


class Assembler:
    def __init__(self, ctx: StepContext):
        self.ctx = ctx
        disc = self.disc = ctx.disc
        self.mat = ctx.materials
        n1, n2 = disc.n1, disc.n2
        self.layout = L = Layout(n1, n2)
        nt = disc.mesh.n_triangles

        d1 = disc.Q.cell_dofs
        d2 = disc.V.cell_dofs
        dv = np.concatenate([_with(0, d2), _with(n2, d2)], axis=1)  # (nt, 12) into [ux|uy]
        self.dMu = _with(L.mu.start, d1)
        self.dPhi = _with(L.phi.start, d1)
        self.dU = _with(L.u.start, dv)
        self.dP = _with(L.p.start, d1)
        self.dR = np.full((nt, 1), L.r)
        be = disc.b_dofs
        self.bMu = _with(L.mu.start, be)
        self.bPhi = _with(L.phi.start, be)

        B = _Block
        self.blocks = {
            "mu_mu": B(self.dMu, self.dMu),
            "mu_phi": B(self.dMu, self.dPhi),
            "mu_phi_b": B(self.bMu, self.bPhi),
            "phi_phi": B(self.dPhi, self.dPhi),
            "phi_mu": B(self.dPhi, self.dMu),
            "phi_u": B(self.dPhi, self.dU),
            "u_u": B(self.dU, self.dU),
            "u_p": B(self.dU, self.dP),
            "u_phi": B(self.dU, self.dPhi),
            "u_mu": B(self.dU, self.dMu),
            "p_u": B(self.dP, self.dU),
            "p_r": B(self.dP, self.dR),
            "r_p": B(self.dR, self.dP),
        }
        N = L.size
        rows = np.concatenate([b.r for b in self.blocks.values()])
        cols = np.concatenate([b.c for b in self.blocks.values()])
        keys = np.unique(np.concatenate([rows * N + cols, cols * N + rows]))
        self.n = N
        self.nnz = len(keys)
        kr, kc = np.divmod(keys, N)
        counts = np.bincount(kr, minlength=N)
        self.indptr = np.concatenate([[0], np.cumsum(counts)])
        self.indices = kc.astype(np.int32)
        for b in self.blocks.values():
            b.pos = np.searchsorted(keys, b.r * N + b.c)

        self._const = self._constant_data()

    # -- helpers --------------------------------------------------------------
    def _add(self, data, name, local):
        b = self.blocks[name]
        data += np.bincount(b.pos, weights=np.ravel(local)[b.mask], minlength=self.nnz)

    def _matrix(self, data) -> sp.csr_matrix:
        return sp.csr_matrix((data, self.indices.copy(), self.indptr.copy()), shape=(self.n, self.n))

    def _scatter(self, out, dofs, local):
        d = np.ravel(dofs)
        v = np.ravel(local)
        keep = d >= 0
        out += np.bincount(d[keep], weights=v[keep], minlength=len(out))

    # -- element tables -------------------------------------------------------
    @cached_property
    def mass11(self):
        return np.einsum("tq,qa,qb->tab", self.disc.wdet, self.disc.phi1, self.disc.phi1)

    @cached_property
    def stiff11(self):
        return np.einsum("t,tai,tbi->tab", 0.5 * self.disc.det, self.disc.dphi1, self.disc.dphi1)

    @cached_property
    def mass22(self):
        return np.einsum("tq,qa,qb->tab", self.disc.wdet, self.disc.phi2, self.disc.phi2)

    def _vec_block(self, comp):
        """Expand per-component (nt, 6, 6) blocks into (nt, 12, 12); comp[c][d]."""
        nt = comp[0][0].shape[0]
        out = np.empty((nt, 12, 12))
        for c in range(2):
            for d in range(2):
                out[:, 6 * c:6 * c + 6, 6 * d:6 * d + 6] = comp[c][d]
        return out

    def _constant_data(self):
        disc, ctx = self.disc, self.ctx
        data = np.zeros(self.nnz)
        nt = disc.mesh.n_triangles
        w = disc.wdet
        self._add(data, "mu_mu", self.mass11)
        self._add(data, "mu_phi", -ctx.gamma * self.stiff11)
        self._add(data, "phi_phi", self.mass11 / ctx.dt)
        m22 = self.mass22 / ctx.dt
        z = np.zeros_like(m22)
        self._add(data, "u_u", self._vec_block([[m22, z], [z, m22]]))
        # -<p, div v> and <div u, q>
        bp = np.concatenate(
            [-np.einsum("tq,qb,tqa->tab", w, disc.phi1, disc.dphi2[..., c]) for c in range(2)], axis=1
        )  # (nt, 12, 3)
        self._add(data, "u_p", bp)
        self._add(data, "p_u", -np.transpose(bp, (0, 2, 1)))
        ones = np.einsum("tq,qa->ta", w, disc.phi1)
        self._add(data, "p_r", ones[:, :, None])
        self._add(data, "r_p", ones[:, None, :])
        # wall terms: -(1/dt + g'') boundary mass - s boundary stiffness
        g2 = float(self.mat.g(0.0)[2])
        bm = np.einsum("eq,qa,qb->eab", disc.b_w, disc.b_phi, disc.b_phi)
        bk = np.einsum("e,ea,eb->eab", disc.b_len, disc.b_dx, disc.b_dx)
        self._add(data, "mu_phi_b", -(1.0 / ctx.dt + g2) * bm - ctx.s * bk)
        self._bmass = bm
        self._bstiff = bk
        self._ones = ones
        return data

    # -- previous level -------------------------------------------------------
    def freeze(self, prev: SystemState) -> FrozenStep:
        disc = self.disc
        phi_n = disc.p1_values(prev.phi)
        n2 = disc.n2
        u_n = np.stack([disc.p2_values(prev.u[:n2]), disc.p2_values(prev.u[n2:])], axis=-1)
        grad_un = np.stack([disc.p2_grads(prev.u[:n2]), disc.p2_grads(prev.u[n2:])], axis=-2)
        eta = self.mat.viscosity(shear_rate(grad_un), phi_n)
        mob = self.mat.mobility(phi_n)
        dcav_n = self.mat.f(phi_n).dcav
        return FrozenStep(prev, phi_n, u_n, dcav_n, mob, eta, disc.trace_values(prev.phi))

    def _step_data(self, fr: FrozenStep) -> np.ndarray:
        """Jacobian entries fixed within a step: mobility and viscous blocks."""
        if fr.step_data is not None:
            return fr.step_data
        disc = self.disc
        mob, eta = fr.mob, fr.eta
        data = np.zeros(self.nnz)
        w = disc.wdet
        self._add(data, "phi_mu", np.einsum("tq,tai,tbi->tab", w * mob, disc.dphi1, disc.dphi1))
        we = w * eta
        G = disc.dphi2
        lap = np.einsum("tq,tqai,tqbi->tab", we, G, G)
        comp = [[None, None], [None, None]]
        for c in range(2):
            for d in range(2):
                blk = 0.5 * np.einsum("tq,tqb,tqa->tab", we, G[..., c], G[..., d])
                if c == d:
                    blk = blk + 0.5 * lap
                comp[c][d] = blk
        self._add(data, "u_u", self._vec_block(comp))
        fr.step_data = data
        return data

    def _advect(self, wv):
        """(w . grad) P_a at quadrature points, shape (nt, nq, 6)."""
        disc = self.disc
        W = np.matmul(wv, disc.inv_t)  # (nt, nq, 2) in reference coordinates
        return np.einsum("tqk,qak->tqa", W, disc._g2_cols.reshape(-1, 2, 6).transpose(0, 2, 1))

    # -- residual -------------------------------------------------------------
    def _fields(self, fr: FrozenStep, x: np.ndarray):
        disc, L = self.disc, self.layout
        n2 = disc.n2
        mu, phi, u, p = x[L.mu], x[L.phi], x[L.u], x[L.p]
        F = {}
        F["phi"] = disc.p1_values(phi)
        F["mu"] = disc.p1_values(mu)
        F["gphi"] = disc.p1_grads(phi)
        F["gmu"] = disc.p1_grads(mu)
        F["u"] = np.stack([disc.p2_values(u[:n2]), disc.p2_values(u[n2:])], axis=-1)
        F["gu"] = np.stack([disc.p2_grads(u[:n2]), disc.p2_grads(u[n2:])], axis=-2)  # (nt,nq,c,j)
        F["p"] = disc.p1_values(p)
        F["r"] = x[L.r]
        F["phih"] = 0.5 * (F["phi"] + fr.phi_n)
        F["w"] = 0.5 * (F["u"] + fr.u_n)
        F["tphi"] = disc.trace_values(phi)
        F["tdx"] = disc.trace_dx(phi)
        return F

    def residual(self, fr: FrozenStep, x: np.ndarray) -> np.ndarray:
        ctx, disc = self.ctx, self.disc
        F = self._fields(fr, x)
        w = disc.wdet
        N1, dN1 = disc.phi1, disc.dphi1
        P, dP = disc.phi2, disc.dphi2
        dt = ctx.dt
        res = np.zeros(self.n)

        fv = self.mat.f(F["phi"])
        src = w * (F["mu"] - fv.dvex - fr.dcav_n)
        r_mu = src @ N1 - ctx.gamma * np.einsum("t,ti,tai->ta", 0.5 * disc.det, F["gphi"], dN1)
        self._scatter(res, self.dMu, r_mu)
        g1 = self.mat.g(F["tphi"])[1]
        bsrc = disc.b_w * ((F["tphi"] - fr.trace_phi_n) / dt + g1)
        r_mub = -(bsrc @ disc.b_phi) - ctx.s * (disc.b_len * F["tdx"])[:, None] * disc.b_dx
        self._scatter(res, self.bMu, r_mub)

        flux = F["phih"][..., None] * F["u"]  # (nt,nq,2)
        r_phi = (w * (F["phi"] - fr.phi_n) / dt) @ N1
        r_phi -= np.einsum("ti,tai->ta", np.einsum("tq,tqi->ti", w, flux), dN1)
        r_phi += np.sum(w * fr.mob, axis=1)[:, None] * np.einsum("ti,tai->ta", F["gmu"], dN1)
        self._scatter(res, self.dPhi, r_phi)

        u, gu, wv = F["u"], F["gu"], F["w"]
        D = 0.5 * (gu + np.swapaxes(gu, -1, -2))
        wgrad_P = self._advect(wv)  # (w . grad) P_a
        wgrad_u = np.einsum("tqj,tqcj->tqc", wv, gu)  # (w . grad) u_c
        Fv = np.asarray(ctx.F)
        pointwise = (u - fr.u_n) / dt + 0.5 * wgrad_u - Fv + F["phih"][..., None] * F["gmu"][:, None, :]
        r_u = np.einsum("tqc,qa->tca", w[..., None] * pointwise, P)
        r_u -= 0.5 * np.matmul((w[..., None] * u).transpose(0, 2, 1), wgrad_P)
        # viscous stress minus pressure, tested against grad of each component
        S = (w * fr.eta)[..., None, None] * D
        S[..., 0, 0] -= w * F["p"]
        S[..., 1, 1] -= w * F["p"]
        r_u += disc.p2_grad_test(S.transpose(0, 2, 1, 3))
        self._scatter(res, self.dU, r_u.reshape(len(w), 12))

        div = gu[..., 0, 0] + gu[..., 1, 1]
        r_p = (w * (F["r"] + div)) @ N1
        self._scatter(res, self.dP, r_p)
        res[self.layout.r] = np.sum(w * F["p"])
        return res

    # -- Jacobian -------------------------------------------------------------
    def jacobian(self, fr: FrozenStep, x: np.ndarray) -> sp.csr_matrix:
        ctx, disc = self.ctx, self.disc
        F = self._fields(fr, x)
        w = disc.wdet
        N1, dN1 = disc.phi1, disc.dphi1
        P, dP = disc.phi2, disc.dphi2
        data = self._const + self._step_data(fr)

        d2vex = self.mat.f(F["phi"]).d2vex
        self._add(data, "mu_phi", -np.einsum("tq,qa,qb->tab", w * d2vex, N1, N1))

        # phi-eq: -<phi_h u, grad psi>
        u = F["u"]
        self._add(data, "phi_phi", -0.5 * np.einsum("tq,qb,tqi,tai->tab", w, N1, u, dN1))
        pu = np.concatenate(
            [-np.einsum("tq,qb,ta->tab", w * F["phih"], P, dN1[..., d]) for d in range(2)], axis=2
        )
        self._add(data, "phi_u", pu)

        # momentum convection
        gu, wv = F["gu"], F["w"]
        wgrad_P = self._advect(wv)
        # delta_cd part: -1/2 (w.grad P_a) P_b + 1/2 (w.grad P_b) P_a
        skew = 0.5 * (np.einsum("tq,qa,tqb->tab", w, P, wgrad_P) - np.einsum("tq,tqa,qb->tab", w, wgrad_P, P))
        comp = [[None, None], [None, None]]
        for c in range(2):
            for d in range(2):
                # -1/4 P_b d_d P_a u_c + 1/4 P_b d_d u_c P_a
                blk = -0.25 * np.einsum("tq,qb,tqa->tab", w * u[..., c], P, dP[..., d])
                blk += 0.25 * np.einsum("tq,qa,qb->tab", w * gu[..., c, d], P, P)
                if c == d:
                    blk += skew
                comp[c][d] = blk
        self._add(data, "u_u", self._vec_block(comp))

        # capillary: <phi_h grad mu, v>
        gmu = F["gmu"]
        uphi = np.concatenate(
            [0.5 * gmu[:, c, None, None] * np.einsum("tq,qa,qb->tab", w, P, N1) for c in range(2)], axis=1
        )
        self._add(data, "u_phi", uphi)
        umu = np.concatenate(
            [np.einsum("tq,qa,tb->tab", w * F["phih"], P, dN1[..., c]) for c in range(2)], axis=1
        )
        self._add(data, "u_mu", umu)
        return self._matrix(data)

    # -- energy and diagnostics -----------------------------------------------
    def energy(self, state: SystemState) -> float:
        disc, ctx = self.disc, self.ctx
        n2 = disc.n2
        w = disc.wdet
        phi = disc.p1_values(state.phi)
        u = np.stack([disc.p2_values(state.u[:n2]), disc.p2_values(state.u[n2:])], axis=-1)
        gphi = disc.p1_grads(state.phi)
        bulk = np.sum(w * (0.5 * np.sum(u * u, axis=-1) + self.mat.f_value(phi)))
        bulk += 0.5 * ctx.gamma * np.sum(0.5 * disc.det * np.sum(gphi * gphi, axis=-1))
        tphi = disc.trace_values(state.phi)
        wall = np.sum(disc.b_w * self.mat.g(tphi)[0])
        wall += 0.5 * ctx.s * np.sum(disc.b_len * disc.trace_dx(state.phi) ** 2)
        return float(bulk + wall)

    def diagnostics(self, state: SystemState) -> dict:
        disc = self.disc
        n2 = disc.n2
        w = disc.wdet
        gu = np.stack([disc.p2_grads(state.u[:n2]), disc.p2_grads(state.u[n2:])], axis=-2)
        div_int = float(np.sum(w * (gu[..., 0, 0] + gu[..., 1, 1])))
        bu = disc.divergence @ state.u
        proj = disc.mass_p1_lu.solve(bu)
        shifted = proj + state.r
        return {
            "mass": float(disc.ones_p1 @ state.phi),
            "mean_div": abs(div_int) / disc.mesh.area,
            "proj_div": float(np.sqrt(max(proj @ bu, 0.0))),
            "proj_div_plus_r": disc.l2_norm_p1(shifted),
            "pressure_mean": float(disc.ones_p1 @ state.p),
            "r": float(state.r),
        }


def assemble_residual(prev: SystemState, iterate: SystemState, ctx: StepContext) -> np.ndarray:
    asm = ctx.assembler
    prev.check(ctx.disc)
    iterate.check(ctx.disc)
    return asm.residual(asm.freeze(prev), asm.layout.pack(iterate))


def assemble_jacobian(prev: SystemState, iterate: SystemState, ctx: StepContext) -> sp.csr_matrix:
    asm = ctx.assembler
    prev.check(ctx.disc)
    iterate.check(ctx.disc)
    return asm.jacobian(asm.freeze(prev), asm.layout.pack(iterate))


def energy(state: SystemState, ctx: StepContext) -> float:
    return ctx.assembler.energy(state)


def diagnostics(state: SystemState, prev: SystemState, ctx: StepContext) -> dict:
    d = ctx.assembler.diagnostics(state)
    d["mass_change"] = d["mass"] - float(ctx.disc.ones_p1 @ prev.phi)
    return d
