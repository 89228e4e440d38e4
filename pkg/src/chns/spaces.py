"""Lagrange P1/P2 spaces on channel meshes, reference bases and quadrature.

Scalar fields (phase field, chemical potential, pressure) live in a continuous
P1 space that is periodic in x.  Each velocity component lives in a continuous
P2 space that is periodic in x and vanishes on the walls; wall nodes carry no
degree of freedom at all (``-1`` in ``cell_dofs``).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError
from .mesh import Mesh

P1, P2 = "P1", "P2"

# Fully symmetric rules on the reference triangle (0,0),(1,0),(0,1), weights
# already scaled to its area 1/2.  Orbit parameters refined to 20 digits.
_S3 = "s3"
_S21 = "s21"
_S111 = "s111"
_RULES = {
    1: (1, [(_S3, (), 0.5)]),
    2: (2, [(_S21, (1.0 / 6.0,), 1.0 / 6.0)]),
    4: (4, [
        (_S21, (0.44594849091596488632,), 0.11169079483900573285),
        (_S21, (0.09157621350977074346,), 0.054975871827660933819),
    ]),
    5: (5, [
        (_S3, (), 0.1125),
        (_S21, (0.47014206410511508977,), 0.066197076394253090369),
        (_S21, (0.1012865073234563388,), 0.062969590272413576298),
    ]),
    6: (6, [
        (_S21, (0.24928674517091042129,), 0.058393137863189683013),
        (_S21, (0.06308901449150222834,), 0.02542245318510340846),
        (_S111, (0.053145049844816947353, 0.31035245103378440542), 0.041425537809186787597),
    ]),
}
# degree 3 has no small symmetric rule with positive weights; borrow degree 4
_RULES[3] = _RULES[4]


def _orbit(kind, params):
    if kind == _S3:
        return [(1 / 3, 1 / 3, 1 / 3)]
    if kind == _S21:
        (a,) = params
        b = 1.0 - 2.0 * a
        return [(a, a, b), (a, b, a), (b, a, a)]
    a, b = params
    c = 1.0 - a - b
    return [(a, b, c), (b, a, c), (a, c, b), (c, a, b), (b, c, a), (c, b, a)]


@dataclass(frozen=True)
class QuadratureRule:
    """Triangle rule in barycentric coordinates plus a Gauss rule on [0, 1]."""

    points: np.ndarray
    weights: np.ndarray
    degree: int
    line_points: np.ndarray
    line_weights: np.ndarray

    @property
    def xy(self) -> np.ndarray:
        """Reference (x, y) coordinates, i.e. barycentric components 1 and 2."""
        return self.points[:, 1:]


def quadrature_rule(degree: int) -> QuadratureRule:
    if degree not in _RULES:
        raise ConfigError(f"no quadrature rule of degree {degree} (supported: 1..6)")
    exact, orbits = _RULES[degree]
    pts, wts = [], []
    for kind, params, w in orbits:
        o = _orbit(kind, params)
        pts += o
        wts += [w] * len(o)
    # Gauss-Legendre with n points is exact to 2n - 1
    n = degree // 2 + 1
    gx, gw = np.polynomial.legendre.leggauss(n)
    return QuadratureRule(
        points=np.array(pts, dtype=float),
        weights=np.array(wts, dtype=float),
        degree=exact,
        line_points=0.5 * (gx + 1.0),
        line_weights=0.5 * gw,
    )


_GRAD_LAMBDA = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
_P2_EDGES = ((0, 1), (1, 2), (2, 0))


def eval_reference_basis(kind: str, points) -> tuple[np.ndarray, np.ndarray]:
    """Basis values ``(..., n)`` and reference gradients ``(..., n, 2)``.

    ``points`` are barycentric coordinates, shape ``(3,)`` or ``(m, 3)``.
    P2 ordering is the three vertex functions followed by the midpoints of
    edges (0,1), (1,2), (2,0).
    """
    lam = np.asarray(points, dtype=float)
    single = lam.ndim == 1
    lam = np.atleast_2d(lam)
    if lam.shape[-1] != 3:
        raise ValueError(f"expected barycentric points with 3 components, got shape {lam.shape}")
    if kind == P1:
        vals = lam.copy()
        grads = np.broadcast_to(_GRAD_LAMBDA, (len(lam), 3, 2)).copy()
    elif kind == P2:
        vals = np.empty((len(lam), 6))
        grads = np.empty((len(lam), 6, 2))
        for i in range(3):
            vals[:, i] = lam[:, i] * (2.0 * lam[:, i] - 1.0)
            grads[:, i] = (4.0 * lam[:, i] - 1.0)[:, None] * _GRAD_LAMBDA[i]
        for e, (i, j) in enumerate(_P2_EDGES):
            vals[:, 3 + e] = 4.0 * lam[:, i] * lam[:, j]
            grads[:, 3 + e] = 4.0 * (lam[:, j, None] * _GRAD_LAMBDA[i] + lam[:, i, None] * _GRAD_LAMBDA[j])
    else:
        raise ValueError(f"unknown element kind {kind!r}")
    if single:
        return vals[0], grads[0]
    return vals, grads


@dataclass(frozen=True, eq=False)
class DofMap:
    kind: str
    n_dofs: int
    cell_dofs: np.ndarray
    dof_coords: np.ndarray
    boundary_dofs: np.ndarray
    trace_edges: np.ndarray | None = None
    node_coords: np.ndarray | None = field(default=None, repr=False)
    node_dofs: np.ndarray | None = field(default=None, repr=False)


def build_scalar_space(mesh: Mesh) -> DofMap:
    rep = np.arange(mesh.n_vertices)
    for right, left in mesh.periodic_pairs.items():
        rep[right] = left
    masters = np.unique(rep)
    number = np.full(mesh.n_vertices, -1, dtype=np.int64)
    number[masters] = np.arange(len(masters))
    vdof = number[rep]
    tol = 1e-12 * mesh.L2
    y = mesh.vertices[:, 1]
    on_wall = (np.abs(y) <= tol) | (np.abs(y - mesh.L2) <= tol)
    bev = mesh.boundary_edge_vertices()
    return DofMap(
        kind=P1,
        n_dofs=len(masters),
        cell_dofs=vdof[mesh.triangles],
        dof_coords=mesh.vertices[masters].copy(),
        boundary_dofs=np.unique(vdof[on_wall]),
        trace_edges=vdof[bev] if len(bev) else np.zeros((0, 2), dtype=np.int64),
        node_coords=mesh.vertices,
        node_dofs=vdof,
    )


def build_velocity_space(mesh: Mesh) -> DofMap:
    tri = mesh.triangles
    v = mesh.vertices
    nodes = [v[tri[:, i]] for i in range(3)]
    nodes += [0.5 * (v[tri[:, i]] + v[tri[:, j]]) for i, j in _P2_EDGES]
    coords = np.stack(nodes, axis=1).reshape(-1, 2)

    # identify nodes by lattice position with x wrapped onto [0, L1)
    scale = 1e9
    kx = np.rint(coords[:, 0] / mesh.L1 * scale).astype(np.int64) % int(scale)
    ky = np.rint(coords[:, 1] / mesh.L2 * scale).astype(np.int64)
    keys = ky * (int(scale) + 1) + kx
    uniq, first, inv = np.unique(keys, return_index=True, return_inverse=True)
    inv = inv.ravel()
    rep_coord = np.column_stack([kx[first] / scale * mesh.L1, coords[first, 1]])
    wall = (ky[first] == 0) | (ky[first] == int(scale))
    number = np.full(len(uniq), -1, dtype=np.int64)
    free = np.flatnonzero(~wall)
    number[free] = np.arange(len(free))
    cell_dofs = number[inv].reshape(len(tri), 6)
    return DofMap(
        kind=P2,
        n_dofs=len(free),
        cell_dofs=cell_dofs,
        dof_coords=rep_coord[free],
        boundary_dofs=np.zeros(0, dtype=np.int64),
        node_coords=coords,
        node_dofs=cell_dofs.ravel(),
    )


def interpolate_nodal(field, space: DofMap) -> np.ndarray:
    """Nodal interpolant of ``field(x, y)``.

    Scalar fields give a vector of length ``n_dofs``; for the velocity space a
    field returning ``(fx, fy)`` gives the stacked ``[fx | fy]`` vector.
    """
    x, y = space.dof_coords[:, 0], space.dof_coords[:, 1]
    vals = field(x, y)
    if isinstance(vals, tuple):
        return np.concatenate([np.broadcast_to(np.asarray(c, dtype=float), x.shape) for c in vals])
    return np.broadcast_to(np.asarray(vals, dtype=float), x.shape).copy()


class Discretization:
    """Mesh, P1/P2 dof maps, quadrature and per-cell geometry, computed once.

    Exposes tabulated basis data at quadrature points and the handful of
    constant sparse matrices used outside the nonlinear assembly (mass and
    stiffness for norms, projections and Newton increments).
    """

    def __init__(self, mesh: Mesh, volume_degree: int = 6, boundary_degree: int = 4):
        self.mesh = mesh
        self.Q = build_scalar_space(mesh)
        self.V = build_velocity_space(mesh)
        self.rule = quadrature_rule(volume_degree)
        self.brule = quadrature_rule(boundary_degree)

        p = mesh.vertices[mesh.triangles]
        jac = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)  # (nt, 2, 2) columns
        det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
        inv_t = np.empty_like(jac)  # J^{-T}
        inv_t[:, 0, 0] = jac[:, 1, 1] / det
        inv_t[:, 0, 1] = -jac[:, 1, 0] / det
        inv_t[:, 1, 0] = -jac[:, 0, 1] / det
        inv_t[:, 1, 1] = jac[:, 0, 0] / det
        self.det = det
        self.wdet = det[:, None] * self.rule.weights[None, :]  # (nt, nq)
        self.qp_xy = p[:, 0, None, :] + np.einsum("tij,qj->tqi", jac, self.rule.xy)

        v1, g1 = eval_reference_basis(P1, self.rule.points)
        v2, g2 = eval_reference_basis(P2, self.rule.points)
        self.phi1 = v1  # (nq, 3)
        self.phi2 = v2  # (nq, 6)
        self.dphi1 = np.einsum("tij,aj->tai", inv_t, g1[0])  # (nt, 3, 2), constant per cell
        self.dphi2 = np.einsum("tij,qaj->tqai", inv_t, g2)  # (nt, nq, 6, 2)
        # reference-gradient factorization of dphi2, used by the BLAS paths below
        nq = len(self.rule.weights)
        self.inv_t = inv_t
        self._g2_rows = np.ascontiguousarray(g2.transpose(1, 0, 2).reshape(6, nq * 2))  # a -> (q, k)
        self._g2_cols = np.ascontiguousarray(g2.transpose(0, 2, 1).reshape(nq * 2, 6))  # (q, k) -> a

        bev = mesh.boundary_edge_vertices()
        self.b_len = np.abs(mesh.vertices[bev[:, 1], 0] - mesh.vertices[bev[:, 0], 0])
        s = self.brule.line_points
        self.b_phi = np.column_stack([1.0 - s, s])  # (nb_q, 2)
        self.b_w = self.b_len[:, None] * self.brule.line_weights[None, :]  # (nb, nb_q)
        self.b_dofs = self.Q.trace_edges
        self.b_dx = np.stack([-1.0 / self.b_len, 1.0 / self.b_len], axis=1)  # (nb, 2)

    @property
    def n1(self) -> int:
        return self.Q.n_dofs

    @property
    def n2(self) -> int:
        return self.V.n_dofs

    # -- evaluation helpers -------------------------------------------------
    def p1_values(self, c: np.ndarray) -> np.ndarray:
        return c[self.Q.cell_dofs] @ self.phi1.T  # (nt, nq)

    def p1_grads(self, c: np.ndarray) -> np.ndarray:
        return np.einsum("ta,tai->ti", c[self.Q.cell_dofs], self.dphi1)  # (nt, 2)

    def p2_local(self, c: np.ndarray) -> np.ndarray:
        d = self.V.cell_dofs
        return np.where(d >= 0, c[np.maximum(d, 0)], 0.0)

    def p2_values(self, c: np.ndarray) -> np.ndarray:
        return self.p2_local(c) @ self.phi2.T

    def p2_grads(self, c: np.ndarray) -> np.ndarray:
        ref = (self.p2_local(c) @ self._g2_rows).reshape(len(self.det), -1, 2)
        return np.matmul(ref, self.inv_t.transpose(0, 2, 1))  # (nt, nq, 2)

    def p2_grad_test(self, V: np.ndarray) -> np.ndarray:
        """sum_{q,i} V[t, ..., q, i] * dphi2[t, q, a, i] for V of shape (nt, ..., nq, 2)."""
        nt = V.shape[0]
        inv = self.inv_t.reshape(nt, *(1,) * (V.ndim - 3), 2, 2)
        W = np.matmul(V, inv)
        return W.reshape(*V.shape[:-2], -1) @ self._g2_cols

    def trace_values(self, c: np.ndarray) -> np.ndarray:
        return c[self.b_dofs] @ self.b_phi.T  # (nb, nb_q)

    def trace_dx(self, c: np.ndarray) -> np.ndarray:
        return np.einsum("ea,ea->e", c[self.b_dofs], self.b_dx)

    # -- constant matrices --------------------------------------------------
    def _scatter(self, rows, cols, vals, shape):
        keep = (rows >= 0) & (cols >= 0)
        return sp.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=shape)

    @cached_property
    def mass_p1(self) -> sp.csr_matrix:
        loc = np.einsum("tq,qa,qb->tab", self.wdet, self.phi1, self.phi1)
        d = self.Q.cell_dofs
        return self._scatter(np.repeat(d, 3, axis=1).ravel(), np.tile(d, 3).ravel(), loc.ravel(),
                             (self.n1, self.n1))

    @cached_property
    def stiffness_p1(self) -> sp.csr_matrix:
        loc = np.einsum("t,tai,tbi->tab", 0.5 * self.det, self.dphi1, self.dphi1)
        d = self.Q.cell_dofs
        return self._scatter(np.repeat(d, 3, axis=1).ravel(), np.tile(d, 3).ravel(), loc.ravel(),
                             (self.n1, self.n1))

    @cached_property
    def mass_p2(self) -> sp.csr_matrix:
        loc = np.einsum("tq,qa,qb->tab", self.wdet, self.phi2, self.phi2)
        d = self.V.cell_dofs
        return self._scatter(np.repeat(d, 6, axis=1).ravel(), np.tile(d, 6).ravel(), loc.ravel(),
                             (self.n2, self.n2))

    @cached_property
    def stiffness_p2(self) -> sp.csr_matrix:
        loc = np.einsum("tq,tqai,tqbi->tab", self.wdet, self.dphi2, self.dphi2)
        d = self.V.cell_dofs
        return self._scatter(np.repeat(d, 6, axis=1).ravel(), np.tile(d, 6).ravel(), loc.ravel(),
                             (self.n2, self.n2))

    @cached_property
    def divergence(self) -> sp.csr_matrix:
        """B with ``(B u)_q = <div u, q>`` for q in Q_h, u = [ux | uy]."""
        mats = []
        d1, d2 = self.Q.cell_dofs, self.V.cell_dofs
        for c in range(2):
            loc = np.einsum("tq,qa,tqb->tab", self.wdet, self.phi1, self.dphi2[..., c])
            mats.append(self._scatter(np.repeat(d1, 6, axis=1).ravel(), np.tile(d2, 3).ravel(),
                                      loc.ravel(), (self.n1, self.n2)))
        return sp.hstack(mats, format="csr")

    @cached_property
    def ones_p1(self) -> np.ndarray:
        """Integrals of the P1 basis functions, i.e. ``<1, q>``."""
        return np.asarray(self.mass_p1.sum(axis=0)).ravel()

    @cached_property
    def mass_p1_lu(self):
        from scipy.sparse.linalg import splu

        return splu(self.mass_p1.tocsc())

    def l2_norm_p1(self, c):
        return float(np.sqrt(max(c @ (self.mass_p1 @ c), 0.0)))

    def h1_norm_p1(self, c):
        return float(np.sqrt(max(c @ (self.mass_p1 @ c) + c @ (self.stiffness_p1 @ c), 0.0)))

    def l2_norm_vel(self, u):
        ux, uy = u[: self.n2], u[self.n2:]
        return float(np.sqrt(max(ux @ (self.mass_p2 @ ux) + uy @ (self.mass_p2 @ uy), 0.0)))

    def h1_norm_vel(self, u):
        ux, uy = u[: self.n2], u[self.n2:]
        K = self.mass_p2 + self.stiffness_p2
        return float(np.sqrt(max(ux @ (K @ ux) + uy @ (K @ uy), 0.0)))

    def evaluate_p1(self, c: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Point evaluation of a P1 field (structured meshes)."""
        return self._evaluate(c[self.Q.cell_dofs], P1, points)

    def evaluate_p2(self, c: np.ndarray, points: np.ndarray) -> np.ndarray:
        return self._evaluate(self.p2_local(c), P2, points)

    def _locate_reference(self, points):
        pts = np.atleast_2d(points)
        t = self.mesh.locate(pts)
        p0 = self.mesh.vertices[self.mesh.triangles[t, 0]]
        p1 = self.mesh.vertices[self.mesh.triangles[t, 1]]
        p2 = self.mesh.vertices[self.mesh.triangles[t, 2]]
        det = self.det[t]
        d = pts - p0
        e1, e2 = p1 - p0, p2 - p0
        xi = (d[:, 0] * e2[:, 1] - d[:, 1] * e2[:, 0]) / det
        eta = (e1[:, 0] * d[:, 1] - e1[:, 1] * d[:, 0]) / det
        return t, np.column_stack([1.0 - xi - eta, xi, eta])

    def _evaluate(self, local, kind, points):
        t, lam = self._locate_reference(points)
        vals, _ = eval_reference_basis(kind, lam)
        return np.einsum("pa,pa->p", local[t], vals)

    def evaluation_matrix(self, kind: str, points: np.ndarray) -> sp.csr_matrix:
        """Sparse E with ``(E c)_i`` the value at ``points[i]`` of the field with coefficients c."""
        t, lam = self._locate_reference(points)
        vals, _ = eval_reference_basis(kind, lam)
        space = self.Q if kind == P1 else self.V
        dofs = space.cell_dofs[t]
        rows = np.repeat(np.arange(len(t)), dofs.shape[1])
        keep = dofs.ravel() >= 0
        return sp.csr_matrix((vals.ravel()[keep], (rows[keep], dofs.ravel()[keep])),
                             shape=(len(t), space.n_dofs))
