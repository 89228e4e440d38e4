"""Structured triangulations of the periodic channel (0, L1) x (0, L2).

Each cell of an ``nx`` x ``ny`` lattice is cut along its rising diagonal into a
lower-right and an upper-left triangle.  Vertices are stored in row-major
lattice order, ``v = j * (nx + 1) + i``, so the column ``x = L1`` is kept as
geometry but identified with ``x = 0`` through :attr:`Mesh.periodic_pairs`.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

BOTTOM, TOP = "bottom", "top"


@dataclass(frozen=True)
class MeshConfig:
    nx: int
    ny: int
    L1: float = 1.0
    L2: float = 1.0

    def __post_init__(self):
        for name in ("nx", "ny"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"mesh.{name} must be a positive integer, got {v!r}")
        for name in ("L1", "L2"):
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0:
                raise ConfigError(f"mesh.{name} must be positive, got {v!r}")


@dataclass(frozen=True, eq=False)
class Mesh:
    """Triangulation with wall edges and periodic vertex pairing.

    ``boundary_edges`` holds ``(triangle, local_edge, tag)`` where local edge
    ``k`` joins local vertices ``k`` and ``(k + 1) % 3``.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: list
    periodic_pairs: dict
    h: float
    L1: float
    L2: float
    nx: int | None = None
    ny: int | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def area(self) -> float:
        return self.L1 * self.L2

    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def boundary_edge_vertices(self) -> np.ndarray:
        """(n_edges, 2) vertex indices of the wall edges, ordered by increasing x."""
        if "bev" not in self._cache:
            out = []
            for t, k, _ in self.boundary_edges:
                a, b = self.triangles[t, k], self.triangles[t, (k + 1) % 3]
                if self.vertices[a, 0] > self.vertices[b, 0]:
                    a, b = b, a
                out.append((a, b))
            self._cache["bev"] = np.array(out, dtype=np.int64).reshape(-1, 2)
        return self._cache["bev"]

    def is_structured(self) -> bool:
        return self.nx is not None and self.ny is not None

    def locate(self, points: np.ndarray) -> np.ndarray:
        """Index of a triangle containing each point (structured meshes only)."""
        if not self.is_structured():
            raise ValueError("point location is only available on structured meshes")
        pts = np.atleast_2d(points)
        sx = pts[:, 0] * self.nx / self.L1
        sy = pts[:, 1] * self.ny / self.L2
        l = np.clip(np.floor(sx).astype(np.int64), 0, self.nx - 1)
        m = np.clip(np.floor(sy).astype(np.int64), 0, self.ny - 1)
        upper = (sy - m) > (sx - l)
        return 2 * (m * self.nx + l) + upper.astype(np.int64)

    def write_text(self, path) -> None:
        """Plain-text dump: header ``nx ny L1 L2``, vertex table, triangle table."""
        with open(path, "w") as fh:
            fh.write(f"{self.nx or 0} {self.ny or 0} {self.L1!r} {self.L2!r}\n")
            fh.write(f"vertices {self.n_vertices}  # index x y\n")
            for i, (x, y) in enumerate(self.vertices):
                fh.write(f"{i} {x!r} {y!r}\n")
            fh.write(f"triangles {self.n_triangles}  # index v0 v1 v2 (counterclockwise)\n")
            for i, (a, b, c) in enumerate(self.triangles):
                fh.write(f"{i} {a} {b} {c}\n")


def build_channel_mesh(cfg: MeshConfig) -> Mesh:
    nx, ny, L1, L2 = cfg.nx, cfg.ny, float(cfg.L1), float(cfg.L2)
    i, j = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1))
    vertices = np.column_stack([L1 * i.ravel() / nx, L2 * j.ravel() / ny])
    # pin the far edges so the periodic offset is exactly (L1, 0)
    vertices[i.ravel() == nx, 0] = L1
    vertices[j.ravel() == ny, 1] = L2

    def vid(ii, jj):
        return jj * (nx + 1) + ii

    l, m = np.meshgrid(np.arange(nx), np.arange(ny))
    l, m = l.ravel(), m.ravel()
    a, b, c, d = vid(l, m), vid(l + 1, m), vid(l + 1, m + 1), vid(l, m + 1)
    lower = np.column_stack([a, b, c])
    upper = np.column_stack([a, c, d])
    triangles = np.empty((2 * nx * ny, 3), dtype=np.int64)
    triangles[0::2] = lower
    triangles[1::2] = upper

    boundary_edges = [(2 * ll, 0, BOTTOM) for ll in range(nx)]
    boundary_edges += [(2 * ((ny - 1) * nx + ll) + 1, 1, TOP) for ll in range(nx)]
    periodic_pairs = {int(vid(nx, jj)): int(vid(0, jj)) for jj in range(ny + 1)}
    h = float(np.hypot(L1 / nx, L2 / ny))
    return Mesh(vertices, triangles, boundary_edges, periodic_pairs, h, L1, L2, nx, ny)


def build_convergence_mesh(k: int, L: float = 1.0) -> Mesh:
    if k < 0:
        raise ConfigError(f"refinement level must be >= 0, got {k}")
    n = 2 ** (k + 3)
    return build_channel_mesh(MeshConfig(n, n, L, L))


@dataclass
class AdmissibilityReport:
    covers_domain: bool
    positive_orientation: bool
    conforming: bool
    periodic_conforming: bool
    one_wall_edge_per_triangle: bool
    boundary_edge_count_ok: bool
    h: float
    min_angle_deg: float
    uniformity: float
    total_area: float
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


def _edge_key(a, b):
    return (a, b) if a < b else (b, a)


def validate_admissibility(mesh: Mesh, rtol: float = 1e-12) -> AdmissibilityReport:
    """Check tiling, conformity (incl. across the periodic seam) and wall-edge rules.

    Conformity is checked combinatorially: with positive orientation and the
    correct total area, the triangles tile the box without hanging nodes iff
    every edge off the box boundary is shared by exactly two triangles.
    """
    x, y = mesh.vertices[:, 0], mesh.vertices[:, 1]
    tol = rtol * max(mesh.L1, mesh.L2)
    areas = mesh.signed_areas()
    total = float(areas.sum())
    failures = []

    covers = abs(total - mesh.area) <= rtol * mesh.area
    covers &= bool(np.all(x >= -tol) & np.all(x <= mesh.L1 + tol))
    covers &= bool(np.all(y >= -tol) & np.all(y <= mesh.L2 + tol))
    if not covers:
        failures.append(f"(1) triangles do not tile the box: area {total!r} vs {mesh.area!r}")
    positive = bool(np.all(areas > 0))
    if not positive:
        failures.append("triangles with non-positive signed area")

    counts = Counter()
    for tri in mesh.triangles:
        for k in range(3):
            counts[_edge_key(int(tri[k]), int(tri[(k + 1) % 3]))] += 1

    def on_wall(e):
        return abs(y[e[0]] - y[e[1]]) <= tol and (abs(y[e[0]]) <= tol or abs(y[e[0]] - mesh.L2) <= tol)

    def on_side(e, xs):
        return abs(x[e[0]] - xs) <= tol and abs(x[e[1]] - xs) <= tol

    conforming = True
    left, right = [], []
    for e, c in counts.items():
        if c > 2:
            conforming = False
        elif c == 1 and not on_wall(e):
            if on_side(e, 0.0):
                left.append(e)
            elif on_side(e, mesh.L1):
                right.append(e)
            else:
                conforming = False
    if not conforming:
        failures.append("(2) non-conforming intersection (hanging node or overlap)")

    left_keys = sorted(tuple(sorted((float(y[a]), float(y[b])))) for a, b in left)
    right_keys = sorted(tuple(sorted((float(y[a]), float(y[b])))) for a, b in right)
    periodic_ok = len(left_keys) == len(right_keys) and all(
        abs(p[0] - q[0]) <= tol and abs(p[1] - q[1]) <= tol for p, q in zip(left_keys, right_keys)
    )
    for vr, vl in mesh.periodic_pairs.items():
        d = mesh.vertices[vr] - mesh.vertices[vl]
        if d[0] != mesh.L1 or d[1] != 0.0:
            periodic_ok = False
    if not periodic_ok:
        failures.append("(2) periodic seam: edges on x=0 and x=L1 do not match")

    wall_per_tri = np.zeros(mesh.n_triangles, dtype=np.int64)
    for t, tri in enumerate(mesh.triangles):
        for k in range(3):
            if on_wall((int(tri[k]), int(tri[(k + 1) % 3]))):
                wall_per_tri[t] += 1
    one_edge = bool(np.all(wall_per_tri <= 1))
    if not one_edge:
        failures.append("(3) a triangle has more than one edge on the walls")
    n_wall = int(wall_per_tri.sum())
    bcount_ok = n_wall == len(mesh.boundary_edges)
    if mesh.nx is not None:
        bcount_ok &= n_wall == 2 * mesh.nx
    if not bcount_ok:
        failures.append(f"wall edge count {n_wall} inconsistent with the tagged edges")

    p = mesh.vertices[mesh.triangles]
    lens = np.stack([np.linalg.norm(p[:, (k + 1) % 3] - p[:, k], axis=1) for k in range(3)], axis=1)
    h_k = lens.max(axis=1)
    r_k = 2.0 * np.abs(areas) / lens.sum(axis=1)
    angles = []
    for k in range(3):
        u = p[:, (k + 1) % 3] - p[:, k]
        v = p[:, (k + 2) % 3] - p[:, k]
        cosang = np.einsum("ij,ij->i", u, v) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
        angles.append(np.degrees(np.arccos(np.clip(cosang, -1, 1))))
    min_angle = float(np.min(angles))
    h_max = float(h_k.max())
    return AdmissibilityReport(
        covers_domain=bool(covers),
        positive_orientation=positive,
        conforming=conforming,
        periodic_conforming=periodic_ok,
        one_wall_edge_per_triangle=one_edge,
        boundary_edge_count_ok=bool(bcount_ok),
        h=h_max,
        min_angle_deg=min_angle,
        uniformity=float(r_k.min() / h_max),
        total_area=total,
        failures=failures,
    )
