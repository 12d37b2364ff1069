"""Meshes, analytic geometry presets, domains, and admissible functions.

Conventions
-----------
* A mesh is a simplicial 3-complex.  Vertices live in chart coordinates:
  3 coordinates for flat presets, 4 ambient coordinates for the round
  3-sphere.
* Per-tetrahedron geometry is expressed in the local simplex coordinates
  ``s`` of the chordal tetrahedron ``x(s) = v0 + E s`` where ``E`` is the
  edge matrix.  ``GeometrySpec.metric[t, q]`` is the 3x3 pullback metric in
  those coordinates at quadrature point ``q`` and ``volume_density[t, q]``
  is its root determinant (which therefore includes the chart Jacobian).
* Scalar curvature and boundary mean curvature are analytic preset data
  carried as vertex fields; they are coefficients of the operators, never
  recovered from the discrete metric.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix
from scipy.sparse.csgraph import dijkstra

__all__ = [
    "Mesh",
    "GeometrySpec",
    "ScalarField",
    "Domain",
    "TET_QP",
    "TET_QW",
    "TRI_QP",
    "TRI_QW",
    "build_preset",
    "extract_subdomain",
    "make_punctured_domain",
    "mollify",
    "construct_admissible_function",
    "write_mesh",
    "read_mesh",
    "PRESET_IDS",
]

# ---------------------------------------------------------------------------
# Quadrature rules
# ---------------------------------------------------------------------------

_TET_ALPHA = 0.5854101966249684544613760503096914353161
_TET_BETA = 0.1381966011250105151795413165634361882280

#: Order-2 4-point tetrahedron rule: barycentric coordinates (4 points x 4).
TET_QP = np.array(
    [
        [_TET_ALPHA, _TET_BETA, _TET_BETA, _TET_BETA],
        [_TET_BETA, _TET_ALPHA, _TET_BETA, _TET_BETA],
        [_TET_BETA, _TET_BETA, _TET_ALPHA, _TET_BETA],
        [_TET_BETA, _TET_BETA, _TET_BETA, _TET_ALPHA],
    ]
)
#: Weights over the reference simplex of volume 1/6 (sum = 1/6).
TET_QW = np.full(4, 1.0 / 24.0)

#: Order-2 3-point triangle rule (edge midpoints), barycentric (3 points x 3).
TRI_QP = np.array(
    [
        [0.5, 0.5, 0.0],
        [0.5, 0.0, 0.5],
        [0.0, 0.5, 0.5],
    ]
)
#: Weights over the reference triangle of area 1/2 (sum = 1/2).
TRI_QW = np.full(3, 1.0 / 6.0)

#: Barycentric gradients of the four P1 basis functions in s-coordinates.
BARY_GRAD = np.array(
    [
        [-1.0, -1.0, -1.0],
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
    ]
)

PRESET_IDS = ("round-s3", "flat-t3", "ball-negR", "annulus", "bump-t3")

_VERTEX_BUDGET = 10**6


# ---------------------------------------------------------------------------
# Core types
# ---------------------------------------------------------------------------


@dataclass
class ScalarField:
    """One real value per mesh vertex."""

    values: np.ndarray
    mesh_id: str
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)

    def copy(self) -> "ScalarField":
        return ScalarField(self.values.copy(), self.mesh_id, dict(self.metadata))


@dataclass
class Mesh:
    """Simplicial 3-complex with boundary marking."""

    vertices: np.ndarray  # (nv, 3) or (nv, 4)
    tets: np.ndarray  # (nt, 4) int
    boundary_faces: np.ndarray  # (nb, 3) int
    boundary_orientation: np.ndarray  # (nb,) +-1
    mesh_id: str
    metadata: dict = field(default_factory=dict)

    # caches
    _edges: Optional[np.ndarray] = field(default=None, repr=False)
    _vertex_graph: Optional[csr_matrix] = field(default=None, repr=False)
    _boundary_flags: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.tets = np.asarray(self.tets, dtype=np.int64)
        self.boundary_faces = np.asarray(self.boundary_faces, dtype=np.int64).reshape(
            -1, 3
        )
        self.boundary_orientation = np.asarray(
            self.boundary_orientation, dtype=np.int64
        ).reshape(-1)

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_tets(self) -> int:
        return self.tets.shape[0]

    @property
    def is_closed(self) -> bool:
        return self.boundary_faces.shape[0] == 0

    @property
    def period(self) -> Optional[float]:
        """Period of a periodic (torus) chart, or None."""
        return self.metadata.get("period")

    @property
    def vertex_flags(self) -> np.ndarray:
        """Boolean array, True at boundary vertices."""
        if self._boundary_flags is None:
            flags = np.zeros(self.num_vertices, dtype=bool)
            if self.boundary_faces.size:
                flags[np.unique(self.boundary_faces)] = True
            self._boundary_flags = flags
        return self._boundary_flags

    def edges(self) -> np.ndarray:
        """Unique undirected edges as an (ne, 2) array with e[0] < e[1]."""
        if self._edges is None:
            pairs = self.tets[:, [0, 1, 0, 2, 0, 3, 1, 2, 1, 3, 2, 3]].reshape(-1, 2)
            pairs = np.sort(pairs, axis=1)
            self._edges = np.unique(pairs, axis=0)
        return self._edges

    def displacement(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Chart displacement b - a honoring periodic wrap when present."""
        d = b - a
        if self.period is not None:
            L = self.period
            d = d - L * np.round(d / L)
        return d

    def edge_lengths(self) -> np.ndarray:
        e = self.edges()
        d = self.displacement(self.vertices[e[:, 0]], self.vertices[e[:, 1]])
        return np.linalg.norm(d, axis=1)

    def min_edge_length(self) -> float:
        return float(self.edge_lengths().min())

    def vertex_graph(self) -> csr_matrix:
        """Sparse symmetric adjacency with edge lengths as weights."""
        if self._vertex_graph is None:
            e = self.edges()
            w = self.edge_lengths()
            n = self.num_vertices
            g = coo_matrix(
                (
                    np.concatenate([w, w]),
                    (
                        np.concatenate([e[:, 0], e[:, 1]]),
                        np.concatenate([e[:, 1], e[:, 0]]),
                    ),
                ),
                shape=(n, n),
            )
            self._vertex_graph = g.tocsr()
        return self._vertex_graph

    def tet_corner_coords(self) -> np.ndarray:
        """Per-tet corner coordinates (nt, 4, dim), periodic-unwrapped.

        For periodic charts the three non-base corners are unwrapped to the
        image nearest the base corner so the chordal simplex is geometric.
        """
        x = self.vertices[self.tets]  # (nt, 4, dim)
        if self.period is not None:
            base = x[:, :1, :]
            x = base + self.displacement(
                np.broadcast_to(base, x.shape), x
            )
        return x

    def validate(self) -> None:
        """Check the structural mesh invariants; raise ValueError on failure."""
        nv = self.num_vertices
        if self.tets.min(initial=0) < 0 or self.tets.max(initial=-1) >= nv:
            raise ValueError("tetrahedron index out of range")
        # each boundary face belongs to exactly one tetrahedron
        faces = self.tets[:, [0, 1, 2, 0, 1, 3, 0, 2, 3, 1, 2, 3]].reshape(-1, 3)
        faces_sorted = np.sort(faces, axis=1)
        uniq, counts = np.unique(faces_sorted, axis=0, return_counts=True)
        once = {tuple(f) for f, c in zip(uniq, counts) if c == 1}
        for bf in self.boundary_faces:
            if tuple(sorted(bf.tolist())) not in once:
                raise ValueError(f"boundary face {bf} not a once-counted tet face")
        if len(once) != self.boundary_faces.shape[0]:
            raise ValueError(
                f"boundary face count {self.boundary_faces.shape[0]} != "
                f"once-counted faces {len(once)}"
            )
        # positive oriented volumes under the reference chart
        vols = tet_volumes(self)
        if vols.min(initial=np.inf) <= 0:
            raise ValueError("non-positive oriented tetrahedron volume")


def tet_edge_matrices(mesh: Mesh) -> np.ndarray:
    """Edge matrices E (nt, dim, 3): columns v_i - v_0 in chart coordinates."""
    x = mesh.tet_corner_coords()
    return np.stack([x[:, 1] - x[:, 0], x[:, 2] - x[:, 0], x[:, 3] - x[:, 0]], axis=2)


def tet_volumes(mesh: Mesh) -> np.ndarray:
    """Oriented chordal volumes.

    For 3-coordinate charts this is det(E)/6.  For the 4-coordinate sphere
    chart the orientation is taken relative to the outward radial direction
    at the tet centroid.
    """
    E = tet_edge_matrices(mesh)
    if mesh.vertices.shape[1] == 3:
        return np.linalg.det(E) / 6.0
    x = mesh.tet_corner_coords()
    centroid = x.mean(axis=1)
    mats = np.concatenate([E, centroid[:, :, None]], axis=2)
    return np.linalg.det(mats) / 6.0


@dataclass
class GeometrySpec:
    """Analytic geometry sampled at quadrature points.

    ``mean_curvature`` values are meaningful only at boundary vertices
    (zero elsewhere).  ``boundary_density`` is the root determinant of the
    induced boundary metric at the triangle quadrature points.
    """

    metric: np.ndarray  # (nt, nq, 3, 3)
    volume_density: np.ndarray  # (nt, nq)
    scalar_curvature: ScalarField
    mean_curvature: Optional[ScalarField]
    boundary_density: Optional[np.ndarray]  # (nb, nqb)
    preset_id: str
    conformal_flat_factor: Optional[ScalarField] = None
    metadata: dict = field(default_factory=dict)

    def validate(self) -> None:
        g = self.metric
        if not np.allclose(g, np.swapaxes(g, -1, -2), atol=1e-12):
            raise ValueError("metric not symmetric")
        evals = np.linalg.eigvalsh(g)
        if evals.min() <= 0:
            raise ValueError("metric not positive definite at a quadrature point")
        dens = np.sqrt(np.linalg.det(g))
        rel = np.abs(self.volume_density - dens) / np.maximum(dens, 1e-300)
        if rel.max(initial=0.0) > 1e-12:
            raise ValueError("volume_density inconsistent with sqrt(det metric)")


@dataclass
class Domain:
    """A connected vertex subdomain with interior and frontier split."""

    vertex_set: np.ndarray
    interior_set: np.ndarray
    frontier_set: np.ndarray
    mesh_id: str
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.vertex_set = np.asarray(self.vertex_set, dtype=np.int64)
        self.interior_set = np.asarray(self.interior_set, dtype=np.int64)
        self.frontier_set = np.asarray(self.frontier_set, dtype=np.int64)

    def mask(self, num_vertices: int) -> np.ndarray:
        m = np.zeros(num_vertices, dtype=bool)
        m[self.vertex_set] = True
        return m


# ---------------------------------------------------------------------------
# Mesh constructors
# ---------------------------------------------------------------------------


def _kuhn_cube_tets(i000, i100, i010, i110, i001, i101, i011, i111):
    """Six Kuhn tetrahedra of a cube given its eight corner indices."""
    return [
        (i000, i100, i110, i111),
        (i000, i110, i010, i111),
        (i000, i010, i011, i111),
        (i000, i011, i001, i111),
        (i000, i001, i101, i111),
        (i000, i101, i100, i111),
    ]


def _fix_orientation(mesh_vertices: np.ndarray, tets: np.ndarray, period=None):
    """Swap two vertices of negatively oriented tets in place."""
    m = Mesh(mesh_vertices, tets, np.zeros((0, 3)), np.zeros(0), "tmp",
             {"period": period} if period else {})
    vols = tet_volumes(m)
    bad = vols < 0
    tets[bad] = tets[bad][:, [0, 2, 1, 3]]
    return tets


def _build_torus_mesh(m: int, mesh_id: str) -> Mesh:
    """Unit torus [0,1)^3 with m subdivisions per axis, Kuhn tetrahedra."""
    idx = lambda i, j, k: ((i % m) * m + (j % m)) * m + (k % m)
    coords = np.array(
        [[i / m, j / m, k / m] for i in range(m) for j in range(m) for k in range(m)]
    )
    tets = []
    for i in range(m):
        for j in range(m):
            for k in range(m):
                c = [
                    idx(i, j, k),
                    idx(i + 1, j, k),
                    idx(i, j + 1, k),
                    idx(i + 1, j + 1, k),
                    idx(i, j, k + 1),
                    idx(i + 1, j, k + 1),
                    idx(i, j + 1, k + 1),
                    idx(i + 1, j + 1, k + 1),
                ]
                tets.extend(_kuhn_cube_tets(*c))
    tets = np.array(tets, dtype=np.int64)
    tets = _fix_orientation(coords, tets, period=1.0)
    return Mesh(
        coords,
        tets,
        np.zeros((0, 3), dtype=np.int64),
        np.zeros(0, dtype=np.int64),
        mesh_id,
        {"period": 1.0},
    )


def _extract_boundary(vertices: np.ndarray, tets: np.ndarray):
    """Boundary faces (once-counted tet faces) with outward orientation signs."""
    local = [(0, 1, 2, 3), (0, 1, 3, 2), (0, 2, 3, 1), (1, 2, 3, 0)]
    faces = []
    opp = []
    for a, b, c, d in local:
        faces.append(tets[:, [a, b, c]])
        opp.append(tets[:, d])
    faces = np.concatenate(faces, axis=0)
    opp = np.concatenate(opp, axis=0)
    key = np.sort(faces, axis=1)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    on_bnd = counts[inv] == 1
    bfaces = faces[on_bnd]
    bopp = opp[on_bnd]
    # orientation: +1 if (v1-v0, v2-v0, normal-away-from-opposite) is
    # positively oriented, i.e. the stored vertex order is outward.
    v0 = vertices[bfaces[:, 0]]
    e1 = vertices[bfaces[:, 1]] - v0
    e2 = vertices[bfaces[:, 2]] - v0
    nrm = np.cross(e1, e2)
    inward = vertices[bopp] - v0
    sign = np.where(np.einsum("ij,ij->i", nrm, inward) < 0, 1, -1).astype(np.int64)
    # store faces reordered so the orientation flag is +1
    flip = sign < 0
    bfaces = bfaces.copy()
    bfaces[flip] = bfaces[flip][:, [0, 2, 1]]
    return bfaces, np.ones(len(bfaces), dtype=np.int64)


def _build_ball_mesh(m: int, mesh_id: str) -> Mesh:
    """Unit Euclidean ball: cube grid on [-1,1]^3 mapped radially to the ball."""
    lin = np.linspace(-1.0, 1.0, m + 1)
    X, Y, Z = np.meshgrid(lin, lin, lin, indexing="ij")
    coords = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    npts = m + 1
    idx = lambda i, j, k: (i * npts + j) * npts + k
    tets = []
    for i in range(m):
        for j in range(m):
            for k in range(m):
                c = [
                    idx(i, j, k),
                    idx(i + 1, j, k),
                    idx(i, j + 1, k),
                    idx(i + 1, j + 1, k),
                    idx(i, j, k + 1),
                    idx(i + 1, j, k + 1),
                    idx(i, j + 1, k + 1),
                    idx(i + 1, j + 1, k + 1),
                ]
                tets.extend(_kuhn_cube_tets(*c))
    tets = np.array(tets, dtype=np.int64)
    # map cube onto ball: x -> x * ||x||_inf / ||x||_2
    norm_inf = np.abs(coords).max(axis=1)
    norm_2 = np.linalg.norm(coords, axis=1)
    scale = np.where(norm_2 > 0, norm_inf / np.maximum(norm_2, 1e-300), 0.0)
    coords = coords * scale[:, None]
    tets = _fix_orientation(coords, tets)
    bfaces, bsign = _extract_boundary(coords, tets)
    return Mesh(coords, tets, bfaces, bsign, mesh_id, {})


def _build_round_s3_mesh(refinement: int, mesh_id: str) -> Mesh:
    """Refined 16-cell projected onto the unit 3-sphere in R^4."""
    verts = []
    for axis in range(4):
        for s in (1.0, -1.0):
            v = np.zeros(4)
            v[axis] = s
            verts.append(v)
    verts = np.array(verts)
    # index of +e_a is 2a, -e_a is 2a+1
    tets = []
    for sa in (0, 1):
        for sb in (0, 1):
            for sc in (0, 1):
                for sd in (0, 1):
                    tets.append((0 + sa, 2 + sb, 4 + sc, 6 + sd))
    tets = np.array(tets, dtype=np.int64)

    for _ in range(refinement):
        edge_mid = {}
        new_verts = [verts]
        next_id = len(verts)

        def midpoint(i, j):
            nonlocal next_id
            key = (min(i, j), max(i, j))
            if key not in edge_mid:
                m = (verts[key[0]] + verts[key[1]]) / 2.0
                m = m / np.linalg.norm(m)
                new_verts.append(m[None, :])
                edge_mid[key] = next_id
                next_id += 1
            return edge_mid[key]

        new_tets = []
        for t in tets:
            v0, v1, v2, v3 = (int(v) for v in t)
            m01 = midpoint(v0, v1)
            m02 = midpoint(v0, v2)
            m03 = midpoint(v0, v3)
            m12 = midpoint(v1, v2)
            m13 = midpoint(v1, v3)
            m23 = midpoint(v2, v3)
            new_tets.extend(
                [
                    (v0, m01, m02, m03),
                    (v1, m01, m12, m13),
                    (v2, m02, m12, m23),
                    (v3, m03, m13, m23),
                    # octahedron split along the m02-m13 diagonal
                    (m01, m02, m13, m03),
                    (m01, m02, m12, m13),
                    (m02, m03, m13, m23),
                    (m02, m12, m13, m23),
                ]
            )
        verts = np.concatenate(new_verts, axis=0)
        tets = np.array(new_tets, dtype=np.int64)

    tets = _fix_orientation(verts, tets)
    return Mesh(
        verts,
        tets,
        np.zeros((0, 3), dtype=np.int64),
        np.zeros(0, dtype=np.int64),
        mesh_id,
        {},
    )


# ---------------------------------------------------------------------------
# Geometry samplers
# ---------------------------------------------------------------------------


def _flat_geometry_arrays(mesh: Mesh):
    """Pullback metric E^T E per tet (constant in q) and boundary densities."""
    E = tet_edge_matrices(mesh)  # (nt, 3, 3)
    G = np.einsum("tki,tkj->tij", E, E)
    nq = TET_QP.shape[0]
    metric = np.broadcast_to(G[:, None, :, :], (len(G), nq, 3, 3)).copy()
    density = np.sqrt(np.linalg.det(metric))
    bdens = None
    if mesh.boundary_faces.size:
        x = mesh.vertices[mesh.boundary_faces]  # (nb, 3, dim)
        e1 = x[:, 1] - x[:, 0]
        e2 = x[:, 2] - x[:, 0]
        g11 = np.einsum("ij,ij->i", e1, e1)
        g22 = np.einsum("ij,ij->i", e2, e2)
        g12 = np.einsum("ij,ij->i", e1, e2)
        area_dens = np.sqrt(np.maximum(g11 * g22 - g12**2, 0.0))
        bdens = np.broadcast_to(area_dens[:, None], (len(x), TRI_QP.shape[0])).copy()
    return metric, density, bdens


def _round_s3_geometry_arrays(mesh: Mesh):
    """Exact pullback of the round metric under radial projection."""
    x = mesh.tet_corner_coords()  # (nt, 4, 4)
    E = tet_edge_matrices(mesh)  # (nt, 4, 3)
    nq = TET_QP.shape[0]
    metric = np.empty((mesh.num_tets, nq, 3, 3))
    for q in range(nq):
        lam = TET_QP[q]
        xq = np.einsum("c,tcd->td", lam, x)  # (nt, 4)
        r2 = np.einsum("td,td->t", xq, xq)
        # projector (I - xhat xhat^T)/|x|^2 applied between edge columns
        ExE = np.einsum("tki,tkj->tij", E, E)
        Ex = np.einsum("tk,tkj->tj", xq, E)  # (nt, 3)
        metric[:, q] = (ExE - Ex[:, :, None] * Ex[:, None, :] / r2[:, None, None]) / r2[
            :, None, None
        ]
    density = np.sqrt(np.linalg.det(metric))
    return metric, density, None


def _bump_profile(d2: np.ndarray, radius: float) -> np.ndarray:
    """Smooth bump: cos^2(pi/2 * d/radius) inside, 0 outside (C^1)."""
    d = np.sqrt(np.maximum(d2, 0.0))
    t = np.clip(d / radius, 0.0, 1.0)
    return np.cos(0.5 * np.pi * t) ** 2


# calibrated preset constants (see tests for the standing-hypothesis checks)
BUMP_T3_CENTER = np.array([0.5, 0.5, 0.5])
BUMP_T3_RADIUS = 0.45
BUMP_T3_BACKGROUND = 16.0
BUMP_T3_DEPTH = 140.0
BALL_NEGR_R = -6.0
BALL_NEGR_H0 = (2.0, 2.5)  # h0 = c0 + c1 * z on the boundary sphere


def build_preset(preset_id: str, refinement: int):
    """Build a named preset mesh and its analytic geometry.

    Returns (Mesh, GeometrySpec).  Known presets: round-s3, flat-t3,
    ball-negR, annulus, bump-t3.
    """
    if preset_id not in PRESET_IDS:
        raise ValueError(f"unknown preset '{preset_id}' (known: {PRESET_IDS})")
    if refinement < 0:
        raise ValueError("refinement must be >= 0")
    mesh_id = f"{preset_id}-r{refinement}"

    if preset_id == "round-s3":
        if 16 * 8**refinement > 6 * _VERTEX_BUDGET:
            raise ValueError("refinement exceeds the vertex budget")
        mesh = _build_round_s3_mesh(refinement, mesh_id)
        if mesh.num_vertices > _VERTEX_BUDGET:
            raise ValueError("refinement exceeds the vertex budget")
        metric, density, bdens = _round_s3_geometry_arrays(mesh)
        R = ScalarField(np.full(mesh.num_vertices, 6.0), mesh_id)
        geom = GeometrySpec(
            metric,
            density,
            R,
            None,
            bdens,
            preset_id,
            metadata={
                "routing": "scenario-a-sphere",
                "locally_conformally_flat": True,
            },
        )
        return mesh, geom

    if preset_id in ("flat-t3", "bump-t3"):
        m = 4 * 2**refinement
        if (m**3) > _VERTEX_BUDGET:
            raise ValueError("refinement exceeds the vertex budget")
        mesh = _build_torus_mesh(m, mesh_id)
        metric, density, bdens = _flat_geometry_arrays(mesh)
        if preset_id == "flat-t3":
            R = ScalarField(np.zeros(mesh.num_vertices), mesh_id)
            psi = ScalarField(np.ones(mesh.num_vertices), mesh_id)
            geom = GeometrySpec(
                metric,
                density,
                R,
                None,
                bdens,
                preset_id,
                conformal_flat_factor=psi,
                metadata={
                    "routing": "lcf-manifold",
                    "locally_conformally_flat": True,
                },
            )
            return mesh, geom
        # bump-t3: flat torus carrying a sign-varying curvature coefficient
        d = mesh.displacement(
            np.broadcast_to(BUMP_T3_CENTER, mesh.vertices.shape), mesh.vertices
        )
        d2 = np.einsum("ij,ij->i", d, d)
        Rvals = BUMP_T3_BACKGROUND - BUMP_T3_DEPTH * _bump_profile(d2, BUMP_T3_RADIUS)
        R = ScalarField(Rvals, mesh_id)
        geom = GeometrySpec(
            metric,
            density,
            R,
            None,
            bdens,
            preset_id,
            metadata={
                "routing": "not-lcf-in-O",
                "locally_conformally_flat": False,
                "marked_region_center": BUMP_T3_CENTER.tolist(),
                "marked_region_radius": BUMP_T3_RADIUS,
            },
        )
        return mesh, geom

    # bounded flat presets
    m = 4 * 2**refinement
    if (m + 1) ** 3 > _VERTEX_BUDGET:
        raise ValueError("refinement exceeds the vertex budget")
    ball = _build_ball_mesh(m, mesh_id)

    if preset_id == "ball-negR":
        mesh = ball
        metric, density, bdens = _flat_geometry_arrays(mesh)
        R = ScalarField(np.full(mesh.num_vertices, BALL_NEGR_R), mesh_id)
        hvals = np.zeros(mesh.num_vertices)
        bnd = mesh.vertex_flags
        c0, c1 = BALL_NEGR_H0
        hvals[bnd] = c0 + c1 * mesh.vertices[bnd, 2]
        h = ScalarField(hvals, mesh_id)
        geom = GeometrySpec(
            metric,
            density,
            R,
            h,
            bdens,
            preset_id,
            metadata={
                "routing": "not-lcf-in-O",
                "locally_conformally_flat": False,
                "marked_region_center": [0.0, 0.0, 0.0],
                "marked_region_radius": 1.0,
            },
        )
        return mesh, geom

    # annulus: remove tets whose centroid lies inside radius 1/2, reindex
    centroids = ball.vertices[ball.tets].mean(axis=1)
    keep = np.linalg.norm(centroids, axis=1) > 0.5
    tets = ball.tets[keep]
    used = np.unique(tets)
    remap = -np.ones(ball.num_vertices, dtype=np.int64)
    remap[used] = np.arange(len(used))
    tets = remap[tets]
    verts = ball.vertices[used]
    bfaces, bsign = _extract_boundary(verts, tets)
    mesh = Mesh(verts, tets, bfaces, bsign, mesh_id, {"inner_radius": 0.5})
    metric, density, bdens = _flat_geometry_arrays(mesh)
    R = ScalarField(np.zeros(mesh.num_vertices), mesh_id)
    hvals = np.zeros(mesh.num_vertices)
    h = ScalarField(hvals, mesh_id)
    psi = ScalarField(np.ones(mesh.num_vertices), mesh_id)
    # frontier quality: jagged inner boundary recorded, not smoothed
    geom = GeometrySpec(
        metric,
        density,
        R,
        h,
        bdens,
        preset_id,
        conformal_flat_factor=psi,
        metadata={
            "routing": "lcf-manifold",
            "locally_conformally_flat": True,
            "topologically_admissible": True,
            "frontier_quality": "jagged-inner-boundary",
        },
    )
    return mesh, geom


# ---------------------------------------------------------------------------
# Domains
# ---------------------------------------------------------------------------


def extract_subdomain(mesh: Mesh, predicate: Callable[[np.ndarray], np.ndarray]) -> Domain:
    """Select a connected vertex subdomain by a coordinate predicate.

    The predicate receives the (nv, dim) coordinate array and returns a
    boolean mask.  The selection must be nonempty, a proper subset on a
    closed mesh, edge-connected, and have a nonempty interior.
    """
    sel = np.asarray(predicate(mesh.vertices), dtype=bool)
    if sel.shape != (mesh.num_vertices,):
        raise ValueError("predicate must return one boolean per vertex")
    if not sel.any():
        raise ValueError("empty selection")
    if sel.all() and mesh.is_closed:
        raise ValueError("selection is not a proper subset of a closed mesh")

    vertex_set = np.flatnonzero(sel)
    # connectivity by BFS on the edge graph restricted to the selection
    graph = mesh.vertex_graph()
    indptr, indices = graph.indptr, graph.indices
    visited = np.zeros(mesh.num_vertices, dtype=bool)
    stack = [int(vertex_set[0])]
    visited[vertex_set[0]] = True
    while stack:
        v = stack.pop()
        for w in indices[indptr[v] : indptr[v + 1]]:
            if sel[w] and not visited[w]:
                visited[w] = True
                stack.append(int(w))
    if not visited[vertex_set].all():
        raise ValueError("selection is disconnected")

    # frontier: adjacent to the complement, or on the mesh boundary
    frontier_mask = np.zeros(mesh.num_vertices, dtype=bool)
    for v in vertex_set:
        nbrs = indices[indptr[v] : indptr[v + 1]]
        if (~sel[nbrs]).any():
            frontier_mask[v] = True
    frontier_mask |= sel & mesh.vertex_flags
    interior = np.flatnonzero(sel & ~frontier_mask)
    frontier = np.flatnonzero(frontier_mask)
    if interior.size == 0:
        raise ValueError("selection has empty interior")
    return Domain(vertex_set, interior, frontier, mesh.mesh_id)


def make_punctured_domain(
    mesh: Mesh, domain: Domain, center_vertex: int, eps: float
) -> Domain:
    """Remove the closed vertex star around a puncture center.

    ``eps`` is snapped to the nearest resolvable mesh radius: all selected
    vertices within chart distance eps of the center are removed together
    with the center itself, and the puncture is recorded in the metadata.
    """
    if center_vertex not in set(domain.interior_set.tolist()):
        raise ValueError("puncture center must be interior to the domain")
    center = mesh.vertices[center_vertex]
    sel = domain.mask(mesh.num_vertices)
    d = np.linalg.norm(
        mesh.displacement(np.broadcast_to(center, mesh.vertices.shape), mesh.vertices),
        axis=1,
    )
    # snap: remove at least the one-ring of the center
    graph = mesh.vertex_graph()
    ring = graph.indices[graph.indptr[center_vertex] : graph.indptr[center_vertex + 1]]
    eps_snap = max(eps, float(d[ring].max()) * (1 + 1e-12))
    removed = d <= eps_snap
    sel2 = sel & ~removed
    dom = extract_subdomain(mesh, lambda _: sel2)
    dom.metadata["puncture_center"] = center.tolist()
    dom.metadata["puncture_vertex"] = int(center_vertex)
    dom.metadata["puncture_eps"] = eps_snap
    return dom


# ---------------------------------------------------------------------------
# Mollification and admissible functions
# ---------------------------------------------------------------------------


def _mollify_weights(mesh: Mesh, width: float):
    """Sparse stencil weights: Wendland-type kernel over graph neighborhoods."""
    graph = mesh.vertex_graph()
    n = mesh.num_vertices
    rows_all, cols_all, vals_all = [], [], []
    # chunked truncated distances keep the dense scratch at O(chunk * n)
    chunk = max(1, min(n, int(2**25 // max(n, 1))))
    for start in range(0, n, chunk):
        idx = np.arange(start, min(start + chunk, n))
        dist = dijkstra(graph, directed=False, limit=width, indices=idx)
        r, c = np.nonzero(np.isfinite(dist) & (dist < width))
        d = dist[r, c]
        rows_all.append(idx[r])
        cols_all.append(c)
        vals_all.append((1.0 - (d / width) ** 2) ** 2)
    W = coo_matrix(
        (np.concatenate(vals_all), (np.concatenate(rows_all), np.concatenate(cols_all))),
        shape=(n, n),
    ).tocsr()
    # self weight: distance 0 gives kernel 1 (present via the zero diagonal of
    # dijkstra output)
    norm = np.asarray(W.sum(axis=1)).ravel()
    return W, norm


def mollify(field: ScalarField, mesh: Mesh, width: float) -> ScalarField:
    """Vertex-weighted local averaging over graph neighborhoods of radius width."""
    min_edge = mesh.min_edge_length()
    if width < 2.0 * min_edge:
        raise ValueError(
            f"mollification width {width} below resolvable scale "
            f"(2 * min edge = {2 * min_edge})"
        )
    W, norm = _mollify_weights(mesh, width)
    out = W.dot(field.values) / norm
    return ScalarField(out, field.mesh_id, {"mollified_width": width})


def construct_admissible_function(
    base: ScalarField,
    region: Domain,
    level: float,
    width: float,
    mesh: Mesh,
) -> ScalarField:
    """Flatten ``base`` to the constant ``level`` on a region, smoothly.

    The output equals ``level`` exactly on the region interior eroded by
    ``width``, equals ``base`` outside the region dilated by ``width``, and
    transitions by mollification in between.  Region and level are recorded
    in the metadata so downstream routing can recognize the function class.
    """
    if level <= 0:
        raise ValueError("level must be > 0")
    sel = region.mask(mesh.num_vertices)
    graph = mesh.vertex_graph()
    comp = np.flatnonzero(~sel)
    n = mesh.num_vertices

    if comp.size:
        dist_to_comp = dijkstra(graph, directed=False, indices=comp, min_only=True)
    else:
        dist_to_comp = np.full(n, np.inf)
    dist_to_region = dijkstra(
        graph, directed=False, indices=region.vertex_set, min_only=True
    )

    core = sel & (dist_to_comp >= width)
    if not core.any():
        raise ValueError("region too small to contain an eroded core")
    far = ~sel & (dist_to_region >= width)

    raw = base.copy()
    raw.values = raw.values.copy()
    raw.values[sel] = level
    out = mollify(raw, mesh, width)
    out.values[core] = level
    out.values[far] = base.values[far]
    out.metadata.update(
        {
            "admissible_level": float(level),
            "admissible_region": region.vertex_set.tolist(),
            "admissible_width": float(width),
        }
    )
    return out


def erode_region(mesh: Mesh, vertex_set: np.ndarray, width: float) -> np.ndarray:
    """Boolean mask of the region eroded by graph distance ``width``.

    Matches the erosion used by :func:`construct_admissible_function`, so the
    returned core is exactly where a constructed admissible function is
    guaranteed to equal its constant level.
    """
    n = mesh.num_vertices
    sel = np.zeros(n, dtype=bool)
    sel[np.asarray(vertex_set, dtype=np.int64)] = True
    if width <= 0:
        return sel
    comp = np.flatnonzero(~sel)
    if not comp.size:
        return sel
    graph = mesh.vertex_graph()
    dist = dijkstra(graph, directed=False, indices=comp, min_only=True)
    return sel & (dist >= width)


# ---------------------------------------------------------------------------
# CYWMESH text format
# ---------------------------------------------------------------------------


def write_mesh(mesh: Mesh, path=None) -> str:
    """Serialize a mesh in the CYWMESH 1 text format.

    Returns the text; writes it to ``path`` when given.  VERTICES lines
    carry 3 or 4 coordinates depending on the chart.
    """
    buf = io.StringIO()
    buf.write("CYWMESH 1\n")
    buf.write(f"# mesh_id {mesh.mesh_id}\n")
    buf.write("VERTICES\n")
    for i, v in enumerate(mesh.vertices):
        buf.write(f"{i} " + " ".join(repr(float(c)) for c in v) + "\n")
    buf.write("TETS\n")
    for t in mesh.tets:
        buf.write(" ".join(str(int(i)) for i in t) + "\n")
    buf.write("BFACES\n")
    for f, s in zip(mesh.boundary_faces, mesh.boundary_orientation):
        buf.write(" ".join(str(int(i)) for i in f) + f" {int(s)}\n")
    buf.write("FLAGS\n")
    for k in sorted(mesh.metadata):
        buf.write(f"{k}={mesh.metadata[k]!r}\n")
    text = buf.getvalue()
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def read_mesh(source) -> Mesh:
    """Parse the CYWMESH 1 text format from a string or file path."""
    if "\n" not in str(source):
        with open(source) as fh:
            text = fh.read()
    else:
        text = source
    lines = text.splitlines()
    if not lines or lines[0].strip() != "CYWMESH 1":
        raise ValueError("not a CYWMESH 1 file")
    mesh_id = "unnamed"
    section = None
    verts, tets, bfaces, bsign = [], [], [], []
    metadata = {}
    for line in lines[1:]:
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if len(parts) == 2 and parts[0] == "mesh_id":
                mesh_id = parts[1]
            continue
        if line in ("VERTICES", "TETS", "BFACES", "FLAGS"):
            section = line
            continue
        if section == "VERTICES":
            parts = line.split()
            verts.append([float(x) for x in parts[1:]])
        elif section == "TETS":
            tets.append([int(x) for x in line.split()])
        elif section == "BFACES":
            parts = [int(x) for x in line.split()]
            bfaces.append(parts[:3])
            bsign.append(parts[3])
        elif section == "FLAGS":
            k, _, v = line.partition("=")
            try:
                metadata[k] = eval(v, {"__builtins__": {}})  # noqa: S307 - literals
            except Exception:
                metadata[k] = v
        else:
            raise ValueError(f"line outside any section: {line!r}")
    return Mesh(
        np.array(verts, dtype=np.float64),
        np.array(tets, dtype=np.int64).reshape(-1, 4),
        np.array(bfaces, dtype=np.int64).reshape(-1, 3),
        np.array(bsign, dtype=np.int64),
        mesh_id,
        metadata,
    )
