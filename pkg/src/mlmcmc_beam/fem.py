"""Plane-stress beam model: bilinear quadrilateral elements on a structured grid.

The beam occupies [0, L] x [0, H], is clamped (all dofs) on both vertical
ends, and carries a downward line load spread over the middle third of the
top edge as consistent nodal forces.  Stiffness is elementwise constant:
the normalized field value at each element centroid times a reference
modulus.  The assembled system is solved with a banded Cholesky
factorization (the grid numbering keeps the band tight), with a Jacobi
preconditioned conjugate gradient fallback for very large meshes.
"""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sparse
from scipy.linalg import solveh_banded
from scipy.sparse.linalg import cg as sparse_cg

logger = logging.getLogger(__name__)

# Beyond this many free dofs the direct banded factorization gives way to CG.
CG_DOF_THRESHOLD = 100_000
CG_TOL = 1e-10


@dataclass(frozen=True)
class BeamGeometry:
    """Geometry, material constants and load of the clamped beam.

    `reduced_lame` switches the first Lame constant to the plane-stress
    reduced value 2*lam*mu/(lam + 2*mu); the default keeps the textbook
    three-dimensional relation written in terms of E and the Poisson
    ratio, applied directly to the 2D operator.
    """

    length: float = 3.0
    height: float = 0.3
    poisson: float = 0.25
    e_ref: float = 30.0e9
    load_total: float = 1.0e3
    reduced_lame: bool = False

    def __post_init__(self):
        if not (self.length > 0 and self.height > 0):
            raise ValueError("beam dimensions must be positive")
        if not -1.0 < self.poisson < 0.5:
            raise ValueError(f"poisson ratio out of range: {self.poisson}")
        if not self.e_ref > 0:
            raise ValueError("reference modulus must be positive")

    def lame_constants(self, e_modulus: float = 1.0) -> tuple[float, float]:
        nu = self.poisson
        lam = e_modulus * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
        mu = e_modulus / (2.0 * (1.0 + nu))
        if self.reduced_lame:
            lam = 2.0 * lam * mu / (lam + 2.0 * mu)
        return lam, mu


@dataclass(eq=False)
class Mesh:
    """Structured quadrilateral mesh with node id = i * (ny + 1) + j.

    Elements are indexed e = i * ny + j and their connectivity runs
    counterclockwise from the lower-left corner.  `edge_node_ids` lists
    the bottom edge left to right, then the top edge left to right.
    """

    nx: int
    ny: int
    length: float
    height: float
    node_coords: np.ndarray    # (n_nodes, 2)
    elements: np.ndarray       # (n_elem, 4) node ids, CCW
    edge_node_ids: np.ndarray  # (2 * (nx + 1),)

    @property
    def n_nodes(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    @property
    def n_elements(self) -> int:
        return self.nx * self.ny

    @property
    def n_edge_nodes(self) -> int:
        return 2 * (self.nx + 1)

    @property
    def element_size(self) -> tuple[float, float]:
        return self.length / self.nx, self.height / self.ny

    def node_id(self, i: int, j: int) -> int:
        return i * (self.ny + 1) + j

    def element_centroids(self) -> np.ndarray:
        hx, hy = self.element_size
        i = np.arange(self.nx)
        j = np.arange(self.ny)
        cx = (i[:, None] + 0.5) * hx
        cy = (j[None, :] + 0.5) * hy
        return np.column_stack([
            np.broadcast_to(cx, (self.nx, self.ny)).ravel(),
            np.broadcast_to(cy, (self.nx, self.ny)).ravel(),
        ])

    def centroids_unit_square(self) -> np.ndarray:
        c = self.element_centroids()
        return c / np.array([self.length, self.height])

    def clamped_node_ids(self) -> np.ndarray:
        left = np.array([self.node_id(0, j) for j in range(self.ny + 1)])
        right = np.array([self.node_id(self.nx, j) for j in range(self.ny + 1)])
        return np.concatenate([left, right])


def structured_mesh(nx: int, ny: int, geom: BeamGeometry) -> Mesh:
    """Build the structured grid without the beam-pipeline divisibility checks."""
    if nx < 1 or ny < 1:
        raise ValueError("nx and ny must be >= 1")
    xs = np.arange(nx + 1) * (geom.length / nx)
    ys = np.arange(ny + 1) * (geom.height / ny)
    coords = np.empty(((nx + 1) * (ny + 1), 2))
    coords[:, 0] = np.repeat(xs, ny + 1)
    coords[:, 1] = np.tile(ys, nx + 1)

    def nid(i, j):
        return i * (ny + 1) + j

    elems = np.empty((nx * ny, 4), dtype=np.int64)
    e = 0
    for i in range(nx):
        for j in range(ny):
            elems[e] = (nid(i, j), nid(i + 1, j), nid(i + 1, j + 1), nid(i, j + 1))
            e += 1
    bottom = np.array([nid(i, 0) for i in range(nx + 1)])
    top = np.array([nid(i, ny) for i in range(nx + 1)])
    return Mesh(
        nx=nx, ny=ny, length=geom.length, height=geom.height,
        node_coords=coords, elements=elems,
        edge_node_ids=np.concatenate([bottom, top]),
    )


def build_mesh(nx: int, ny: int, geom: BeamGeometry) -> Mesh:
    """Structured beam mesh; nx must be divisible by 3 so the load region
    and the stiffness-average region align with element boundaries."""
    if nx % 3 != 0:
        raise ValueError(f"nx must be divisible by 3, got {nx}")
    return structured_mesh(nx, ny, geom)


@dataclass(eq=False)
class StiffnessField:
    """Normalized per-element stiffness values; scaled by e_ref at assembly."""

    mesh: Mesh
    element_values: np.ndarray

    def __post_init__(self):
        self.element_values = np.asarray(self.element_values, dtype=float)
        if self.element_values.shape != (self.mesh.n_elements,):
            raise ValueError(
                f"expected {self.mesh.n_elements} element values, "
                f"got shape {self.element_values.shape}"
            )
        if not np.all(self.element_values > 0):
            raise ValueError("stiffness values must be strictly positive")


@dataclass(eq=False)
class DisplacementField:
    """Nodal displacements, 2 dofs per node in node-id order."""

    mesh: Mesh
    values: np.ndarray  # (2 * n_nodes,)


def element_stiffness_unit(hx: float, hy: float, geom: BeamGeometry) -> np.ndarray:
    """8x8 stiffness of one rectangular bilinear element at unit modulus.

    2x2 Gauss quadrature; dof order (ux0, uy0, ..., ux3, uy3) over the
    CCW corner nodes.
    """
    lam, mu = geom.lame_constants(1.0)
    D = np.array([
        [lam + 2.0 * mu, lam, 0.0],
        [lam, lam + 2.0 * mu, 0.0],
        [0.0, 0.0, mu],
    ])
    # local corners in (xi, eta) in [-1, 1]^2, CCW
    corners = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])
    gp = np.array([-1.0, 1.0]) / np.sqrt(3.0)
    K = np.zeros((8, 8))
    det_j = hx * hy / 4.0
    for xi in gp:
        for eta in gp:
            dN_dxi = 0.25 * corners[:, 0] * (1.0 + corners[:, 1] * eta)
            dN_deta = 0.25 * corners[:, 1] * (1.0 + corners[:, 0] * xi)
            dN_dx = dN_dxi * (2.0 / hx)
            dN_dy = dN_deta * (2.0 / hy)
            B = np.zeros((3, 8))
            B[0, 0::2] = dN_dx
            B[1, 1::2] = dN_dy
            B[2, 0::2] = dN_dy
            B[2, 1::2] = dN_dx
            K += B.T @ D @ B * det_j
    return K


def _element_dofs(mesh: Mesh) -> np.ndarray:
    nodes = mesh.elements
    dofs = np.empty((mesh.n_elements, 8), dtype=np.int64)
    dofs[:, 0::2] = 2 * nodes
    dofs[:, 1::2] = 2 * nodes + 1
    return dofs


def load_vector(mesh: Mesh, geom: BeamGeometry) -> np.ndarray:
    """Consistent nodal forces for the center-third top-edge line load."""
    f = np.zeros(2 * mesh.n_nodes)
    hx, _ = mesh.element_size
    i_lo, i_hi = mesh.nx // 3, 2 * mesh.nx // 3
    span = geom.length / 3.0
    q = geom.load_total / span  # N per unit length, downward
    for i in range(i_lo, i_hi):
        for node in (mesh.node_id(i, mesh.ny), mesh.node_id(i + 1, mesh.ny)):
            f[2 * node + 1] -= 0.5 * q * hx
    return f


def assemble_global(mesh: Mesh, field: StiffnessField, geom: BeamGeometry) -> sparse.csr_matrix:
    """Full (unconstrained) stiffness matrix; mostly for tests and the CG path."""
    hx, hy = mesh.element_size
    k_ref = element_stiffness_unit(hx, hy, geom)
    dofs = _element_dofs(mesh)
    rows = np.repeat(dofs, 8, axis=1).ravel()
    cols = np.tile(dofs, (1, 8)).ravel()
    e_scaled = field.element_values * geom.e_ref
    data = (e_scaled[:, None] * k_ref.ravel()[None, :]).ravel()
    n = 2 * mesh.n_nodes
    return sparse.coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()


class BeamSolver:
    """Precomputed assembly/factorization machinery for one mesh.

    Building the banded scatter map once makes each subsequent solve a
    sparse matrix-vector product, a fancy-index fill and one LAPACK
    banded Cholesky call.
    """

    def __init__(self, mesh: Mesh, geom: BeamGeometry,
                 cg_threshold: int = CG_DOF_THRESHOLD):
        self.mesh = mesh
        self.geom = geom
        hx, hy = mesh.element_size
        self.k_ref = element_stiffness_unit(hx, hy, geom)

        n_dofs = 2 * mesh.n_nodes
        clamped = mesh.clamped_node_ids()
        fixed = np.zeros(n_dofs, dtype=bool)
        fixed[2 * clamped] = True
        fixed[2 * clamped + 1] = True
        self.fixed_mask = fixed
        self.free_index = -np.ones(n_dofs, dtype=np.int64)
        self.free_index[~fixed] = np.arange(int((~fixed).sum()))
        self.n_free = int((~fixed).sum())
        self.load_full = load_vector(mesh, geom)
        self.load_reduced = self.load_full[~fixed]
        self.use_cg = self.n_free > cg_threshold

        dofs = _element_dofs(mesh)
        if self.use_cg:
            # keep COO indices of free-free entries for fast CSR assembly
            rows = np.repeat(dofs, 8, axis=1).ravel()
            cols = np.tile(dofs, (1, 8)).ravel()
            keep = ~fixed[rows] & ~fixed[cols]
            self._cg_rows = self.free_index[rows[keep]]
            self._cg_cols = self.free_index[cols[keep]]
            self._cg_kref = np.tile(self.k_ref.ravel(), (mesh.n_elements, 1))[
                keep.reshape(mesh.n_elements, 64)
            ]
            self._cg_elem = np.repeat(np.arange(mesh.n_elements), 64).reshape(
                mesh.n_elements, 64)[keep.reshape(mesh.n_elements, 64)]
            logger.info("mesh %dx%d: %d free dofs, CG path", mesh.nx, mesh.ny, self.n_free)
            return

        # Banded lower storage: slot (band_row, col) for entries with
        # row >= col, band_row = row - col.
        t_rows, t_cols, t_data = [], [], []
        slot_of = {}
        bandwidth = 0
        for e in range(mesh.n_elements):
            d = dofs[e]
            red = self.free_index[d]
            for p in range(8):
                rp = red[p]
                if rp < 0:
                    continue
                for q in range(8):
                    rq = red[q]
                    if rq < 0 or rp < rq:
                        continue
                    band_row = rp - rq
                    bandwidth = max(bandwidth, band_row)
                    key = (band_row, rq)
                    slot = slot_of.setdefault(key, len(slot_of))
                    t_rows.append(slot)
                    t_cols.append(e)
                    t_data.append(self.k_ref[p, q])
        self.bandwidth = bandwidth
        self.scatter = sparse.coo_matrix(
            (t_data, (t_rows, t_cols)),
            shape=(len(slot_of), mesh.n_elements),
        ).tocsr()
        slots = np.array(sorted(slot_of, key=slot_of.get), dtype=np.int64)
        self._band_flat_idx = slots[:, 0] * self.n_free + slots[:, 1]
        self._band_buf = np.zeros((bandwidth + 1) * self.n_free)
        logger.info(
            "mesh %dx%d: %d free dofs, bandwidth %d, %d banded slots",
            mesh.nx, mesh.ny, self.n_free, bandwidth, len(slot_of),
        )

    def solve(self, field: StiffnessField, rhs_full: np.ndarray | None = None) -> DisplacementField:
        """Solve K(field) u = f; the default f is the beam line load."""
        if field.mesh is not self.mesh and field.mesh.n_elements != self.mesh.n_elements:
            raise ValueError("stiffness field lives on a different mesh")
        e_scaled = field.element_values * self.geom.e_ref
        if rhs_full is None:
            rhs = self.load_reduced
        else:
            rhs = rhs_full[~self.fixed_mask]
        if self.use_cg:
            x = self._solve_cg(e_scaled, rhs)
        else:
            buf = self._band_buf
            buf.fill(0.0)
            buf[self._band_flat_idx] = self.scatter @ e_scaled
            ab = buf.reshape(self.bandwidth + 1, self.n_free)
            x = solveh_banded(ab, rhs, lower=True, check_finite=False)
        full = np.zeros(2 * self.mesh.n_nodes)
        full[~self.fixed_mask] = x
        return DisplacementField(mesh=self.mesh, values=full)

    def _solve_cg(self, e_scaled: np.ndarray, rhs: np.ndarray) -> np.ndarray:
        data = self._cg_kref * e_scaled[self._cg_elem]
        K = sparse.coo_matrix(
            (data, (self._cg_rows, self._cg_cols)),
            shape=(self.n_free, self.n_free),
        ).tocsr()
        d_inv = 1.0 / K.diagonal()
        M = sparse.linalg.LinearOperator(
            (self.n_free, self.n_free), matvec=lambda v: d_inv * v)
        x, info = sparse_cg(K, rhs, rtol=CG_TOL, atol=0.0, M=M, maxiter=20 * self.n_free)
        if info != 0:
            raise RuntimeError(f"CG failed to converge (info={info})")
        return x


@functools.lru_cache(maxsize=32)
def _solver_for(nx: int, ny: int, geom: BeamGeometry) -> BeamSolver:
    return BeamSolver(build_mesh(nx, ny, geom), geom)


def assemble_and_solve(mesh: Mesh, field: StiffnessField, geom: BeamGeometry) -> DisplacementField:
    """One-shot forward solve for the beam under its standard load."""
    solver = _solver_for(mesh.nx, mesh.ny, geom)
    # reuse the cached machinery but honor the caller's field values
    return solver.solve(StiffnessField(mesh=solver.mesh, element_values=field.element_values))


def observe_edges(disp: DisplacementField) -> np.ndarray:
    """Stack (u_x, u_y) pairs at the edge nodes, bottom edge then top edge."""
    nodes = disp.mesh.edge_node_ids
    out = np.empty(2 * nodes.shape[0])
    out[0::2] = disp.values[2 * nodes]
    out[1::2] = disp.values[2 * nodes + 1]
    return out


def qoi_region_average(
    field: StiffnessField,
    x_bounds: tuple[float, float] | None = None,
    y_bounds: tuple[float, float] | None = None,
) -> float:
    """Mean element stiffness over a rectangular region of centroids.

    Defaults to the middle third of the span and the bottom half of the
    height.  Requires nx divisible by 3 and ny divisible by 2 so the
    default region boundaries coincide with element boundaries.
    """
    mesh = field.mesh
    if x_bounds is None:
        if mesh.nx % 3 != 0:
            raise ValueError("default QoI region needs nx divisible by 3")
        x_bounds = (mesh.length / 3.0, 2.0 * mesh.length / 3.0)
    if y_bounds is None:
        if mesh.ny % 2 != 0:
            raise ValueError("default QoI region needs ny divisible by 2")
        y_bounds = (0.0, mesh.height / 2.0)
    c = mesh.element_centroids()
    mask = (
        (c[:, 0] > x_bounds[0]) & (c[:, 0] < x_bounds[1])
        & (c[:, 1] > y_bounds[0]) & (c[:, 1] < y_bounds[1])
    )
    if not np.any(mask):
        raise ValueError("QoI region contains no element centroids")
    return float(np.mean(field.element_values[mask]))


def qoi_element_mask(mesh: Mesh) -> np.ndarray:
    """Boolean element mask of the default QoI region (for fast batch paths)."""
    c = mesh.element_centroids()
    return (
        (c[:, 0] > mesh.length / 3.0) & (c[:, 0] < 2.0 * mesh.length / 3.0)
        & (c[:, 1] > 0.0) & (c[:, 1] < mesh.height / 2.0)
    )


def node_lookup(mesh: Mesh, x: float, y: float, tol: float = 1e-9) -> int:
    """Node id nearest to (x, y); errors if no node is within tol."""
    d = np.abs(mesh.node_coords - np.array([x, y])).max(axis=1)
    k = int(np.argmin(d))
    if d[k] > tol:
        raise ValueError(f"no node within {tol} of ({x}, {y})")
    return k
