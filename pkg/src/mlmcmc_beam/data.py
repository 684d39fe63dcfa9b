"""Synthetic edge observations and their level-dependent treatment.

A single observation set is generated once on the finest mesh: the noisy
(u_x, u_y) pairs at the edge nodes.  Coarser levels see a restriction of
that vector, either by selecting the fine entries that coincide with
coarse nodes or by local averaging with hat weights along each edge.  The
level likelihood divides the squared residual by 2 * N_l * sigma_l^2, so
a residual of constant magnitude scores the same at every level.
"""

from __future__ import annotations

import csv
import enum
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fem import BeamGeometry, Mesh, StiffnessField, assemble_and_solve, observe_edges

logger = logging.getLogger(__name__)


class WeightingMode(enum.Enum):
    SELECT = "select"
    LOCAL_AVERAGE = "local_average"
    IDENTITY = "identity"


@dataclass(eq=False)
class ObservationSet:
    """Noisy edge displacements on the finest mesh.

    `values` interleaves (u_x, u_y) per edge node in edge order (bottom
    edge left to right, then top edge).
    """

    values: np.ndarray         # (2 * n_edge_nodes,)
    edge_node_ids: np.ndarray  # (n_edge_nodes,)
    node_coords: np.ndarray    # (n_edge_nodes, 2)
    sigma_f: float
    mesh_nx: int
    mesh_ny: int
    seed: int | None = None
    truth_coefficients: np.ndarray | None = None

    @property
    def n_points(self) -> int:
        return self.edge_node_ids.shape[0]


def synthesize_observations(
    truth_field: StiffnessField,
    geom: BeamGeometry,
    sigma_f: float,
    seed: int | np.random.SeedSequence,
    truth_coefficients: np.ndarray | None = None,
) -> ObservationSet:
    """Forward-solve the truth field on its mesh and add iid N(0, sigma_f^2) noise."""
    if sigma_f <= 0:
        raise ValueError("sigma_f must be positive")
    mesh = truth_field.mesh
    disp = assemble_and_solve(mesh, truth_field, geom)
    clean = observe_edges(disp)
    rng = np.random.default_rng(seed)
    noisy = clean + sigma_f * rng.standard_normal(clean.shape[0])
    seed_int = seed if isinstance(seed, int) else None
    return ObservationSet(
        values=noisy,
        edge_node_ids=mesh.edge_node_ids.copy(),
        node_coords=mesh.node_coords[mesh.edge_node_ids],
        sigma_f=sigma_f,
        mesh_nx=mesh.nx,
        mesh_ny=mesh.ny,
        seed=seed_int,
        truth_coefficients=None if truth_coefficients is None
        else np.asarray(truth_coefficients, dtype=float),
    )


@dataclass(eq=False)
class LevelWeighting:
    """Restriction of the finest observation vector to one level.

    `index_map[k]` lists (fine_scalar_index, weight) pairs for coarse
    scalar entry k; weights are nonnegative and sum to one per entry.
    """

    mode: WeightingMode
    level: int
    n_fine_scalars: int
    index_map: list[list[tuple[int, float]]]
    _matrix: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        for k, pairs in enumerate(self.index_map):
            w = np.array([p[1] for p in pairs])
            if np.any(w < 0):
                raise ValueError(f"negative weight in entry {k}")
            if abs(w.sum() - 1.0) > 1e-12:
                raise ValueError(f"weights of entry {k} sum to {w.sum()}, not 1")

    @property
    def n_coarse_scalars(self) -> int:
        return len(self.index_map)

    def matrix(self):
        """CSR form of the restriction, built on first use."""
        if self._matrix is None:
            import scipy.sparse as sp
            rows, cols, data = [], [], []
            for k, pairs in enumerate(self.index_map):
                for idx, w in pairs:
                    rows.append(k)
                    cols.append(idx)
                    data.append(w)
            m = sp.csr_matrix(
                (data, (rows, cols)),
                shape=(self.n_coarse_scalars, self.n_fine_scalars),
            )
            object.__setattr__(self, "_matrix", m)
        return self._matrix


def _edge_slot_to_fine(slot: int, nx_coarse: int, nx_fine: int) -> int:
    """Edge-list position of the fine node coinciding with a coarse edge node."""
    s = nx_fine // nx_coarse
    if slot <= nx_coarse:  # bottom edge
        return s * slot
    i = slot - (nx_coarse + 1)  # top edge
    return (nx_fine + 1) + s * i


def build_level_weighting(
    nx_fine: int,
    nx_coarse: int,
    level: int,
    mode: WeightingMode,
) -> LevelWeighting:
    """Construct the observation restriction between two edge resolutions.

    Select picks the fine entries at coinciding nodes; local averaging
    applies a hat stencil of half-width (stride - 1) along each edge,
    clipped and renormalized at the edge ends.
    """
    if nx_fine % nx_coarse != 0:
        raise ValueError(f"fine nx {nx_fine} not a multiple of coarse nx {nx_coarse}")
    s = nx_fine // nx_coarse
    n_fine_scalars = 2 * 2 * (nx_fine + 1)
    n_coarse_slots = 2 * (nx_coarse + 1)

    if mode is WeightingMode.IDENTITY:
        if nx_fine != nx_coarse:
            raise ValueError("identity weighting requires matching resolutions")
        index_map = [[(k, 1.0)] for k in range(n_fine_scalars)]
        return LevelWeighting(mode, level, n_fine_scalars, index_map)

    index_map: list[list[tuple[int, float]]] = []
    for slot in range(n_coarse_slots):
        f_slot = _edge_slot_to_fine(slot, nx_coarse, nx_fine)
        on_bottom = slot <= nx_coarse
        lo = 0 if on_bottom else nx_fine + 1
        hi = nx_fine if on_bottom else 2 * nx_fine + 1
        for comp in (0, 1):
            if mode is WeightingMode.SELECT or s == 1:
                index_map.append([(2 * f_slot + comp, 1.0)])
                continue
            pairs = []
            for d in range(-(s - 1), s):
                nb = f_slot + d
                if nb < lo or nb > hi:
                    continue
                pairs.append((2 * nb + comp, 1.0 - abs(d) / s))
            total = sum(w for _, w in pairs)
            index_map.append([(idx, w / total) for idx, w in pairs])
    return LevelWeighting(mode, level, n_fine_scalars, index_map)


def restrict_observations(obs: ObservationSet | np.ndarray, weighting: LevelWeighting) -> np.ndarray:
    """Apply the level restriction to the finest observation vector."""
    vec = obs.values if isinstance(obs, ObservationSet) else np.asarray(obs, dtype=float)
    if vec.shape[0] != weighting.n_fine_scalars:
        raise ValueError(
            f"observation vector length {vec.shape[0]} does not match "
            f"weighting input size {weighting.n_fine_scalars}"
        )
    return weighting.matrix() @ vec


def log_likelihood_level(
    obs_vec: np.ndarray,
    model_out: np.ndarray,
    n_obs_points: int,
    sigma: float,
) -> float:
    """Gaussian log likelihood with the level-size normalization.

    Returns -||obs - model||^2 / (2 * n_obs_points * sigma^2); the vectors
    hold (u_x, u_y) pairs, so their length is 2 * n_obs_points.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if obs_vec.shape != model_out.shape:
        raise ValueError(f"shape mismatch {obs_vec.shape} vs {model_out.shape}")
    if obs_vec.shape[0] != 2 * n_obs_points:
        raise ValueError(
            f"vector length {obs_vec.shape[0]} is not 2 * n_obs_points = {2 * n_obs_points}"
        )
    r = obs_vec - model_out
    return -float(r @ r) / (2.0 * n_obs_points * sigma * sigma)


# ---------------------------------------------------------------------------
# Persistence: CSV of rows (node id, x, y, u_x, u_y) plus a JSON sidecar.


def save_observations(obs: ObservationSet, csv_path: str | Path) -> None:
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["node_id", "x", "y", "u_x", "u_y"])
        for k, nid in enumerate(obs.edge_node_ids):
            writer.writerow([
                int(nid),
                repr(float(obs.node_coords[k, 0])),
                repr(float(obs.node_coords[k, 1])),
                repr(float(obs.values[2 * k])),
                repr(float(obs.values[2 * k + 1])),
            ])
    sidecar = {
        "seed": obs.seed,
        "sigma_f": obs.sigma_f,
        "mesh": {"nx": obs.mesh_nx, "ny": obs.mesh_ny},
    }
    if obs.truth_coefficients is not None:
        sidecar["truth_coefficients"] = [float(v) for v in obs.truth_coefficients]
    with open(csv_path.with_suffix(".json"), "w") as fh:
        json.dump(sidecar, fh, indent=2)


def load_observations(csv_path: str | Path) -> ObservationSet:
    csv_path = Path(csv_path)
    node_ids, coords, vals = [], [], []
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:5] != ["node_id", "x", "y", "u_x", "u_y"]:
            raise ValueError(f"unexpected observation CSV header: {header}")
        for row in reader:
            node_ids.append(int(row[0]))
            coords.append((float(row[1]), float(row[2])))
            vals.extend((float(row[3]), float(row[4])))
    with open(csv_path.with_suffix(".json")) as fh:
        sidecar = json.load(fh)
    truth = sidecar.get("truth_coefficients")
    return ObservationSet(
        values=np.array(vals),
        edge_node_ids=np.array(node_ids, dtype=np.int64),
        node_coords=np.array(coords),
        sigma_f=float(sidecar["sigma_f"]),
        mesh_nx=int(sidecar["mesh"]["nx"]),
        mesh_ny=int(sidecar["mesh"]["ny"]),
        seed=sidecar.get("seed"),
        truth_coefficients=None if truth is None else np.array(truth, dtype=float),
    )
