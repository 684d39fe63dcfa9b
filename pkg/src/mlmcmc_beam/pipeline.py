"""Per-level forward models: KL coefficients in, log likelihood out.

Each level bundles its mesh, its slice of the KL basis evaluated at the
element centroids, the restricted observation vector and the solver
machinery.  The model exposes the pieces the sampler needs (log
likelihood, stiffness field, region-averaged stiffness) and keeps
wall-clock accounting split into solve time and data-comparison time so
the cost experiments can report both.

Seed policy: every random stream is derived from the root seed with a
fixed spawn key, so replicate r at level l draws an identical stream no
matter how many workers run or in which order replicates finish.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from .config import DataTreatment, HierarchyConfig, LevelConfig, LikelihoodKind
from .data import (
    LevelWeighting,
    ObservationSet,
    WeightingMode,
    build_level_weighting,
    log_likelihood_level,
    restrict_observations,
    synthesize_observations,
)
from .fem import (
    BeamGeometry,
    BeamSolver,
    DisplacementField,
    StiffnessField,
    build_mesh,
    observe_edges,
    qoi_element_mask,
)
from .random_field import KLBasis
from .transform import GammaTransformParams, transform_field

logger = logging.getLogger(__name__)


def observation_noise_seed(root_seed: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(root_seed, spawn_key=(0,))


def truth_field_seed(root_seed: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(root_seed, spawn_key=(2,))


def replicate_level_seed(root_seed: int, replicate: int, level: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(root_seed, spawn_key=(1, replicate, level))


def replicate_init_seed(root_seed: int, replicate: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(root_seed, spawn_key=(1, replicate, 10_000))


class LevelModel:
    """Forward model of one level; all evaluations are timed.

    With the level-dependent data treatment the model compares its edge
    output against the restriction of the observations to its own grid
    and divides the misfit by 2 * N_l * sigma_l^2.  With the
    level-independent treatment it interpolates its edge output to the
    finest edge nodes and uses the plain single-level misfit.
    """

    def __init__(
        self,
        level_cfg: LevelConfig,
        geom: BeamGeometry,
        transform_params: GammaTransformParams,
        basis: KLBasis,
        obs: ObservationSet,
        weighting: LevelWeighting,
        data_treatment: DataTreatment = DataTreatment.DEPENDENT,
        likelihood: LikelihoodKind = LikelihoodKind.GAUSSIAN,
    ):
        self.cfg = level_cfg
        self.geom = geom
        self.transform_params = transform_params
        self.data_treatment = data_treatment
        self.likelihood_kind = likelihood
        self.mesh = build_mesh(level_cfg.nx, level_cfg.ny, geom)
        self.solver = BeamSolver(self.mesh, geom)
        self.m_trunc = level_cfg.kl_truncation

        # field matrix: g(centroid) = field_matrix @ theta
        ext = basis.extension_matrix(self.mesh.centroids_unit_square())
        lam = basis.eigenvalues[: self.m_trunc]
        self.field_matrix = ext[:, : self.m_trunc] * np.sqrt(lam)
        self.field_mean = basis.mean

        self.weighting = weighting
        self.obs_level = restrict_observations(obs, weighting)
        self.n_obs_points = self.mesh.n_edge_nodes
        self.sigma = level_cfg.fidelity_sigma
        assert self.obs_level.shape[0] == 2 * self.n_obs_points

        # full-resolution comparison data for the level-independent mode
        self.obs_full = obs.values
        self.sigma_full = obs.sigma_f
        nxf = obs.mesh_nx
        self._fine_edge_x = np.arange(nxf + 1) * (geom.length / nxf)
        self._own_edge_x = np.arange(level_cfg.nx + 1) * (geom.length / level_cfg.nx)

        self._qoi_mask = qoi_element_mask(self.mesh)
        self.solve_seconds = 0.0
        self.compare_seconds = 0.0
        self.n_evaluations = 0
        self.n_forward_failures = 0

    # -- field level ---------------------------------------------------

    def log_field(self, theta: np.ndarray) -> np.ndarray:
        return self.field_mean + self.field_matrix @ theta

    def stiffness_values(self, theta: np.ndarray) -> np.ndarray:
        return transform_field(self.log_field(theta), self.transform_params)

    def stiffness_field(self, theta: np.ndarray) -> StiffnessField:
        return StiffnessField(mesh=self.mesh, element_values=self.stiffness_values(theta))

    def stiffness_batch(self, thetas: np.ndarray) -> np.ndarray:
        """(n, m) coefficient rows -> (n, n_elements) stiffness values."""
        g = self.field_mean + thetas @ self.field_matrix.T
        return transform_field(g, self.transform_params)

    # -- forward solve and likelihood -----------------------------------

    def forward_edges(self, theta: np.ndarray) -> np.ndarray:
        disp = self.solver.solve(self.stiffness_field(theta))
        return observe_edges(disp)

    def displacement(self, theta: np.ndarray) -> DisplacementField:
        return self.solver.solve(self.stiffness_field(theta))

    def log_likelihood(self, theta: np.ndarray) -> float:
        """Log likelihood of the level's data given coefficients theta.

        Any forward-solve failure maps to -inf (automatic rejection) and
        bumps the diagnostic counter.
        """
        self.n_evaluations += 1
        if self.likelihood_kind is LikelihoodKind.CONSTANT:
            return 0.0
        t0 = time.perf_counter()
        try:
            edges = self.forward_edges(theta)
        except (ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
            self.n_forward_failures += 1
            logger.warning("forward solve failed at level %d: %s", self.cfg.level, exc)
            self.solve_seconds += time.perf_counter() - t0
            return float("-inf")
        t1 = time.perf_counter()
        self.solve_seconds += t1 - t0
        if self.data_treatment is DataTreatment.DEPENDENT:
            value = log_likelihood_level(self.obs_level, edges, self.n_obs_points, self.sigma)
        else:
            value = self._log_likelihood_full(edges)
        self.compare_seconds += time.perf_counter() - t1
        return value

    def compare_only(self, edges: np.ndarray) -> float:
        """Data-comparison stage alone (used by the cost probes)."""
        if self.data_treatment is DataTreatment.DEPENDENT:
            return self.compare_dependent(edges)
        return self.compare_independent(edges)

    def compare_dependent(self, edges: np.ndarray) -> float:
        """Misfit against this level's own restricted data (probe path)."""
        return log_likelihood_level(self.obs_level, edges, self.n_obs_points, self.sigma)

    def compare_independent(self, edges: np.ndarray) -> float:
        """Misfit against the full finest-grid data (probe path)."""
        return self._log_likelihood_full(edges)

    def reset_counters(self) -> None:
        self.solve_seconds = 0.0
        self.compare_seconds = 0.0
        self.n_evaluations = 0
        self.n_forward_failures = 0

    def _log_likelihood_full(self, edges: np.ndarray) -> float:
        interp = self._interp_edges_to_finest(edges)
        r = self.obs_full - interp
        return -float(r @ r) / (2.0 * self.sigma_full * self.sigma_full)

    def _interp_edges_to_finest(self, edges: np.ndarray) -> np.ndarray:
        """Linear interpolation of edge displacements onto the finest edge nodes.

        Along an element edge the bilinear shape functions restrict to 1D
        linear interpolation, so this equals prolonging the whole field
        to the finest mesh and reading it at the finest edge nodes.
        """
        n_own = self.cfg.nx + 1
        n_fine = self._fine_edge_x.shape[0]
        out = np.empty(2 * 2 * n_fine)
        own = edges.reshape(-1, 2)      # rows: edge nodes, cols: (ux, uy)
        res = out.reshape(-1, 2)
        for edge in (0, 1):             # bottom, top
            o = slice(edge * n_own, (edge + 1) * n_own)
            f = slice(edge * n_fine, (edge + 1) * n_fine)
            for comp in (0, 1):
                res[f, comp] = np.interp(
                    self._fine_edge_x, self._own_edge_x, own[o, comp])
        return out

    # -- quantity of interest -------------------------------------------

    def qoi(self, theta: np.ndarray) -> float:
        return float(np.mean(self.stiffness_values(theta)[self._qoi_mask]))

    def qoi_batch(self, thetas: np.ndarray) -> np.ndarray:
        vals = self.stiffness_batch(thetas)
        return vals[:, self._qoi_mask].mean(axis=1)


def weighting_for_level(cfg: HierarchyConfig, level: int) -> LevelWeighting:
    """Identity at the finest level, per-config mode below it."""
    finest = cfg.levels[-1]
    lc = cfg.levels[level]
    if lc.nx == finest.nx:
        mode = WeightingMode.IDENTITY
    elif cfg.weighting == "local_average":
        mode = WeightingMode.LOCAL_AVERAGE
    else:
        mode = WeightingMode.SELECT
    return build_level_weighting(finest.nx, lc.nx, level, mode)


def build_level_models(cfg: HierarchyConfig, basis: KLBasis, obs: ObservationSet) -> list[LevelModel]:
    finest = cfg.levels[-1]
    if obs.mesh_nx != finest.nx or obs.mesh_ny != finest.ny:
        raise ValueError(
            f"observations live on {obs.mesh_nx}x{obs.mesh_ny} but the finest "
            f"level is {finest.nx}x{finest.ny}")
    if basis.truncation < finest.kl_truncation:
        raise ValueError(
            f"basis holds {basis.truncation} modes, finest level needs "
            f"{finest.kl_truncation}")
    models = []
    for lc in cfg.levels:
        models.append(LevelModel(
            level_cfg=lc,
            geom=cfg.geometry,
            transform_params=cfg.transform,
            basis=basis,
            obs=obs,
            weighting=weighting_for_level(cfg, lc.level),
            data_treatment=cfg.data_treatment,
            likelihood=cfg.likelihood,
        ))
    return models


@dataclass(eq=False)
class TruthData:
    """Ground truth used to manufacture the observation set."""

    coefficients: np.ndarray
    field: StiffnessField


def make_truth(cfg: HierarchyConfig, basis: KLBasis) -> TruthData:
    """Draw the ground-truth field from the prior at the finest resolution."""
    if basis.truncation < cfg.truth_truncation:
        raise ValueError(
            f"basis holds {basis.truncation} modes, truth needs {cfg.truth_truncation}")
    rng = np.random.default_rng(truth_field_seed(cfg.seed))
    coeffs = rng.standard_normal(cfg.truth_truncation)
    finest = cfg.levels[-1]
    mesh = build_mesh(finest.nx, finest.ny, cfg.geometry)
    ext = basis.extension_matrix(mesh.centroids_unit_square())[:, : cfg.truth_truncation]
    g = basis.mean + ext @ (np.sqrt(basis.eigenvalues[: cfg.truth_truncation]) * coeffs)
    values = transform_field(g, cfg.transform)
    return TruthData(coefficients=coeffs,
                     field=StiffnessField(mesh=mesh, element_values=values))


def make_observations(cfg: HierarchyConfig, basis: KLBasis) -> tuple[ObservationSet, TruthData]:
    truth = make_truth(cfg, basis)
    obs = synthesize_observations(
        truth.field, cfg.geometry, cfg.sigma_f,
        observation_noise_seed(cfg.seed),
        truth_coefficients=truth.coefficients,
    )
    return obs, truth
