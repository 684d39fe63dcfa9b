"""Multilevel MCMC for Bayesian stiffness inference in a clamped 2D beam.

The library stacks a Matern random-field prior (truncated KL expansion),
a positivity-enforcing transform, a plane-stress finite element forward
model, level-dependent observation handling, and a hierarchical pCN
sampler with a telescoped posterior estimator.  `cli` wires the pieces
into reproducible experiments.
"""

from .config import (
    ConfigError,
    DataTreatment,
    ExperimentKind,
    HierarchyConfig,
    LevelConfig,
    LikelihoodKind,
    config_from_dict,
    config_to_dict,
    load_config,
    save_config,
)
from .data import (
    LevelWeighting,
    ObservationSet,
    WeightingMode,
    build_level_weighting,
    log_likelihood_level,
    restrict_observations,
    synthesize_observations,
)
from .estimator import (
    LevelStats,
    TelescopicEstimate,
    combine_replicates,
    effective_sample_size,
    iat,
    level_statistics,
    telescopic_estimate,
)
from .fem import (
    BeamGeometry,
    BeamSolver,
    DisplacementField,
    Mesh,
    StiffnessField,
    assemble_and_solve,
    build_mesh,
    observe_edges,
    qoi_region_average,
)
from .pipeline import (
    LevelModel,
    build_level_models,
    make_observations,
    make_truth,
)
from .random_field import (
    GaussianFieldRealisation,
    KLBasis,
    MaternParams,
    build_kl_basis,
    cached_kl_basis,
    eigenvalue_decay_slope,
    eval_field,
    matern_cov,
)
from .sampler import (
    ChainSet,
    ChainState,
    LevelChain,
    coarse_step,
    load_chain_set,
    ml_step,
    pcn_propose,
    resume_hierarchy,
    run_hierarchy,
    save_chain_set,
)
from .transform import (
    GammaTransformParams,
    gamma_transform,
    transform_field,
    transform_lower_bound,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
