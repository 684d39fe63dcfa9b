"""Run configuration: dataclasses, YAML parsing, validation and round-trip.

One YAML file describes a whole experiment run: geometry and kernel
parameters, the level hierarchy (truncation, grid and subsampling rate
per level), sampling options and experiment-specific extras.  Parsing is
strict; validation failures raise :class:`ConfigError` carrying every
problem found so the CLI can emit a machine-readable report.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .fem import BeamGeometry
from .random_field import MaternParams
from .transform import GammaTransformParams


class ConfigError(ValueError):
    """Invalid configuration; `errors` lists the individual problems."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class ExperimentKind(enum.Enum):
    EIGEN_DECAY = "EigenDecay"
    REJECTION_RATE = "RejectionRate"
    COST_VARIANCE = "CostVariance"
    RECONSTRUCTION = "Reconstruction"


class DataTreatment(enum.Enum):
    DEPENDENT = "dependent"      # level-sized observations, level-scaled likelihood
    INDEPENDENT = "independent"  # full finest-grid data at every level


class LikelihoodKind(enum.Enum):
    GAUSSIAN = "gaussian"
    CONSTANT = "constant"  # diagnostic: forces the prior as the target


@dataclass(frozen=True)
class LevelConfig:
    """Per-level settings of the chain hierarchy.

    `subsample_rate` is the number of steps the level below completes
    between consecutive steps of this level (1 and unused at level 0).
    `chain_length` counts all iterations including burn-in; burn-in is
    discarded by the estimator.
    """

    level: int
    kl_truncation: int
    nx: int
    ny: int
    subsample_rate: int
    pcn_beta: float
    fidelity_sigma: float
    chain_length: int
    burn_in: int

    @property
    def target_samples(self) -> int:
        return self.chain_length - self.burn_in


@dataclass(eq=True)
class HierarchyConfig:
    """Everything needed to reproduce one experiment run."""

    experiment: ExperimentKind
    seed: int
    replicates: int
    output_dir: str
    geometry: BeamGeometry
    matern: MaternParams
    transform: GammaTransformParams
    n_quad: int
    cache_dir: str | None
    sigma_f: float
    truth_truncation: int
    observations_path: str | None
    pcn_beta: float
    coarsest_samples: int
    burn_in_fraction: float
    weighting: str                  # "select" | "local_average"
    data_treatment: DataTreatment
    likelihood: LikelihoodKind
    checkpoint_every: int
    workers: int
    levels: list[LevelConfig]
    experiment_options: dict = field(default_factory=dict)

    @property
    def n_levels(self) -> int:
        return len(self.levels)


def _derive_levels(raw_levels, pcn_beta, sigma_f, coarsest_samples,
                   burn_in_fraction, errors) -> list[LevelConfig]:
    levels = []
    chain_length = int(coarsest_samples)
    for idx, entry in enumerate(raw_levels):
        if not isinstance(entry, dict):
            errors.append(f"level {idx}: expected a mapping, got {type(entry).__name__}")
            continue
        try:
            m = int(entry["m"])
            nx = int(entry["nx"])
            ny = int(entry["ny"])
        except KeyError as missing:
            errors.append(f"level {idx}: missing key {missing}")
            continue
        tau = int(entry.get("subsample", 1))
        sigma_l = float(entry.get("sigma", sigma_f))
        beta_l = float(entry.get("beta", pcn_beta))
        if idx > 0:
            chain_length = chain_length // tau
        burn = int(burn_in_fraction * chain_length)
        levels.append(LevelConfig(
            level=idx, kl_truncation=m, nx=nx, ny=ny,
            subsample_rate=tau if idx > 0 else 1,
            pcn_beta=beta_l, fidelity_sigma=sigma_l,
            chain_length=chain_length, burn_in=burn,
        ))
    return levels


def _validate(cfg: HierarchyConfig) -> list[str]:
    errors: list[str] = []
    if cfg.replicates < 1:
        errors.append(f"replicates must be >= 1, got {cfg.replicates}")
    if cfg.workers < 1:
        errors.append(f"workers must be >= 1, got {cfg.workers}")
    if not 0 < cfg.pcn_beta <= 1:
        errors.append(f"pcn_beta must lie in (0, 1], got {cfg.pcn_beta}")
    if cfg.sigma_f <= 0:
        errors.append(f"sigma_f must be positive, got {cfg.sigma_f}")
    if not 0 <= cfg.burn_in_fraction < 1:
        errors.append(f"burn_in_fraction must lie in [0, 1), got {cfg.burn_in_fraction}")
    if cfg.coarsest_samples < 10:
        errors.append(f"coarsest_samples too small: {cfg.coarsest_samples}")
    if cfg.weighting not in ("select", "local_average"):
        errors.append(f"unknown weighting '{cfg.weighting}'")
    if cfg.truth_truncation < 1:
        errors.append(f"truth_truncation must be >= 1, got {cfg.truth_truncation}")
    if not cfg.levels:
        errors.append("at least one level is required")
        return errors

    needed = max(cfg.truth_truncation, max(l.kl_truncation for l in cfg.levels))
    if cfg.n_quad * cfg.n_quad < needed:
        errors.append(
            f"n_quad^2 = {cfg.n_quad ** 2} cannot resolve {needed} KL modes")
    prev = None
    for lc in cfg.levels:
        tag = f"level {lc.level}"
        if lc.kl_truncation < 1:
            errors.append(f"{tag}: truncation must be >= 1")
        if lc.nx % 3 != 0:
            errors.append(f"{tag}: nx must be divisible by 3, got {lc.nx}")
        if lc.ny % 2 != 0:
            errors.append(f"{tag}: ny must be even for the stiffness-average "
                          f"region, got {lc.ny}")
        if lc.fidelity_sigma <= 0:
            errors.append(f"{tag}: sigma must be positive")
        if not 0 < lc.pcn_beta <= 1:
            errors.append(f"{tag}: beta must lie in (0, 1], got {lc.pcn_beta}")
        if lc.chain_length < 1:
            errors.append(f"{tag}: subsampling exhausts the chain "
                          f"(length {lc.chain_length})")
        if prev is not None:
            if lc.kl_truncation <= prev.kl_truncation:
                errors.append(f"{tag}: truncation must increase strictly "
                              f"({prev.kl_truncation} -> {lc.kl_truncation})")
            if lc.subsample_rate < 1:
                errors.append(f"{tag}: subsample rate must be >= 1")
            if lc.nx % prev.nx != 0 or lc.ny % prev.ny != 0:
                errors.append(f"{tag}: grid {lc.nx}x{lc.ny} is not an integer "
                              f"refinement of {prev.nx}x{prev.ny}")
            elif lc.nx // prev.nx != lc.ny // prev.ny:
                errors.append(f"{tag}: anisotropic refinement "
                              f"{lc.nx // prev.nx} vs {lc.ny // prev.ny}")
        prev = lc
    return errors


def config_from_dict(doc: dict) -> HierarchyConfig:
    errors: list[str] = []

    def section(name):
        sec = doc.get(name, {})
        if not isinstance(sec, dict):
            errors.append(f"section '{name}' must be a mapping")
            return {}
        return sec

    try:
        experiment = ExperimentKind(doc.get("experiment", "CostVariance"))
    except ValueError:
        errors.append(f"unknown experiment '{doc.get('experiment')}'")
        experiment = ExperimentKind.COST_VARIANCE

    geo = section("geometry")
    mat = section("matern")
    trf = section("transform")
    fld = section("field")
    obs = section("observations")
    smp = section("sampling")

    try:
        geometry = BeamGeometry(
            length=float(geo.get("length", 3.0)),
            height=float(geo.get("height", 0.3)),
            poisson=float(geo.get("poisson", 0.25)),
            e_ref=float(geo.get("e_ref", 30.0e9)),
            load_total=float(geo.get("load_total", 1.0e3)),
            reduced_lame=bool(geo.get("reduced_lame", False)),
        )
    except ValueError as exc:
        errors.append(f"geometry: {exc}")
        geometry = BeamGeometry()
    try:
        matern = MaternParams(
            variance=float(mat.get("variance", 4.0)),
            corr_length=float(mat.get("corr_length", 0.5)),
            smoothness=float(mat.get("smoothness", 1.5)),
        )
    except ValueError as exc:
        errors.append(f"matern: {exc}")
        matern = MaternParams(4.0, 0.5, 1.5)
    try:
        transform = GammaTransformParams(
            kappa=float(trf.get("kappa", 2.5)),
            mu=float(trf.get("mu", 0.4)),
            phi=float(trf.get("phi", 0.1)),
        )
    except ValueError as exc:
        errors.append(f"transform: {exc}")
        transform = GammaTransformParams()

    try:
        data_treatment = DataTreatment(smp.get("data_treatment", "dependent"))
    except ValueError:
        errors.append(f"unknown data_treatment '{smp.get('data_treatment')}'")
        data_treatment = DataTreatment.DEPENDENT
    try:
        likelihood = LikelihoodKind(smp.get("likelihood", "gaussian"))
    except ValueError:
        errors.append(f"unknown likelihood '{smp.get('likelihood')}'")
        likelihood = LikelihoodKind.GAUSSIAN

    pcn_beta = float(smp.get("pcn_beta", 0.2))
    sigma_f = float(obs.get("sigma_f", 1.0e-8))
    coarsest = int(smp.get("coarsest_samples", 200_000))
    burn_frac = float(smp.get("burn_in_fraction", 0.1))
    levels = _derive_levels(
        doc.get("levels", []), pcn_beta, sigma_f, coarsest, burn_frac, errors)

    cfg = HierarchyConfig(
        experiment=experiment,
        seed=int(doc.get("seed", 0)),
        replicates=int(doc.get("replicates", 4)),
        output_dir=str(doc.get("output_dir", "out")),
        geometry=geometry,
        matern=matern,
        transform=transform,
        n_quad=int(fld.get("n_quad", 64)),
        cache_dir=fld.get("cache_dir"),
        sigma_f=sigma_f,
        truth_truncation=int(obs.get("truth_truncation", 300)),
        observations_path=obs.get("path"),
        pcn_beta=pcn_beta,
        coarsest_samples=coarsest,
        burn_in_fraction=burn_frac,
        weighting=str(smp.get("weighting", "select")),
        data_treatment=data_treatment,
        likelihood=likelihood,
        checkpoint_every=int(smp.get("checkpoint_every", 0)),
        workers=int(doc.get("workers", 1)),
        levels=levels,
        experiment_options=dict(doc.get("experiment_options", {})),
    )
    errors.extend(_validate(cfg))
    if errors:
        raise ConfigError(errors)
    return cfg


def config_to_dict(cfg: HierarchyConfig) -> dict:
    levels = []
    for lc in cfg.levels:
        entry = {"m": lc.kl_truncation, "nx": lc.nx, "ny": lc.ny}
        if lc.level > 0:
            entry["subsample"] = lc.subsample_rate
        if lc.fidelity_sigma != cfg.sigma_f:
            entry["sigma"] = lc.fidelity_sigma
        if lc.pcn_beta != cfg.pcn_beta:
            entry["beta"] = lc.pcn_beta
        levels.append(entry)
    return {
        "experiment": cfg.experiment.value,
        "seed": cfg.seed,
        "replicates": cfg.replicates,
        "output_dir": cfg.output_dir,
        "workers": cfg.workers,
        "geometry": {
            "length": cfg.geometry.length,
            "height": cfg.geometry.height,
            "poisson": cfg.geometry.poisson,
            "e_ref": cfg.geometry.e_ref,
            "load_total": cfg.geometry.load_total,
            "reduced_lame": cfg.geometry.reduced_lame,
        },
        "matern": {
            "variance": cfg.matern.variance,
            "corr_length": cfg.matern.corr_length,
            "smoothness": cfg.matern.smoothness,
        },
        "transform": asdict(cfg.transform),
        "field": {"n_quad": cfg.n_quad, "cache_dir": cfg.cache_dir},
        "observations": {
            "sigma_f": cfg.sigma_f,
            "truth_truncation": cfg.truth_truncation,
            "path": cfg.observations_path,
        },
        "sampling": {
            "pcn_beta": cfg.pcn_beta,
            "coarsest_samples": cfg.coarsest_samples,
            "burn_in_fraction": cfg.burn_in_fraction,
            "weighting": cfg.weighting,
            "data_treatment": cfg.data_treatment.value,
            "likelihood": cfg.likelihood.value,
            "checkpoint_every": cfg.checkpoint_every,
        },
        "levels": levels,
        "experiment_options": dict(cfg.experiment_options),
    }


def load_config(path: str | Path) -> HierarchyConfig:
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise ConfigError([f"config root must be a mapping, got {type(doc).__name__}"])
    return config_from_dict(doc)


def save_config(cfg: HierarchyConfig, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=False)
