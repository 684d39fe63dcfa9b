"""Configuration-driven experiment runner.

Subcommands: `run` executes an experiment config across replicates,
`resume` continues an interrupted replicate from its checkpoint,
`validate` parses and checks a config, and `report` recomputes every
derived output from stored chains.  All outputs are plain CSV/JSON.

Replicate r's chains depend only on (root seed, r), never on worker
count or finish order, so parallel and serial runs emit identical files.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import json
import logging
import math
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import (
    ConfigError,
    ExperimentKind,
    HierarchyConfig,
    config_from_dict,
    config_to_dict,
    load_config,
    save_config,
)
from .data import ObservationSet, load_observations, save_observations
from .estimator import (
    combine_replicates,
    level_statistics,
    telescopic_estimate,
    write_estimate_json,
    write_level_stats_csv,
)
from .pipeline import LevelModel, build_level_models, make_observations, make_truth
from .random_field import cached_kl_basis, eigenvalue_decay_slope
from .sampler import (
    ChainSet,
    load_chain_set,
    load_checkpoint_config,
    resume_hierarchy,
    run_hierarchy,
    save_chain_set,
)

logger = logging.getLogger(__name__)

WORKERS_ENV_VAR = "MLMCMC_BEAM_WORKERS"


def _required_modes(cfg: HierarchyConfig) -> int:
    return max(cfg.truth_truncation, max(l.kl_truncation for l in cfg.levels))


def _basis_for(cfg: HierarchyConfig):
    return cached_kl_basis(cfg.matern, cfg.n_quad, _required_modes(cfg), cfg.cache_dir)


def _float_cell(v) -> str:
    return repr(float(v))


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# Experiment: covariance eigenvalue decay (no sampling involved).


def run_eigen_decay(cfg: HierarchyConfig, out: Path) -> None:
    opts = cfg.experiment_options
    nus = [float(v) for v in opts.get("smoothness_values", [1.5, 3.0])]
    lo, hi = (int(v) for v in opts.get("fit_range", [10, 100]))
    n_modes = int(opts.get("n_modes", hi + 10))
    rows, slopes = [], {}
    for nu in nus:
        params = replace(cfg.matern, smoothness=nu)
        basis = cached_kl_basis(params, cfg.n_quad, n_modes, cfg.cache_dir)
        for m, lam in enumerate(basis.eigenvalues, start=1):
            rows.append([_float_cell(nu), m, _float_cell(lam)])
        slopes[repr(nu)] = eigenvalue_decay_slope(basis.eigenvalues, lo, hi)
    _write_csv(out / "eigen_decay.csv", ["nu", "m", "lambda_m"], rows)
    with open(out / "eigen_decay.json", "w") as fh:
        json.dump({"fit_range": [lo, hi], "slopes": slopes}, fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Sampling experiments.


def _get_observations(cfg: HierarchyConfig, basis, out: Path):
    """Load the configured observation file or synthesize and persist one."""
    if cfg.observations_path:
        obs = load_observations(cfg.observations_path)
        finest = cfg.levels[-1]
        if obs.mesh_nx != finest.nx or obs.mesh_ny != finest.ny:
            raise ConfigError([
                f"observations at {obs.mesh_nx}x{obs.mesh_ny} do not match the "
                f"finest level {finest.nx}x{finest.ny}"])
        return obs, None
    obs, truth = make_observations(cfg, basis)
    save_observations(obs, out / "observations.csv")
    return obs, truth


def _replicate_job(cfg_dict: dict, obs_path: str, replicate: int,
                   chains_path: str, checkpoint_path: str | None) -> int:
    """Run one replicate in a worker process; chains go straight to disk."""
    cfg = config_from_dict(cfg_dict)
    obs = load_observations(obs_path)
    basis = _basis_for(cfg)
    chains = run_hierarchy(cfg, obs, replicate, basis=basis,
                           checkpoint_path=checkpoint_path)
    save_chain_set(chains, chains_path)
    return replicate


def _run_replicates(cfg: HierarchyConfig, obs: ObservationSet, basis,
                    out: Path) -> tuple[list[ChainSet], list[LevelModel]]:
    chains_dir = out / "chains"
    chains_dir.mkdir(parents=True, exist_ok=True)

    def ckpt(r: int) -> str | None:
        if cfg.checkpoint_every <= 0:
            return None
        return str(out / "checkpoints" / f"rep{r}.npz")

    models = build_level_models(cfg, basis, obs)
    results: list[ChainSet] = []
    if cfg.workers > 1 and cfg.replicates > 1:
        obs_path = out / "observations.csv"
        if not obs_path.exists():
            save_observations(obs, obs_path)
        n_workers = min(cfg.workers, cfg.replicates)
        cfg_dict = config_to_dict(cfg)
        with concurrent.futures.ProcessPoolExecutor(max_workers=n_workers) as pool:
            futures = [
                pool.submit(_replicate_job, cfg_dict, str(obs_path), r,
                            str(chains_dir / f"rep{r}.npz"), ckpt(r))
                for r in range(cfg.replicates)
            ]
            for fut in concurrent.futures.as_completed(futures):
                fut.result()
        for r in range(cfg.replicates):
            results.append(load_chain_set(chains_dir / f"rep{r}.npz"))
    else:
        for r in range(cfg.replicates):
            for model in models:
                model.reset_counters()
            chains = run_hierarchy(cfg, obs, r, models=models,
                                   checkpoint_path=ckpt(r))
            save_chain_set(chains, chains_dir / f"rep{r}.npz")
            results.append(chains)
    return results, models


def write_rejection_csv(results: list[ChainSet], path: Path) -> None:
    """Per-level rejection rate with a normal-approximation replicate band."""
    rows = []
    n_levels = results[0].n_levels
    for level in range(n_levels):
        rates = np.array([cs.levels[level].rejection_rate for cs in results])
        mean = float(rates.mean())
        if len(rates) > 1:
            half = 1.96 * float(rates.std(ddof=1)) / math.sqrt(len(rates))
        else:
            half = 0.0
        rows.append([
            level, _float_cell(mean),
            _float_cell(max(0.0, mean - half)),
            _float_cell(min(1.0, mean + half)),
            len(rates),
        ])
    _write_csv(path, ["level", "rejection_rate", "ci_low", "ci_high",
                      "n_replicates"], rows)


def measure_compare_costs(models: list[LevelModel], results: list[ChainSet],
                          n_states: int = 16, repeats: int = 200) -> list[dict]:
    """Time the data-comparison stage per level under both treatments.

    States are drawn from the stored chains so the probe sees realistic
    edge outputs; each state's edges are solved once up front and the
    comparison alone is timed (best of several passes to damp scheduler
    noise).
    """
    probes = []
    for level, model in enumerate(models):
        lc = results[0].levels[level]
        take = min(n_states, lc.n_steps)
        idx = np.linspace(lc.n_steps - take, lc.n_steps - 1, take).astype(int)
        edges_list = [model.forward_edges(lc.samples[i]) for i in idx]

        def timed(fn) -> float:
            best = float("inf")
            for _ in range(5):
                t0 = time.perf_counter()
                for edges in edges_list:
                    for _ in range(repeats):
                        fn(edges)
                dt = (time.perf_counter() - t0) / (len(edges_list) * repeats)
                best = min(best, dt)
            return best

        probes.append({
            "level": level,
            "obs_scalars_dependent": int(model.obs_level.shape[0]),
            "obs_scalars_independent": int(model.obs_full.shape[0]),
            "compare_dependent_seconds": timed(model.compare_dependent),
            "compare_independent_seconds": timed(model.compare_independent),
        })
    return probes


def write_cost_csv(results: list[ChainSet], probes: list[dict], path: Path) -> None:
    rows = []
    for level in range(results[0].n_levels):
        lcs = [cs.levels[level] for cs in results]
        step = float(np.mean([c.step_seconds / c.n_steps for c in lcs if c.n_steps]))
        solve = float(np.mean([
            c.solve_seconds / c.n_evaluations for c in lcs if c.n_evaluations]))
        comp = float(np.mean([
            c.compare_seconds / c.n_evaluations for c in lcs if c.n_evaluations]))
        p = probes[level]
        rows.append([
            level, lcs[0].m_trunc,
            results[0].configs[level].nx, results[0].configs[level].ny,
            _float_cell(step), _float_cell(solve), _float_cell(comp),
            _float_cell(p["compare_dependent_seconds"]),
            _float_cell(p["compare_independent_seconds"]),
            p["obs_scalars_dependent"], p["obs_scalars_independent"],
        ])
    _write_csv(path, [
        "level", "m_trunc", "nx", "ny", "mean_step_seconds",
        "mean_solve_seconds", "mean_compare_seconds",
        "probe_compare_dependent_seconds", "probe_compare_independent_seconds",
        "obs_scalars_dependent", "obs_scalars_independent",
    ], rows)


# ---------------------------------------------------------------------------
# Reconstruction outputs: stiffness rasters and a sample gallery.


def _element_grid_indices(mesh) -> tuple[np.ndarray, np.ndarray]:
    cent = mesh.element_centroids()
    hx = mesh.length / mesh.nx
    hy = mesh.height / mesh.ny
    i = np.floor(cent[:, 0] / hx).astype(int)
    j = np.floor(cent[:, 1] / hy).astype(int)
    return i, j


def write_raster(path: Path, mesh, values: np.ndarray) -> None:
    i, j = _element_grid_indices(mesh)
    order = np.lexsort((j, i))
    rows = [[int(i[e]), int(j[e]), _float_cell(values[e])] for e in order]
    _write_csv(path, ["i", "j", "value"], rows)


def run_reconstruction_outputs(cfg: HierarchyConfig, out: Path,
                               results: list[ChainSet],
                               models: list[LevelModel], basis,
                               obs: ObservationSet, truth) -> None:
    finest = models[-1]
    burn = cfg.levels[-1].burn_in
    pooled = np.concatenate(
        [cs.levels[-1].samples[burn:] for cs in results], axis=0)
    post_mean = finest.stiffness_batch(pooled).mean(axis=0)
    write_raster(out / "posterior_mean.csv", finest.mesh, post_mean)

    truth_values = None
    if truth is not None:
        truth_values = truth.field.element_values
    elif obs.truth_coefficients is not None:
        mt = obs.truth_coefficients.shape[0]
        ext = basis.extension_matrix(finest.mesh.centroids_unit_square())[:, :mt]
        g = basis.mean + ext @ (np.sqrt(basis.eigenvalues[:mt]) * obs.truth_coefficients)
        from .transform import transform_field
        truth_values = transform_field(g, cfg.transform)
    summary: dict = {"replicates": len(results),
                     "pooled_samples": int(pooled.shape[0])}
    if truth_values is not None:
        write_raster(out / "ground_truth.csv", finest.mesh, truth_values)
        err = np.linalg.norm(post_mean - truth_values)
        summary["posterior_mean_rel_l2_error"] = float(
            err / np.linalg.norm(truth_values))

    gallery = int(cfg.experiment_options.get("gallery_size", 4))
    lc = results[0].levels[-1]
    take = min(gallery, lc.n_steps - burn)
    idx = np.linspace(burn, lc.n_steps - 1, take).astype(int)
    entries = []
    for k, n in enumerate(idx):
        values = finest.stiffness_values(lc.samples[n])
        name = f"sample_{k}.csv"
        write_raster(out / name, finest.mesh, values)
        entries.append({
            "file": name,
            "replicate": results[0].replicate,
            "chain_index": int(n),
            "log_likelihood": float(lc.log_liks[n]),
        })
    summary["samples"] = entries
    with open(out / "sample_scores.json", "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Shared post-processing and the top-level experiment driver.


def post_process(cfg: HierarchyConfig, out: Path, results: list[ChainSet],
                 models: list[LevelModel], basis, obs: ObservationSet,
                 truth) -> None:
    stats = [level_statistics(cs, models) for cs in results]
    estimates = [telescopic_estimate(cs, models) for cs in results]
    write_level_stats_csv(stats, out / "level_stats.csv")
    write_estimate_json(combine_replicates(estimates), out / "estimate.json")
    if cfg.experiment is ExperimentKind.REJECTION_RATE:
        write_rejection_csv(results, out / "rejection_rate.csv")
    elif cfg.experiment is ExperimentKind.COST_VARIANCE:
        probes = measure_compare_costs(models, results)
        write_cost_csv(results, probes, out / "cost_per_sample.csv")
    elif cfg.experiment is ExperimentKind.RECONSTRUCTION:
        run_reconstruction_outputs(cfg, out, results, models, basis, obs, truth)


def run_experiment(cfg: HierarchyConfig) -> Path:
    """Execute the configured experiment; returns the output directory."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not cfg.cache_dir:
        cfg.cache_dir = str(out / "kl_cache")
    save_config(cfg, out / "config.yaml")
    if cfg.experiment is ExperimentKind.EIGEN_DECAY:
        run_eigen_decay(cfg, out)
        return out
    basis = _basis_for(cfg)
    obs, truth = _get_observations(cfg, basis, out)
    results, models = _run_replicates(cfg, obs, basis, out)
    post_process(cfg, out, results, models, basis, obs, truth)
    return out


# ---------------------------------------------------------------------------
# Subcommands.


def _apply_overrides(cfg: HierarchyConfig, args) -> HierarchyConfig:
    if args.replicates is not None:
        if args.replicates < 1:
            raise ConfigError(["--replicates must be at least 1"])
        cfg.replicates = args.replicates
    if args.seed is not None:
        cfg.seed = args.seed
    if args.output is not None:
        cfg.output_dir = args.output
    env_workers = os.environ.get(WORKERS_ENV_VAR)
    if env_workers is not None:
        try:
            cfg.workers = max(1, int(env_workers))
        except ValueError:
            raise ConfigError([
                f"{WORKERS_ENV_VAR} must be an integer, got '{env_workers}'"])
    return cfg


def cmd_run(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    out = run_experiment(cfg)
    print(json.dumps({"status": "ok", "experiment": cfg.experiment.value,
                      "output_dir": str(out)}))
    return 0


def cmd_validate(args) -> int:
    cfg = load_config(args.config)
    lines = [{
        "level": lc.level, "m": lc.kl_truncation,
        "grid": f"{lc.nx}x{lc.ny}", "subsample": lc.subsample_rate,
        "chain_length": lc.chain_length, "burn_in": lc.burn_in,
    } for lc in cfg.levels]
    print(json.dumps({"status": "ok", "experiment": cfg.experiment.value,
                      "replicates": cfg.replicates, "levels": lines}, indent=2))
    return 0


def cmd_resume(args) -> int:
    cfg = load_checkpoint_config(args.checkpoint)
    if args.output is not None:
        cfg.output_dir = args.output
    out = Path(cfg.output_dir)
    chains = resume_hierarchy(args.checkpoint)
    chains_dir = out / "chains"
    target = chains_dir / f"rep{chains.replicate}.npz"
    save_chain_set(chains, target)
    done = [chains_dir / f"rep{r}.npz" for r in range(cfg.replicates)]
    finished = all(p.exists() for p in done)
    if finished:
        _report_dir(out)
    print(json.dumps({"status": "ok", "replicate": chains.replicate,
                      "chains": str(target), "all_replicates_done": finished}))
    return 0


def _report_dir(out: Path) -> None:
    cfg = load_config(out / "config.yaml")
    cfg.output_dir = str(out)
    if not cfg.cache_dir:
        cfg.cache_dir = str(out / "kl_cache")
    if cfg.experiment is ExperimentKind.EIGEN_DECAY:
        run_eigen_decay(cfg, out)
        return
    basis = _basis_for(cfg)
    local_obs = out / "observations.csv"
    if local_obs.exists():
        obs = load_observations(local_obs)
    elif cfg.observations_path:
        obs = load_observations(cfg.observations_path)
    else:
        raise FileNotFoundError(f"no observations found under {out}")
    chain_files = sorted((out / "chains").glob("rep*.npz"))
    if not chain_files:
        raise FileNotFoundError(f"no stored chains under {out / 'chains'}")
    results = [load_chain_set(p) for p in chain_files]
    models = build_level_models(cfg, basis, obs)
    post_process(cfg, out, results, models, basis, obs, None)


def cmd_report(args) -> int:
    out = Path(args.input)
    _report_dir(out)
    print(json.dumps({"status": "ok", "output_dir": str(out)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mlmcmc-beam",
        description="Multilevel MCMC experiments for Bayesian stiffness "
                    "inference in a clamped 2D beam.")
    parser.add_argument("--verbose", "-v", action="store_true",
                        help="debug-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run an experiment config")
    run_p.add_argument("--config", required=True)
    run_p.add_argument("--replicates", type=int, default=None)
    run_p.add_argument("--seed", type=int, default=None)
    run_p.add_argument("--output", default=None)
    run_p.set_defaults(func=cmd_run)

    val_p = sub.add_parser("validate", help="parse and check a config")
    val_p.add_argument("--config", required=True)
    val_p.set_defaults(func=cmd_validate)

    res_p = sub.add_parser("resume", help="continue a checkpointed replicate")
    res_p.add_argument("--checkpoint", required=True)
    res_p.add_argument("--output", default=None)
    res_p.set_defaults(func=cmd_resume)

    rep_p = sub.add_parser("report", help="recompute outputs from stored chains")
    rep_p.add_argument("--input", required=True)
    rep_p.set_defaults(func=cmd_report)
    return parser


def _error_payload(kind: str, messages: list[str]) -> str:
    return json.dumps({"error": {"type": kind, "messages": messages}}, indent=2)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        sys.stderr.write(_error_payload("config", exc.errors) + "\n")
        return 1
    except FileNotFoundError as exc:
        sys.stderr.write(_error_payload("missing_file", [str(exc)]) + "\n")
        return 1
    except (ValueError, RuntimeError) as exc:
        sys.stderr.write(_error_payload("runtime", [str(exc)]) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
