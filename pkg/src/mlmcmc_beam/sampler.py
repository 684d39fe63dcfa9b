"""Multilevel Metropolis-Hastings over the KL coefficient hierarchy.

Level 0 runs a preconditioned Crank-Nicolson (pCN) chain.  Each finer
level advances once every `subsample_rate` steps of the level below it;
its proposal reuses the current subsampled coarse state for the shared
leading modes and makes a pCN move in the remaining fine modes.  The
acceptance ratio combines the two levels' likelihoods so that rejection
only happens where the levels disagree:

    log alpha = logL_f(prop) + logL_c(current coarse modes)
              - logL_f(current) - logL_c(subsampled coarse state)

Both the subsampled coarse state's likelihood and the current state's
coarse-modes likelihood are carried in the chain state, so a hierarchy
step costs a single fine-level forward solve.

Draw discipline: every step consumes exactly one normal vector and one
uniform from the level's own stream, accepted or not, so chains are
reproducible from (root seed, replicate, level) alone.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import HierarchyConfig, LevelConfig, config_from_dict, config_to_dict
from .data import ObservationSet
from .pipeline import (
    LevelModel,
    build_level_models,
    replicate_init_seed,
    replicate_level_seed,
)
from .random_field import KLBasis, cached_kl_basis

logger = logging.getLogger(__name__)


@dataclass
class ChainState:
    """Current position of one level's chain with cached likelihoods.

    `log_lik_coarse` caches the previous level's likelihood of this
    state's leading modes; it is None at level 0.
    """

    coefficients: np.ndarray
    log_lik: float
    log_lik_coarse: float | None = None
    iteration: int = 0


@dataclass
class StepResult:
    state: ChainState
    accepted: bool
    proposal: np.ndarray
    log_accept_prob: float
    # (ll_prop_fine, ll_current_coarse_modes, ll_current_fine, ll_subsample_coarse)
    terms: tuple = ()


def pcn_propose(current: np.ndarray, beta: float, rng: np.random.Generator) -> np.ndarray:
    """Crank-Nicolson proposal sqrt(1 - beta^2) * theta + beta * zeta."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    zeta = rng.standard_normal(current.shape[0])
    return np.sqrt(1.0 - beta * beta) * current + beta * zeta


def _accept(log_alpha: float, u: float) -> bool:
    # log u < log alpha with log 0 = -inf: an impossible proposal
    # (log_alpha = -inf) is never accepted, even at u = 0.
    if np.isnan(log_alpha):
        return False
    if u <= 0.0:
        return log_alpha > -np.inf
    return np.log(u) < log_alpha


def _log_accept_prob(diff: float) -> float:
    # A NaN difference means both states are impossible (-inf likelihoods
    # on each side); resolve it to acceptance so the chain can wander back
    # into the support instead of freezing.
    if np.isnan(diff):
        return 0.0
    return min(0.0, diff)


def coarse_step(
    state: ChainState,
    cfg: LevelConfig,
    log_lik,
    rng: np.random.Generator,
) -> StepResult:
    """One pCN Metropolis step at the coarsest level."""
    proposal = pcn_propose(state.coefficients, cfg.pcn_beta, rng)
    u = rng.random()
    ll_prop = log_lik(proposal)
    log_alpha = _log_accept_prob(ll_prop - state.log_lik)
    accepted = _accept(log_alpha, u)
    if accepted:
        new = ChainState(proposal, ll_prop, None, state.iteration + 1)
    else:
        new = ChainState(state.coefficients, state.log_lik, None, state.iteration + 1)
    return StepResult(new, accepted, proposal, log_alpha,
                      (ll_prop, state.log_lik))


def ml_step(
    fine_state: ChainState,
    coarse_subsample: np.ndarray,
    cfg_fine: LevelConfig,
    cfg_coarse: LevelConfig | None,
    log_lik_fine,
    log_lik_coarse,
    rng: np.random.Generator,
    coarse_subsample_log_lik: float | None = None,
) -> StepResult:
    """One two-level step: subsampled coarse modes plus a pCN fine-mode move.

    `coarse_subsample_log_lik` passes the coarser chain's cached
    likelihood of the subsampled state; leaving it None recomputes it.
    """
    m_coarse = coarse_subsample.shape[0]
    m_fine = fine_state.coefficients.shape[0]
    if cfg_coarse is not None and m_coarse != cfg_coarse.kl_truncation:
        raise ValueError(
            f"coarse subsample has {m_coarse} modes, expected "
            f"{cfg_coarse.kl_truncation}")
    if not m_coarse < m_fine:
        raise ValueError(f"need m_coarse < m_fine, got {m_coarse} >= {m_fine}")

    beta = cfg_fine.pcn_beta
    zeta = rng.standard_normal(m_fine - m_coarse)
    u = rng.random()
    proposal = np.empty(m_fine)
    proposal[:m_coarse] = coarse_subsample
    proposal[m_coarse:] = (
        np.sqrt(1.0 - beta * beta) * fine_state.coefficients[m_coarse:] + beta * zeta)

    ll_prop = log_lik_fine(proposal)
    ll_sub = (coarse_subsample_log_lik if coarse_subsample_log_lik is not None
              else log_lik_coarse(coarse_subsample))
    ll_cur = fine_state.log_lik
    ll_cur_coarse = (fine_state.log_lik_coarse
                     if fine_state.log_lik_coarse is not None
                     else log_lik_coarse(fine_state.coefficients[:m_coarse]))

    log_alpha = _log_accept_prob(ll_prop + ll_cur_coarse - ll_cur - ll_sub)
    accepted = _accept(log_alpha, u)
    if accepted:
        new = ChainState(proposal, ll_prop, ll_sub, fine_state.iteration + 1)
    else:
        new = ChainState(fine_state.coefficients, ll_cur, ll_cur_coarse,
                         fine_state.iteration + 1)
    return StepResult(new, accepted, proposal, log_alpha,
                      (ll_prop, ll_cur_coarse, ll_cur, ll_sub))


@dataclass(eq=False)
class LevelChain:
    """Stored samples of one level within a replicate.

    `samples[n]` is the state after step n; for levels above the
    coarsest, `paired_coarse[n]` is the coarse subsample consumed by that
    step (the correction pairs in the telescoped estimator).
    """

    level: int
    m_trunc: int
    samples: np.ndarray                  # (n_steps, m)
    accepts: np.ndarray                  # (n_steps,) bool
    log_liks: np.ndarray                 # (n_steps,)
    paired_coarse: np.ndarray | None     # (n_steps, m_prev) or None
    n_steps: int
    step_seconds: float = 0.0
    solve_seconds: float = 0.0
    compare_seconds: float = 0.0
    n_evaluations: int = 0
    n_forward_failures: int = 0

    @property
    def rejection_rate(self) -> float:
        if self.n_steps == 0:
            return float("nan")
        return 1.0 - float(np.sum(self.accepts[: self.n_steps])) / self.n_steps


@dataclass(eq=False)
class ChainSet:
    """All level chains of one replicate plus run bookkeeping."""

    levels: list[LevelChain]
    configs: list[LevelConfig]
    root_seed: int
    replicate: int
    coarse_iterations: int
    complete: bool
    models: list[LevelModel] | None = field(default=None, repr=False)

    @property
    def n_levels(self) -> int:
        return len(self.levels)


class _HierarchyRun:
    """Mutable driver holding states, streams, storage and counters."""

    def __init__(self, cfg: HierarchyConfig, models: list[LevelModel], replicate: int):
        self.cfg = cfg
        self.models = models
        self.replicate = replicate
        self.level_cfgs = cfg.levels
        self.n_levels = len(cfg.levels)
        self.rngs = [
            np.random.default_rng(replicate_level_seed(cfg.seed, replicate, l))
            for l in range(self.n_levels)
        ]
        init_rng = np.random.default_rng(replicate_init_seed(cfg.seed, replicate))
        # Only the coarsest block starts from a prior draw; every added-mode
        # block starts at zero, so all levels begin on the same field and the
        # initial fine/coarse likelihood gap vanishes.  Drawing the added
        # modes from the prior instead can deadlock a fine chain at tight
        # noise: its initial gap is measured at a far-from-posterior state
        # and can exceed anything proposals anchored to the burned-in coarse
        # chain ever reach.
        theta_top = np.zeros(cfg.levels[-1].kl_truncation)
        m0 = cfg.levels[0].kl_truncation
        theta_top[:m0] = init_rng.standard_normal(m0)

        self.states: list[ChainState] = []
        init_lls = [models[l].log_likelihood(
            theta_top[: cfg.levels[l].kl_truncation]) for l in range(self.n_levels)]
        for l in range(self.n_levels):
            self.states.append(ChainState(
                coefficients=theta_top[: cfg.levels[l].kl_truncation].copy(),
                log_lik=init_lls[l],
                log_lik_coarse=init_lls[l - 1] if l > 0 else None,
            ))

        self.counters = [0] * self.n_levels
        self.samples = [
            np.empty((lc.chain_length, lc.kl_truncation)) for lc in cfg.levels]
        self.accepts = [
            np.zeros(lc.chain_length, dtype=bool) for lc in cfg.levels]
        self.log_liks = [np.empty(lc.chain_length) for lc in cfg.levels]
        self.paired = [None] + [
            np.empty((cfg.levels[l].chain_length, cfg.levels[l - 1].kl_truncation))
            for l in range(1, self.n_levels)
        ]
        self.step_seconds = [0.0] * self.n_levels

    def advance_coarse_iteration(self):
        """One level-0 step plus whatever finer steps it triggers."""
        t0 = time.perf_counter()
        res = coarse_step(self.states[0], self.level_cfgs[0],
                          self.models[0].log_likelihood, self.rngs[0])
        self.states[0] = res.state
        n = self.counters[0]
        self.samples[0][n] = res.state.coefficients
        self.accepts[0][n] = res.accepted
        self.log_liks[0][n] = res.state.log_lik
        self.counters[0] = n + 1
        self.step_seconds[0] += time.perf_counter() - t0

        level = 1
        while (level < self.n_levels
               and self.counters[level - 1] % self.level_cfgs[level].subsample_rate == 0
               and self.counters[level] < self.level_cfgs[level].chain_length):
            t1 = time.perf_counter()
            subsample = self.states[level - 1].coefficients.copy()
            res = ml_step(
                self.states[level], subsample,
                self.level_cfgs[level], self.level_cfgs[level - 1],
                self.models[level].log_likelihood,
                self.models[level - 1].log_likelihood,
                self.rngs[level],
                coarse_subsample_log_lik=self.states[level - 1].log_lik,
            )
            self.states[level] = res.state
            n = self.counters[level]
            self.samples[level][n] = res.state.coefficients
            self.accepts[level][n] = res.accepted
            self.log_liks[level][n] = res.state.log_lik
            self.paired[level][n] = subsample
            self.counters[level] = n + 1
            self.step_seconds[level] += time.perf_counter() - t1
            level += 1

    def to_chain_set(self, complete: bool) -> ChainSet:
        levels = []
        for l in range(self.n_levels):
            n = self.counters[l]
            model = self.models[l]
            levels.append(LevelChain(
                level=l,
                m_trunc=self.level_cfgs[l].kl_truncation,
                samples=self.samples[l][:n].copy(),
                accepts=self.accepts[l][:n].copy(),
                log_liks=self.log_liks[l][:n].copy(),
                paired_coarse=None if l == 0 else self.paired[l][:n].copy(),
                n_steps=n,
                step_seconds=self.step_seconds[l],
                solve_seconds=model.solve_seconds,
                compare_seconds=model.compare_seconds,
                n_evaluations=model.n_evaluations,
                n_forward_failures=model.n_forward_failures,
            ))
        return ChainSet(
            levels=levels,
            configs=list(self.level_cfgs),
            root_seed=self.cfg.seed,
            replicate=self.replicate,
            coarse_iterations=self.counters[0],
            complete=complete,
            models=self.models,
        )


def run_hierarchy(
    cfg: HierarchyConfig,
    obs: ObservationSet,
    replicate: int = 0,
    basis: KLBasis | None = None,
    models: list[LevelModel] | None = None,
    checkpoint_path: str | Path | None = None,
    stop_after_coarse: int | None = None,
) -> ChainSet:
    """Run the whole hierarchy for one replicate.

    With a single level this is exactly a single-level pCN chain.  If
    `stop_after_coarse` is given the run halts early and, when
    `checkpoint_path` is set, leaves a checkpoint a later call to
    :func:`resume_hierarchy` continues bit-identically.
    """
    if models is None:
        if basis is None:
            needed = max(cfg.truth_truncation,
                         max(l.kl_truncation for l in cfg.levels))
            basis = cached_kl_basis(cfg.matern, cfg.n_quad, needed, cfg.cache_dir)
        models = build_level_models(cfg, basis, obs)
    run = _HierarchyRun(cfg, models, replicate)
    total = cfg.levels[0].chain_length
    target = total if stop_after_coarse is None else min(total, stop_after_coarse)
    every = cfg.checkpoint_every if checkpoint_path is not None else 0
    while run.counters[0] < target:
        run.advance_coarse_iteration()
        if every > 0 and run.counters[0] % every == 0 and run.counters[0] < total:
            save_checkpoint(run, obs, checkpoint_path)
    complete = run.counters[0] >= total
    if not complete and checkpoint_path is not None:
        save_checkpoint(run, obs, checkpoint_path)
    logger.info(
        "replicate %d: %d coarse iterations, per-level steps %s",
        replicate, run.counters[0], run.counters)
    return run.to_chain_set(complete)


# ---------------------------------------------------------------------------
# Checkpointing.  A checkpoint embeds the config, the observation set, every
# level's position, caches, storage-so-far and the exact RNG states, so a
# resumed run reproduces the uninterrupted one bit for bit.


def _rng_state_json(rng: np.random.Generator) -> str:
    st = rng.bit_generator.state
    return json.dumps({
        "bit_generator": st["bit_generator"],
        "state": str(st["state"]["state"]),
        "inc": str(st["state"]["inc"]),
        "has_uint32": st["has_uint32"],
        "uinteger": st["uinteger"],
    })


def _rng_from_json(payload: str) -> np.random.Generator:
    st = json.loads(payload)
    if st["bit_generator"] != "PCG64":
        raise ValueError(f"unsupported bit generator {st['bit_generator']}")
    gen = np.random.default_rng(0)
    gen.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": int(st["state"]), "inc": int(st["inc"])},
        "has_uint32": st["has_uint32"],
        "uinteger": st["uinteger"],
    }
    return gen


def save_checkpoint(run: _HierarchyRun, obs: ObservationSet, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {
        "config_json": np.array(json.dumps(config_to_dict(run.cfg))),
        "replicate": np.array(run.replicate),
        "counters": np.array(run.counters),
        "obs_values": obs.values,
        "obs_edge_node_ids": obs.edge_node_ids,
        "obs_node_coords": obs.node_coords,
        "obs_meta": np.array(json.dumps({
            "sigma_f": obs.sigma_f, "mesh_nx": obs.mesh_nx,
            "mesh_ny": obs.mesh_ny, "seed": obs.seed,
        })),
    }
    if obs.truth_coefficients is not None:
        arrays["obs_truth_coefficients"] = obs.truth_coefficients
    for l in range(run.n_levels):
        n = run.counters[l]
        st = run.states[l]
        model = run.models[l]
        arrays[f"l{l}_state_coeffs"] = st.coefficients
        arrays[f"l{l}_state_ll"] = np.array(st.log_lik)
        arrays[f"l{l}_state_llc"] = np.array(
            np.nan if st.log_lik_coarse is None else st.log_lik_coarse)
        arrays[f"l{l}_rng"] = np.array(_rng_state_json(run.rngs[l]))
        arrays[f"l{l}_samples"] = run.samples[l][:n]
        arrays[f"l{l}_accepts"] = run.accepts[l][:n]
        arrays[f"l{l}_log_liks"] = run.log_liks[l][:n]
        if l > 0:
            arrays[f"l{l}_paired"] = run.paired[l][:n]
        arrays[f"l{l}_timing"] = np.array([
            run.step_seconds[l], model.solve_seconds, model.compare_seconds])
        arrays[f"l{l}_counts"] = np.array([
            model.n_evaluations, model.n_forward_failures])
    tmp = path.with_suffix(".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)


def load_checkpoint_config(path: str | Path) -> HierarchyConfig:
    with np.load(path, allow_pickle=False) as z:
        return config_from_dict(json.loads(str(z["config_json"])))


def resume_hierarchy(
    path: str | Path,
    basis: KLBasis | None = None,
    checkpoint_path: str | Path | None = None,
    stop_after_coarse: int | None = None,
) -> ChainSet:
    """Continue a checkpointed run to completion (or to another stop point)."""
    path = Path(path)
    with np.load(path, allow_pickle=False) as z:
        cfg = config_from_dict(json.loads(str(z["config_json"])))
        meta = json.loads(str(z["obs_meta"]))
        obs = ObservationSet(
            values=z["obs_values"],
            edge_node_ids=z["obs_edge_node_ids"],
            node_coords=z["obs_node_coords"],
            sigma_f=meta["sigma_f"],
            mesh_nx=meta["mesh_nx"],
            mesh_ny=meta["mesh_ny"],
            seed=meta["seed"],
            truth_coefficients=z["obs_truth_coefficients"]
            if "obs_truth_coefficients" in z else None,
        )
        if basis is None:
            needed = max(cfg.truth_truncation,
                         max(l.kl_truncation for l in cfg.levels))
            basis = cached_kl_basis(cfg.matern, cfg.n_quad, needed, cfg.cache_dir)
        models = build_level_models(cfg, basis, obs)
        replicate = int(z["replicate"])
        run = _HierarchyRun.__new__(_HierarchyRun)
        run.cfg = cfg
        run.models = models
        run.replicate = replicate
        run.level_cfgs = cfg.levels
        run.n_levels = len(cfg.levels)
        counters = z["counters"]
        run.counters = [int(c) for c in counters]
        run.rngs = []
        run.states = []
        run.samples = [
            np.empty((lc.chain_length, lc.kl_truncation)) for lc in cfg.levels]
        run.accepts = [np.zeros(lc.chain_length, dtype=bool) for lc in cfg.levels]
        run.log_liks = [np.empty(lc.chain_length) for lc in cfg.levels]
        run.paired = [None] + [
            np.empty((cfg.levels[l].chain_length, cfg.levels[l - 1].kl_truncation))
            for l in range(1, run.n_levels)
        ]
        run.step_seconds = [0.0] * run.n_levels
        for l in range(run.n_levels):
            n = run.counters[l]
            llc = float(z[f"l{l}_state_ll"])
            llcc = float(z[f"l{l}_state_llc"])
            run.states.append(ChainState(
                coefficients=z[f"l{l}_state_coeffs"].copy(),
                log_lik=llc,
                log_lik_coarse=None if np.isnan(llcc) else llcc,
            ))
            run.rngs.append(_rng_from_json(str(z[f"l{l}_rng"])))
            run.samples[l][:n] = z[f"l{l}_samples"]
            run.accepts[l][:n] = z[f"l{l}_accepts"]
            run.log_liks[l][:n] = z[f"l{l}_log_liks"]
            if l > 0:
                run.paired[l][:n] = z[f"l{l}_paired"]
            timing = z[f"l{l}_timing"]
            run.step_seconds[l] = float(timing[0])
            models[l].solve_seconds = float(timing[1])
            models[l].compare_seconds = float(timing[2])
            counts = z[f"l{l}_counts"]
            models[l].n_evaluations = int(counts[0])
            models[l].n_forward_failures = int(counts[1])

    total = cfg.levels[0].chain_length
    target = total if stop_after_coarse is None else min(total, stop_after_coarse)
    every = cfg.checkpoint_every if checkpoint_path is not None else 0
    while run.counters[0] < target:
        run.advance_coarse_iteration()
        if every > 0 and run.counters[0] % every == 0 and run.counters[0] < total:
            save_checkpoint(run, obs, checkpoint_path)
    complete = run.counters[0] >= total
    if not complete and checkpoint_path is not None:
        save_checkpoint(run, obs, checkpoint_path)
    return run.to_chain_set(complete)


# ---------------------------------------------------------------------------
# Plain on-disk form of a finished replicate (used by the report command).


def save_chain_set(chains: ChainSet, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {
        "meta": np.array(json.dumps({
            "root_seed": chains.root_seed,
            "replicate": chains.replicate,
            "coarse_iterations": chains.coarse_iterations,
            "complete": chains.complete,
            "configs": [
                {"level": c.level, "m": c.kl_truncation, "nx": c.nx, "ny": c.ny,
                 "subsample": c.subsample_rate, "beta": c.pcn_beta,
                 "sigma": c.fidelity_sigma, "chain_length": c.chain_length,
                 "burn_in": c.burn_in}
                for c in chains.configs
            ],
        })),
    }
    for lc in chains.levels:
        l = lc.level
        arrays[f"l{l}_samples"] = lc.samples
        arrays[f"l{l}_accepts"] = lc.accepts
        arrays[f"l{l}_log_liks"] = lc.log_liks
        if lc.paired_coarse is not None:
            arrays[f"l{l}_paired"] = lc.paired_coarse
        arrays[f"l{l}_timing"] = np.array([
            lc.step_seconds, lc.solve_seconds, lc.compare_seconds])
        arrays[f"l{l}_counts"] = np.array([lc.n_evaluations, lc.n_forward_failures])
    np.savez(path, **arrays)


def load_chain_set(path: str | Path) -> ChainSet:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        configs = [
            LevelConfig(
                level=c["level"], kl_truncation=c["m"], nx=c["nx"], ny=c["ny"],
                subsample_rate=c["subsample"], pcn_beta=c["beta"],
                fidelity_sigma=c["sigma"], chain_length=c["chain_length"],
                burn_in=c["burn_in"],
            )
            for c in meta["configs"]
        ]
        levels = []
        for c in configs:
            l = c.level
            samples = z[f"l{l}_samples"]
            timing = z[f"l{l}_timing"]
            counts = z[f"l{l}_counts"]
            levels.append(LevelChain(
                level=l,
                m_trunc=c.kl_truncation,
                samples=samples,
                accepts=z[f"l{l}_accepts"],
                log_liks=z[f"l{l}_log_liks"],
                paired_coarse=z[f"l{l}_paired"] if f"l{l}_paired" in z else None,
                n_steps=samples.shape[0],
                step_seconds=float(timing[0]),
                solve_seconds=float(timing[1]),
                compare_seconds=float(timing[2]),
                n_evaluations=int(counts[0]),
                n_forward_failures=int(counts[1]),
            ))
        return ChainSet(
            levels=levels,
            configs=configs,
            root_seed=meta["root_seed"],
            replicate=meta["replicate"],
            coarse_iterations=meta["coarse_iterations"],
            complete=meta["complete"],
        )
