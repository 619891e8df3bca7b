"""Bootstrap particle filter over the puff dispersion model.

Each particle is one complete model replicate: its puffs plus the wind
realisation it was driven with this cycle.  The proposal is the model
transition itself (winds drawn from the observation-error distribution),
so propagation leaves weights untouched and the update multiplies each
weight by the dosage likelihood alone.

Randomness is organised as independent substreams keyed by
``(master_seed, purpose, cycle, slot)``.  A particle's draws therefore
depend only on where it sits in the ensemble, never on which worker
thread advanced it.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .puff import DiffusionSpec, Puff, PuffBatch, ReleaseSpec, activate, integrate_window
from .sensors import DoseRecord, SamplerArray, ThresholdPolicy, threshold_arrays
from .windfield import (
    GridSpec,
    WindObservation,
    WindPerturbationSpec,
    idw_weights,
    interpolate_uv,
    perturb_arrays,
    relax_divergence,
    speed_dir_to_uv,
)

logger = logging.getLogger(__name__)

STREAM_PERTURB = 1
STREAM_RESAMPLE = 2

VARIANCE_POOLED = "pooled"
VARIANCE_PER_SENSOR = "per_sensor"
VARIANCE_FIXED = "fixed"


class FilterError(RuntimeError):
    pass


def substream(master_seed: int, purpose: int, *ids: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(purpose, *(int(i) for i in ids)))
    return np.random.default_rng(ss)


@dataclass(frozen=True)
class TransportModel:
    """Everything needed to advance puffs and score them at the samplers."""

    grid: GridSpec
    diffusion: DiffusionSpec
    releases: tuple[ReleaseSpec, ...]
    receptors: np.ndarray
    dt: float = 60.0
    samples_per_step: int = 6
    relax_iterations: int = 50
    relaxation: float = 1.0

    @property
    def start_times(self) -> np.ndarray:
        return np.array([r.start_time for r in self.releases], dtype=float)


@dataclass(frozen=True)
class LikelihoodSpec:
    mode: str = VARIANCE_POOLED
    fixed_variance: float = 1.0
    variance_floor: float = 1.0

    def __post_init__(self):
        if self.mode not in (VARIANCE_POOLED, VARIANCE_PER_SENSOR, VARIANCE_FIXED):
            raise ValueError(f"unknown variance mode {self.mode!r}")
        if not (self.fixed_variance > 0 and self.variance_floor > 0):
            raise ValueError("variances must be > 0")


@dataclass(frozen=True)
class FilterSpec:
    perturbation: WindPerturbationSpec = WindPerturbationSpec()
    likelihood: LikelihoodSpec = LikelihoodSpec()
    thresholds: ThresholdPolicy = ThresholdPolicy()
    resample_fraction: float = 0.5
    update: bool = True


@dataclass(frozen=True)
class Particle:
    puffs: list[Puff]
    observations: list[WindObservation]
    weight: float
    stream: tuple[int, int]


@dataclass
class Ensemble:
    """Struct-of-arrays particle ensemble.

    ``doses`` holds each particle's predicted dose at every sampler for the
    window most recently propagated, shape (N, samplers).  ``winds`` holds
    the perturbed (speed, direction) inputs of that window, shape
    (N, stations, 2).
    """

    state: PuffBatch
    weights: np.ndarray
    master_seed: int
    k: int = 0
    time: float = 0.0
    streams: np.ndarray | None = None
    parents: np.ndarray | None = None
    doses: np.ndarray | None = None
    winds: np.ndarray | None = None
    stations: tuple[WindObservation, ...] = ()
    underflow: bool = False
    variance: float = float("nan")

    def __post_init__(self):
        if self.streams is None:
            self.streams = np.column_stack([np.full(self.N, self.k), np.arange(self.N)])
        if self.parents is None:
            self.parents = np.arange(self.N)

    @property
    def N(self) -> int:
        return self.weights.shape[0]

    def particle(self, i: int) -> Particle:
        obs = []
        if self.winds is not None:
            obs = [replace(o, speed=float(self.winds[i, j, 0]), direction=float(self.winds[i, j, 1]))
                   for j, o in enumerate(self.stations)]
        return Particle(self.state.puffs(i), obs, float(self.weights[i]),
                        (int(self.streams[i, 0]), int(self.streams[i, 1])))

    @property
    def particles(self) -> list[Particle]:
        return [self.particle(i) for i in range(self.N)]


@dataclass(frozen=True)
class ObservationBatch:
    """Training dosages for the bags that close at cycle ``k``.

    ``columns`` index the sampler array; ``observed`` holds the dosages.
    Construction refuses records from lines outside ``train_lines`` so
    held-out data can never reach the weight update.
    """

    k: int
    records: tuple[DoseRecord, ...]
    columns: np.ndarray
    observed: np.ndarray

    @classmethod
    def from_records(cls, k: int, records: Sequence[DoseRecord], array: SamplerArray,
                     train_lines=frozenset({1, 2})) -> "ObservationBatch":
        index = array.index()
        for r in records:
            if r.kind != "observed":
                raise FilterError(f"record for {r.sampler_id} is not an observation")
            if r.line not in train_lines:
                raise FilterError(f"line-{r.line} record for {r.sampler_id} offered to the weight update")
            if r.sampler_id not in index:
                raise FilterError(f"unknown sampler {r.sampler_id}")
        cols = np.array([index[r.sampler_id] for r in records], dtype=int)
        obs = np.array([r.dosage for r in records], dtype=float)
        return cls(k, tuple(records), cols, obs)

    @classmethod
    def empty(cls, k: int) -> "ObservationBatch":
        return cls(k, (), np.zeros(0, dtype=int), np.zeros(0))

    def __len__(self):
        return len(self.records)


@dataclass(frozen=True)
class CycleDiagnostics:
    k: int
    ess: float
    resampled: bool
    underflow: bool
    min_w: float
    max_w: float
    variance: float = float("nan")
    n_obs: int = 0
    weight_sum: float = 1.0


# ---------------------------------------------------------------------------
# Filter steps
# ---------------------------------------------------------------------------

def init_ensemble(n: int, releases: Sequence[ReleaseSpec], master_seed: int,
                  start_time: float = 0.0) -> Ensemble:
    if n < 2:
        raise FilterError(f"an ensemble needs at least 2 particles, got {n}")
    state = PuffBatch.initial(list(releases), n)
    activate(state, np.array([r.start_time for r in releases]), start_time)
    return Ensemble(
        state=state,
        weights=np.full(n, 1.0 / n),
        master_seed=int(master_seed),
        k=0,
        time=float(start_time),
    )


def _advance_members(state: PuffBatch, speeds: np.ndarray, dirs: np.ndarray, xy: np.ndarray,
                     model: TransportModel, t0: float, t1: float):
    u_st, v_st = speed_dir_to_uv(speeds, dirs)
    w = idw_weights(xy, model.grid)
    u, v = interpolate_uv(w, u_st, v_st, model.grid)
    u, v = relax_divergence(u, v, model.grid.dx, model.grid.dy, model.relax_iterations, model.relaxation)
    return integrate_window(state, u, v, model.grid, model.diffusion, model.start_times,
                            model.receptors, t0, t1, model.dt, model.samples_per_step)


def _chunks(n: int, workers: int) -> list[slice]:
    workers = max(1, min(workers, n))
    bounds = np.linspace(0, n, workers + 1).round().astype(int)
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def advance_states(state: PuffBatch, speeds: np.ndarray, dirs: np.ndarray, xy: np.ndarray,
                   model: TransportModel, t0: float, t1: float, workers: int = 1):
    """Advance every member over [t0, t1] under its own station winds.

    Members are independent, so the result does not depend on how they
    are split across ``workers`` threads.
    """
    parts = _chunks(state.members, workers)
    run = lambda s: _advance_members(state.take(s), speeds[s], dirs[s], xy, model, t0, t1)  # noqa: E731
    if len(parts) == 1:
        results = [run(parts[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(parts)) as pool:
            results = list(pool.map(run, parts))
    new_state = PuffBatch.concat([r[0] for r in results])
    doses = np.concatenate([r[1] for r in results])
    return new_state, doses


def propagate(ens: Ensemble, nominal_obs: Sequence[WindObservation], spec: WindPerturbationSpec,
              dt_window: float, model: TransportModel, workers: int = 1) -> Ensemble:
    """Draw a wind realisation per particle and run the model over one window.

    Weights are carried over unchanged.  The returned ensemble's ``doses``
    are each particle's predicted dose at every sampler for the window.
    """
    if not nominal_obs:
        raise FilterError("no wind data")
    if not dt_window > 0:
        raise FilterError("window length must be > 0")
    speeds0 = np.array([o.speed for o in nominal_obs], dtype=float)
    dirs0 = np.array([o.direction for o in nominal_obs], dtype=float)
    xy = np.array([o.position[:2] for o in nominal_obs], dtype=float)
    n = ens.N
    speeds = np.empty((n, len(nominal_obs)))
    dirs = np.empty_like(speeds)
    for i in range(n):
        rng = substream(ens.master_seed, STREAM_PERTURB, ens.k, i)
        speeds[i], dirs[i] = perturb_arrays(speeds0, dirs0, spec, rng)
    t0, t1 = ens.time, ens.time + dt_window
    try:
        state, doses = advance_states(ens.state, speeds, dirs, xy, model, t0, t1, workers)
    except Exception as exc:  # pragma: no cover - defensive
        raise FilterError(f"propagation failed for cycle {ens.k}: {exc}") from exc
    bad = ~np.all(np.isfinite(doses), axis=1)
    if bad.any():
        raise FilterError(f"propagation produced non-finite doses for particle {int(np.flatnonzero(bad)[0])}")
    streams = np.column_stack([np.full(n, ens.k), np.arange(n)])
    return replace(ens, state=state, time=t1, doses=doses, streams=streams,
                   winds=np.stack([speeds, dirs], axis=-1), stations=tuple(nominal_obs),
                   weights=ens.weights.copy(), underflow=False, variance=float("nan"))


def residual_variance(residuals: np.ndarray, lik: LikelihoodSpec) -> np.ndarray:
    """Likelihood variance for residuals of shape (N, sensors).

    Returns one value per sensor column (identical across columns except
    in per-sensor mode).
    """
    m = residuals.shape[1]
    if lik.mode == VARIANCE_FIXED:
        return np.full(m, lik.fixed_variance)
    if lik.mode == VARIANCE_POOLED:
        v = float(np.var(residuals, ddof=1)) if residuals.size > 1 else 0.0
        return np.full(m, max(v, lik.variance_floor))
    v = np.var(residuals, axis=0, ddof=1) if residuals.shape[0] > 1 else np.zeros(m)
    return np.maximum(v, lik.variance_floor)


def log_likelihoods(predicted: np.ndarray, observed: np.ndarray, variance: np.ndarray) -> np.ndarray:
    """Sum over sensors of log N(predicted | observed, variance), per particle."""
    r = observed[None, :] - predicted
    return np.sum(-0.5 * np.log(2.0 * np.pi * variance)[None, :] - r * r / (2.0 * variance[None, :]), axis=1)


def update_weights(ens: Ensemble, batch: ObservationBatch, lik: LikelihoodSpec = LikelihoodSpec(),
                   policy: ThresholdPolicy = ThresholdPolicy()) -> Ensemble:
    """Multiply weights by the Gaussian dosage likelihood, in log space.

    Predictions are floored and observations below the cutoff dropped
    before residuals are formed.  The returned weights are unnormalised,
    scaled so the largest is 1.  If every weight underflows the ensemble
    falls back to uniform weights and sets ``underflow``.
    """
    if ens.doses is None:
        raise FilterError("ensemble has no predicted doses; propagate first")
    keep, _ = threshold_arrays(batch.observed, 0.0, policy)
    if len(batch) == 0 or not keep.any():
        return replace(ens, weights=ens.weights.copy(), underflow=False, variance=float("nan"))
    obs = batch.observed[keep]
    _, pred = threshold_arrays(obs, ens.doses[:, batch.columns[keep]], policy)
    variance = residual_variance(obs[None, :] - pred, lik)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        logw = np.log(ens.weights) + log_likelihoods(pred, obs, variance)
        top = np.max(logw)
        w = np.exp(logw - top) if np.isfinite(top) else np.full(ens.N, np.nan)
    if not np.all(np.isfinite(w)) or not np.sum(w) > 0:
        logger.warning("cycle %d: all particle likelihoods underflowed; weights reset to uniform", ens.k)
        return replace(ens, weights=np.full(ens.N, 1.0 / ens.N), underflow=True, variance=float(variance[0]))
    return replace(ens, weights=w, underflow=False, variance=float(variance[0]))


def normalize_weights(ens: Ensemble) -> Ensemble:
    total = float(np.sum(ens.weights))
    if not total > 0 or not np.isfinite(total):
        raise FilterError("cannot normalise: no positive weight")
    return replace(ens, weights=ens.weights / total)


def effective_sample_size(ens: Ensemble) -> float:
    w = ens.weights
    return float(1.0 / np.sum(w * w))


def systematic_indices(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = weights.shape[0]
    positions = (rng.random() + np.arange(n)) / n
    cdf = np.cumsum(weights)
    cdf /= cdf[-1]
    idx = np.searchsorted(cdf, positions, side="right")
    return np.minimum(idx, n - 1)


def resample(ens: Ensemble, rng: np.random.Generator) -> Ensemble:
    """Systematic resampling; offspring get uniform weights and fresh stream slots."""
    idx = systematic_indices(ens.weights, rng)
    n = ens.N
    return replace(
        ens,
        state=ens.state.take(idx),
        weights=np.full(n, 1.0 / n),
        parents=idx,
        doses=None if ens.doses is None else ens.doses[idx].copy(),
        winds=None if ens.winds is None else ens.winds[idx].copy(),
        streams=np.column_stack([np.full(n, ens.k + 1), np.arange(n)]),
    )


def estimate_doses(ens: Ensemble) -> np.ndarray:
    """Weighted dose at every sampler: sum_i w_i d_i."""
    if ens.doses is None:
        raise FilterError("ensemble has no predicted doses")
    return (ens.weights[:, None] * ens.doses).sum(axis=0)


def estimate_dose(ens: Ensemble, sampler: int) -> float:
    return float(estimate_doses(ens)[sampler])


def run_cycle(ens: Ensemble, nominal_obs: Sequence[WindObservation], batch: ObservationBatch,
              specs: FilterSpec, model: TransportModel, dt_window: float,
              workers: int = 1) -> tuple[Ensemble, np.ndarray, CycleDiagnostics]:
    """One filter cycle: propagate, weight, normalise, estimate, maybe resample.

    Estimates use the post-update weights, before any resampling.
    """
    if batch.k != ens.k:
        raise FilterError(f"observation batch for cycle {batch.k} offered at cycle {ens.k}")
    ens = propagate(ens, nominal_obs, specs.perturbation, dt_window, model, workers)
    if specs.update and len(batch):
        ens = update_weights(ens, batch, specs.likelihood, specs.thresholds)
    ens = normalize_weights(ens)
    estimates = estimate_doses(ens)
    ess = effective_sample_size(ens)
    fire = specs.update and ess < specs.resample_fraction * ens.N
    diag = CycleDiagnostics(
        k=ens.k, ess=ess, resampled=bool(fire), underflow=ens.underflow,
        min_w=float(ens.weights.min()), max_w=float(ens.weights.max()),
        variance=ens.variance, n_obs=len(batch), weight_sum=float(np.sum(ens.weights)),
    )
    if fire:
        ens = resample(ens, substream(ens.master_seed, STREAM_RESAMPLE, ens.k))
    ens = replace(ens, k=ens.k + 1)
    return ens, estimates, diag
