"""Trial execution: nominal forecasts, twin truth, filter runs and Monte Carlo batches."""

from __future__ import annotations

import logging
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .assimilation import (
    CycleDiagnostics,
    Ensemble,
    ObservationBatch,
    advance_states,
    init_ensemble,
    run_cycle,
    substream,
)
from .metrics import METRIC_NAMES, ConfidenceInterval, MetricReport, confidence_interval, metrics_from_arrays
from .puff import PuffBatch
from .scenario import Scenario, bag_cycle_map
from .sensors import DoseRecord, SamplerArray, observe
from .windfield import WindObservation, WindPerturbationSpec, group_by_epoch, observations_at, perturb_arrays

logger = logging.getLogger(__name__)

STREAM_TRUTH = 11
STREAM_RUN = 12
STREAM_NOISE = 13

FORECAST = "process_model"
FILTER = "particle_filter"


class HarnessError(RuntimeError):
    pass


@dataclass
class RunResult:
    """Doses are (samplers, bags) arrays in sampler-array order."""

    array: SamplerArray
    forecast: np.ndarray
    estimates: np.ndarray | None = None
    diagnostics: list[CycleDiagnostics] = field(default_factory=list)
    metrics: dict[tuple[str, str], MetricReport | None] = field(default_factory=dict)
    observations: list[DoseRecord] = field(default_factory=list)
    seed: int = 0
    final_ensemble: Ensemble | None = None

    def records(self, source: str) -> list[DoseRecord]:
        doses = self.forecast if source == FORECAST else self.estimates
        return [DoseRecord(s.sampler_id, s.line, k, float(doses[i, k]), "predicted")
                for i, s in enumerate(self.array) for k in range(doses.shape[1])]


def derive_seed(master: int, index: int) -> int:
    ss = np.random.SeedSequence(int(master), spawn_key=(STREAM_RUN, int(index)))
    return int(ss.generate_state(1, np.uint32)[0])


def _cycle_winds(scenario: Scenario, winds: Sequence[WindObservation]) -> list[list[WindObservation]]:
    epochs = group_by_epoch(winds)
    return [observations_at(epochs, c * scenario.cadence) for c in range(scenario.cycles)]


def _per_bag(scenario: Scenario, array: SamplerArray, cycle_doses: np.ndarray) -> np.ndarray:
    cmap = bag_cycle_map(scenario, array)
    cols = np.arange(len(array))[:, None]
    return cycle_doses[cmap, cols]


def simulate(scenario: Scenario, winds: Sequence[WindObservation], direction_bias: float = 0.0,
             speed_bias: float = 0.0, perturb: WindPerturbationSpec | None = None,
             perturb_seed: int = 0) -> np.ndarray:
    """One deterministic model trajectory; returns per-bag doses (samplers, bags).

    Biases are added to every station reading; with ``perturb`` each window
    additionally gets one draw from that error model.
    """
    array = scenario.sampler_array()
    model = scenario.transport_model(array)
    state = PuffBatch.initial(list(scenario.releases), 1)
    cycle_doses = np.zeros((scenario.cycles, len(array)))
    for c, obs in enumerate(_cycle_winds(scenario, winds)):
        speeds = np.maximum(0.0, np.array([o.speed for o in obs]) + speed_bias)
        dirs = np.mod(np.array([o.direction for o in obs]) + direction_bias, 360.0)
        if perturb is not None and not perturb.is_zero:
            speeds, dirs = perturb_arrays(speeds, dirs, perturb, substream(perturb_seed, STREAM_TRUTH, c))
        xy = np.array([o.position[:2] for o in obs], dtype=float)
        t0 = c * scenario.cadence
        state, doses = advance_states(state, speeds[None, :], dirs[None, :], xy, model, t0,
                                      t0 + scenario.cadence)
        cycle_doses[c] = doses[0]
    return _per_bag(scenario, array, cycle_doses)


def run_forecast(scenario: Scenario, winds: Sequence[WindObservation] | None = None) -> RunResult:
    winds = winds if winds is not None else scenario.wind_observations()
    array = scenario.sampler_array()
    return RunResult(array=array, forecast=simulate(scenario, winds), seed=scenario.seed)


def generate_twin_truth(scenario: Scenario, winds: Sequence[WindObservation] | None = None,
                        seed: int | None = None, direction_bias: float | None = None,
                        speed_bias: float | None = None, noise_sigma: float | None = None,
                        perturb: bool | None = None) -> tuple[list[DoseRecord], np.ndarray]:
    """Synthetic observations from a hidden 'true' wind history.

    Unspecified arguments come from ``scenario.truth``.  Returns the noisy
    observation records for every sampler and bag, and the noiseless truth
    doses.
    """
    t = scenario.truth
    winds = winds if winds is not None else scenario.wind_observations()
    seed = t.seed if seed is None else seed
    truth = simulate(
        scenario, winds,
        direction_bias=t.direction_bias if direction_bias is None else direction_bias,
        speed_bias=t.speed_bias if speed_bias is None else speed_bias,
        perturb=scenario.perturbation if (t.perturb if perturb is None else perturb) else None,
        perturb_seed=seed,
    )
    sigma = t.noise_sigma if noise_sigma is None else noise_sigma
    rng = substream(seed, STREAM_NOISE)
    return observe(truth, scenario.sampler_array(), sigma, rng), truth


def _observation_matrix(scenario: Scenario, array: SamplerArray,
                        observations: Sequence[DoseRecord]) -> np.ndarray:
    """Observed doses as (samplers, bags), NaN where missing; validates alignment."""
    index = array.index()
    bags = scenario.samplers.bags
    out = np.full((len(array), bags), np.nan)
    for r in observations:
        if r.sampler_id not in index:
            raise HarnessError(f"observation for unknown sampler {r.sampler_id}")
        i = index[r.sampler_id]
        if r.line != array.samplers[i].line:
            raise HarnessError(f"observation for {r.sampler_id} names line {r.line}, "
                               f"sampler is on line {array.samplers[i].line}")
        if not 0 <= r.window < bags:
            raise HarnessError(f"misaligned observation window {r.window} for {r.sampler_id} "
                               f"(bags are 0..{bags - 1})")
        out[i, r.window] = r.dosage
    return out


def _batches(scenario: Scenario, array: SamplerArray, observations: Sequence[DoseRecord]):
    cmap = bag_cycle_map(scenario, array)
    index = array.index()
    per_cycle: list[list[DoseRecord]] = [[] for _ in range(scenario.cycles)]
    for r in observations:
        if r.line not in scenario.train_lines:
            continue
        per_cycle[cmap[index[r.sampler_id], r.window]].append(r)
    return [ObservationBatch.from_records(c, recs, array, scenario.train_lines)
            for c, recs in enumerate(per_cycle)]


def split_metrics(scenario: Scenario, array: SamplerArray, obs: np.ndarray,
                  predicted: np.ndarray, lines) -> MetricReport | None:
    """Metrics over the bags of ``lines`` whose observation clears the cutoff."""
    mask = np.isin(array.lines, sorted(lines))[:, None] & np.isfinite(obs)
    mask &= np.where(np.isfinite(obs), obs, -np.inf) >= scenario.thresholds.observed_cutoff
    if not mask.any():
        return None
    dp = np.maximum(predicted[mask], scenario.thresholds.predicted_floor)
    return metrics_from_arrays(obs[mask], dp)


def metric_pairs(scenario: Scenario, array: SamplerArray, observations: Sequence[DoseRecord],
                 predicted: np.ndarray, lines, source: str) -> list[tuple[str, int, float, float, str]]:
    obs = _observation_matrix(scenario, array, observations)
    rows = []
    for i, s in enumerate(array):
        if s.line not in lines:
            continue
        for k in range(obs.shape[1]):
            if np.isfinite(obs[i, k]) and obs[i, k] >= scenario.thresholds.observed_cutoff:
                rows.append((s.sampler_id, k, float(obs[i, k]),
                             max(float(predicted[i, k]), scenario.thresholds.predicted_floor), source))
    return rows


def run_assimilation(scenario: Scenario, observations: Sequence[DoseRecord],
                     winds: Sequence[WindObservation] | None = None, workers: int = 1,
                     update: bool = True, forecast: np.ndarray | None = None) -> RunResult:
    """Full filter run over the trial, assimilating training lines only."""
    winds = winds if winds is not None else scenario.wind_observations()
    array = scenario.sampler_array()
    model = scenario.transport_model(array)
    obs = _observation_matrix(scenario, array, observations)
    batches = _batches(scenario, array, observations)
    specs = scenario.filter_spec(update)
    ens = init_ensemble(scenario.particles, scenario.releases, scenario.seed)
    estimates = np.zeros((scenario.cycles, len(array)))
    diagnostics = []
    for c, nominal in enumerate(_cycle_winds(scenario, winds)):
        ens, est, diag = run_cycle(ens, nominal, batches[c], specs, model, scenario.cadence, workers)
        estimates[c] = est
        diagnostics.append(diag)
    if forecast is None:
        forecast = simulate(scenario, winds)
    pf = _per_bag(scenario, array, estimates)
    result = RunResult(array=array, forecast=forecast, estimates=pf, diagnostics=diagnostics,
                       observations=list(observations), seed=scenario.seed, final_ensemble=ens)
    for split, lines in (("train", scenario.train_lines), ("test", scenario.test_lines)):
        result.metrics[(FORECAST, split)] = split_metrics(scenario, array, obs, forecast, lines)
        result.metrics[(FILTER, split)] = split_metrics(scenario, array, obs, pf, lines)
    return result


def forecast_equivalence(scenario: Scenario, winds: Sequence[WindObservation] | None = None) -> float:
    """Largest relative gap between the forecast and a no-noise, no-update filter run.

    The filter with zero wind perturbation and updates disabled must
    reproduce the nominal forecast.
    """
    winds = winds if winds is not None else scenario.wind_observations()
    base = replace(scenario, particles=2, perturbation=WindPerturbationSpec(0.0, 0.0))
    fc = simulate(base, winds)
    pf = run_assimilation(base, [], winds, update=False, forecast=fc).estimates
    scale = np.maximum(np.abs(fc), 1e-300)
    return float(np.max(np.abs(pf - fc) / scale))


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------

@dataclass
class MonteCarloResult:
    forecast_report: MetricReport
    run_reports: list[MetricReport]
    intervals: dict[str, ConfidenceInterval]
    run_seeds: list[int]
    forecast: np.ndarray
    best_estimates: np.ndarray
    best_run: int
    observations: list[DoseRecord]
    array: SamplerArray


def _mc_run(args):
    scenario, observations, winds, forecast, seed = args
    res = run_assimilation(replace(scenario, seed=seed), observations, winds, forecast=forecast)
    return res.metrics[(FILTER, "test")], res.estimates


def run_monte_carlo(scenario: Scenario, runs: int | None = None,
                    observations: Sequence[DoseRecord] | None = None,
                    winds: Sequence[WindObservation] | None = None, workers: int = 1,
                    rng_ci: np.random.Generator | None = None) -> MonteCarloResult:
    """Independent filter runs against one fixed observation set.

    Run ``r`` uses seed ``derive_seed(scenario.seed, r)``, so results do not
    depend on ``workers``.  Truth is generated from ``scenario.truth`` when
    no observations are given.
    """
    runs = scenario.monte_carlo.runs if runs is None else runs
    if runs < 2:
        raise HarnessError("Monte Carlo needs at least 2 runs")
    winds = winds if winds is not None else scenario.wind_observations()
    if observations is None:
        observations, _ = generate_twin_truth(scenario, winds)
    observations = list(observations)
    array = scenario.sampler_array()
    forecast = simulate(scenario, winds)
    obs = _observation_matrix(scenario, array, observations)
    fc_report = split_metrics(scenario, array, obs, forecast, scenario.test_lines)
    if fc_report is None:
        raise HarnessError("no test-line observation clears the cutoff; nothing to evaluate")
    seeds = [derive_seed(scenario.seed, r) for r in range(runs)]
    jobs = [(scenario, observations, winds, forecast, s) for s in seeds]
    if workers > 1:
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            outcomes = list(pool.map(_mc_run, jobs))
    else:
        outcomes = [_mc_run(j) for j in jobs]
    reports = [o[0] for o in outcomes]
    if any(r is None for r in reports):
        raise HarnessError("a run produced no test pairs")
    intervals = {}
    for name in METRIC_NAMES:
        values = [r.value(name) for r in reports]
        intervals[name] = confidence_interval(
            values, scenario.monte_carlo.level, name, scenario.monte_carlo.method,
            rng=rng_ci if rng_ci is not None else substream(scenario.seed, STREAM_RUN, 10**6),
        )
    best = int(np.argmin([r.VG for r in reports]))
    return MonteCarloResult(fc_report, reports, intervals, seeds, forecast, outcomes[best][1], best,
                            observations, array)
