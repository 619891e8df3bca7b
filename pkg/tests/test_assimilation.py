import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from puffassim.assimilation import (
    Ensemble,
    FilterError,
    FilterSpec,
    LikelihoodSpec,
    ObservationBatch,
    effective_sample_size,
    estimate_dose,
    estimate_doses,
    init_ensemble,
    log_likelihoods,
    normalize_weights,
    propagate,
    residual_variance,
    resample,
    run_cycle,
    systematic_indices,
    update_weights,
)
from puffassim.harness import _cycle_winds
from puffassim.puff import PuffBatch, ReleaseSpec
from puffassim.sensors import DoseRecord, LineGeometry, SamplerGeometry, ThresholdPolicy, build_sampler_lines
from puffassim.windfield import WindPerturbationSpec

REL = (ReleaseSpec(1.0, (0.0, 0.0, 5.0)),)
ZERO = WindPerturbationSpec(0.0, 0.0)


def ens_with(weights, doses=None, seed=0):
    w = np.asarray(weights, dtype=float)
    e = Ensemble(PuffBatch.initial(list(REL), w.size), w, seed)
    if doses is not None:
        e.doses = np.asarray(doses, dtype=float).reshape(w.size, -1)
    return e


def tiny_array():
    return build_sampler_lines(SamplerGeometry(lines=(LineGeometry(1, (0.0, 0.0), count=3),)))


def batch_of(values, k=0):
    arr = tiny_array()
    recs = [DoseRecord(arr.ids[j], 1, k, v) for j, v in enumerate(values)]
    return ObservationBatch.from_records(k, recs, arr)


@pytest.fixture(scope="module")
def model_inputs(request):
    from puffassim.scenario import default_scenario
    sc = default_scenario()
    winds = _cycle_winds(sc, sc.wind_observations())
    return sc, sc.transport_model(), winds


# ---------------------------------------------------------------------------
# init_ensemble
# ---------------------------------------------------------------------------

def test_init_uniform():
    e = init_ensemble(100, REL, 5)
    assert e.N == 100 and np.all(e.weights == 0.01) and e.k == 0
    assert all(len(p.puffs) == 1 for p in e.particles)


def test_init_deterministic():
    a, b = init_ensemble(10, REL, 5), init_ensemble(10, REL, 5)
    np.testing.assert_array_equal(a.weights, b.weights)
    assert a.particles == b.particles


def test_init_rejects_single_particle():
    with pytest.raises(FilterError):
        init_ensemble(1, REL, 0)


# ---------------------------------------------------------------------------
# propagate
# ---------------------------------------------------------------------------

def test_zero_spread_gives_identical_particles(model_inputs):
    sc, model, winds = model_inputs
    e = propagate(init_ensemble(5, sc.releases, 3), winds[0], ZERO, 900.0, model)
    assert np.all(e.doses == e.doses[0])
    assert np.all(e.state.x == e.state.x[0])


def test_propagate_keeps_weights(model_inputs):
    sc, model, winds = model_inputs
    e0 = init_ensemble(4, sc.releases, 3)
    e0.weights = np.array([0.1, 0.2, 0.3, 0.4])
    e1 = propagate(e0, winds[0], sc.perturbation, 900.0, model)
    np.testing.assert_array_equal(e1.weights, e0.weights)
    assert e1.time == 900.0 and e1.k == 0


def test_propagate_bit_identical(model_inputs):
    sc, model, winds = model_inputs
    runs = [propagate(init_ensemble(2, sc.releases, 42), winds[0], sc.perturbation, 900.0, model)
            for _ in range(2)]
    np.testing.assert_array_equal(runs[0].state.x, runs[1].state.x)
    np.testing.assert_array_equal(runs[0].state.y, runs[1].state.y)
    assert not np.array_equal(runs[0].winds[0], runs[0].winds[1])


def test_propagate_independent_of_workers(model_inputs):
    sc, model, winds = model_inputs
    e = init_ensemble(7, sc.releases, 11)
    a = propagate(e, winds[0], sc.perturbation, 900.0, model, workers=1)
    b = propagate(e, winds[0], sc.perturbation, 900.0, model, workers=4)
    np.testing.assert_array_equal(a.doses, b.doses)
    np.testing.assert_array_equal(a.state.sigma_h, b.state.sigma_h)


def test_particle_view_carries_perturbed_winds(model_inputs):
    sc, model, winds = model_inputs
    e = propagate(init_ensemble(3, sc.releases, 1), winds[0], sc.perturbation, 900.0, model)
    p = e.particle(2)
    assert [o.station_id for o in p.observations] == [o.station_id for o in winds[0]]
    assert p.observations[0].speed == e.winds[2, 0, 0]


# ---------------------------------------------------------------------------
# update_weights
# ---------------------------------------------------------------------------

def test_identical_predictions_leave_weights():
    e = ens_with([0.25] * 4, np.tile([20.0, 30.0, 40.0], (4, 1)))
    out = normalize_weights(update_weights(e, batch_of([25.0, 31.0, 50.0])))
    np.testing.assert_allclose(out.weights, 0.25, rtol=0, atol=1e-15)


def test_one_sigma_residual_pair():
    e = ens_with([0.5, 0.5], [[50.0, 0, 0], [60.0, 0, 0]])
    arr = tiny_array()
    batch = ObservationBatch.from_records(0, [DoseRecord(arr.ids[0], 1, 0, 50.0)], arr)
    out = normalize_weights(update_weights(e, batch, LikelihoodSpec("fixed", fixed_variance=100.0)))
    expected = 1.0 / (1.0 + math.exp(-0.5))
    assert out.weights == pytest.approx([expected, 1 - expected], abs=1e-12)
    assert out.weights[0] == pytest.approx(0.622, abs=5e-4)


def test_empty_batch_leaves_weights():
    e = ens_with([0.2, 0.8], [[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    np.testing.assert_array_equal(update_weights(e, ObservationBatch.empty(0)).weights, e.weights)


def test_observations_below_cutoff_are_vacuous():
    e = ens_with([0.2, 0.8], [[1.0, 2.0, 3.0], [400.0, 5.0, 6.0]])
    np.testing.assert_array_equal(update_weights(e, batch_of([9.0, 1.0, 0.0])).weights, e.weights)


def test_prediction_floor_applies_in_likelihood():
    # predictions 0 and 1 are both floored to 1 and must score alike
    e = ens_with([0.5, 0.5], [[0.0, 0, 0], [1.0, 0, 0]])
    out = normalize_weights(update_weights(e, batch_of([40.0, 0.0, 0.0])))
    assert out.weights[0] == out.weights[1]


@given(seed=st.integers(0, 1000), n=st.integers(2, 12), m=st.integers(1, 3),
       mode=st.sampled_from(["pooled", "per_sensor", "fixed"]))
@settings(max_examples=60, deadline=None)
def test_log_space_matches_direct(seed, n, m, mode):
    r = np.random.default_rng(seed)
    obs = r.uniform(10, 60, size=m)
    doses = np.zeros((n, 3))
    doses[:, :m] = obs + r.normal(0, 5, size=(n, m))
    w0 = r.dirichlet(np.ones(n))
    e = ens_with(w0, doses)
    lik = LikelihoodSpec(mode, fixed_variance=30.0)
    out = normalize_weights(update_weights(e, batch_of(list(obs) + [0.0] * (3 - m)), lik)).weights
    pred = np.maximum(doses[:, :m], 1.0)
    v = residual_variance(obs[None, :] - pred, lik)
    direct = w0 * np.prod(np.exp(-(obs - pred) ** 2 / (2 * v)) / np.sqrt(2 * np.pi * v), axis=1)
    direct /= direct.sum()
    np.testing.assert_allclose(out, direct, rtol=1e-10, atol=1e-300)


def test_underflow_falls_back_to_uniform(caplog):
    e = ens_with([0.5, 0.5], [[1e200, 0, 0], [2e200, 0, 0]])
    out = update_weights(e, batch_of([20.0, 0.0, 0.0]), LikelihoodSpec("fixed", fixed_variance=1.0))
    assert out.underflow
    np.testing.assert_array_equal(out.weights, [0.5, 0.5])
    assert "underflow" in caplog.text


def test_extreme_residuals_survive_in_log_space():
    # direct-space likelihoods are exp(-5e5) and exp(-2e6): both 0.0 in float64
    e = ens_with([0.5, 0.5], [[1010.0, 0, 0], [2010.0, 0, 0]])
    out = normalize_weights(update_weights(e, batch_of([10.0, 0.0, 0.0]), LikelihoodSpec("fixed", fixed_variance=1.0)))
    assert not out.underflow
    assert out.weights[0] == 1.0


def test_pooled_variance_floor():
    v = residual_variance(np.zeros((4, 3)), LikelihoodSpec())
    np.testing.assert_array_equal(v, 1.0)
    r = np.arange(12.0).reshape(4, 3)
    assert residual_variance(r, LikelihoodSpec())[0] == pytest.approx(np.var(r, ddof=1))


def test_log_likelihood_value():
    ll = log_likelihoods(np.array([[3.0]]), np.array([1.0]), np.array([4.0]))
    assert ll[0] == pytest.approx(-0.5 * math.log(8 * math.pi) - 0.5)


def test_batch_refuses_test_line():
    arr = build_sampler_lines(SamplerGeometry(lines=(LineGeometry(3, (0.0, 0.0), count=2),)))
    with pytest.raises(FilterError, match="line-3"):
        ObservationBatch.from_records(0, [DoseRecord(arr.ids[0], 3, 0, 50.0)], arr)


def test_batch_refuses_predictions():
    arr = tiny_array()
    with pytest.raises(FilterError):
        ObservationBatch.from_records(0, [DoseRecord(arr.ids[0], 1, 0, 50.0, "predicted")], arr)


# ---------------------------------------------------------------------------
# normalize / ESS
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("w,expected", [([2, 2], [0.5, 0.5]), ([1, 3], [0.25, 0.75])])
def test_normalize_examples(w, expected):
    assert list(normalize_weights(ens_with(w)).weights) == expected


def test_normalize_idempotent():
    w = np.random.default_rng(0).dirichlet(np.ones(9))
    np.testing.assert_allclose(normalize_weights(ens_with(w)).weights, w, rtol=0, atol=1e-15)


def test_normalize_rejects_zero():
    with pytest.raises(FilterError):
        normalize_weights(ens_with([0.0, 0.0]))


def test_ess_examples():
    assert effective_sample_size(ens_with(np.full(50, 0.02))) == pytest.approx(50.0)
    assert effective_sample_size(ens_with([1.0, 0.0, 0.0])) == 1.0
    assert effective_sample_size(ens_with([0.5, 0.25, 0.25])) == pytest.approx(1 / 0.375)


@given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=40).filter(lambda w: sum(w) > 1e-3))
def test_ess_bounds(w):
    e = normalize_weights(ens_with(w))
    ess = effective_sample_size(e)
    assert 1.0 - 1e-9 <= ess <= e.N * (1 + 1e-9)
    if np.allclose(e.weights, 1.0 / e.N, rtol=0, atol=1e-15):
        assert ess == pytest.approx(e.N)
    else:
        assert ess < e.N


# ---------------------------------------------------------------------------
# resample
# ---------------------------------------------------------------------------

def test_uniform_weights_select_each_once():
    for seed in range(20):
        idx = systematic_indices(np.full(8, 0.125), np.random.default_rng(seed))
        assert sorted(idx) == list(range(8))


def test_degenerate_mass():
    e = resample(ens_with([1.0, 0.0], [[5.0], [9.0]]), np.random.default_rng(0))
    assert list(e.parents) == [0, 0]
    assert list(e.doses[:, 0]) == [5.0, 5.0]
    assert list(e.weights) == [0.5, 0.5]


def test_offspring_mean_unbiased():
    rng = np.random.default_rng(2024)
    w = np.array([0.7] + [0.3 / 9] * 9)
    counts = np.array([np.sum(systematic_indices(w, rng) == 0) for _ in range(10_000)])
    se = counts.std(ddof=1) / math.sqrt(counts.size)
    assert abs(counts.mean() - 7.0) <= 3 * max(se, 1e-12)


def test_resample_gives_fresh_streams():
    e = ens_with([0.7, 0.1, 0.1, 0.1])
    e.k = 4
    out = resample(e, np.random.default_rng(1))
    assert np.all(out.weights == 0.25)
    assert np.all(out.streams[:, 0] == 5)
    assert list(out.streams[:, 1]) == [0, 1, 2, 3]


# ---------------------------------------------------------------------------
# estimate_dose
# ---------------------------------------------------------------------------

def test_estimate_examples():
    assert estimate_dose(ens_with([0.5, 0.5], [[40.0], [40.0]]), 0) == 40.0
    assert estimate_dose(ens_with([0.25, 0.75], [[100.0], [20.0]]), 0) == 40.0
    assert estimate_dose(ens_with([0.0, 1.0, 0.0], [[1.0], [7.25], [3.0]]), 0) == 7.25


@given(seed=st.integers(0, 10_000), scale=st.floats(1e-3, 1e3))
def test_estimate_invariances(seed, scale):
    r = np.random.default_rng(seed)
    w = r.uniform(0.01, 1.0, 6)
    d = r.uniform(0, 100, size=(6, 4))
    base = estimate_doses(normalize_weights(ens_with(w, d)))
    perm = r.permutation(6)
    np.testing.assert_allclose(estimate_doses(normalize_weights(ens_with(w[perm], d[perm]))), base, rtol=1e-12)
    np.testing.assert_allclose(estimate_doses(normalize_weights(ens_with(scale * w, d))), base, rtol=1e-12)
    assert np.all(base >= d.min(axis=0) - 1e-9) and np.all(base <= d.max(axis=0) + 1e-9)


# ---------------------------------------------------------------------------
# run_cycle
# ---------------------------------------------------------------------------

def test_empty_batch_cycle_is_forecast(model_inputs):
    sc, model, winds = model_inputs
    spec = sc.filter_spec()
    e = init_ensemble(6, sc.releases, 8)
    spreads = []
    for k in range(3):
        e, est, diag = run_cycle(e, winds[k], ObservationBatch.empty(k), spec, model, 900.0)
        np.testing.assert_allclose(e.weights, 1 / 6, rtol=0, atol=1e-15)
        assert not diag.resampled and diag.ess == pytest.approx(6)
        spreads.append(float(np.std(e.state.x)))
    assert spreads[0] < spreads[1] < spreads[2]
    assert e.k == 3


def test_degenerate_filter_matches_single_particle(model_inputs):
    sc, model, winds = model_inputs
    spec = FilterSpec(ZERO, LikelihoodSpec(), ThresholdPolicy())
    e = init_ensemble(3, sc.releases, 8)
    e, est, _ = run_cycle(e, winds[0], ObservationBatch.empty(0), spec, model, 900.0)
    np.testing.assert_allclose(est, e.doses[0], rtol=1e-12, atol=0)


def test_cycle_rejects_wrong_batch(model_inputs):
    sc, model, winds = model_inputs
    with pytest.raises(FilterError, match="cycle 1"):
        run_cycle(init_ensemble(2, sc.releases, 0), winds[0], ObservationBatch.empty(1),
                  sc.filter_spec(), model, 900.0)


def test_cycle_deterministic_across_workers(model_inputs):
    sc, model, winds = model_inputs
    arr = sc.sampler_array()
    spec = replace(sc.filter_spec(), resample_fraction=1.0)
    outs = []
    for workers in (1, 3):
        e = init_ensemble(6, sc.releases, 99)
        e = propagate(e, winds[0], ZERO, 900.0, model)
        # observations taken from particle 0 of a perturbed run make weights non-uniform
        probe = propagate(init_ensemble(6, sc.releases, 7), winds[0], sc.perturbation, 900.0, model)
        recs = [DoseRecord(s.sampler_id, s.line, 0, float(probe.doses[0, j]) * 50 + 20.0)
                for j, s in enumerate(arr) if s.line == 1]
        e = replace(e, k=0, time=0.0, state=init_ensemble(6, sc.releases, 99).state)
        e, est, diag = run_cycle(e, winds[0], ObservationBatch.from_records(0, recs, arr), spec,
                                 model, 900.0, workers)
        outs.append((est, e.weights, e.parents, diag))
    np.testing.assert_array_equal(outs[0][0], outs[1][0])
    np.testing.assert_array_equal(outs[0][1], outs[1][1])
    np.testing.assert_array_equal(outs[0][2], outs[1][2])
    assert outs[0][3] == outs[1][3]
    assert abs(outs[0][1].sum() - 1.0) < 1e-12
