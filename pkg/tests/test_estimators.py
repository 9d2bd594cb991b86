import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geoxval.errors import ChainFailure, DegenerateWeightsError, DesignError
from geoxval.estimators import (
    CollectedRun,
    WeightSet,
    effective_sample_size,
    log_importance_weight,
    mc_estimate,
    normalize_log_weights,
    run_mc,
    run_sir,
    self_normalized_mean,
    sir_estimate,
    stratified_mc_estimate,
    stratified_sir_estimate,
    weight_diagnostics,
)
from geoxval.geodata import GeoDataset
from geoxval.mcmc import ChainConfig, PriorConfig
from geoxval.models import ModelKind, ModelParams, SplitFactor, conditional_moments, log_likelihood
from geoxval.splits import (
    SplitBatch,
    SplitVector,
    StratifiedDesign,
    child_seeds,
    enumerate_splits,
    sample_split_batch,
)

THETA = ModelParams(beta=[1.0], sigma2=1.0, tau2=0.25, phi=0.3)
FIXED = PriorConfig(fixed={"beta": [1.0], "sigma2": 1.0, "phi": 0.3}, tau2_fixed=0.25)


def six_sites():
    rng = np.random.default_rng(42)
    return GeoDataset(coords=rng.random((6, 2)), y=1.0 + rng.normal(size=6))


def exact_psi(data, splits):
    """Closed-form expected MSE: conditional variance plus squared kriging bias."""
    vals = []
    for s in splits:
        law = conditional_moments("m1", THETA, data, s)
        yv = data.y[s.valid_idx]
        vals.append(float(np.mean(np.diag(law.scale) + (law.mean - yv) ** 2)))
    return float(np.mean(vals))


def short(J):
    return ChainConfig(20 + J, 20)


# ---------------------------------------------------------------- weights


def test_degenerate_split_weight_is_zero():
    ds = six_sites()
    assert log_importance_weight(THETA, ds, "m1", np.zeros(6)) == 0.0


def test_independent_sites_weight():
    rng = np.random.default_rng(0)
    ds = GeoDataset(coords=rng.random((8, 2)) * 1e5, y=rng.normal(size=8))
    p = ModelParams(beta=[0.2], sigma2=0.5, tau2=0.3, phi=1e-3)
    split = SplitVector.from_valid(8, [1, 5])
    terms = -0.5 * (np.log(2 * np.pi * 0.8) + (ds.y - 0.2) ** 2 / 0.8)
    oracle = terms[split.train_idx].sum() - (6 / 8) * terms.sum()
    assert log_importance_weight(p, ds, "m1", split) == pytest.approx(oracle, abs=1e-10)


def test_weight_identity_random():
    rng = np.random.default_rng(1)
    ds = six_sites()
    for _ in range(20):
        p = ModelParams(beta=[rng.normal()], sigma2=rng.uniform(0.1, 3), tau2=0.25, phi=rng.uniform(0.05, 1), nu=4.0)
        s = SplitVector.from_valid(6, rng.choice(6, size=2, replace=False))
        for model in ("m1", "m2"):
            lw = log_importance_weight(p, ds, model, s)
            assert lw + (4 / 6) * log_likelihood(model, p, ds) == pytest.approx(
                log_likelihood(model, p, ds, s.train_idx), abs=1e-10)


def test_weight_diagnostics_examples():
    assert weight_diagnostics(np.ones(100))["ess"] == pytest.approx(100)
    one = np.zeros(10)
    one[3] = 1.0
    d = weight_diagnostics(one)
    assert d["ess"] == 1.0 and d["max_share"] == 1.0 and d["flagged"] is False
    assert weight_diagnostics([0.5, 0.5] + [0.0] * 8)["ess"] == pytest.approx(2.0)
    assert weight_diagnostics(np.r_[1.0, np.zeros(99)])["flagged"] is True


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=40), st.sampled_from([-1e6, 0.0, 1e6]))
def test_log_sum_exp_shift(lw, shift):
    lw = np.array(lw)
    a = normalize_log_weights(lw)
    b = normalize_log_weights(lw + shift)
    assert np.allclose(a, b, rtol=1e-9, atol=1e-12)
    assert a.sum() == pytest.approx(1.0, abs=1e-12)
    e = WeightSet(lw).ess
    assert 1.0 - 1e-9 <= e <= len(lw) + 1e-9


def test_degenerate_weights():
    with pytest.raises(DegenerateWeightsError):
        normalize_log_weights([-np.inf, -np.inf])
    assert self_normalized_mean([0.0, 0.0], [1.0, 3.0]) == pytest.approx(2.0)


# ---------------------------------------------------------------- MC estimator


def test_exhaustive_small_instance():
    ds = six_sites()
    splits = SplitBatch(list(enumerate_splits(6, 1)))
    out = mc_estimate("m1", ds, splits, 100_000, "mse", FIXED, short(1), 3)
    exact = exact_psi(ds, splits)
    assert abs(out.psi_hat - exact) <= 3 * out.std_error
    assert out.std_error ** 2 == pytest.approx(out.variance, rel=1e-15)


def test_single_draw_has_zero_variance():
    ds = six_sites()
    splits = sample_split_batch(1, 0, n=6, n_V=2)
    run = run_mc("m1", ds, splits, 1, ["mse"], FIXED, short(1), 1)
    out = run.estimate("mse")
    assert out.variance == 0.0 and out.psi_hat == run.values[0, 0, 0, 0]


def test_constant_values_give_zero_variance():
    values = np.full((1, 4, 5, 1), 2.5)
    run = CollectedRun("mc", ModelKind.M1, [__import__("geoxval").DiscrepancyKind.MSE], values, 4, 5, 1, 6)
    out = run.estimate("mse")
    assert out.psi_hat == 2.5 and out.variance == 0.0


def test_unbiased_over_replications():
    ds = six_sites()
    exact = exact_psi(ds, list(enumerate_splits(6, 1)))
    est = []
    for rep in range(200):
        splits = sample_split_batch(3, 1000 + rep, n=6, n_V=1)
        est.append(mc_estimate("m1", ds, splits, 20, "mse", FIXED, short(1), rep).psi_hat)
    est = np.array(est)
    assert abs(est.mean() - exact) <= 3 * est.std(ddof=1) / math.sqrt(len(est))


def test_variance_estimator_sanity():
    ds = six_sites()
    est, reported = [], []
    for rep in range(50):
        splits = sample_split_batch(20, 5000 + rep, n=6, n_V=1)
        out = mc_estimate("m1", ds, splits, 1, "mse", FIXED, short(1), 7000 + rep)
        est.append(out.psi_hat)
        reported.append(out.variance)
    ratio = np.mean(reported) / np.var(est, ddof=1)
    assert 0.5 <= ratio <= 2.0


def test_chain_failure_names_split():
    ds = six_sites()
    splits = sample_split_batch(3, 0, n=6, n_V=1)
    bad = PriorConfig(fixed={"log_delta": [0.0, 0.0]})  # wrong length for six sites
    with pytest.raises(ChainFailure) as info:
        run_mc("m3", ds, splits, 5, ["mse"], bad, short(5), 0)
    assert info.value.index == 0


def test_design_mismatch():
    ds = six_sites()
    design = StratifiedDesign(np.array([1, 1, 1, 2, 2, 2]), (1, 1))
    splits = SplitBatch([SplitVector.from_valid(6, [0, 1])])
    with pytest.raises(DesignError):
        stratified_mc_estimate("m1", ds, design, splits, 5, "mse", FIXED, short(5), 0)
    with pytest.raises(DesignError):
        run_mc("m1", ds, splits, 5, ["mse"], FIXED, short(5), 0).stratified("mse")


# ---------------------------------------------------------------- SIR estimator


def test_sir_constant_weights_is_plain_average():
    ds = six_sites()
    splits = sample_split_batch(4, 3, n=6, n_V=2)
    seeds = [np.random.SeedSequence(77), np.random.SeedSequence(78)]
    J = 50
    run = run_sir("m1", ds, splits, 2, J, ["mse"], FIXED, short(J), None, chain_seeds=seeds)
    assert run.ess.min() == pytest.approx(J)
    V = splits.valid_matrix()
    for h, ss in enumerate(seeds):
        _, pred = child_seeds(ss, 2)
        g = np.random.default_rng(pred)
        fac = SplitFactor("m1", THETA, ds, V)
        r = np.array([np.mean((fac.draw(g)[0] - ds.y[V]) ** 2, axis=1) for _ in range(J)])
        assert np.allclose(run.values[0, h, :, 0], r.mean(axis=0), rtol=1e-12)


def test_sir_identical_chains():
    ds = six_sites()
    splits = sample_split_batch(5, 4, n=6, n_V=1)
    same = [np.random.SeedSequence(9), np.random.SeedSequence(9)]
    run = run_sir("m1", ds, splits, 2, 30, ["mse"], PriorConfig(), ChainConfig(130, 100), None, chain_seeds=same)
    assert np.array_equal(run.values[0, 0], run.values[0, 1])
    out = run.estimate("mse")
    psi = out.psi_hat
    between_splits = np.sum((run.values[0, 0, :, 0] - psi) ** 2) * 2 / (2 * 5) ** 2
    assert out.variance == pytest.approx(between_splits, rel=1e-12)


def test_single_chain_variance_unavailable():
    ds = six_sites()
    splits = sample_split_batch(2, 4, n=6, n_V=1)
    out = sir_estimate("m1", ds, splits, 1, 20, "mse", FIXED, short(20), 5)
    assert out.variance_available is False and math.isnan(out.std_error)
    assert out.to_dict()["std_error"] is None


@pytest.mark.slow
def test_sir_agrees_with_mc_small():
    rng = np.random.default_rng(8)
    ds = GeoDataset(coords=rng.random((16, 2)), y=2.0 + rng.normal(size=16))
    splits = sample_split_batch(10, 9, n=16, n_V=2)
    cfg = ChainConfig(6000, 1000)
    mc = mc_estimate("m1", ds, splits, 5000, "mse", PriorConfig(), cfg, 10)
    sir = sir_estimate("m1", ds, splits, 5, 5000, "mse", PriorConfig(), cfg, 11)
    assert abs(sir.psi_hat - mc.psi_hat) <= 3 * math.sqrt(mc.variance + sir.variance)


# ---------------------------------------------------------------- stratified


def test_single_stratum_matches_unstratified():
    ds = six_sites()
    design = StratifiedDesign(np.ones(6, dtype=int), (2,))
    splits = sample_split_batch(4, 12, design=design)
    cfg = ChainConfig(140, 100)
    a = mc_estimate("m1", ds, splits, 40, "mse", PriorConfig(), cfg, 13)
    b = stratified_mc_estimate("m1", ds, design, splits, 40, "mse", PriorConfig(), cfg, 13)
    assert b.psi_hat == pytest.approx(a.psi_hat, abs=1e-12)
    assert b.variance == pytest.approx(a.variance, abs=1e-12)
    c = sir_estimate("m1", ds, splits, 2, 40, "mse", PriorConfig(), cfg, 14)
    d = stratified_sir_estimate("m1", ds, design, splits, 2, 40, "mse", PriorConfig(), cfg, 14)
    assert d.psi_hat == pytest.approx(c.psi_hat, abs=1e-12)
    assert d.variance == pytest.approx(c.variance, abs=1e-12)


def test_stratified_combination():
    from geoxval.discrepancy import DiscrepancyKind

    design = StratifiedDesign(np.array([1, 1, 1, 2, 2, 2, 2, 3, 3, 3]), (1, 2, 1))
    equal = np.full((1, 3, 4, 4), 1.7)
    run = CollectedRun("mc", ModelKind.M1, [DiscrepancyKind.MSE], equal, 3, 4, 1, 10, design)
    assert run.stratified("mse").psi_hat == pytest.approx(1.7, abs=1e-15)
    rng = np.random.default_rng(0)
    run = CollectedRun("mc", ModelKind.M1, [DiscrepancyKind.MSE], rng.random((1, 3, 4, 4)), 3, 4, 1, 10, design)
    out = run.stratified("mse")
    w = np.array([s.weight for s in out.per_stratum])
    assert w.sum() == 1.0
    assert out.psi_hat == float(np.dot(w, [s.psi_hat for s in out.per_stratum]))
    assert out.variance == float(np.dot(w * w, [s.variance for s in out.per_stratum]))
    assert out.finite_population_variance >= 0


def test_stratified_groups_use_stratum_sites():
    ds = six_sites()
    design = StratifiedDesign(np.array([1, 2, 1, 2, 1, 2]), (1, 1))
    splits = sample_split_batch(3, 2, design=design)
    run = run_mc("m1", ds, splits, 200, ["mse"], FIXED, short(200), 3, design=design)
    out = run.stratified("mse")
    for k, lab in enumerate(design.strata):
        vals = []
        for s in splits:
            site = [i for i in s.valid_idx if design.labels[i] == lab]
            law = conditional_moments("m1", THETA, ds, s)
            pos = list(s.valid_idx).index(site[0])
            vals.append(law.scale[pos, pos] + (law.mean[pos] - ds.y[site[0]]) ** 2)
        assert abs(out.per_stratum[k].psi_hat - np.mean(vals)) <= 4 * math.sqrt(out.per_stratum[k].variance)


def test_mahalanobis_collected_alongside_mse():
    ds = six_sites()
    splits = sample_split_batch(3, 2, n=6, n_V=2)
    for model in ("m1", "m2", "m3"):
        run = run_sir(model, ds, splits, 2, 30, ["mse", "mahalanobis"], PriorConfig(), ChainConfig(130, 100), 4)
        assert run.values.shape == (2, 2, 3, 1)
        assert run.estimate("mahalanobis").psi_hat > 0
        run = run_mc(model, ds, splits, 30, ["mse", "mahalanobis"], PriorConfig(), ChainConfig(130, 100), 4)
        assert run.values.shape == (2, 3, 30, 1)
