import warnings

import numpy as np
import pytest
from scipy import stats

import oracles
from conftest import random_panel
from twostage.core import ExperimentPanel, TupleStructure
from twostage.estimate import adjusted_outcomes, cluster_averages, covariate_adjusted_estimate
from twostage.randomize import match_tuples
from twostage.regress import RegressionSpec, cluster_robust_v, ols_inference
from twostage.variance import (
    VARIANCE_FLOOR,
    VarianceEstimate,
    adjusted_t_test,
    covariate_adjusted_variance,
    large_strata_variance,
    routed_variance,
    small_strata_components,
    small_strata_variance,
    v_hat_large_strata,
    v_hat_small_strata,
)


def test_worked_intermediates(worked):
    avg = cluster_averages(worked)
    comp = small_strata_components(avg.ybar1, avg.treated, worked.tuple_matrix())
    assert comp.gamma == {"t": 4.0, "c": 1.5}
    assert comp.sigma2 == {"t": 1.0, "c": 0.25}
    assert comp.rho_same == {"t": 15.0, "c": 2.0}
    assert comp.rho_cross == 6.5


def test_worked_value(worked):
    v = v_hat_small_strata(worked, z_arm=1)
    assert v.v == pytest.approx(2.75, abs=1e-12)
    assert v.kind == "v1" and not v.floored


def test_flat_outcomes_give_zero(worked):
    assert v_hat_small_strata(worked.replace(y=np.ones(8))).raw == pytest.approx(0.0, abs=1e-14)


def test_scaling_by_three(worked):
    base = v_hat_small_strata(worked).raw
    assert v_hat_small_strata(worked.replace(y=3 * worked.y)).raw == pytest.approx(9 * base, rel=1e-12)


@pytest.mark.parametrize("n_pairs", [4, 6, 9])
@pytest.mark.parametrize("arm, weighting", [(1, "equal"), (0, "equal"), (1, "size"), (0, "size")])
def test_small_strata_match_oracle(n_pairs, arm, weighting):
    panel = random_panel(np.random.default_rng(n_pairs), 2 * n_pairs)
    avg = cluster_averages(panel)
    values = avg.arm(arm) if weighting == "equal" else adjusted_outcomes(avg).arm(arm)
    rows = panel.tuple_matrix()
    expected, _ = oracles.pairs_of_pairs_variance(
        list(values), list(avg.treated), [list(r) for r in rows], 0.5
    )
    got = v_hat_small_strata(panel, z_arm=arm, weighting=weighting)
    assert got.raw == pytest.approx(expected, rel=1e-10, abs=1e-12)
    assert got.kind == ("v1" if weighting == "equal" else "v2")


def test_odd_tuple_count_warns():
    panel = random_panel(np.random.default_rng(0), 5)
    with pytest.warns(UserWarning, match="odd number of tuples"):
        v_hat_small_strata(panel)


def test_single_tuple_rejected():
    panel = random_panel(np.random.default_rng(0), 1)
    with pytest.raises(ValueError, match="at least 2 tuples"):
        v_hat_small_strata(panel)


def _strata_panel(seed, n_strata=3, per=8):
    rng = np.random.default_rng(seed)
    panel = random_panel(rng, n_strata * per // 2)
    labels = [f"s{g // per}" for g in range(panel.G)]
    ts = TupleStructure(mode="large_strata", large_strata=dict(zip(panel.cluster_id, labels)))
    return panel.replace(tuple_structure=ts), labels


@pytest.mark.parametrize("tau", [0.0, 0.1, 0.25])
@pytest.mark.parametrize("arm, weighting", [(1, "equal"), (0, "equal"), (1, "size"), (0, "size")])
def test_large_strata_match_oracle(tau, arm, weighting):
    panel, labels = _strata_panel(3)
    avg = cluster_averages(panel)
    if weighting == "equal":
        vz, v0 = avg.arm(arm), avg.ybar0
    else:
        adj = adjusted_outcomes(avg)
        vz, v0 = adj.arm(arm), adj.ytilde0
    expected = oracles.large_strata_variance(
        list(vz), list(v0), list(avg.treated), labels, 0.5, tau, centered=weighting == "equal"
    )
    got = v_hat_large_strata(panel, z_arm=arm, weighting=weighting, tau=tau)
    assert got.raw == pytest.approx(expected, rel=1e-10)
    assert got.kind == ("v3" if weighting == "equal" else "v4")


def test_one_stratum_reduces_to_arm_variances():
    rng = np.random.default_rng(2)
    values = rng.normal(size=20)
    treated = np.arange(20) < 10
    got = large_strata_variance(values, values, treated, ["a"] * 20, 0.5, 0.0)
    expected = np.var(values[treated]) / 0.5 + np.var(values[~treated]) / 0.5
    assert got == pytest.approx(expected, rel=1e-12)


def test_tau_term_vanishes_when_strata_means_agree():
    treated = np.tile([True, True, False, False], 3)
    # arm means in every stratum equal the overall arm means
    values = np.r_[[1, 3, 0, 4], [3, 1, 4, 0], [2, 2, 2, 2]].astype(float)
    labels = np.repeat(["a", "b", "c"], 4)
    v0 = large_strata_variance(values, values, treated, labels, 0.5, 0.0)
    v_max = large_strata_variance(values, values, treated, labels, 0.5, 0.25)
    assert v_max == pytest.approx(v0, rel=1e-14)


def test_tau_out_of_range_and_thin_strata():
    values = np.arange(8.0)
    treated = np.tile([True, False], 4)
    with pytest.raises(ValueError):
        large_strata_variance(values, values, treated, ["a"] * 8, 0.5, 0.3)
    with pytest.raises(ValueError, match="'b'"):
        large_strata_variance(values, values, treated, ["a"] * 6 + ["b"] * 2, 0.5, 0.0)


def test_tau_per_stratum_mapping():
    panel, labels = _strata_panel(5)
    avg = cluster_averages(panel)
    taus = {"s0": 0.0, "s1": 0.25, "s2": 0.1}
    got = large_strata_variance(avg.ybar1, avg.ybar0, avg.treated, labels, 0.5, taus)
    expected_zero = large_strata_variance(avg.ybar1, avg.ybar0, avg.treated, labels, 0.5, 0.0)
    assert got >= expected_zero


def test_equal_sizes_make_weightings_agree():
    panel = random_panel(np.random.default_rng(8), 10, n_range=(6, 6), subsample=False)
    a = v_hat_small_strata(panel, weighting="equal").raw
    b = v_hat_small_strata(panel, weighting="size").raw
    assert a == pytest.approx(b, rel=1e-10)


def test_routing_follows_design(worked):
    assert routed_variance(worked, "theta_p1").kind == "v1"
    assert routed_variance(worked, "theta_s2").kind == "v2"
    panel, _ = _strata_panel(1)
    assert routed_variance(panel, "theta_p1").kind == "v3"
    assert routed_variance(panel, "theta_p2").kind == "v4"


def test_negative_raw_variance_is_floored():
    v = VarianceEstimate.build(-0.3, 100, "v1", 1)
    assert v.floored and v.v == VARIANCE_FLOOR and v.raw == -0.3
    assert v.se == pytest.approx(np.sqrt(VARIANCE_FLOOR / 100))


def test_t_test_at_null():
    r = adjusted_t_test(0.7, 2.0, 50, theta0=0.7)
    assert r.tstat == 0 and r.pvalue == 1
    assert (r.ci_lo + r.ci_hi) / 2 == pytest.approx(0.7)
    assert not r.reject


def test_t_test_arithmetic():
    r = adjusted_t_test(1.0, 1.0, 100)
    assert r.tstat == pytest.approx(10.0)
    assert r.reject


def test_t_test_reproduces_reported_interval():
    theta = 3.0488
    se = (5.2638 - 0.8339) / (2 * stats.norm.ppf(0.975))
    r = adjusted_t_test(theta, se**2 * 400, 400)
    assert r.ci_lo == pytest.approx(0.8339, abs=5e-4)
    assert r.ci_hi == pytest.approx(5.2638, abs=5e-4)
    assert r.reject


def test_t_test_rejects_bad_inputs():
    with pytest.raises(ValueError):
        adjusted_t_test(1.0, 0.0, 10)
    with pytest.raises(ValueError):
        adjusted_t_test(1.0, 1.0, 10, alpha=1.5)


def test_zero_slope_adjustment_matches_v2():
    panel = random_panel(np.random.default_rng(4), 8)
    adj = covariate_adjusted_estimate(panel, np.full(panel.G, 2.0))
    a = covariate_adjusted_variance(panel, adj)
    b = v_hat_small_strata(panel, weighting="size")
    assert a.raw == pytest.approx(b.raw, rel=1e-14)
    assert a.kind == "v2_adj"


def test_adjusted_variance_uses_shifted_outcomes():
    panel = random_panel(np.random.default_rng(5), 8)
    psi = np.random.default_rng(6).normal(size=panel.G)
    adj = covariate_adjusted_estimate(panel, psi)
    avg = cluster_averages(panel)
    ydot = adjusted_outcomes(avg).ytilde1 - (psi - psi.mean()) * adj.beta_hat[0] / panel.n.mean()
    expected = small_strata_variance(ydot, avg.treated, panel.tuple_matrix(), 0.5)
    assert covariate_adjusted_variance(panel, adj).raw == pytest.approx(expected, rel=1e-12)


def test_location_shift_odd_tuples_is_approximate():
    panel = random_panel(np.random.default_rng(9), 21)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a = v_hat_small_strata(panel).raw
        b = v_hat_small_strata(panel.replace(y=panel.y + 0.5)).raw
    assert abs(a - b) <= 10 / panel.G


def test_clustered_variance_is_conservative_for_matched_pairs():
    """Matching on a score that shifts cluster means makes the clustered variance too large."""
    rng = np.random.default_rng(21)
    G, n = 100, 4
    score = rng.random(G)
    uc = np.repeat(np.arange(G), n)
    y0 = 3 * score[uc] + rng.normal(size=G * n)
    spec = RegressionSpec(se_type="cluster")
    v2, vcr = [], []
    for seed in range(200):
        ts, treated = match_tuples(score, seed=seed)
        z = np.zeros(G * n, int)
        for g in np.flatnonzero(treated):
            z[g * n + rng.permutation(n)[:2]] = 1
        panel = ExperimentPanel(
            cluster_id=[str(g) for g in range(G)], n=[n] * G, h=np.where(treated, 0.5, 0.0),
            unit_cluster=uc, y=y0 + z, z=z, pi2=0.5, pi1=0.5, tuple_structure=ts,
        )
        v2.append(v_hat_small_strata(panel, weighting="size").v)
        vcr.append(cluster_robust_v(panel, ols_inference(panel, spec), spec))
    diff = np.array(vcr) - np.array(v2)
    assert diff.mean() > 2 * diff.std(ddof=1) / np.sqrt(len(diff))
