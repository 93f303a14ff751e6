"""Variance estimators for the cluster-average contrasts, and the adjusted t-test.

All variances are on the ``sqrt(G)`` scale: ``v`` estimates the variance of
``sqrt(G) * (theta_hat - theta)``, so the standard error is ``sqrt(v / G)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy import stats

from .core import ExperimentPanel, TupleStructure
from .estimate import (
    ClusterAverages,
    CovariateAdjustment,
    adjusted_outcomes,
    cluster_averages,
    tuple_arm_means,
)

__all__ = [
    "VARIANCE_FLOOR",
    "ESTIMANDS",
    "VarianceEstimate",
    "TestResult",
    "SmallStrataComponents",
    "small_strata_components",
    "small_strata_variance",
    "large_strata_variance",
    "v_hat_small_strata",
    "v_hat_large_strata",
    "covariate_adjusted_variance",
    "adjusted_t_test",
    "routed_variance",
]

VARIANCE_FLOOR = 1e-12

# estimand -> (outcome arm z, weighting)
ESTIMANDS = {
    "theta_p1": (1, "equal"),
    "theta_s1": (0, "equal"),
    "theta_p2": (1, "size"),
    "theta_s2": (0, "size"),
}


@dataclass(frozen=True)
class VarianceEstimate:
    v: float
    raw: float
    g: int
    kind: str
    z_arm: int
    floored: bool

    @property
    def se(self) -> float:
        return float(np.sqrt(self.v / self.g))

    @classmethod
    def build(cls, raw: float, g: int, kind: str, z_arm: int) -> "VarianceEstimate":
        raw = float(raw)
        floored = not raw >= VARIANCE_FLOOR
        return cls(v=max(raw, VARIANCE_FLOOR) if np.isfinite(raw) else raw, raw=raw, g=g,
                   kind=kind, z_arm=z_arm, floored=floored)


@dataclass(frozen=True)
class TestResult:
    theta_hat: float
    theta0: float
    tstat: float
    pvalue: float
    reject: bool
    ci_lo: float
    ci_hi: float
    alpha: float


@dataclass(frozen=True)
class SmallStrataComponents:
    """Intermediate quantities of the pairs-of-pairs estimator.

    Dictionaries are keyed by arm: ``"t"`` for treated clusters, ``"c"`` for
    control clusters.
    """

    gamma: dict
    sigma2: dict
    rho_same: dict
    rho_cross: float
    n_tuples: int


def _check_rows(treated: np.ndarray, rows: np.ndarray) -> tuple[int, int]:
    per = treated[rows].sum(axis=1)
    if len(set(per.tolist())) != 1:
        raise ValueError("tuples differ in their number of treated clusters")
    l = int(per[0])
    k = rows.shape[1]
    if not 0 < l < k:
        raise ValueError(f"every tuple needs treated and control clusters (l={l}, k={k})")
    return k, l


def small_strata_components(values: np.ndarray, treated: np.ndarray, rows: np.ndarray) -> SmallStrataComponents:
    """Means, spreads and tuple cross-products that enter the estimator.

    ``rows`` lists cluster rows tuple by tuple in pairing order; tuples
    ``2j`` and ``2j+1`` (0-based) form a pair.  With an odd number of tuples
    the last one is left out of the same-arm cross-products.
    """
    treated = np.asarray(treated, dtype=bool)
    values = np.asarray(values, dtype=float)
    n = rows.shape[0]
    if n < 2:
        raise ValueError("need at least 2 tuples to form a pair of tuples")
    _check_rows(treated, rows)
    if n % 2:
        warnings.warn(
            f"odd number of tuples ({n}); the last tuple is left out of the same-arm cross-products",
            stacklevel=3,
        )
    members = rows.ravel()
    v = values[members]
    t = treated[members]
    gamma = {"t": float(v[t].mean()), "c": float(v[~t].mean())}
    sigma2 = {
        "t": float(np.mean((v[t] - gamma["t"]) ** 2)),
        "c": float(np.mean((v[~t] - gamma["c"]) ** 2)),
    }
    mean_t, mean_c = tuple_arm_means(values, treated, rows)
    half = n // 2
    rho_same = {
        "t": float(np.mean(mean_t[0:2 * half:2] * mean_t[1:2 * half:2])),
        "c": float(np.mean(mean_c[0:2 * half:2] * mean_c[1:2 * half:2])),
    }
    rho_cross = float(np.mean(mean_t * mean_c))
    return SmallStrataComponents(gamma, sigma2, rho_same, rho_cross, n)


def small_strata_variance(values, treated, rows, pi1: float) -> float:
    """Raw pairs-of-pairs variance from cluster-level values."""
    comp = small_strata_components(values, treated, rows)
    g, s2, rho = comp.gamma, comp.sigma2, comp.rho_same
    within_t = s2["t"] - (rho["t"] - g["t"] ** 2)
    within_c = s2["c"] - (rho["c"] - g["c"] ** 2)
    cov_tt = rho["t"] - g["t"] ** 2
    cov_cc = rho["c"] - g["c"] ** 2
    cov_tc = comp.rho_cross - g["t"] * g["c"]
    return within_t / pi1 + within_c / (1 - pi1) + cov_tt + cov_cc - 2 * cov_tc


def _tau_vector(tau, labels: np.ndarray, pi1: float) -> np.ndarray:
    if tau is None:
        tau = 0.0
    if isinstance(tau, Mapping):
        missing = sorted(set(labels) - set(map(str, tau)))
        if missing:
            raise ValueError(f"tau missing for strata {missing}")
        tau_map = {str(k): float(v) for k, v in tau.items()}
        out = np.array([tau_map[s] for s in labels])
    else:
        out = np.full(len(labels), float(tau))
    cap = pi1 * (1 - pi1)
    if (out < 0).any() or (out > cap + 1e-12).any():
        raise ValueError(f"tau must lie in [0, pi1*(1-pi1)] = [0, {cap:g}]")
    return out


def large_strata_variance(
    values_z,
    values_control,
    treated,
    strata,
    pi1: float,
    tau=None,
    centered: bool = True,
) -> float:
    """Raw large-strata variance.

    ``values_z`` supplies treated-cluster outcomes for the chosen arm and
    ``values_control`` the control-cluster outcomes.  ``centered`` selects
    whether stratum means are centered at the arm means in the
    between-strata terms (cluster averages) or used as they are (adjusted
    outcomes, which are already demeaned by arm).
    """
    treated = np.asarray(treated, dtype=bool)
    strata = np.asarray([str(s) for s in strata])
    yz = np.asarray(values_z, dtype=float)
    y0 = np.asarray(values_control, dtype=float)
    labels, inv = np.unique(strata, return_inverse=True)
    G = len(treated)
    g_s = np.bincount(inv, minlength=len(labels))
    g1_s = np.bincount(inv, weights=treated, minlength=len(labels))
    g0_s = g_s - g1_s
    thin = [str(s) for s, a, b in zip(labels, g1_s, g0_s) if a < 2 or b < 2]
    if thin:
        raise ValueError(f"strata need at least 2 treated and 2 control clusters: {thin}")
    mu1 = np.bincount(inv[treated], weights=yz[treated], minlength=len(labels)) / g1_s
    mu0 = np.bincount(inv[~treated], weights=y0[~treated], minlength=len(labels)) / g0_s
    share = g_s / G
    arm1 = yz[treated]
    arm0 = y0[~treated]
    term1 = (np.mean(arm1**2) - np.sum(share * mu1**2)) / pi1
    term0 = (np.mean(arm0**2) - np.sum(share * mu0**2)) / (1 - pi1)
    d1 = mu1 - arm1.mean() if centered else mu1
    d0 = mu0 - arm0.mean() if centered else mu0
    tau_s = _tau_vector(tau, labels, pi1)
    between = np.sum(share * (d1 - d0) ** 2)
    imbalance = np.sum(tau_s * share * (d1 / pi1 + d0 / (1 - pi1)) ** 2)
    return float(term1 + term0 + between + imbalance)


# --- panel-level entry points --------------------------------------------------------


def _values(avg: ClusterAverages, z_arm: int, weighting: str):
    if z_arm not in (0, 1):
        raise ValueError(f"z_arm must be 0 or 1, got {z_arm}")
    if weighting == "equal":
        vals = avg.arm(z_arm)
    elif weighting == "size":
        vals = adjusted_outcomes(avg).arm(z_arm)
    else:
        raise ValueError(f"weighting must be 'equal' or 'size', got {weighting!r}")
    if np.isnan(vals).any():
        raise ValueError("treated clusters without sampled untreated units; spillover variance undefined")
    return vals


def v_hat_small_strata(
    panel: ExperimentPanel,
    tuple_structure: TupleStructure | None = None,
    z_arm: int = 1,
    weighting: str = "equal",
    pi1: float | None = None,
) -> VarianceEstimate:
    """Pairs-of-pairs variance for matched-tuple designs."""
    ts = tuple_structure or panel.tuple_structure
    if ts is None or ts.mode != "small_strata":
        raise ValueError("small-strata variance needs a matched-tuple structure")
    rows = panel.tuple_matrix(ts)
    avg = cluster_averages(panel)
    p1 = pi1 if pi1 is not None else panel.pi1_for_analysis
    raw = small_strata_variance(_values(avg, z_arm, weighting), avg.treated, rows, p1)
    return VarianceEstimate.build(raw, panel.G, "v1" if weighting == "equal" else "v2", z_arm)


def v_hat_large_strata(
    panel: ExperimentPanel,
    strata=None,
    z_arm: int = 1,
    weighting: str = "equal",
    tau=None,
    pi1: float | None = None,
) -> VarianceEstimate:
    """Large-strata variance; ``strata`` maps cluster id to label, or is a label array."""
    if strata is None:
        labels = panel.strata_labels()
    elif isinstance(strata, Mapping):
        labels = np.array([strata[c] for c in panel.cluster_id])
    else:
        labels = np.asarray(strata)
    avg = cluster_averages(panel)
    p1 = pi1 if pi1 is not None else panel.pi1_for_analysis
    vz = _values(avg, z_arm, weighting)
    v0 = _values(avg, 0, weighting) if z_arm == 1 else vz
    raw = large_strata_variance(vz, v0, avg.treated, labels, p1, tau, centered=weighting == "equal")
    return VarianceEstimate.build(raw, panel.G, "v3" if weighting == "equal" else "v4", z_arm)


def covariate_adjusted_variance(
    panel: ExperimentPanel,
    adjustment: CovariateAdjustment,
    tuple_structure: TupleStructure | None = None,
    pi1: float | None = None,
) -> VarianceEstimate:
    """Pairs-of-pairs variance of the adjusted size-weighted primary effect."""
    ts = tuple_structure or panel.tuple_structure
    if ts is None or ts.mode != "small_strata":
        raise ValueError("covariate-adjusted variance needs a matched-tuple structure")
    avg = cluster_averages(panel)
    ydot = adjusted_covariate_outcomes(avg, adjustment)
    p1 = pi1 if pi1 is not None else panel.pi1_for_analysis
    raw = small_strata_variance(ydot, avg.treated, panel.tuple_matrix(ts), p1)
    return VarianceEstimate.build(raw, panel.G, "v2_adj", 1)


def adjusted_covariate_outcomes(avg: ClusterAverages, adjustment: CovariateAdjustment) -> np.ndarray:
    ytilde = adjusted_outcomes(avg).ytilde1
    if not adjustment.kept_columns:
        return ytilde
    psi = adjustment.psi[:, list(adjustment.kept_columns)]
    shift = (psi - psi.mean(axis=0)) @ adjustment.beta_hat
    return ytilde - shift / avg.n.mean()


def routed_variance(
    panel: ExperimentPanel,
    estimand: str,
    tau=None,
    pi1: float | None = None,
) -> VarianceEstimate:
    """Small-strata estimator for matched tuples, large-strata estimator otherwise."""
    z_arm, weighting = ESTIMANDS[estimand]
    ts = panel.tuple_structure
    if ts is not None and ts.mode == "small_strata":
        return v_hat_small_strata(panel, ts, z_arm, weighting, pi1)
    return v_hat_large_strata(panel, None, z_arm, weighting, tau, pi1)


def adjusted_t_test(
    theta_hat: float,
    v: VarianceEstimate | float,
    g: int | None = None,
    theta0: float = 0.0,
    alpha: float = 0.05,
) -> TestResult:
    """Two-sided normal test of ``theta = theta0`` with a sqrt(G)-scale variance."""
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if isinstance(v, VarianceEstimate):
        g = v.g if g is None else g
        var = v.v
    else:
        var = float(v)
    if g is None or g < 1:
        raise ValueError("number of clusters g is required")
    if not np.isfinite(var) or var <= 0:
        raise ValueError(f"variance must be positive to test, got {var}")
    se = np.sqrt(var / g)
    tstat = (theta_hat - theta0) / se
    crit = stats.norm.ppf(1 - alpha / 2)
    pvalue = float(min(1.0, 2 * stats.norm.sf(abs(tstat))))
    return TestResult(
        theta_hat=float(theta_hat),
        theta0=float(theta0),
        tstat=float(tstat),
        pvalue=pvalue,
        reject=bool(abs(tstat) > crit),
        ci_lo=float(theta_hat - crit * se),
        ci_hi=float(theta_hat + crit * se),
        alpha=alpha,
    )
