"""Least-squares comparators: Y on (1, Z, L) with robust or clustered errors.

``L`` flags untreated units in treated clusters, so the coefficient on ``Z``
is a primary-effect contrast and the coefficient on ``L`` a spillover
contrast, both against units in control clusters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .core import ExperimentPanel
from .estimate import lstsq_pivoted

__all__ = [
    "RegressionSpec",
    "RegressionFit",
    "ols_inference",
    "cluster_robust_v",
    "wls_fit",
    "design_arrays",
    "OLS_METHODS",
]

WEIGHTS = ("unweighted", "inv_m", "n_over_m")
SE_TYPES = ("hc_robust", "cluster", "hc2_cluster")
DUMMY_LIMIT = 50

OLS_METHODS = {
    "ols_robust": ("unweighted", False, "hc_robust"),
    "ols_cluster": ("unweighted", False, "cluster"),
    "ols_fe_robust": ("unweighted", True, "hc_robust"),
    "ols_fe_cluster": ("unweighted", True, "cluster"),
}


@dataclass(frozen=True)
class RegressionSpec:
    weights: str = "unweighted"
    fixed_effects: bool = False
    se_type: str = "hc_robust"
    hc1: bool = False

    def __post_init__(self):
        if self.weights not in WEIGHTS:
            raise ValueError(f"weights must be one of {WEIGHTS}, got {self.weights!r}")
        if self.se_type not in SE_TYPES:
            raise ValueError(f"se_type must be one of {SE_TYPES}, got {self.se_type!r}")

    @classmethod
    def for_method(cls, method: str) -> "RegressionSpec":
        try:
            w, fe, se = OLS_METHODS[method]
        except KeyError:
            raise ValueError(f"unknown OLS method {method!r}; choose from {sorted(OLS_METHODS)}") from None
        return cls(weights=w, fixed_effects=fe, se_type=se)


@dataclass(frozen=True)
class RegressionFit:
    names: tuple[str, ...]
    coef: np.ndarray
    vcov: np.ndarray
    n_obs: int
    n_clusters: int

    def value(self, name: str) -> float:
        return float(self.coef[self.names.index(name)]) if name in self.names else float("nan")

    def se(self, name: str) -> float:
        i = self.names.index(name)
        return float(np.sqrt(max(self.vcov[i, i], 0.0)))

    @property
    def alpha(self) -> float:
        return self.value("alpha")

    @property
    def beta1(self) -> float:
        return self.value("beta1")

    @property
    def beta2(self) -> float:
        return self.value("beta2")

    @property
    def se_beta1(self) -> float:
        return self.se("beta1")

    @property
    def se_beta2(self) -> float:
        return self.se("beta2")

    def t_test(self, name: str = "beta1", theta0: float = 0.0, alpha: float = 0.05):
        """Normal-approximation test; returns (tstat, pvalue, reject, ci_lo, ci_hi)."""
        est, se = self.value(name), self.se(name)
        crit = stats.norm.ppf(1 - alpha / 2)
        t = (est - theta0) / se if se > 0 else np.inf * np.sign(est - theta0)
        p = float(2 * stats.norm.sf(abs(t))) if np.isfinite(t) else 0.0
        return float(t), p, bool(abs(t) > crit), est - crit * se, est + crit * se


def design_arrays(panel: ExperimentPanel):
    """Sampled-unit arrays: cluster row, y, z, L, and cluster-level M_g."""
    keep = panel.sampled
    uc = panel.unit_cluster[keep]
    z = panel.z[keep].astype(float)
    treated = panel.treated[uc]
    L = (treated & (z == 0)).astype(float)
    return uc, panel.y[keep], z, L, panel.m


def _unit_weights(kind: str, uc: np.ndarray, m: np.ndarray, n: np.ndarray) -> np.ndarray:
    if kind == "unweighted":
        return np.ones(len(uc))
    if kind == "inv_m":
        return 1.0 / m[uc]
    return n[uc] / m[uc]


def _fe_labels(panel: ExperimentPanel) -> np.ndarray:
    ts = panel.tuple_structure
    if ts is not None and ts.mode == "small_strata" and ts.tuples:
        lab = np.full(panel.G, -1, dtype=np.int64)
        pos = panel.cluster_position()
        for j, t in enumerate(ts.tuples):
            for c in t:
                lab[pos[c]] = j
        if (lab < 0).any():
            raise ValueError("fixed effects need every cluster in a tuple")
        return lab
    labels = panel.strata_labels()
    if any(v is None for v in labels):
        raise ValueError("fixed effects need a stratum label on every cluster")
    return np.unique(labels.astype(str), return_inverse=True)[1]


def weighted_demean(a: np.ndarray, group: np.ndarray, w: np.ndarray) -> np.ndarray:
    n_groups = group.max() + 1
    sw = np.bincount(group, weights=w, minlength=n_groups)
    if a.ndim == 1:
        return a - (np.bincount(group, weights=w * a, minlength=n_groups) / sw)[group]
    out = np.empty_like(a)
    for j in range(a.shape[1]):
        out[:, j] = a[:, j] - (np.bincount(group, weights=w * a[:, j], minlength=n_groups) / sw)[group]
    return out


def _inv_sqrt_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    vals = np.clip(vals, 1e-12, None)
    return (vecs / np.sqrt(vals)) @ vecs.T


def wls_fit(
    X: np.ndarray,
    y: np.ndarray,
    w: np.ndarray,
    cluster: np.ndarray,
    se_type: str = "hc_robust",
    hc1: bool = False,
    names=None,
    extra_params: int = 0,
):
    """Weighted least squares with a sandwich covariance.

    Returns ``(coef, vcov)``.  ``extra_params`` counts parameters absorbed
    before the call (within-transformed fixed effects) for the HC1 factor.
    """
    sw = np.sqrt(w)
    Xw = X * sw[:, None]
    coef = lstsq_pivoted(Xw, y * sw, names)
    resid = y - X @ coef
    bread = np.linalg.inv(Xw.T @ Xw)
    n, p = X.shape
    p_all = p + extra_params
    if se_type == "hc_robust":
        scores = X * (w * resid)[:, None]
        meat = scores.T @ scores
        factor = n / (n - p_all) if hc1 else 1.0
    else:
        n_cl = cluster.max() + 1
        if se_type == "hc2_cluster":
            ew = resid * sw
            S = np.zeros((n_cl, p))
            order = np.argsort(cluster, kind="stable")
            bounds = np.searchsorted(cluster[order], np.arange(n_cl + 1))
            for g in range(n_cl):
                rows = order[bounds[g]:bounds[g + 1]]
                Xg = Xw[rows]
                A = _inv_sqrt_psd(np.eye(len(rows)) - Xg @ bread @ Xg.T)
                S[g] = Xg.T @ (A @ ew[rows])
        else:
            S = np.zeros((n_cl, p))
            contrib = X * (w * resid)[:, None]
            for j in range(p):
                S[:, j] = np.bincount(cluster, weights=contrib[:, j], minlength=n_cl)
        meat = S.T @ S
        factor = (n_cl / (n_cl - 1)) * ((n - 1) / (n - p_all)) if hc1 else 1.0
    vcov = factor * bread @ meat @ bread
    return coef, (vcov + vcov.T) / 2


def ols_inference(panel: ExperimentPanel, spec: RegressionSpec = RegressionSpec()) -> RegressionFit:
    """Fit Y on (1, Z, L) over sampled units, with optional stratum fixed effects.

    Fixed effects use one dummy per stratum (tuple, for matched designs)
    when there are at most 50 of them and weighted within-stratum demeaning
    otherwise; both give the same slopes and covariance.  ``hc2_cluster``
    always uses dummies so that leverages include the fixed effects.
    """
    uc, y, z, L, m = design_arrays(panel)
    if not np.isfinite(y).all():
        raise ValueError("sampled outcomes must be finite")
    w = _unit_weights(spec.weights, uc, m, panel.n)
    extra = 0
    if not spec.fixed_effects:
        X = np.column_stack([np.ones(len(y)), z, L])
        names = ("alpha", "beta1", "beta2")
    else:
        fe = _fe_labels(panel)[uc]
        n_fe = fe.max() + 1
        if n_fe <= DUMMY_LIMIT or spec.se_type == "hc2_cluster":
            D = np.zeros((len(y), n_fe))
            D[np.arange(len(y)), fe] = 1.0
            X = np.column_stack([z, L, D])
            names = ("beta1", "beta2") + tuple(f"fe_{j}" for j in range(n_fe))
        else:
            X = weighted_demean(np.column_stack([z, L]), fe, w)
            y = weighted_demean(y, fe, w)
            names = ("beta1", "beta2")
            extra = n_fe
    coef, vcov = wls_fit(X, y, w, uc, spec.se_type, spec.hc1, names, extra)
    return RegressionFit(names, coef, vcov, len(y), panel.G)


def cluster_robust_v(panel: ExperimentPanel, fit: RegressionFit, spec: RegressionSpec | None = None) -> float:
    """Cluster-robust variance of the primary slope on the sqrt(G) scale."""
    if spec is not None and spec.se_type not in ("cluster", "hc2_cluster"):
        raise ValueError("cluster_robust_v needs a fit with clustered standard errors")
    return panel.G * fit.se_beta1**2
