"""Cluster averages and the difference-in-average-of-averages estimators."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .core import ExperimentPanel, TupleStructure

__all__ = [
    "ClusterAverages",
    "AdjustedAverages",
    "PointEstimates",
    "CovariateAdjustment",
    "cluster_averages",
    "averages_from_arrays",
    "point_estimates",
    "adjusted_outcomes",
    "covariate_adjusted_estimate",
    "cluster_mean_psi",
    "size_power_psi",
    "RANK_RTOL",
]

RANK_RTOL = 1e-10


@dataclass(frozen=True)
class ClusterAverages:
    """Per-cluster arm means of sampled outcomes.

    In a treated cluster ``ybar1``/``ybar0`` average the sampled treated and
    untreated units; in a control cluster both equal the mean over all
    sampled units.  ``ybar0`` is NaN for a treated cluster without sampled
    untreated units.
    """

    ybar1: np.ndarray
    ybar0: np.ndarray
    m1: np.ndarray
    m0: np.ndarray
    m: np.ndarray
    n: np.ndarray
    treated: np.ndarray

    def arm(self, z: int) -> np.ndarray:
        return self.ybar1 if z == 1 else self.ybar0

    @property
    def G(self) -> int:
        return len(self.n)


@dataclass(frozen=True)
class AdjustedAverages:
    ytilde1: np.ndarray
    ytilde0: np.ndarray

    def arm(self, z: int) -> np.ndarray:
        return self.ytilde1 if z == 1 else self.ytilde0


@dataclass(frozen=True)
class PointEstimates:
    theta_p1: float
    theta_s1: float
    theta_p2: float
    theta_s2: float

    def as_dict(self) -> dict[str, float]:
        return {
            "theta_p1": self.theta_p1,
            "theta_s1": self.theta_s1,
            "theta_p2": self.theta_p2,
            "theta_s2": self.theta_s2,
        }


@dataclass(frozen=True)
class CovariateAdjustment:
    psi: np.ndarray
    beta_hat: np.ndarray
    theta_p2_adj: float
    theta_p2: float
    kept_columns: tuple[int, ...]


def averages_from_arrays(unit_cluster, y, z, treated, n, sampled=None) -> ClusterAverages:
    unit_cluster = np.asarray(unit_cluster, dtype=np.int64)
    treated = np.asarray(treated, dtype=bool)
    G = len(treated)
    y = np.asarray(y, dtype=float)
    zb = np.asarray(z) > 0
    if sampled is not None:
        keep = np.asarray(sampled, dtype=bool)
        unit_cluster, y, zb = unit_cluster[keep], y[keep], zb[keep]
    m = np.bincount(unit_cluster, minlength=G)
    m1 = np.bincount(unit_cluster, weights=zb, minlength=G).astype(np.int64)
    s_all = np.bincount(unit_cluster, weights=y, minlength=G)
    s1 = np.bincount(unit_cluster, weights=np.where(zb, y, 0.0), minlength=G)
    m0 = m - m1
    if (m == 0).any():
        raise ValueError(f"clusters without sampled units: rows {np.flatnonzero(m == 0)[:10].tolist()}")
    no_treated = treated & (m1 == 0)
    if no_treated.any():
        raise ValueError(
            f"treated clusters without sampled treated units: rows {np.flatnonzero(no_treated)[:10].tolist()}"
        )
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_all = s_all / m
        ybar1 = np.where(treated, s1 / np.maximum(m1, 1), mean_all)
        ybar0 = np.where(treated, np.where(m0 > 0, (s_all - s1) / np.maximum(m0, 1), np.nan), mean_all)
    return ClusterAverages(
        ybar1=ybar1,
        ybar0=ybar0,
        m1=np.where(treated, m1, m),
        m0=np.where(treated, m0, m),
        m=m,
        n=np.asarray(n, dtype=np.int64),
        treated=treated,
    )


def cluster_averages(panel: ExperimentPanel) -> ClusterAverages:
    """Arm-specific sampled means for every cluster of ``panel``."""
    return averages_from_arrays(
        panel.unit_cluster, panel.y, panel.z, panel.treated, panel.n, panel.sampled
    )


def _spillover_mask(avg: ClusterAverages, allow_empty_control: bool) -> np.ndarray:
    missing = avg.treated & np.isnan(avg.ybar0)
    if missing.any() and not allow_empty_control:
        raise ValueError(
            "treated clusters with no sampled untreated units (rows "
            f"{np.flatnonzero(missing)[:10].tolist()}); pass allow_empty_control=True to drop them"
        )
    return ~missing


def _arm_contrast(values, treated, weights, keep) -> float:
    t = treated & keep
    c = ~treated & keep
    if not t.any():
        raise ValueError("G1=0: no treated clusters")
    if not c.any():
        raise ValueError("G0=0: no control clusters")
    return float(
        np.sum(weights[t] * values[t]) / np.sum(weights[t])
        - np.sum(weights[c] * values[c]) / np.sum(weights[c])
    )


def point_estimates(
    data: ExperimentPanel | ClusterAverages, allow_empty_control: bool = False
) -> PointEstimates:
    """Equally weighted (1) and size weighted (2) primary and spillover effects."""
    avg = data if isinstance(data, ClusterAverages) else cluster_averages(data)
    every = np.ones(avg.G, dtype=bool)
    keep0 = _spillover_mask(avg, allow_empty_control)
    ones = np.ones(avg.G)
    size = avg.n.astype(float)
    ybar0 = np.nan_to_num(avg.ybar0)
    return PointEstimates(
        theta_p1=_arm_contrast(avg.ybar1, avg.treated, ones, every),
        theta_s1=_arm_contrast(ybar0, avg.treated, ones, keep0),
        theta_p2=_arm_contrast(avg.ybar1, avg.treated, size, every),
        theta_s2=_arm_contrast(ybar0, avg.treated, size, keep0),
    )


def _adjust(values: np.ndarray, n: np.ndarray, treated: np.ndarray) -> np.ndarray:
    """Size-scaled outcome demeaned within its first-stage arm."""
    nbar = n.mean()
    out = np.full(len(values), np.nan)
    for arm in (treated, ~treated):
        ok = arm & ~np.isnan(values)
        if ok.any():
            arm_term = np.sum(values[ok] * n[ok]) / ok.sum() / nbar
            out[ok] = n[ok] / nbar * (values[ok] - arm_term)
    return out


def adjusted_outcomes(data: ExperimentPanel | ClusterAverages) -> AdjustedAverages:
    avg = data if isinstance(data, ClusterAverages) else cluster_averages(data)
    n = avg.n.astype(float)
    return AdjustedAverages(
        ytilde1=_adjust(avg.ybar1, n, avg.treated),
        ytilde0=_adjust(avg.ybar0, n, avg.treated),
    )


# --- covariate adjustment ----------------------------------------------------------


def _as_matrix(psi, g: int) -> np.ndarray:
    psi = np.asarray(psi, dtype=float)
    if psi.ndim == 1:
        psi = psi[:, None]
    if psi.shape[0] != g:
        raise ValueError(f"psi has {psi.shape[0]} rows for {g} clusters")
    return psi


def lstsq_pivoted(X: np.ndarray, y: np.ndarray, names=None, rtol: float = RANK_RTOL) -> np.ndarray:
    """Least squares through column-pivoted QR; raises on rank deficiency."""
    Q, R, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0:
        return np.zeros(0)
    rank = int(np.sum(diag > rtol * diag[0]))
    if rank < X.shape[1]:
        bad = sorted(int(i) for i in piv[rank:])
        label = [names[i] for i in bad] if names is not None else bad
        raise np.linalg.LinAlgError(
            f"design has rank {rank} < {X.shape[1]} columns; collinear columns: {label}"
        )
    coef = np.empty(X.shape[1])
    coef[piv] = scipy.linalg.solve_triangular(R, Q.T @ y)
    return coef


def tuple_arm_means(values: np.ndarray, treated: np.ndarray, rows: np.ndarray):
    """Means of ``values`` over treated and over control members of each tuple.

    ``rows`` is the ``(n_tuples, k)`` matrix of cluster rows.  ``values`` may
    be 1-d or 2-d (clusters by columns).
    """
    v = values[rows]
    t = treated[rows]
    if v.ndim == 3:
        t = t[..., None]
    n1 = t.sum(axis=1)
    n0 = (~t).sum(axis=1)
    return (np.where(t, v, 0.0).sum(axis=1) / n1, np.where(t, 0.0, v).sum(axis=1) / n0)


def covariate_adjusted_estimate(
    data: ExperimentPanel | ClusterAverages,
    psi,
    tuple_structure: TupleStructure | None = None,
    rows: np.ndarray | None = None,
) -> CovariateAdjustment:
    """Size-weighted primary effect adjusted by cluster-level covariates ``psi``.

    The slope comes from regressing the within-tuple treated-minus-control
    difference of ``N_g * Ybar_g^1`` (adjusted outcomes rescaled by the mean
    size) on the same difference of ``psi``.  Columns of ``psi`` that are
    constant across clusters are dropped; with none left the slope is empty
    and the estimate equals the unadjusted one.
    """
    if isinstance(data, ClusterAverages):
        avg = data
        if rows is None:
            raise ValueError("pass tuple rows when calling with ClusterAverages")
    else:
        avg = cluster_averages(data)
        if rows is None:
            ts = tuple_structure or data.tuple_structure
            if ts is None or ts.mode != "small_strata":
                raise ValueError("covariate adjustment needs a matched-tuple structure")
            rows = data.tuple_matrix(ts)
    psi = _as_matrix(psi, avg.G)
    kept = tuple(j for j in range(psi.shape[1]) if np.ptp(psi[:, j]) > 0)
    psi_k = psi[:, list(kept)]
    n = avg.n.astype(float)
    nbar = n.mean()
    adj = adjusted_outcomes(avg).ytilde1 * nbar
    mu1, mu0 = tuple_arm_means(adj, avg.treated, rows)
    if kept:
        p1, p0 = tuple_arm_means(psi_k, avg.treated, rows)
        X = np.column_stack([np.ones(len(rows)), p1 - p0])
        names = ["const"] + [f"psi_{j + 1}" for j in kept]
        beta = lstsq_pivoted(X, mu1 - mu0, names)[1:]
        shift = (psi_k - psi_k.mean(axis=0)) @ beta
    else:
        beta = np.zeros(0)
        shift = np.zeros(avg.G)
    t = avg.treated
    base = n * avg.ybar1
    theta_adj = float(np.sum(base[t] - shift[t]) / n[t].sum() - np.sum(base[~t] - shift[~t]) / n[~t].sum())
    theta = float(np.sum(base[t]) / n[t].sum() - np.sum(base[~t]) / n[~t].sum())
    return CovariateAdjustment(psi=psi, beta_hat=beta, theta_p2_adj=theta_adj, theta_p2=theta, kept_columns=kept)


def cluster_mean_psi(panel: ExperimentPanel, values=None, column: int = 0, sampled_only: bool = True):
    """Cluster means of a unit-level covariate (or of supplied unit values)."""
    v = panel.x[:, column] if values is None else np.asarray(values, dtype=float)
    keep = panel.sampled if sampled_only else np.ones(len(v), bool)
    uc = panel.unit_cluster[keep]
    return np.bincount(uc, weights=v[keep], minlength=panel.G) / np.bincount(uc, minlength=panel.G)


def size_power_psi(panel: ExperimentPanel, powers=(1,)) -> np.ndarray:
    n = panel.n.astype(float)
    return np.column_stack([n**p for p in powers])
