"""Monte Carlo harness for comparing two-stage designs.

Potential outcomes follow

    Y(z, h) = mu[z,h] + alpha[z,h] * X1 / (X2 + 0.1) + beta[z,h] * (C - 1/2)
              + gamma * (N - 100) + C * (N - 100) / 100 * eps

with ``C ~ U[0,1]``, ``N ~ U{50..150}``, ``X1 = N u / 100``, ``X2 ~ U[0,1]``
and Gaussian ``u`` and ``eps``.  The noise parameters ``u_scale`` and
``eps_scale`` are variances by default (``scale_kind="variance"``); set
``scale_kind="sd"`` to read them as standard deviations.

Every replication ``r`` draws from its own streams
``rng_stream(seed, r, stage)`` (stage 0: population, 1: clusters,
2: units, 3: sampling), so results do not depend on worker count or
scheduling, and every design in a grid sees the same populations.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .core import ExperimentPanel, TupleStructure
from .estimate import (
    adjusted_outcomes,
    averages_from_arrays,
    covariate_adjusted_estimate,
    point_estimates,
)
from .randomize import (
    FirstStageDesign,
    SecondStageDesign,
    assign_first_stage,
    grouped_draw,
    optimal_index,
    rng_stream,
    second_stage_groups,
)
from .regress import DUMMY_LIMIT, OLS_METHODS, weighted_demean, wls_fit
from .variance import (
    ESTIMANDS,
    VARIANCE_FLOOR,
    adjusted_covariate_outcomes,
    adjusted_t_test,
    large_strata_variance,
    small_strata_variance,
)

__all__ = [
    "DESIGNS",
    "DgpConfig",
    "PopulationDraw",
    "DesignPair",
    "McTable",
    "McDraws",
    "SimConfig",
    "optimal_index_first_stage",
    "generate_population",
    "first_stage_design",
    "second_stage_design",
    "simulate_draws",
    "run_mc_grid",
    "worker_count",
]

DESIGNS = ("C", "S-2", "S-4", "S-4O", "MT-A", "MT-B", "MT-C")
INDEX_DESIGNS = ("S-4O", "MT-C")
ANALYSES = ("adjusted_t", "mse", "mse_ratio", "ols_methods", "covariate_adjustment")
EXPOSURES = ("1p", "0p", "00")
EFFECTS = {"primary": "beta1", "spillover": "beta2"}

MODEL_COEFS = {
    "homogeneous": ({"1p": 1.0, "0p": 1.0, "00": 1.0}, {"1p": 1.0, "0p": 1.0, "00": 1.0}, 0.01),
    "heterogeneous": ({"1p": 2.0, "0p": 0.5, "00": 1.0}, {"1p": 2.0, "0p": 0.5, "00": 1.0}, 0.01),
}


def optimal_index_first_stage(c, n, weighting: str = "equal"):
    """``c + n/100`` (equal) or ``n*(c + n/100) - 25 n / 3`` (size)."""
    return optimal_index(c, n, weighting)


# --- configuration ---------------------------------------------------------------


@dataclass(frozen=True)
class DgpConfig:
    """Parameters of the outcome model and of the experiment size.

    ``model`` fixes ``alpha``, ``beta`` and ``gamma`` for the homogeneous and
    heterogeneous variants; ``"custom"`` takes them from the fields.  The
    exposure keys are ``"1p"`` (treated unit, treated cluster), ``"0p"``
    (untreated unit, treated cluster) and ``"00"`` (control cluster).
    """

    model: str = "homogeneous"
    tau: float = 0.0
    omega: float = 0.0
    mu00: float = 0.0
    alpha: Mapping[str, float] | None = None
    beta: Mapping[str, float] | None = None
    gamma: float | None = None
    g: int = 200
    pi1: float = 0.5
    pi2: float = 0.5
    sampling_fraction: float = 1.0
    seed: int = 0
    n_range: tuple[int, int] = (50, 150)
    u_scale: float = 0.1
    eps_scale: float = 10.0
    scale_kind: str = "variance"

    def __post_init__(self):
        if self.model in MODEL_COEFS:
            a, b, gm = MODEL_COEFS[self.model]
            for name, given, want in (("alpha", self.alpha, a), ("beta", self.beta, b)):
                if given is not None and dict(given) != want:
                    raise ValueError(f"{name} is fixed by model={self.model!r}; use model='custom'")
            if self.gamma is not None and self.gamma != gm:
                raise ValueError(f"gamma is fixed by model={self.model!r}; use model='custom'")
            object.__setattr__(self, "alpha", dict(a))
            object.__setattr__(self, "beta", dict(b))
            object.__setattr__(self, "gamma", gm)
        elif self.model == "custom":
            if self.alpha is None or self.beta is None or self.gamma is None:
                raise ValueError("custom model needs alpha, beta and gamma")
            for name in ("alpha", "beta"):
                d = {str(k): float(v) for k, v in getattr(self, name).items()}
                if set(d) != set(EXPOSURES):
                    raise ValueError(f"{name} needs keys {EXPOSURES}")
                object.__setattr__(self, name, d)
        else:
            raise ValueError(f"model must be homogeneous, heterogeneous or custom, got {self.model!r}")
        lo, hi = self.n_range
        object.__setattr__(self, "n_range", (int(lo), int(hi)))
        if not 1 <= lo <= hi:
            raise ValueError(f"bad n_range {self.n_range}")
        if self.g < 4:
            raise ValueError("need at least 4 clusters")
        if not 0 < self.pi1 < 1 or not 0 < self.pi2 <= 1:
            raise ValueError("pi1 must lie in (0,1) and pi2 in (0,1]")
        if not 0 < self.sampling_fraction <= 1:
            raise ValueError("sampling_fraction must lie in (0, 1]")
        if self.scale_kind not in ("variance", "sd"):
            raise ValueError("scale_kind must be 'variance' or 'sd'")
        if self.u_scale < 0 or self.eps_scale < 0:
            raise ValueError("noise scales must be non-negative")

    @property
    def mu(self) -> dict[str, float]:
        return {"00": self.mu00, "0p": self.mu00 + self.omega, "1p": self.mu00 + self.omega + self.tau}

    def sd(self, scale: float) -> float:
        return float(np.sqrt(scale)) if self.scale_kind == "variance" else float(scale)

    def truth(self) -> dict[str, float]:
        """Population values of the four estimands.

        The covariate terms have mean zero given cluster size (``u`` is
        centered, ``C`` is independent of ``N``) and the size and noise
        terms do not depend on exposure, so every contrast reduces to a
        difference of ``mu`` values.
        """
        mu = self.mu
        primary = mu["1p"] - mu["00"]
        spill = mu["0p"] - mu["00"]
        return {"theta_p1": primary, "theta_p2": primary, "theta_s1": spill, "theta_s2": spill}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n_range"] = list(self.n_range)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "DgpConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown dgp keys {sorted(extra)}")
        d = dict(d)
        if "n_range" in d:
            d["n_range"] = tuple(d["n_range"])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class PopulationDraw:
    c: np.ndarray
    n: np.ndarray
    unit_cluster: np.ndarray
    x: np.ndarray
    eps: np.ndarray
    y: dict

    @property
    def G(self) -> int:
        return len(self.n)

    def outcomes(self, treated: np.ndarray, z: np.ndarray) -> np.ndarray:
        t = treated[self.unit_cluster]
        return np.where(t, np.where(z > 0, self.y["1p"], self.y["0p"]), self.y["00"])

    def to_panel(self, treated, z, pi2, sampled=None, pi1=None, tuple_structure=None) -> ExperimentPanel:
        treated = np.asarray(treated, dtype=bool)
        return ExperimentPanel(
            cluster_id=[str(i) for i in range(self.G)],
            n=self.n,
            h=np.where(treated, pi2, 0.0),
            c=self.c[:, None],
            unit_cluster=self.unit_cluster,
            y=self.outcomes(treated, z),
            z=z,
            sampled=sampled,
            x=self.x,
            pi2=pi2,
            pi1=pi1,
            tuple_structure=tuple_structure,
        )


def generate_population(cfg: DgpConfig, rng: np.random.Generator | None = None) -> PopulationDraw:
    """Draw clusters, units and all three potential outcomes."""
    rng = rng if rng is not None else rng_stream(cfg.seed)
    G = cfg.g
    c = rng.random(G)
    lo, hi = cfg.n_range
    n = rng.integers(lo, hi + 1, size=G)
    unit_cluster = np.repeat(np.arange(G), n)
    U = len(unit_cluster)
    u = rng.standard_normal(U) * cfg.sd(cfg.u_scale)
    x2 = rng.random(U)
    eps = rng.standard_normal(U) * cfg.sd(cfg.eps_scale)
    nu = n[unit_cluster].astype(float)
    cu = c[unit_cluster]
    x1 = nu * u / 100.0
    ratio = x1 / (x2 + 0.1)
    common = cfg.gamma * (nu - 100.0) + cu * (nu - 100.0) / 100.0 * eps
    y = {
        e: cfg.mu[e] + cfg.alpha[e] * ratio + cfg.beta[e] * (cu - 0.5) + common
        for e in EXPOSURES
    }
    return PopulationDraw(c=c, n=n, unit_cluster=unit_cluster, x=np.column_stack([x1, x2]), eps=eps, y=y)


# --- design menu ------------------------------------------------------------------


def first_stage_design(name: str, weighting: str = "equal", pi1: float = 0.5) -> FirstStageDesign:
    index = f"index_{weighting}"
    frac = Fraction(pi1).limit_denominator(100)
    table = {
        "C": dict(mechanism="complete", pi1=pi1),
        "S-2": dict(mechanism="sbr", pi1=pi1, score_source="c_1", cutoffs=(0.5,)),
        "S-4": dict(mechanism="sbr", pi1=pi1, score_source="c_1", cutoffs=(0.25, 0.5, 0.75)),
        "S-4O": dict(mechanism="sbr", pi1=pi1, score_source=index, n_strata=4),
        "MT-A": dict(mechanism="matched_tuples", score_source="c_1"),
        "MT-B": dict(mechanism="matched_tuples", score_source="n_g"),
        "MT-C": dict(mechanism="matched_tuples", score_source=index),
    }
    if name not in table:
        raise ValueError(f"unknown design {name!r}; choose from {DESIGNS}")
    kw = table[name]
    if kw["mechanism"] == "matched_tuples":
        kw = dict(kw, k=frac.denominator, l=frac.numerator)
    return FirstStageDesign(**kw)


def second_stage_design(name: str, pi2: float = 0.5) -> SecondStageDesign:
    ratio = "x_1/(x_2+0.1)"
    table = {
        "C": dict(mechanism="complete"),
        "S-2": dict(mechanism="sbr", score_source="x_1", n_strata=2),
        "S-4": dict(mechanism="sbr", score_source="x_1", n_strata=4),
        "S-4O": dict(mechanism="sbr", score_source=ratio, n_strata=4),
        "MT-A": dict(mechanism="matched_tuples", score_source="x_1"),
        "MT-B": dict(mechanism="matched_tuples", score_source="x_2"),
        "MT-C": dict(mechanism="matched_tuples", score_source=ratio),
    }
    if name not in table:
        raise ValueError(f"unknown design {name!r}; choose from {DESIGNS}")
    return SecondStageDesign(pi2=pi2, **table[name])


@dataclass(frozen=True)
class DesignPair:
    first: str
    second: str

    def __post_init__(self):
        for d in (self.first, self.second):
            if d not in DESIGNS:
                raise ValueError(f"unknown design {d!r}; choose from {DESIGNS}")

    @property
    def label(self) -> str:
        return f"{self.first}/{self.second}"


def _pairs(pairs) -> list[DesignPair]:
    out = []
    for p in pairs:
        out.append(p if isinstance(p, DesignPair) else DesignPair(*p))
    return out


# --- one replication -----------------------------------------------------------------


@dataclass
class _Rep:
    cfg: DgpConfig
    rep: int
    pop: PopulationDraw = field(init=False)
    sampled: np.ndarray | None = field(init=False)
    _first: dict = field(default_factory=dict, init=False)
    _second: dict = field(default_factory=dict, init=False)

    def __post_init__(self):
        cfg = self.cfg
        self.pop = generate_population(cfg, rng_stream(cfg.seed, self.rep, 0))
        self.keys = rng_stream(cfg.seed, self.rep, 2).random((3, len(self.pop.unit_cluster)))
        self.sampled = None
        if cfg.sampling_fraction < 1:
            uc = self.pop.unit_cluster
            m = np.maximum(2, np.round(cfg.sampling_fraction * self.pop.n)).astype(np.int64)
            key = rng_stream(cfg.seed, self.rep, 3).random(len(uc))
            order = np.lexsort((key, uc))
            start = np.searchsorted(uc[order], np.arange(self.pop.G))
            rank = np.empty(len(uc), dtype=np.int64)
            rank[order] = np.arange(len(uc)) - start[uc[order]]
            self.sampled = rank < m[uc]

    def first(self, name: str, weighting: str):
        key = (name, weighting if name in INDEX_DESIGNS else "")
        if key not in self._first:
            design = first_stage_design(name, weighting, self.cfg.pi1)
            self._first[key] = assign_first_stage(
                design, self.pop.c[:, None], self.pop.n, rng=rng_stream(self.cfg.seed, self.rep, 1)
            )
        return self._first[key]

    def second(self, name: str) -> np.ndarray:
        """Second-stage draw for every cluster as if it were treated."""
        if name not in self._second:
            design = second_stage_design(name, self.cfg.pi2)
            pop = self.pop
            group = second_stage_groups(design, pop.unit_cluster, pop.G, x=pop.x, tie_key=self.keys[2])
            self._second[name] = grouped_draw(
                pop.unit_cluster, group, np.ones(pop.G, bool), self.cfg.pi2, self.keys
            )
        return self._second[name]

    def realized(self, first: str, second: str, weighting: str):
        fa = self.first(first, weighting)
        z = self.second(second) * fa.treated[self.pop.unit_cluster]
        y = self.pop.outcomes(fa.treated, z)
        return fa, z.astype(np.int8), y


def _strata_info(fa, G: int):
    ts: TupleStructure = fa.tuple_structure
    if ts.mode == "small_strata":
        rows = np.array([[int(c) for c in t] for t in ts.tuples], dtype=np.int64)
        return "small", rows
    labels = np.array([ts.large_strata[str(i)] for i in range(G)])
    return "large", labels


def _variance(avg, estimand: str, kind: str, info, pi1: float) -> float:
    z_arm, weighting = ESTIMANDS[estimand]
    if weighting == "equal":
        vz = avg.arm(z_arm)
        v0 = avg.ybar0 if z_arm == 1 else vz
    else:
        adj = adjusted_outcomes(avg)
        vz = adj.arm(z_arm)
        v0 = adj.ytilde0 if z_arm == 1 else vz
    if kind == "small":
        return small_strata_variance(vz, avg.treated, info, pi1)
    return large_strata_variance(vz, v0, avg.treated, info, pi1, 0.0, centered=weighting == "equal")


def _replicate(cfg: DgpConfig, pairs, estimands, analysis: str, alpha: float, rep: int, comparator_index: str = "size") -> dict:
    r = _Rep(cfg, rep)
    out: dict = {}
    pop = r.pop
    truth = cfg.truth()
    for pair in pairs:
        if analysis == "ols_methods":
            fa, z, y = r.realized(pair.first, pair.second, comparator_index)
            _ols_record(out, pair, fa, z, y, r, alpha)
            continue
        if analysis == "covariate_adjustment":
            fa, z, y = r.realized(pair.first, pair.second, comparator_index)
            _adjustment_record(out, pair, fa, z, y, r)
            continue
        for weighting in ("equal", "size"):
            wanted = [e for e in estimands if ESTIMANDS[e][1] == weighting]
            if not wanted:
                continue
            fa, z, y = r.realized(pair.first, pair.second, weighting)
            avg = averages_from_arrays(pop.unit_cluster, y, z, fa.treated, pop.n, r.sampled)
            est = point_estimates(avg).as_dict()
            kind, info = _strata_info(fa, pop.G)
            for e in wanted:
                rec = {"theta": est[e], "error": est[e] - truth[e]}
                if analysis == "adjusted_t":
                    raw = _variance(avg, e, kind, info, cfg.pi1)
                    v = max(raw, VARIANCE_FLOOR)
                    test = adjusted_t_test(est[e], v, pop.G, 0.0, alpha)
                    rec.update(v=v, floored=float(raw < VARIANCE_FLOOR), reject=float(test.reject))
                out[(pair.first, pair.second, e)] = rec
    return out


def _ols_record(out, pair, fa, z, y, r: _Rep, alpha: float):
    pop = r.pop
    uc, yy, zz = pop.unit_cluster, y, z.astype(float)
    if r.sampled is not None:
        uc, yy, zz = uc[r.sampled], yy[r.sampled], zz[r.sampled]
    L = (fa.treated[uc] & (zz == 0)).astype(float)
    kind, info = _strata_info(fa, pop.G)
    if kind == "small":
        fe_cluster = np.empty(pop.G, dtype=np.int64)
        fe_cluster[info.ravel()] = np.repeat(np.arange(len(info)), info.shape[1])
    else:
        fe_cluster = np.unique(info, return_inverse=True)[1]
    for method, (_, fe, se_type) in OLS_METHODS.items():
        w = np.ones(len(yy))
        if fe:
            grp = fe_cluster[uc]
            n_fe = grp.max() + 1
            if n_fe <= DUMMY_LIMIT:
                D = np.zeros((len(yy), n_fe))
                D[np.arange(len(yy)), grp] = 1.0
                X = np.column_stack([zz, L, D])
                yfit, extra = yy, 0
            else:
                X = weighted_demean(np.column_stack([zz, L]), grp, w)
                yfit, extra = weighted_demean(yy, grp, w), n_fe
            idx = (0, 1)
        else:
            X = np.column_stack([np.ones(len(yy)), zz, L])
            yfit, extra, idx = yy, 0, (1, 2)
        coef, vcov = wls_fit(X, yfit, w, uc, se_type, False, None, extra)
        for (effect, _), i in zip(EFFECTS.items(), idx):
            se = np.sqrt(max(vcov[i, i], 0.0))
            test = adjusted_t_test(coef[i], se**2 * pop.G, pop.G, 0.0, alpha) if se > 0 else None
            out[(pair.first, pair.second, f"{method}/{effect}")] = {
                "theta": coef[i],
                "reject": float(test.reject if test else True),
            }


def _adjustment_record(out, pair, fa, z, y, r: _Rep):
    pop = r.pop
    kind, rows = _strata_info(fa, pop.G)
    if kind != "small":
        raise ValueError("covariate adjustment needs a matched-tuple first stage")
    avg = averages_from_arrays(pop.unit_cluster, y, z, fa.treated, pop.n, r.sampled)
    ratio = pop.x[:, 0] / (pop.x[:, 1] + 0.1)
    keep = np.ones(len(ratio), bool) if r.sampled is None else r.sampled
    psi = np.bincount(pop.unit_cluster[keep], weights=ratio[keep], minlength=pop.G) / avg.m
    adj = covariate_adjusted_estimate(avg, psi, rows=rows)
    truth = r.cfg.truth()["theta_p2"]
    v_un = small_strata_variance(adjusted_outcomes(avg).ytilde1, avg.treated, rows, r.cfg.pi1)
    v_adj = small_strata_variance(adjusted_covariate_outcomes(avg, adj), avg.treated, rows, r.cfg.pi1)
    key = (pair.first, pair.second)
    out[key + ("theta_p2",)] = {"theta": adj.theta_p2, "error": adj.theta_p2 - truth, "v": v_un}
    out[key + ("theta_p2_adj",)] = {"theta": adj.theta_p2_adj, "error": adj.theta_p2_adj - truth, "v": v_adj}


# --- many replications -------------------------------------------------------------


def worker_count(requested: int | None = None) -> int:
    if requested is not None:
        return max(1, int(requested))
    env = os.environ.get("TWOSTAGE_THREADS")
    if env:
        return max(1, int(env))
    return 1


def _run_chunk(args):
    cfg, pairs, estimands, analysis, alpha, index, reps = args
    return [_replicate(cfg, pairs, estimands, analysis, alpha, r, index) for r in reps]


@dataclass(frozen=True, eq=False)
class McDraws:
    """Per-replication records: ``values[(first, second, name)][field]`` is an array."""

    values: dict
    replications: int
    analysis: str
    truth: dict

    def get(self, first: str, second: str, name: str, what: str = "theta") -> np.ndarray:
        return self.values[(first, second, name)][what]


def simulate_draws(
    dgp: DgpConfig,
    pairs: Sequence,
    estimands: Iterable[str] = tuple(ESTIMANDS),
    replications: int = 1000,
    analysis: str = "adjusted_t",
    alpha: float = 0.05,
    workers: int | None = None,
    comparator_index: str = "size",
) -> McDraws:
    """Per-replication records for every design pair on common populations.

    ``comparator_index`` picks the index (``"size"`` or ``"equal"``) that
    S-4O and MT-C first stages use in the regression and covariate
    adjustment analyses, which have no equal/size split of their own.
    """
    if replications < 1:
        raise ValueError("replications must be at least 1")
    if analysis not in ANALYSES:
        raise ValueError(f"analysis must be one of {ANALYSES}, got {analysis!r}")
    if comparator_index not in ("equal", "size"):
        raise ValueError(f"comparator_index must be 'equal' or 'size', got {comparator_index!r}")
    estimands = tuple(estimands)
    for e in estimands:
        if e not in ESTIMANDS:
            raise ValueError(f"unknown estimand {e!r}")
    pairs = _pairs(pairs)
    n_workers = min(worker_count(workers), replications)
    reps = list(range(replications))
    if n_workers == 1:
        records = _run_chunk((dgp, pairs, estimands, analysis, alpha, comparator_index, reps))
    else:
        chunks = [reps[i::n_workers] for i in range(n_workers)]
        with ProcessPoolExecutor(max_workers=n_workers) as ex:
            parts = list(ex.map(_run_chunk, [(dgp, pairs, estimands, analysis, alpha, comparator_index, c) for c in chunks]))
        records = [None] * replications
        for chunk, part in zip(chunks, parts):
            for r, rec in zip(chunk, part):
                records[r] = rec
    values: dict = {}
    for key in records[0]:
        fields = records[0][key].keys()
        values[key] = {f: np.array([rec[key][f] for rec in records], dtype=float) for f in fields}
    return McDraws(values, replications, analysis, dgp.truth())


@dataclass(frozen=True, eq=False)
class McTable:
    """Monte Carlo summary keyed by ``(first, second, name)``."""

    kind: str
    replications: int
    cells: dict
    mc_se: dict

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {"first": f, "second": s, "estimand": e, "value": v, "mc_se": self.mc_se[(f, s, e)]}
            for (f, s, e), v in self.cells.items()
        ]
        return pd.DataFrame(rows, columns=["first", "second", "estimand", "value", "mc_se"])

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "replications": self.replications,
            "cells": [
                {"first": f, "second": s, "estimand": e, "value": float(v), "mc_se": float(self.mc_se[(f, s, e)])}
                for (f, s, e), v in self.cells.items()
            ],
        }

    def format_text(self, digits: int = 4) -> str:
        """First-stage designs as row groups, second-stage designs as columns."""
        df = self.to_frame()
        if df.empty:
            return "(empty table)"
        seconds = [d for d in DESIGNS if d in set(df["second"])]
        firsts = [d for d in DESIGNS if d in set(df["first"])]
        names = list(dict.fromkeys(df["estimand"]))
        w_name = max(len(n) for n in names + ["estimand"])
        text = {k: f"{v:.{digits}f} ({self.mc_se[k]:.{digits}f})" for k, v in self.cells.items()}
        width = max(max(len(t) for t in text.values()), max(len(s) for s in seconds))
        head = f"{'first':<6} {'estimand':<{w_name}} " + " ".join(f"{s:>{width}}" for s in seconds)
        lines = [f"{self.kind}, {self.replications} replications, Monte Carlo se in parentheses", head]
        for f in firsts:
            for n in names:
                cells = [text.get((f, s, n), "").rjust(width) for s in seconds]
                if any(c.strip() for c in cells):
                    lines.append(f"{f:<6} {n:<{w_name}} " + " ".join(cells))
            lines.append("")
        return "\n".join(lines).rstrip() + "\n"

    def summary_lines(self) -> list[str]:
        return [
            f"{f}/{s} {e}: {v:.4f} (mc se {self.mc_se[(f, s, e)]:.4f})"
            for (f, s, e), v in self.cells.items()
        ]


def _ratio_se(a: np.ndarray, b: np.ndarray) -> float:
    """Delta-method standard error of mean(a)/mean(b) for paired draws."""
    R = len(a)
    ma, mb = a.mean(), b.mean()
    if mb == 0 or R < 2:
        return float("nan")
    r = ma / mb
    cov = np.cov(a, b, ddof=1)
    var = (cov[0, 0] - 2 * r * cov[0, 1] + r * r * cov[1, 1]) / (mb * mb * R)
    return float(np.sqrt(max(var, 0.0)))


def tabulate(draws: McDraws, kind: str, baseline: tuple[str, str] = ("C", "C")) -> McTable:
    R = draws.replications
    cells, se = {}, {}
    for key, rec in draws.values.items():
        if kind == "rejection":
            p = rec["reject"].mean()
            cells[key], se[key] = float(p), float(np.sqrt(p * (1 - p) / R))
        elif kind == "mse":
            sq = rec["error"] ** 2
            cells[key] = float(sq.mean())
            se[key] = float(sq.std(ddof=1) / np.sqrt(R)) if R > 1 else float("nan")
        elif kind == "mse_ratio":
            base = draws.values.get(baseline + (key[2],))
            if base is None:
                raise ValueError(f"baseline pair {baseline} missing for {key[2]}")
            a, b = rec["error"] ** 2, base["error"] ** 2
            cells[key] = float(a.mean() / b.mean()) if b.mean() > 0 else float("nan")
            se[key] = 0.0 if key[:2] == baseline else _ratio_se(a, b)
        else:
            raise ValueError(f"unknown table kind {kind!r}")
    return McTable(kind, R, cells, se)


def run_mc_grid(
    dgp: DgpConfig,
    pairs: Sequence,
    estimands: Iterable[str] = tuple(ESTIMANDS),
    replications: int = 1000,
    analysis: str = "adjusted_t",
    alpha: float = 0.05,
    baseline: tuple[str, str] = ("C", "C"),
    workers: int | None = None,
    comparator_index: str = "size",
) -> McTable:
    """Run every design pair on common populations and summarize.

    ``analysis``: ``"adjusted_t"`` and ``"ols_methods"`` give rejection
    rates of the test of a zero effect, ``"mse"`` mean squared errors,
    ``"mse_ratio"`` MSE relative to the ``baseline`` pair (added to the
    run if absent).
    """
    pairs = _pairs(pairs)
    if analysis == "mse_ratio" and DesignPair(*baseline) not in pairs:
        pairs = [DesignPair(*baseline)] + pairs
    analysis_run = "mse" if analysis == "mse_ratio" else analysis
    draws = simulate_draws(dgp, pairs, estimands, replications, analysis_run, alpha, workers, comparator_index)
    if analysis in ("adjusted_t", "ols_methods"):
        return tabulate(draws, "rejection")
    if analysis == "covariate_adjustment":
        return tabulate(draws, "mse")
    return tabulate(draws, analysis, baseline)


# --- config files ----------------------------------------------------------------------


@dataclass(frozen=True)
class SimConfig:
    dgp: DgpConfig
    pairs: tuple[DesignPair, ...]
    estimands: tuple[str, ...] = tuple(ESTIMANDS)
    replications: int = 1000
    analysis: str = "adjusted_t"
    alpha: float = 0.05
    baseline: tuple[str, str] = ("C", "C")
    comparator_index: str = "size"

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        if self.analysis not in ANALYSES:
            raise ValueError(f"analysis must be one of {ANALYSES}")
        if not self.pairs:
            raise ValueError("config lists no design pairs")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")

    @classmethod
    def from_dict(cls, d: Mapping) -> "SimConfig":
        known = {"dgp", "pairs", "estimands", "replications", "analysis", "alpha", "baseline", "grid", "comparator_index"}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys {sorted(extra)}")
        if "dgp" not in d or "seed" not in d["dgp"]:
            raise ValueError("config must set dgp.seed explicitly")
        if d.get("grid") == "full":
            pairs = [DesignPair(f, s) for f in DESIGNS for s in DESIGNS]
        else:
            pairs = [DesignPair(*p) for p in d.get("pairs", [])]
        return cls(
            dgp=DgpConfig.from_dict(d["dgp"]),
            pairs=tuple(pairs),
            estimands=tuple(d.get("estimands", ESTIMANDS)),
            replications=int(d.get("replications", 1000)),
            analysis=d.get("analysis", "adjusted_t"),
            alpha=float(d.get("alpha", 0.05)),
            baseline=tuple(d.get("baseline", ("C", "C"))),
            comparator_index=d.get("comparator_index", "size"),
        )

    @classmethod
    def load(cls, path) -> "SimConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def run(self, workers: int | None = None) -> McTable:
        return run_mc_grid(
            self.dgp, self.pairs, self.estimands, self.replications, self.analysis,
            self.alpha, self.baseline, workers, self.comparator_index,
        )


def with_seed(cfg: DgpConfig, seed: int) -> DgpConfig:
    return replace(cfg, seed=seed)
