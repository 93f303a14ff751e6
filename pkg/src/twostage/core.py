"""Data model for two-stage cluster randomized experiments.

The panel is columnar: cluster-level arrays of length ``G`` and unit-level
arrays of length ``U`` linked by ``unit_cluster`` (the row position of each
unit's cluster).  Record classes exist for construction and inspection;
every numerical routine in the package works on the arrays.

Identifiers and stratum labels are normalized to ``str`` so that CSV
round-trips are exact.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

__all__ = [
    "UnitRecord",
    "ClusterRecord",
    "TupleStructure",
    "ExperimentPanel",
    "ValidationReport",
    "treated_count",
    "validate_panel",
    "read_panel_csv",
    "write_panel_csv",
]

MODES = ("small_strata", "large_strata", "complete")


def treated_count(pi2: float, n: int | np.ndarray, rounding: str = "floor"):
    """Number of treated units in a treated cluster of size ``n``.

    ``rounding`` is ``"floor"`` (default) or ``"ceil"``.  A small tolerance
    guards against ``0.5 * 10 = 4.999...`` style float artifacts.
    """
    prod = np.asarray(pi2 * np.asarray(n, dtype=float))
    if rounding == "floor":
        out = np.floor(prod + 1e-9)
    elif rounding == "ceil":
        out = np.ceil(prod - 1e-9)
    else:
        raise ValueError(f"rounding must be 'floor' or 'ceil', got {rounding!r}")
    out = out.astype(np.int64)
    return int(out) if out.ndim == 0 else out


def _label(v) -> str | None:
    if v is None:
        return None
    if isinstance(v, float) and math.isnan(v):
        return None
    if isinstance(v, (float, np.floating)) and float(v).is_integer():
        return str(int(v))
    return str(v)


def _labels(values: Iterable) -> np.ndarray:
    vals = [_label(v) for v in values]
    out = np.empty(len(vals), dtype=object)
    out[:] = vals
    return out


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class UnitRecord:
    unit_id: str
    outcome: float
    z: int
    covariates: tuple[float, ...] = ()
    sampled: bool = True
    second_stage_stratum: str | None = None


@dataclass(frozen=True)
class ClusterRecord:
    cluster_id: str
    n_g: int
    units: tuple[UnitRecord, ...]
    h: float
    c_g: tuple[float, ...] = ()
    s_g: str | None = None


@dataclass(frozen=True)
class TupleStructure:
    """Partition of clusters into strata.

    For ``mode="small_strata"`` the ``tuples`` hold the matched tuples
    (each of size ``k`` with ``l`` treated), ordered so that consecutive
    tuples are close in the matching score.  ``large_strata`` maps cluster
    id to a categorical stratum label and is used by the large-strata
    variance estimators.
    """

    tuples: tuple[tuple[str, ...], ...] = ()
    k: int = 2
    l: int = 1
    large_strata: Mapping[str, str] | None = None
    mode: str = "small_strata"
    scores: Mapping[str, float] | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        tuples = tuple(tuple(str(c) for c in t) for t in self.tuples)
        object.__setattr__(self, "tuples", tuples)
        if self.large_strata is not None:
            object.__setattr__(
                self, "large_strata", {str(k): _label(v) for k, v in self.large_strata.items()}
            )
        if self.scores is not None:
            object.__setattr__(self, "scores", {str(k): float(v) for k, v in self.scores.items()})

    @property
    def n_tuples(self) -> int:
        return len(self.tuples)

    def ordered_tuples(self) -> tuple[tuple[str, ...], ...]:
        """Tuples sorted by mean score when scores are known, else as stored."""
        if not self.scores:
            return self.tuples
        means = [np.mean([self.scores[c] for c in t]) for t in self.tuples]
        order = np.argsort(means, kind="stable")
        return tuple(self.tuples[i] for i in order)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "k": self.k,
            "l": self.l,
            "tuples": [list(t) for t in self.tuples],
            "large_strata": dict(self.large_strata) if self.large_strata else None,
            "scores": dict(self.scores) if self.scores else None,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TupleStructure":
        return cls(
            tuples=tuple(tuple(t) for t in d.get("tuples") or ()),
            k=int(d.get("k", 2)),
            l=int(d.get("l", 1)),
            large_strata=d.get("large_strata"),
            mode=d.get("mode", "small_strata"),
            scores=d.get("scores"),
        )


@dataclass(frozen=True, eq=False)
class ExperimentPanel:
    """Observed data of a two-stage experiment, stored column-wise.

    Cluster arrays (length G): ``cluster_id``, ``n`` (true size N_g),
    ``h`` (0 or ``pi2``), ``s`` (stratum/tuple label or None), ``c``
    (G x p covariates).  Unit arrays (length U): ``unit_cluster`` (row of
    the parent cluster), ``unit_id``, ``y``, ``z``, ``sampled``, ``b``
    (second-stage stratum or None), ``x`` (U x q covariates).
    """

    cluster_id: np.ndarray
    n: np.ndarray
    h: np.ndarray
    unit_cluster: np.ndarray
    y: np.ndarray
    z: np.ndarray
    pi2: float
    pi1: float | None = None
    s: np.ndarray | None = None
    c: np.ndarray | None = None
    unit_id: np.ndarray | None = None
    sampled: np.ndarray | None = None
    b: np.ndarray | None = None
    x: np.ndarray | None = None
    tuple_structure: TupleStructure | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        G = len(self.cluster_id)
        U = len(self.unit_cluster)
        set_ = lambda name, val: object.__setattr__(self, name, val)  # noqa: E731
        set_("cluster_id", _readonly(_labels(self.cluster_id)))
        set_("n", _readonly(np.asarray(self.n, dtype=np.int64).reshape(G)))
        set_("h", _readonly(np.asarray(self.h, dtype=float).reshape(G)))
        set_("unit_cluster", _readonly(np.asarray(self.unit_cluster, dtype=np.int64).reshape(U)))
        set_("y", _readonly(np.asarray(self.y, dtype=float).reshape(U)))
        set_("z", _readonly(np.asarray(self.z, dtype=np.int8).reshape(U)))
        set_("s", _readonly(_labels(self.s if self.s is not None else [None] * G)))
        c = np.zeros((G, 0)) if self.c is None else np.asarray(self.c, dtype=float)
        set_("c", _readonly(c.reshape(G, -1)))
        uid = self.unit_id
        if uid is None:
            uid = np.arange(U)
        set_("unit_id", _readonly(_labels(uid)))
        samp = np.ones(U, dtype=bool) if self.sampled is None else np.asarray(self.sampled, dtype=bool)
        set_("sampled", _readonly(samp.reshape(U)))
        set_("b", _readonly(_labels(self.b if self.b is not None else [None] * U)))
        x = np.zeros((U, 0)) if self.x is None else np.asarray(self.x, dtype=float)
        set_("x", _readonly(x.reshape(U, -1) if U else x.reshape(0, x.shape[-1] if x.ndim == 2 else 0)))
        if U and (self.unit_cluster.min() < 0 or self.unit_cluster.max() >= G):
            raise ValueError("unit_cluster refers to a cluster row that does not exist")
        if not 0 < self.pi2 <= 1:
            raise ValueError(f"pi2 must lie in (0, 1], got {self.pi2}")
        if self.pi1 is not None and not 0 < self.pi1 < 1:
            raise ValueError(f"pi1 must lie in (0, 1), got {self.pi1}")

    # --- derived quantities -------------------------------------------------

    @property
    def G(self) -> int:
        return len(self.cluster_id)

    @property
    def treated(self) -> np.ndarray:
        """Boolean cluster indicator I{H_g = pi2}."""
        return self.h > 0

    @property
    def m(self) -> np.ndarray:
        """Number of sampled units M_g per cluster."""
        if "m" not in self._cache:
            self._cache["m"] = np.bincount(
                self.unit_cluster[self.sampled], minlength=self.G
            ).astype(np.int64)
        return self._cache["m"]

    @property
    def empirical_pi1(self) -> float:
        return float(self.treated.mean())

    @property
    def pi1_for_analysis(self) -> float:
        """Design pi1 when known, else the empirical treated share G1/G."""
        return self.pi1 if self.pi1 is not None else self.empirical_pi1

    def cluster_position(self) -> dict[str, int]:
        if "pos" not in self._cache:
            self._cache["pos"] = {cid: i for i, cid in enumerate(self.cluster_id)}
        return self._cache["pos"]

    def tuple_matrix(self, tuple_structure: TupleStructure | None = None) -> np.ndarray:
        """(n_tuples, k) array of cluster rows, in pairing order."""
        ts = tuple_structure or self.tuple_structure
        if ts is None or not ts.tuples:
            raise ValueError("panel has no matched-tuple structure")
        pos = self.cluster_position()
        try:
            rows = [[pos[c] for c in t] for t in ts.ordered_tuples()]
        except KeyError as e:
            raise ValueError(f"tuple refers to unknown cluster id {e.args[0]!r}") from None
        sizes = {len(r) for r in rows}
        if len(sizes) != 1:
            raise ValueError(f"tuples have unequal sizes {sorted(sizes)}")
        return np.asarray(rows, dtype=np.int64)

    def strata_labels(self, tuple_structure: TupleStructure | None = None) -> np.ndarray:
        """Large-stratum label per cluster row.

        Taken from ``tuple_structure.large_strata`` when present, otherwise
        from the ``s`` column; a single stratum if neither is available.
        """
        ts = tuple_structure or self.tuple_structure
        if ts is not None and ts.large_strata:
            return _labels([ts.large_strata.get(cid) for cid in self.cluster_id])
        if ts is not None and ts.mode == "complete":
            return _labels(["all"] * self.G)
        if any(v is not None for v in self.s):
            return self.s
        return _labels(["all"] * self.G)

    def replace(self, **changes) -> "ExperimentPanel":
        fields_ = {
            name: getattr(self, name)
            for name in self.__dataclass_fields__
            if name != "_cache"
        }
        fields_.update(changes)
        return ExperimentPanel(**fields_)

    # --- record views ---------------------------------------------------------

    @classmethod
    def from_records(
        cls,
        clusters: Sequence[ClusterRecord],
        pi2: float,
        pi1: float | None = None,
        tuple_structure: TupleStructure | None = None,
    ) -> "ExperimentPanel":
        uc, uid, y, z, samp, b, x = [], [], [], [], [], [], []
        for g, cl in enumerate(clusters):
            for u in cl.units:
                uc.append(g)
                uid.append(u.unit_id)
                y.append(u.outcome)
                z.append(u.z)
                samp.append(u.sampled)
                b.append(u.second_stage_stratum)
                x.append(tuple(u.covariates))
        q = {len(v) for v in x}
        if len(q) > 1:
            raise ValueError("units carry covariate vectors of different lengths")
        p = {len(cl.c_g) for cl in clusters}
        if len(p) > 1:
            raise ValueError("clusters carry covariate vectors of different lengths")
        return cls(
            cluster_id=[cl.cluster_id for cl in clusters],
            n=[cl.n_g for cl in clusters],
            h=[cl.h for cl in clusters],
            s=[cl.s_g for cl in clusters],
            c=np.array([cl.c_g for cl in clusters], dtype=float).reshape(len(clusters), -1),
            unit_cluster=uc,
            unit_id=uid,
            y=y,
            z=z,
            sampled=samp,
            b=b,
            x=np.array(x, dtype=float).reshape(len(uc), -1),
            pi1=pi1,
            pi2=pi2,
            tuple_structure=tuple_structure,
        )

    def records(self) -> list[ClusterRecord]:
        out = []
        order = np.argsort(self.unit_cluster, kind="stable")
        bounds = np.searchsorted(self.unit_cluster[order], np.arange(self.G + 1))
        for g in range(self.G):
            rows = order[bounds[g]:bounds[g + 1]]
            units = tuple(
                UnitRecord(
                    unit_id=self.unit_id[i],
                    outcome=float(self.y[i]),
                    z=int(self.z[i]),
                    covariates=tuple(float(v) for v in self.x[i]),
                    sampled=bool(self.sampled[i]),
                    second_stage_stratum=self.b[i],
                )
                for i in rows
            )
            out.append(
                ClusterRecord(
                    cluster_id=self.cluster_id[g],
                    n_g=int(self.n[g]),
                    units=units,
                    h=float(self.h[g]),
                    c_g=tuple(float(v) for v in self.c[g]),
                    s_g=self.s[g],
                )
            )
        return out


# --- validation ----------------------------------------------------------------


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[str, ...] = ()
    warnings: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def validate_panel(panel: ExperimentPanel, rounding: str = "floor") -> ValidationReport:
    """Check the structural invariants of a panel.

    Violations are returned, never raised.  The within-cluster treated count
    ``sum(z) == treated_count(pi2, N_g)`` is only checkable when every one of
    the N_g units has a row, so it is skipped for sub-sampled unit files.
    """
    v: list[str] = []
    w: list[str] = []
    G = panel.G
    ids = list(panel.cluster_id)
    if len(set(ids)) != G:
        dup = sorted({c for c in ids if ids.count(c) > 1})
        v.append(f"duplicate cluster ids: {dup}")
    if G < 2:
        v.append(f"need at least 2 clusters, got G={G}")
    bad_h = ~(np.isclose(panel.h, 0.0) | np.isclose(panel.h, panel.pi2))
    if bad_h.any():
        v.append(f"h must be 0 or pi2={panel.pi2}; offending clusters {list(panel.cluster_id[bad_h][:10])}")
    treated = panel.treated
    if not treated.any():
        v.append("no treated clusters (G1=0)")
    if treated.all():
        v.append("no control clusters (G0=0)")

    rows = np.bincount(panel.unit_cluster, minlength=G)
    m = panel.m
    if (panel.n < 1).any():
        v.append("cluster sizes n_g must be positive")
    over = m > panel.n
    if over.any():
        v.append(f"sampled units exceed n_g in clusters {list(panel.cluster_id[over][:10])}")
    few = m < 2
    if few.any():
        v.append(
            "fewer than 2 sampled units (M_g >= 2 required) in clusters "
            f"{list(panel.cluster_id[few][:10])}"
        )
    if panel.z.size:
        z_in_control = np.bincount(panel.unit_cluster, weights=panel.z, minlength=G)
        bad = (~treated) & (z_in_control > 0)
        if bad.any():
            v.append(f"treated units inside control clusters {list(panel.cluster_id[bad][:10])}")
        full = treated & (rows == panel.n)
        target = treated_count(panel.pi2, panel.n, rounding)
        off = full & (z_in_control != target)
        if off.any():
            v.append(
                f"treated unit count differs from {rounding}(pi2*n_g) in clusters "
                f"{list(panel.cluster_id[off][:10])}"
            )
    y_s = panel.y[panel.sampled]
    if y_s.size and not np.isfinite(y_s).all():
        v.append("sampled units have missing or non-finite outcomes")

    ts = panel.tuple_structure
    if ts is not None and ts.mode == "small_strata":
        if ts.k < 2 or not 0 < ts.l < ts.k:
            v.append(f"need k >= 2 and 0 < l < k, got k={ts.k}, l={ts.l}")
        elif math.gcd(ts.l, ts.k) != 1:
            w.append(f"l={ts.l} and k={ts.k} are not coprime")
        flat = [c for t in ts.tuples for c in t]
        if sorted(flat) != sorted(ids) or len(set(flat)) != len(flat):
            v.append("tuples do not partition the cluster ids")
        pos = panel.cluster_position()
        for j, t in enumerate(ts.tuples):
            if len(t) != ts.k:
                v.append(f"tuple {j} has size {len(t)} != k={ts.k}")
                continue
            n_t = sum(bool(treated[pos[c]]) for c in t if c in pos)
            if n_t != ts.l:
                v.append(f"tuple {j}: tuple treated count {n_t} != l={ts.l}")
        if panel.pi1 is not None and not math.isclose(panel.pi1, ts.l / ts.k):
            v.append(f"pi1={panel.pi1} differs from l/k={ts.l}/{ts.k}")
    return ValidationReport(tuple(v), tuple(w))


# --- CSV interchange -----------------------------------------------------------

_FLOAT_FMT = "%.17g"


def write_panel_csv(panel: ExperimentPanel, clusters_path, units_path=None) -> None:
    """Write ``clusters.csv`` and (optionally) ``units.csv``."""
    cl = pd.DataFrame(
        {
            "cluster_id": panel.cluster_id,
            "n_g": panel.n,
            "h": panel.h,
            "s_g": panel.s,
        }
    )
    for j in range(panel.c.shape[1]):
        cl[f"c_{j + 1}"] = panel.c[:, j]
    cl.to_csv(clusters_path, index=False, float_format=_FLOAT_FMT, encoding="utf-8")
    if units_path is None:
        return
    un = pd.DataFrame(
        {
            "cluster_id": panel.cluster_id[panel.unit_cluster],
            "unit_id": panel.unit_id,
            "outcome": panel.y,
            "z": panel.z.astype(int),
            "sampled": panel.sampled.astype(int),
            "b_g": panel.b,
        }
    )
    for j in range(panel.x.shape[1]):
        un[f"x_{j + 1}"] = panel.x[:, j]
    un.to_csv(units_path, index=False, float_format=_FLOAT_FMT, encoding="utf-8")


def _numbered(df: pd.DataFrame, prefix: str) -> list[str]:
    cols = [c for c in df.columns if c.startswith(prefix) and c[len(prefix):].isdigit()]
    return sorted(cols, key=lambda c: int(c[len(prefix):]))


def read_panel_csv(
    clusters_path,
    units_path=None,
    pi2: float | None = None,
    pi1: float | None = None,
    tuple_structure: TupleStructure | None = None,
) -> ExperimentPanel:
    """Read the two-file CSV layout.

    ``pi2`` defaults to the common nonzero value of ``h``.  Missing optional
    columns (``s_g``, ``c_*``, ``sampled``, ``b_g``, ``x_*``, ``z``,
    ``outcome``) are tolerated.
    """
    str_cols = {"cluster_id": str, "s_g": str, "unit_id": str, "b_g": str}
    cl = pd.read_csv(clusters_path, dtype=str_cols, keep_default_na=True, encoding="utf-8")
    for col in ("cluster_id", "n_g"):
        if col not in cl.columns:
            raise ValueError(f"{Path(clusters_path).name}: missing required column {col!r}")
    h = cl["h"].to_numpy(float) if "h" in cl.columns else np.zeros(len(cl))
    if pi2 is None:
        nz = np.unique(h[h > 0])
        if len(nz) > 1:
            raise ValueError(f"clusters carry several nonzero h values {nz.tolist()}")
        pi2 = float(nz[0]) if len(nz) else 0.5
    c_cols = _numbered(cl, "c_")
    ids = cl["cluster_id"].tolist()
    if units_path is not None:
        un = pd.read_csv(units_path, dtype=str_cols, encoding="utf-8")
        for col in ("cluster_id", "unit_id"):
            if col not in un.columns:
                raise ValueError(f"{Path(units_path).name}: missing required column {col!r}")
        pos = {cid: i for i, cid in enumerate(ids)}
        unknown = set(un["cluster_id"]) - set(pos)
        if unknown:
            raise ValueError(f"units reference unknown clusters {sorted(unknown)[:5]}")
        uc = un["cluster_id"].map(pos).to_numpy()
        U = len(un)
        y = un["outcome"].to_numpy(float) if "outcome" in un.columns else np.full(U, np.nan)
        z = un["z"].to_numpy(int) if "z" in un.columns else np.zeros(U, int)
        samp = un["sampled"].to_numpy(int).astype(bool) if "sampled" in un.columns else None
        b = un["b_g"].tolist() if "b_g" in un.columns else None
        x_cols = _numbered(un, "x_")
        x = un[x_cols].to_numpy(float) if x_cols else None
        uid = un["unit_id"].tolist()
    else:
        uc, y, z, samp, b, x, uid = [], [], [], None, None, None, []
    return ExperimentPanel(
        cluster_id=ids,
        n=cl["n_g"].to_numpy(int),
        h=h,
        s=cl["s_g"].tolist() if "s_g" in cl.columns else None,
        c=cl[c_cols].to_numpy(float) if c_cols else None,
        unit_cluster=uc,
        unit_id=uid,
        y=y,
        z=z,
        sampled=samp,
        b=b,
        x=x,
        pi2=pi2,
        pi1=pi1,
        tuple_structure=tuple_structure,
    )


def warn_if_invalid(report: ValidationReport) -> None:
    for msg in report.warnings:
        warnings.warn(msg, stacklevel=2)
