"""First-stage (cluster) and second-stage (unit) treatment assignment.

Every routine is a pure function of its inputs and an integer seed.  Seeds
are expanded with :class:`numpy.random.SeedSequence` into Philox streams;
``rng_stream(seed, g)`` is the stream reserved for cluster row ``g``, so a
cluster's draw does not depend on how many other clusters exist or on the
order in which they are processed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .core import ClusterRecord, TupleStructure, treated_count

__all__ = [
    "rng_stream",
    "FirstStageDesign",
    "SecondStageDesign",
    "FirstStageAssignment",
    "match_tuples",
    "stratified_block_assign",
    "complete_randomize",
    "assign_first_stage",
    "assign_second_stage",
    "assign_second_stage_units",
    "second_stage_groups",
    "grouped_draw",
    "cluster_score",
    "unit_score",
    "optimal_index",
]

MECHANISMS = ("complete", "sbr", "matched_tuples")


def rng_stream(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based generator for ``seed`` and an optional stream path."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


# --- design descriptions -------------------------------------------------------


@dataclass(frozen=True)
class FirstStageDesign:
    """Cluster-level randomization.

    ``score_source`` names the stratification variable: ``"c_<j>"`` for a
    cluster covariate column, ``"n_g"`` for cluster size, ``"index_equal"``
    (``c_1 + n_g/100``) and ``"index_size"`` (``n_g*(c_1 + n_g/100) - 25 n_g/3``)
    for the optimal indices of the simulation design, or ``"s_g"`` for
    categorical strata already present on the clusters.  For ``sbr``,
    strata come from fixed ``cutoffs`` when given, otherwise from
    ``n_strata`` empirical quantile bins of the score.
    """

    mechanism: str = "complete"
    k: int = 2
    l: int = 1
    pi1: float | None = None
    score_source: str | None = None
    n_strata: int | None = None
    cutoffs: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise ValueError(f"unknown first-stage mechanism {self.mechanism!r}")
        if self.mechanism == "matched_tuples":
            if self.k < 2 or not 0 < self.l < self.k:
                raise ValueError(f"need k >= 2 and 0 < l < k, got k={self.k}, l={self.l}")
            if self.pi1 is not None and not np.isclose(self.pi1, self.l / self.k):
                raise ValueError(
                    f"pi1={self.pi1} contradicts l/k={self.l}/{self.k} for matched tuples"
                )
            if self.score_source is None:
                raise ValueError("matched tuples need a score_source")
        else:
            if self.pi1 is None or not 0 < self.pi1 < 1:
                raise ValueError(f"{self.mechanism} design needs pi1 in (0, 1), got {self.pi1}")
        if self.mechanism == "sbr" and self.score_source is None:
            raise ValueError("sbr design needs a score_source")
        if self.cutoffs is not None:
            object.__setattr__(self, "cutoffs", tuple(float(c) for c in self.cutoffs))

    @property
    def treated_share(self) -> float:
        return self.l / self.k if self.mechanism == "matched_tuples" else float(self.pi1)

    def to_dict(self) -> dict:
        return {
            "mechanism": self.mechanism,
            "k": self.k,
            "l": self.l,
            "pi1": self.treated_share,
            "score_source": self.score_source,
            "n_strata": self.n_strata,
            "cutoffs": list(self.cutoffs) if self.cutoffs else None,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FirstStageDesign":
        known = {"mechanism", "k", "l", "pi1", "score_source", "n_strata", "cutoffs"}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown first-stage keys {sorted(extra)}")
        return cls(**d)


@dataclass(frozen=True)
class SecondStageDesign:
    """Unit-level randomization inside treated clusters.

    ``score_source``: ``"x_<j>"`` for a unit covariate, ``"x_1/(x_2+0.1)"``
    for the ratio index, or ``"b_g"`` for categorical strata on the units.
    Matched tuples group ``k2`` adjacent units, where ``k2`` is the
    denominator of ``pi2``.
    """

    mechanism: str = "complete"
    pi2: float = 0.5
    score_source: str | None = None
    n_strata: int = 2
    rounding: str = "floor"

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise ValueError(f"unknown second-stage mechanism {self.mechanism!r}")
        if not 0 < self.pi2 <= 1:
            raise ValueError(f"pi2 must lie in (0, 1], got {self.pi2}")
        if self.mechanism != "complete" and self.score_source is None:
            raise ValueError(f"{self.mechanism} second stage needs a score_source")

    @property
    def tuple_size(self) -> int:
        return Fraction(self.pi2).limit_denominator(1000).denominator

    def to_dict(self) -> dict:
        return {
            "mechanism": self.mechanism,
            "pi2": self.pi2,
            "score_source": self.score_source,
            "n_strata": self.n_strata,
            "rounding": self.rounding,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SecondStageDesign":
        known = {"mechanism", "pi2", "score_source", "n_strata", "rounding"}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown second-stage keys {sorted(extra)}")
        return cls(**d)


@dataclass(frozen=True)
class FirstStageAssignment:
    treated: np.ndarray
    tuple_structure: TupleStructure = field(repr=False)

    def h(self, pi2: float) -> np.ndarray:
        return np.where(self.treated, pi2, 0.0)


# --- score helpers ---------------------------------------------------------------


def optimal_index(c, n, weighting: str = "equal"):
    """Optimal first-stage stratification index of the simulation design."""
    c = np.asarray(c, dtype=float)
    n = np.asarray(n, dtype=float)
    if weighting == "equal":
        return c + n / 100.0
    if weighting == "size":
        return n * (c + n / 100.0) - (25.0 / 3.0) * n
    raise ValueError(f"weighting must be 'equal' or 'size', got {weighting!r}")


def _column(source: str, prefix: str, mat: np.ndarray) -> np.ndarray:
    j = int(source[len(prefix):]) - 1
    if not 0 <= j < mat.shape[1]:
        raise ValueError(f"score column {source!r} not present ({mat.shape[1]} available)")
    return mat[:, j]


def cluster_score(source: str, c: np.ndarray, n: np.ndarray) -> np.ndarray:
    """Resolve a first-stage ``score_source`` to one real per cluster."""
    c = np.asarray(c, dtype=float).reshape(len(n), -1)
    if source == "n_g":
        return np.asarray(n, dtype=float)
    if source in ("index_equal", "index_size"):
        return optimal_index(_column("c_1", "c_", c), n, source.split("_")[1])
    if source.startswith("c_"):
        return _column(source, "c_", c)
    raise ValueError(f"unknown cluster score source {source!r}")


def unit_score(source: str, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if source == "x_1/(x_2+0.1)":
        return _column("x_1", "x_", x) / (_column("x_2", "x_", x) + 0.1)
    if source.startswith("x_"):
        return _column(source, "x_", x)
    raise ValueError(f"unknown unit score source {source!r}")


# --- first stage -----------------------------------------------------------------


def _ids(g: int, cluster_ids) -> list[str]:
    if cluster_ids is None:
        return [str(i) for i in range(g)]
    if len(cluster_ids) != g:
        raise ValueError("cluster_ids and scores differ in length")
    return [str(c) for c in cluster_ids]


def match_tuples(
    scores: Sequence[float],
    k: int = 2,
    l: int = 1,
    seed: int = 0,
    cluster_ids: Sequence | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[TupleStructure, np.ndarray]:
    """Sort clusters by score, block consecutive runs of ``k``, treat ``l`` per block.

    Ties keep input order.  Returns the tuple structure (tuples listed in
    ascending score order) and a boolean treated indicator per cluster.
    """
    scores = np.asarray(scores, dtype=float)
    g = len(scores)
    if k < 2 or not 0 < l < k:
        raise ValueError(f"need k >= 2 and 0 < l < k, got k={k}, l={l}")
    if g % k:
        raise ValueError(f"G={g} is not divisible by k={k} (remainder {g % k})")
    rng = rng if rng is not None else rng_stream(seed)
    order = np.argsort(scores, kind="stable")
    blocks = order.reshape(-1, k)
    rank = np.argsort(rng.random(blocks.shape), axis=1, kind="stable").argsort(axis=1)
    treated = np.zeros(g, dtype=bool)
    treated[blocks[rank < l]] = True
    ids = _ids(g, cluster_ids)
    ts = TupleStructure(
        tuples=tuple(tuple(ids[i] for i in b) for b in blocks),
        k=k,
        l=l,
        mode="small_strata",
        scores={ids[i]: float(scores[i]) for i in range(g)},
    )
    return ts, treated


def _treat_within(labels: np.ndarray, counts: Mapping, rng: np.random.Generator) -> np.ndarray:
    """Treat ``counts[s]`` uniformly chosen members of every label group ``s``."""
    uniq, inv = np.unique(labels, return_inverse=True)
    keys = rng.random(len(labels))
    order = np.lexsort((keys, inv))
    start = np.searchsorted(inv[order], np.arange(len(uniq)))
    rank = np.empty(len(labels), dtype=np.int64)
    rank[order] = np.arange(len(labels)) - start[inv[order]]
    quota = np.array([counts[u] for u in uniq])
    return rank < quota[inv]


def stratified_block_assign(
    strata: Sequence,
    pi1: float,
    seed: int = 0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Complete randomization of ``floor(pi1 * G(s))`` clusters inside each stratum."""
    if not 0 < pi1 < 1:
        raise ValueError(f"pi1 must lie in (0, 1), got {pi1}")
    labels = np.asarray([None if s is None else str(s) for s in strata], dtype=object)
    if len(labels) == 0:
        raise ValueError("no clusters to assign")
    if any(s is None for s in labels):
        raise ValueError("every cluster needs a stratum label")
    uniq, sizes = np.unique(labels.astype(str), return_counts=True)
    small = [u for u, s in zip(uniq, sizes) if s < 2]
    if small:
        raise ValueError(f"strata with fewer than 2 clusters: {small}")
    counts = {u: int(np.floor(pi1 * s + 1e-9)) for u, s in zip(uniq, sizes)}
    rng = rng if rng is not None else rng_stream(seed)
    return _treat_within(labels.astype(str), counts, rng)


def complete_randomize(
    g: int, pi1: float, seed: int = 0, rng: np.random.Generator | None = None
) -> np.ndarray:
    """Treat exactly ``floor(pi1 * g)`` of ``g`` clusters, uniformly over subsets."""
    if not 0 < pi1 < 1:
        raise ValueError(f"pi1 must lie in (0, 1), got {pi1}")
    g1 = int(np.floor(pi1 * g + 1e-9))
    if g1 < 1:
        raise ValueError(f"floor(pi1*g) = 0 for g={g}, pi1={pi1}: no cluster would be treated")
    rng = rng if rng is not None else rng_stream(seed)
    treated = np.zeros(g, dtype=bool)
    treated[rng.permutation(g)[:g1]] = True
    return treated


def quantile_bins(scores: np.ndarray, n_bins: int) -> np.ndarray:
    """Equal-count bins by rank (ties keep input order)."""
    g = len(scores)
    rank = np.empty(g, dtype=np.int64)
    rank[np.argsort(scores, kind="stable")] = np.arange(g)
    return (rank * n_bins) // g


def assign_first_stage(
    design: FirstStageDesign,
    c: np.ndarray,
    n: np.ndarray,
    seed: int = 0,
    cluster_ids: Sequence | None = None,
    s: Sequence | None = None,
    rng: np.random.Generator | None = None,
) -> FirstStageAssignment:
    """Dispatch on ``design.mechanism`` and return treated flags plus strata."""
    g = len(n)
    ids = _ids(g, cluster_ids)
    rng = rng if rng is not None else rng_stream(seed)
    if design.mechanism == "matched_tuples":
        ts, treated = match_tuples(
            cluster_score(design.score_source, c, n), design.k, design.l, cluster_ids=ids, rng=rng
        )
        return FirstStageAssignment(treated, ts)
    if design.mechanism == "complete":
        treated = complete_randomize(g, design.pi1, rng=rng)
        ts = TupleStructure(mode="complete", large_strata={i: "all" for i in ids})
        return FirstStageAssignment(treated, ts)
    if design.score_source == "s_g":
        if s is None:
            raise ValueError("score_source 's_g' needs stratum labels on the clusters")
        labels = np.asarray([str(v) for v in s])
    else:
        score = cluster_score(design.score_source, c, n)
        if design.cutoffs:
            labels = np.digitize(score, design.cutoffs).astype(str)
        else:
            labels = quantile_bins(score, design.n_strata or 2).astype(str)
    treated = stratified_block_assign(labels, design.pi1, rng=rng)
    ts = TupleStructure(mode="large_strata", large_strata=dict(zip(ids, labels.tolist())))
    return FirstStageAssignment(treated, ts)


# --- second stage ------------------------------------------------------------------


def _within_rank(cluster: np.ndarray, key: np.ndarray, n_clusters: int):
    order = np.lexsort((key, cluster))
    start = np.searchsorted(cluster[order], np.arange(n_clusters + 1))
    rank = np.empty(len(cluster), dtype=np.int64)
    rank[order] = np.arange(len(cluster)) - start[cluster[order]]
    return rank, np.diff(start)


def second_stage_groups(
    design: SecondStageDesign,
    unit_cluster: np.ndarray,
    n_clusters: int,
    x: np.ndarray | None = None,
    b: Sequence | None = None,
    tie_key: np.ndarray | None = None,
) -> np.ndarray:
    """Group code per unit; groups never span clusters.

    ``tie_key`` holds one uniform per unit.  It breaks score ties, so that
    units with equal scores are grouped in random order, and for matched
    tuples of size ``k2`` it picks the ``N_g mod k2`` units that a cluster
    sets aside as a separate short group when its size is not a multiple
    of ``k2``.  Picking those units at random keeps every unit's treatment
    probability equal; always leaving out the top-ranked unit would tie
    its treatment status to its score.  Without ``tie_key`` ties keep
    input order.
    """
    unit_cluster = np.asarray(unit_cluster, dtype=np.int64)
    if design.mechanism == "complete":
        return unit_cluster.copy()
    if design.score_source == "b_g":
        if b is None or any(v is None for v in b):
            raise ValueError("score_source 'b_g' needs a stratum label on every unit")
        _, lab = np.unique(np.asarray([str(v) for v in b]), return_inverse=True)
        width = lab.max() + 1
        return unit_cluster * width + lab
    score = unit_score(design.score_source, x)
    order = np.argsort(score, kind="stable") if tie_key is None else np.lexsort((tie_key, score))
    score_rank = np.empty(len(score), dtype=np.int64)
    score_rank[order] = np.arange(len(score))
    rank, sizes = _within_rank(unit_cluster, score_rank, n_clusters)
    if design.mechanism == "sbr":
        sub = (rank * design.n_strata) // sizes[unit_cluster]
        return unit_cluster * design.n_strata + sub
    k2 = design.tuple_size
    extra = sizes % k2
    if extra.any():
        if tie_key is None:
            raise ValueError("matched second stage needs tie_key when cluster sizes are not multiples of the tuple size")
        key_rank, _ = _within_rank(unit_cluster, tie_key, n_clusters)
        aside = key_rank < extra[unit_cluster]
        # rank the remaining units among themselves
        shifted = np.where(aside, -1, score_rank)
        rank, _ = _within_rank(unit_cluster, shifted, n_clusters)
        rank = rank - extra[unit_cluster]
        sub = np.where(aside, -1, rank // k2)
    else:
        sub = rank // k2
    width = int(sizes.max()) // k2 + 2 if len(sizes) else 2
    return unit_cluster * width + sub + 1


def grouped_draw(
    unit_cluster: np.ndarray,
    group: np.ndarray,
    cluster_treated: np.ndarray,
    pi2: float,
    keys: np.ndarray,
    rounding: str = "floor",
) -> np.ndarray:
    """Treat ``floor(pi2 * |group|)`` units per group, then top up per cluster.

    ``keys`` is a ``(2, U)`` (or larger) array of uniforms: row 0 ranks
    units inside a group, row 1 picks which groups with a fractional
    remainder get one extra treated unit so that each treated cluster
    reaches its target.
    """
    unit_cluster = np.asarray(unit_cluster, dtype=np.int64)
    group = np.asarray(group, dtype=np.int64)
    U = len(unit_cluster)
    G = len(cluster_treated)
    if U == 0:
        return np.zeros(0, dtype=np.int8)
    _, gid = np.unique(group, return_inverse=True)
    g_rank, g_size = _within_rank(gid, keys[0], gid.max() + 1)
    base = np.floor(pi2 * g_size + 1e-9).astype(np.int64)
    z = g_rank < base[gid]

    n_units = np.bincount(unit_cluster, minlength=G)
    target = treated_count(pi2, n_units, rounding)
    got = np.bincount(unit_cluster, weights=z, minlength=G).astype(np.int64)
    deficit = target - got
    frac = pi2 * g_size - base > 1e-9
    candidate = frac[gid] & (g_rank == base[gid])
    c_rank, _ = _within_rank(unit_cluster, np.where(candidate, keys[1], 2.0), G)
    z |= candidate & (c_rank < deficit[unit_cluster])
    if rounding == "ceil":
        # ceil targets can exceed the fractional top-up; finish with any untreated unit
        short = target - np.bincount(unit_cluster, weights=z, minlength=G).astype(np.int64)
        if (short > 0).any():
            r2, _ = _within_rank(unit_cluster, np.where(z, 2.0, keys[1]), G)
            z |= r2 < short[unit_cluster]
    return (z & np.asarray(cluster_treated, dtype=bool)[unit_cluster]).astype(np.int8)


def assign_second_stage_units(
    design: SecondStageDesign,
    unit_cluster: np.ndarray,
    cluster_treated: np.ndarray,
    seed: int = 0,
    x: np.ndarray | None = None,
    b: Sequence | None = None,
    keys: np.ndarray | None = None,
) -> np.ndarray:
    """Second-stage draw for a whole panel of units.

    ``keys`` is a ``(3, U)`` array of uniforms.  Without it, cluster row
    ``g`` draws its uniforms from
    ``rng_stream(seed, g)`` so results match per-cluster assignment.
    """
    unit_cluster = np.asarray(unit_cluster, dtype=np.int64)
    G = len(cluster_treated)
    sizes = np.bincount(unit_cluster, minlength=G)
    tiny = np.asarray(cluster_treated, bool) & (design.pi2 * sizes < 1 - 1e-9)
    if tiny.any():
        raise ValueError(
            f"cluster too small to treat any unit (rows {np.flatnonzero(tiny)[:10].tolist()})"
        )
    if keys is None:
        keys = np.empty((3, len(unit_cluster)))
        for g in range(G):
            rows = np.flatnonzero(unit_cluster == g)
            if rows.size:
                keys[:, rows] = rng_stream(seed, g).random((3, rows.size))
    group = second_stage_groups(design, unit_cluster, G, x=x, b=b, tie_key=keys[2])
    return grouped_draw(unit_cluster, group, cluster_treated, design.pi2, keys, design.rounding)


def assign_second_stage(
    cluster: ClusterRecord, design: SecondStageDesign, seed: int = 0, stream: int = 0
) -> np.ndarray:
    """Unit treatment vector for one cluster; all zeros for a control cluster.

    ``stream`` is the cluster's stream index (its row in the panel), so
    assigning clusters one at a time reproduces the panel-level result.
    """
    u = len(cluster.units)
    if u != cluster.n_g:
        raise ValueError(
            f"cluster {cluster.cluster_id}: second-stage assignment needs all n_g={cluster.n_g} units, got {u}"
        )
    if cluster.h == 0:
        return np.zeros(u, dtype=np.int8)
    if design.pi2 * u < 1 - 1e-9:
        raise ValueError(f"cluster {cluster.cluster_id} too small to treat any unit")
    x = np.array([un.covariates for un in cluster.units], dtype=float).reshape(u, -1)
    b = [un.second_stage_stratum for un in cluster.units]
    keys = rng_stream(seed, stream).random((3, u))
    group = second_stage_groups(design, np.zeros(u, np.int64), 1, x=x, b=b, tie_key=keys[2])
    return grouped_draw(np.zeros(u, np.int64), group, np.array([True]), design.pi2, keys, design.rounding)
