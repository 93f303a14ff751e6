from __future__ import annotations

import sys

import numpy as np
import pytest

from twostage.core import ClusterRecord, ExperimentPanel, TupleStructure, UnitRecord


def unit(uid, y, z, sampled=True, x=()):
    return UnitRecord(unit_id=str(uid), outcome=float(y), z=int(z), covariates=tuple(x), sampled=sampled)


def worked_panel() -> ExperimentPanel:
    """Four clusters of two units in two matched pairs, with pi1 = pi2 = 1/2."""
    clusters = [
        ClusterRecord("1", 2, (unit("1a", 3, 1), unit("1b", 1, 0)), h=0.5, s_g="t1"),
        ClusterRecord("2", 2, (unit("2a", 1, 0), unit("2b", 1, 0)), h=0.0, s_g="t1"),
        ClusterRecord("3", 2, (unit("3a", 5, 1), unit("3b", 3, 0)), h=0.5, s_g="t2"),
        ClusterRecord("4", 2, (unit("4a", 2, 0), unit("4b", 2, 0)), h=0.0, s_g="t2"),
    ]
    ts = TupleStructure(tuples=(("1", "2"), ("3", "4")), k=2, l=1)
    return ExperimentPanel.from_records(clusters, pi2=0.5, pi1=0.5, tuple_structure=ts)


@pytest.fixture
def worked():
    return worked_panel()


def random_panel(
    rng: np.random.Generator,
    n_pairs: int,
    n_range=(2, 9),
    subsample: bool = True,
    balanced_sample: bool = False,
) -> ExperimentPanel:
    """Matched-pairs panel with random sizes, outcomes and sampled sets.

    Every cluster of a pair has ``floor(N/2)`` treated units when treated.
    With ``balanced_sample`` each treated cluster's sample holds equally many
    treated and untreated units.
    """
    G = 2 * n_pairs
    n = rng.integers(n_range[0], n_range[1] + 1, size=G)
    if balanced_sample:
        n = np.maximum(n, 4)
    treated = np.zeros(G, bool)
    for j in range(n_pairs):
        treated[2 * j + rng.integers(2)] = True
    uc, y, z, samp = [], [], [], []
    for g in range(G):
        N = int(n[g])
        zg = np.zeros(N, int)
        if treated[g]:
            zg[rng.permutation(N)[: N // 2]] = 1
        ones, zeros = np.flatnonzero(zg == 1), np.flatnonzero(zg == 0)
        if balanced_sample:
            half = int(rng.integers(1, N // 2 + 1))
            if treated[g]:
                chosen = np.r_[rng.choice(ones, half, replace=False), rng.choice(zeros, half, replace=False)]
            else:
                chosen = rng.choice(N, 2 * half, replace=False)
        elif subsample:
            m = int(rng.integers(2, N + 1))
            if treated[g]:
                first = [rng.choice(ones), rng.choice(zeros)]
                rest = rng.permutation(np.setdiff1d(np.arange(N), first))[: m - 2]
                chosen = np.r_[first, rest]
            else:
                chosen = rng.choice(N, m, replace=False)
        else:
            chosen = np.arange(N)
        s = np.zeros(N, bool)
        s[chosen] = True
        uc += [g] * N
        y += list(rng.normal(size=N) * 2 + g % 3)
        z += list(zg)
        samp += list(s)
    ts = TupleStructure(tuples=tuple((str(2 * j), str(2 * j + 1)) for j in range(n_pairs)), k=2, l=1)
    return ExperimentPanel(
        cluster_id=[str(g) for g in range(G)],
        n=n,
        h=np.where(treated, 0.5, 0.0),
        s=[f"t{g // 2}" for g in range(G)],
        unit_cluster=uc,
        y=y,
        z=z,
        sampled=samp,
        pi1=0.5,
        pi2=0.5,
        tuple_structure=ts,
    )


def oracle_clusters(panel: ExperimentPanel):
    """Plain-dict view of the sampled data for the loop oracles."""
    out = []
    for g in range(panel.G):
        rows = np.flatnonzero((panel.unit_cluster == g) & panel.sampled)
        out.append(
            {
                "treated": bool(panel.h[g] > 0),
                "n": int(panel.n[g]),
                "units": [(float(panel.y[i]), int(panel.z[i])) for i in rows],
            }
        )
    return out


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "ACCEPTANCE_LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
