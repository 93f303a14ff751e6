"""Slow, loop-based reference implementations used to check the library.

Each function works from plain Python lists and dicts and follows the
defining sums term by term, sharing no code with the package.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def arm_means(clusters):
    """clusters: list of dicts with keys treated, units=[(y, z)] (sampled units only)."""
    out = []
    for cl in clusters:
        ys = [y for y, _ in cl["units"]]
        if cl["treated"]:
            y1 = [y for y, z in cl["units"] if z == 1]
            y0 = [y for y, z in cl["units"] if z == 0]
            out.append({1: sum(y1) / len(y1), 0: sum(y0) / len(y0)})
        else:
            m = sum(ys) / len(ys)
            out.append({1: m, 0: m})
    return out


def estimators(clusters):
    means = arm_means(clusters)
    t = [i for i, c in enumerate(clusters) if c["treated"]]
    c = [i for i, cl in enumerate(clusters) if not cl["treated"]]
    n = [cl["n"] for cl in clusters]

    def avg(ix, z):
        return sum(means[i][z] for i in ix) / len(ix)

    def wavg(ix, z):
        return sum(n[i] * means[i][z] for i in ix) / sum(n[i] for i in ix)

    return {
        "theta_p1": avg(t, 1) - avg(c, 1),
        "theta_s1": avg(t, 0) - avg(c, 0),
        "theta_p2": wavg(t, 1) - wavg(c, 1),
        "theta_s2": wavg(t, 0) - wavg(c, 0),
    }


def pairs_of_pairs_variance(values, treated, tuples, pi1):
    """Matched-tuple variance from the Gamma, sigma^2 and rho sums.

    ``tuples`` lists cluster indices per tuple, already in pairing order.
    Returns the total and a dict of intermediates.
    """
    n = len(tuples)
    k = len(tuples[0])
    l = sum(1 for i in tuples[0] if treated[i])
    kh = {1: l, 0: k - l}
    gamma, sigma2, rho = {}, {}, {}
    for h in (1, 0):
        members = [i for t in tuples for i in t if bool(treated[i]) == bool(h)]
        gamma[h] = sum(values[i] for i in members) / (n * kh[h])
        sigma2[h] = sum((values[i] - gamma[h]) ** 2 for i in members) / (n * kh[h])
        total = 0.0
        for j in range(n // 2):
            a = sum(values[i] for i in tuples[2 * j] if bool(treated[i]) == bool(h))
            b = sum(values[i] for i in tuples[2 * j + 1] if bool(treated[i]) == bool(h))
            total += a * b / kh[h] ** 2
        rho[(h, h)] = total / (n // 2)
    cross = 0.0
    for t in tuples:
        a = sum(values[i] for i in t if treated[i])
        b = sum(values[i] for i in t if not treated[i])
        cross += a * b / (l * (k - l))
    rho[(1, 0)] = cross / n
    v1 = {h: sigma2[h] - (rho[(h, h)] - gamma[h] ** 2) for h in (1, 0)}
    v2 = {hh: rho[hh] - gamma[hh[0]] * gamma[hh[1]] for hh in rho}
    total = v1[1] / pi1 + v1[0] / (1 - pi1) + v2[(1, 1)] + v2[(0, 0)] - 2 * v2[(1, 0)]
    return total, {"gamma": gamma, "sigma2": sigma2, "rho": rho}


def large_strata_variance(values_z, values_0, treated, strata, pi1, tau=0.0, centered=True):
    G = len(treated)
    labels = sorted(set(strata))
    t = [g for g in range(G) if treated[g]]
    c = [g for g in range(G) if not treated[g]]
    ybar1 = sum(values_z[g] for g in t) / len(t)
    ybar0 = sum(values_0[g] for g in c) / len(c)
    share, mu1, mu0 = {}, {}, {}
    for s in labels:
        share[s] = sum(1 for g in range(G) if strata[g] == s) / G
        ts = [g for g in t if strata[g] == s]
        cs = [g for g in c if strata[g] == s]
        mu1[s] = sum(values_z[g] for g in ts) / len(ts)
        mu0[s] = sum(values_0[g] for g in cs) / len(cs)
    term1 = (sum(values_z[g] ** 2 for g in t) / len(t) - sum(share[s] * mu1[s] ** 2 for s in labels)) / pi1
    term0 = (sum(values_0[g] ** 2 for g in c) / len(c) - sum(share[s] * mu0[s] ** 2 for s in labels)) / (1 - pi1)
    between = imbalance = 0.0
    for s in labels:
        d1 = mu1[s] - ybar1 if centered else mu1[s]
        d0 = mu0[s] - ybar0 if centered else mu0[s]
        between += share[s] * (d1 - d0) ** 2
        imbalance += tau * share[s] * (d1 / pi1 + d0 / (1 - pi1)) ** 2
    return term1 + term0 + between + imbalance


def wls_slopes(y, X, w):
    """Weighted least squares through the normal equations."""
    X = np.asarray(X, float)
    W = np.diag(np.asarray(w, float))
    return np.linalg.solve(X.T @ W @ X, X.T @ W @ np.asarray(y, float))


def cluster_sandwich(y, X, w, cluster):
    """Plain cluster-robust sandwich, summing per-cluster score outer products."""
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    w = np.asarray(w, float)
    beta = wls_slopes(y, X, w)
    e = y - X @ beta
    bread = np.linalg.inv(X.T @ np.diag(w) @ X)
    p = X.shape[1]
    meat = np.zeros((p, p))
    for g in sorted(set(cluster)):
        s = np.zeros(p)
        for i in range(len(y)):
            if cluster[i] == g:
                s += X[i] * w[i] * e[i]
        meat += np.outer(s, s)
    return beta, bread @ meat @ bread


def enumerate_two_stage(outcomes, tuples, pi2=0.5):
    """Every first-stage draw of a matched-pairs design with its second-stage draws.

    ``outcomes[g]`` maps (z, h) -> list of unit potential outcomes for
    cluster g with keys (1, 1), (0, 1), (0, 0) where h=1 means treated.
    Yields ``(treated flags, list of unit z assignments)``; first-stage
    draws are equally likely, and so are the second-stage draws within one.
    """
    G = len(outcomes)
    sizes = [len(outcomes[g][(0, 0)]) for g in range(G)]
    for picks in itertools.product(*[list(t) for t in tuples]):
        treated = [g in picks for g in range(G)]
        choices = []
        for g in range(G):
            if treated[g]:
                m = math.floor(pi2 * sizes[g])
                subsets = list(itertools.combinations(range(sizes[g]), m))
                choices.append([[1 if i in s else 0 for i in range(sizes[g])] for s in subsets])
            else:
                choices.append([[0] * sizes[g]])
        yield treated, [[list(z) for z in zs] for zs in itertools.product(*choices)]
