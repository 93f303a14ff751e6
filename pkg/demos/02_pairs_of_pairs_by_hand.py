#!/usr/bin/env python
# coding: utf-8

# # Pairs of pairs, by hand
#
# Four clusters of two units, two pairs, one treated cluster per pair.
# Treated unit outcomes are 3 and 5 in the treated clusters, and the
# control clusters average 1 and 2.  The variance estimate is small enough
# to check on paper.

# In[1]:


import numpy as np

from twostage.core import ClusterRecord, ExperimentPanel, TupleStructure, UnitRecord
from twostage.variance import small_strata_components, v_hat_small_strata

clusters = [
    ClusterRecord("1", 2, (UnitRecord("1a", 3, 1), UnitRecord("1b", 1, 0)), h=0.5, s_g="p1"),
    ClusterRecord("2", 2, (UnitRecord("2a", 1, 0), UnitRecord("2b", 1, 0)), h=0.0, s_g="p1"),
    ClusterRecord("3", 2, (UnitRecord("3a", 5, 1), UnitRecord("3b", 3, 0)), h=0.5, s_g="p2"),
    ClusterRecord("4", 2, (UnitRecord("4a", 2, 0), UnitRecord("4b", 2, 0)), h=0.0, s_g="p2"),
]
pairs = TupleStructure(tuples=(("1", "2"), ("3", "4")), k=2, l=1)
panel = ExperimentPanel.from_records(clusters, pi2=0.5, pi1=0.5, tuple_structure=pairs)


# The pieces: arm means of squares, within-pair spreads, and cross-pair
# products taken between adjacent pairs.

# In[2]:


y1 = np.array([3.0, 1.0, 5.0, 2.0])
treated = np.array([True, False, True, False])
parts = small_strata_components(y1, treated, panel.tuple_matrix())
print("mean squares ", parts.gamma)
print("within pair  ", parts.sigma2)
print("across pairs ", parts.rho_same, parts.rho_cross)


# In[3]:


v = v_hat_small_strata(panel, z_arm=1)
print("V =", v.v)   # 2.75

# doubling every outcome quadruples it
doubled = panel.replace(y=2 * panel.y)
print(v_hat_small_strata(doubled, z_arm=1).v / v.v)
