#!/usr/bin/env python
# coding: utf-8

# # Which design wins?
#
# A small Monte Carlo on a shared set of populations: complete
# randomization at both stages against stratified and matched designs.
# Each replication has its own random streams, so the table is the same
# whatever the worker count.  Increase `REPS` for tighter numbers.

# In[1]:


from twostage.simulate import DgpConfig, run_mc_grid

REPS = 60
dgp = DgpConfig(g=200, n_range=(20, 40), seed=3)
pairs = [("S-2", "C"), ("S-4O", "C"), ("MT-A", "C"), ("MT-C", "C"), ("MT-C", "MT-C")]


# ## Mean squared error, relative to complete randomization
#
# Ratios below one favour the design.

# In[2]:


mse = run_mc_grid(dgp, pairs, ["theta_p1", "theta_s1"], REPS, analysis="mse_ratio")
print(mse.format_text(3))


# ## Size of the test at a zero effect
#
# Everything should sit near 0.05, within Monte Carlo noise.

# In[3]:


size = run_mc_grid(dgp, [("S-2", "S-2"), ("MT-C", "MT-C")], ["theta_p1", "theta_p2"], REPS)
print(size.format_text(3))
