"""
Soft-Q regression as a policy gradient
======================================

Regressing Q(s, a) on a fixed target gives the same parameter gradient as
value regression plus an entropy-regularized policy gradient, once Q is
split into V + alpha log pi. Check it on a random network.
"""

import numpy as np

from softq.nn import mlp_init
from softq.spg import relative_deviation, sample_batch, spg_gradient, spg_terms, sql_gradient

params = mlp_init((8, 16, 4), seed=0)
obs, actions, targets = sample_batch(params, 32, alpha=0.7, rng=np.random.default_rng(0))

g_sql = sql_gradient(params, obs, actions, targets)
g_spg = spg_gradient(params, obs, actions, targets, 0.7)
value, policy = spg_terms(params, obs, actions, targets, 0.7)

print("relative deviation, full decomposition:", relative_deviation(g_spg, g_sql))
print("relative deviation, value term only:   ", relative_deviation(value, g_sql))
print("policy term norm:", np.linalg.norm(policy.flat()))
