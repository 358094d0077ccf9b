"""
Soft values on a small gridworld
================================

Solve a 4x4 gridworld exactly at a few temperatures and watch the softmax
policy sharpen as alpha shrinks toward the hard-max solution.
"""

import numpy as np

from softq.mdp import build_gridworld
from softq.tabular import hard_value_iteration, policy_entropy, soft_value_iteration, softmax_policy

mdp = build_gridworld(4, 4, gamma=0.9)
hard = hard_value_iteration(mdp, episodic=True)

for alpha in (1.0, 0.1, 0.01, 1e-4):
    q = soft_value_iteration(mdp, alpha, episodic=True)
    pi = softmax_policy(q, alpha)
    print(f"alpha={alpha:<6g} mean policy entropy {np.mean(policy_entropy(pi)):.3f}  "
          f"max |Q_soft - Q_hard| {np.max(np.abs(q - hard)):.2e}")

# start-state action values at a moderate temperature
q = soft_value_iteration(mdp, 0.1, episodic=True)
print("Q(start, .) at alpha=0.1:", np.round(q[0], 3))
