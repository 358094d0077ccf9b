"""Maximum-entropy (soft) Q-learning in numpy.

Tabular soft solvers, a small MLP with hand-written backpropagation, the
SQN / SQN-CF / QOP learners, a gradient-equivalence checker, a threaded
actor-learner harness and self-play utilities.
"""

from .agents import QOP, SQN, SQN_CF, make_agent, tabular_consistency_probe
from .config import ExperimentConfig, parse_config
from .mdp import TabularMdp, build_chain, build_gridworld, build_random_mdp
from .tabular import soft_policy_iteration, soft_value_iteration
from .training import run_reuse_sweep, run_training
from .verification import run_verify

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig", "QOP", "SQN", "SQN_CF", "TabularMdp", "build_chain", "build_gridworld", "build_random_mdp",
    "make_agent", "parse_config", "run_reuse_sweep", "run_training", "run_verify", "soft_policy_iteration",
    "soft_value_iteration", "tabular_consistency_probe",
]
