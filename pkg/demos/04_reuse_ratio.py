"""
How often is each segment reused?
=================================

The trainer waits whenever consuming another batch would push
(segments consumed) / (segments produced) above its target. Run the
threaded harness at a few targets and compare the measured ratio.
"""

from softq.config import ExperimentConfig
from softq.training import TrainingRun

for target in (0.5, 1.0, 4.0):
    cfg = ExperimentConfig(mode="threaded", total_steps=20_000, reuse_ratio_target=target, hidden_sizes=(32,),
                           eval_interval=10_000)
    summary = TrainingRun(cfg).run()
    print(f"target {target:>3}: measured {summary['reuse_ratio']:.3f}, {summary['grad_steps']} gradient steps, "
          f"tabular gap {summary['tabular_gap']:.3f}")
