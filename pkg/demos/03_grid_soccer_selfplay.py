"""
Self-play on grid soccer
========================

Train the n-step on-policy learner against a gated pool of its own past
snapshots, then play the greedy policy against a uniform-random opponent.
"""

from pathlib import Path

from softq.config import parse_config
from softq.harness import ParameterServer, agent_snapshot, test_worker
from softq.training import TrainingRun

cfg = parse_config(Path(__file__).resolve().parent.parent / "configs" / "grid_soccer_qop.ini")
run = TrainingRun(cfg.replace(total_steps=30_000, eval_interval=5_000))
summary = run.run()

for record in run.evals:
    print(f"env steps {record['env_steps']:>6}  win rate vs random {record['win_rate']:.2f}  "
          f"promotions {record.get('promotions', 0)}")

report = test_worker(ParameterServer(agent_snapshot(run.agent)), lambda: run.env_factory(7), 1000, "random")
print("1000 greedy games vs random:", {k: round(v, 3) for k, v in report.items() if k.endswith("rate")})
