"""Wires environments, agent, harness and self-play into a training run.

``sync`` mode interleaves rollout workers and the trainer in one thread,
which makes fixed-seed runs bit-reproducible. ``threaded`` mode runs each
rollout worker, the cache and the trainer in their own threads.
"""

from __future__ import annotations

import csv
import io
import json
import threading
import time
from pathlib import Path

import numpy as np

from .agents import AgentState, make_agent, tabular_consistency_probe
from .checkpoint import save_agent, save_snapshot
from .config import ExperimentConfig, serialize_config
from .envs import GridSoccer, GridSoccerConfig, TabularEnv
from .harness import (Cache, ParameterServer, ReplayBuffer, ReuseRatioMeter, RolloutWorker, Trainer,
                      UndefinedRatio, agent_snapshot, rollout_worker, snapshot_policy, test_worker,
                      train_worker, uniform_random_policy)
from .mdp import build_chain, build_gridworld, build_random_mdp
from .selfplay import GateState, OpponentPool

SOCCER_THRESHOLD = 0.6
TABULAR_THRESHOLD = 0.1


def make_mdp(cfg: ExperimentConfig):
    if cfg.env == "gridworld":
        return build_gridworld(cfg.grid_width, cfg.grid_height, cfg.gamma, cfg.slip_prob)
    if cfg.env == "chain":
        return build_chain(cfg.num_states, cfg.gamma)
    if cfg.env == "random_mdp":
        return build_random_mdp(cfg.seed, cfg.num_states, cfg.num_actions, cfg.gamma)
    return None


def make_env_factory(cfg: ExperimentConfig):
    """Returns ``factory(seed) -> env``. Tabular envs use exploring starts."""
    if cfg.env == "grid_soccer":
        soccer = GridSoccerConfig(cfg.grid_width, cfg.grid_height, cfg.max_steps)
        return lambda seed=0: GridSoccer(soccer, seed)
    mdp = make_mdp(cfg)
    return lambda seed=0: TabularEnv(mdp, start_state=None, max_steps=cfg.max_steps, seed=seed)


def make_agent_for(cfg: ExperimentConfig, env) -> AgentState:
    sizes = (env.observation_length, *cfg.hidden_sizes, env.num_actions)
    return make_agent(sizes, cfg.algorithm, seed=cfg.seed, alpha=cfg.alpha, alpha_mode=cfg.alpha_mode,
                      target_entropy_factor=cfg.target_entropy_factor, alpha_lr=cfg.alpha_lr, gamma=cfg.gamma,
                      tau=cfg.tau, lr=cfg.lr, n=cfg.n, backup_scheme=cfg.backup_scheme, all_anchors=cfg.all_anchors)


def default_threshold(cfg: ExperimentConfig) -> float:
    if cfg.threshold >= 0.0:
        return cfg.threshold
    return SOCCER_THRESHOLD if cfg.env == "grid_soccer" else TABULAR_THRESHOLD


class MetricsWriter:
    """JSONL sink; each record is written with one ``write`` call and flushed."""

    def __init__(self, path: Path | None, wall_time: bool, quiet: bool = True):
        self.path = path
        self.fh = open(path, "w") if path is not None else None
        self.wall_time = wall_time
        self.quiet = quiet
        self.start = time.monotonic()
        self.records = []
        self._lock = threading.Lock()

    def write(self, record: dict):
        if self.wall_time:
            record = {**record, "wall_time": round(time.monotonic() - self.start, 6)}
        line = json.dumps(record, sort_keys=True) + "\n"
        with self._lock:
            self.records.append(record)
            if self.fh is not None:
                self.fh.write(line)
                self.fh.flush()
            if not self.quiet:
                print(line, end="")

    def close(self):
        if self.fh is not None:
            self.fh.close()


class TrainingRun:
    def __init__(self, cfg: ExperimentConfig, out_dir=None, *, quiet: bool = True, stop: threading.Event = None):
        self.cfg = cfg.validate()
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        self.quiet = quiet
        self.stop = stop or threading.Event()
        self.env_factory = make_env_factory(cfg)
        self.mdp = make_mdp(cfg)
        probe_env = self.env_factory(cfg.seed)
        self.agent = make_agent_for(cfg, probe_env)
        self.ps = ParameterServer(agent_snapshot(self.agent, 0))
        self.trainer = Trainer(self.agent, self.ps, ReuseRatioMeter(), publish_interval=cfg.publish_interval)
        self.trainer.publish()
        self.meter = self.trainer.meter
        self.buffer = ReplayBuffer(cfg.buffer_capacity)
        self.threshold = default_threshold(cfg)
        self.reached = None
        self.evals = []
        self.pool = self.gate = None
        self.two_player = cfg.env == "grid_soccer"
        if self.two_player and cfg.selfplay:
            self.pool = OpponentPool(self.ps.fetch(), cfg.history_size, cfg.mix_prob)
            self.gate = GateState(cfg.gate_threshold, cfg.min_games, cfg.gate_window)
            self.ps.pool = self.pool
        self.workers = [self._make_worker(i) for i in range(cfg.num_rollout_workers)]
        self.writer = MetricsWriter(self.out_dir / "metrics.jsonl" if self.out_dir else None, cfg.log_wall_time,
                                    quiet)
        self.next_eval = cfg.eval_interval
        self.start_time = None

    def _opponent_source(self):
        if not self.two_player:
            return None
        num_actions = GridSoccer.num_actions
        if self.pool is None:
            policy = uniform_random_policy(num_actions)
            return lambda rng: (policy, "RANDOM")

        def source(rng):
            snap, kind = self.pool.sample(rng)
            return snapshot_policy(snap), kind
        return source

    def _make_worker(self, i):
        seed = self.cfg.seed * 1000 + 17 + i
        return RolloutWorker(self.env_factory(seed), self.ps, self.buffer, self.meter, n=self.cfg.n,
                             refresh_interval=self.cfg.refresh_interval, seed=seed,
                             opponent_source=self._opponent_source(), gate=self.gate, pool=self.pool, worker_id=i)

    @property
    def env_steps(self) -> int:
        return sum(w.env_steps for w in self.workers)

    def _ratio(self):
        try:
            return self.meter.ratio()
        except UndefinedRatio:
            return None

    def _log_step(self, metrics):
        if self.trainer.steps % self.cfg.log_interval:
            return
        self.writer.write({
            "step": self.trainer.steps,
            "env_steps": self.env_steps,
            "loss1": metrics["loss1"],
            "loss2": metrics["loss2"],
            "alpha": metrics["alpha"],
            "entropy": metrics["mean_entropy"],
            "target_mean": metrics["target_mean"],
            "reuse_ratio": self._ratio(),
            "ps_version": self.ps.version,
        })

    def evaluate(self, episodes=None) -> dict:
        cfg = self.cfg
        episodes = episodes or cfg.eval_episodes
        if self.two_player:
            res = test_worker(self.ps, lambda: self.env_factory(cfg.seed + 99), episodes, "random",
                              seed=cfg.seed + 7)
            value, ok = res["win_rate"], res["win_rate"] >= self.threshold
            record = {"win_rate": value}
        else:
            value = tabular_consistency_probe(self.agent, self.mdp)
            ok = value <= self.threshold
            record = {"tabular_gap": value}
        record.update({"step": self.trainer.steps, "env_steps": self.env_steps, "ps_version": self.ps.version})
        if self.pool is not None:
            record["promotions"] = self.pool.promotions
        self.writer.write(record)
        self.evals.append(record)
        if ok and self.reached is None:
            self.reached = {"env_steps": self.env_steps, "grad_steps": self.trainer.steps}
        return record

    def _maybe_evaluate(self):
        if self.env_steps >= self.next_eval:
            while self.next_eval <= self.env_steps:
                self.next_eval += self.cfg.eval_interval
            self.evaluate()
            if self.reached is not None and self.cfg.stop_at_threshold:
                self.stop.set()

    def _ready(self):
        return len(self.buffer) >= self.cfg.learning_starts

    def run_sync(self):
        cfg = self.cfg
        rng = np.random.default_rng(cfg.seed + 3)
        k = 0
        while self.env_steps < cfg.total_steps and not self.stop.is_set():
            self.workers[k % len(self.workers)].run_segment()
            k += 1
            if self._ready():
                while self.meter.may_consume(cfg.batch_size, cfg.reuse_ratio_target):
                    metrics = self.trainer.step(self.buffer.sample(cfg.batch_size, rng))
                    self._log_step(metrics)
            self._maybe_evaluate()

    def run_threaded(self):
        cfg = self.cfg
        stop = self.stop
        slack = 2.0 * cfg.batch_size + cfg.learning_starts * cfg.reuse_ratio_target
        threads = []
        for w in self.workers:
            t = threading.Thread(target=rollout_worker, args=(w, stop),
                                 kwargs={"reuse_target": cfg.reuse_ratio_target, "slack": slack},
                                 name=f"rollout-{w.worker_id}", daemon=True)
            threads.append(t)
        cache = Cache(self.buffer, cfg.batch_size, cfg.cache_depth, seed=cfg.seed + 3)
        lock = threading.Lock()
        errors = []

        def on_step(trainer, metrics):
            with lock:
                self._log_step(metrics)

        def trainer_loop():
            while not stop.is_set() and not self._ready():
                time.sleep(0.005)
            try:
                train_worker(self.trainer, cache, stop, reuse_target=cfg.reuse_ratio_target,
                             batch_size=cfg.batch_size, on_step=on_step)
            except Exception as exc:
                errors.append(exc)
                stop.set()

        trainer_thread = threading.Thread(target=trainer_loop, name="trainer", daemon=True)
        cache.start()
        for t in threads:
            t.start()
        trainer_thread.start()
        try:
            while not stop.is_set():
                if self.env_steps >= cfg.total_steps:
                    break
                failed = [w for w in self.workers if w.error is not None]
                if failed:
                    errors.append(failed[0].error)
                    break
                with lock:
                    self._maybe_evaluate()
                time.sleep(0.01)
        finally:
            stop.set()
            cache.close()
            for t in threads:
                t.join(timeout=5.0)
            trainer_thread.join(timeout=5.0)
        if errors:
            raise errors[0]

    def run(self) -> dict:
        cfg = self.cfg
        self.start_time = time.monotonic()
        status = "ok"
        error = None
        try:
            if cfg.total_steps > 0:
                if cfg.mode == "sync":
                    self.run_sync()
                else:
                    self.run_threaded()
        except Exception as exc:
            status, error = "failed", f"{type(exc).__name__}: {exc}"
        final = None
        if status == "ok" and cfg.total_steps > 0:
            final = self.evaluate()
        summary = self.summary(status, error, final)
        self.finish(summary)
        return summary

    def summary(self, status, error, final) -> dict:
        try:
            long_run = self.meter.long_run_ratio()
        except UndefinedRatio:
            long_run = None
        out = {
            "status": status,
            "algorithm": self.cfg.algorithm,
            "env": self.cfg.env,
            "seed": self.cfg.seed,
            "grad_steps": self.trainer.steps,
            "env_steps": self.env_steps,
            "segments": self.meter.produced_total,
            "reuse_ratio": long_run,
            "ps_version": self.ps.version,
            "alpha": self.agent.alpha,
            "threshold": self.threshold,
            "reached": self.reached,
            "wall_time": time.monotonic() - self.start_time,
        }
        if final is not None:
            out.update({k: v for k, v in final.items() if k in ("win_rate", "tabular_gap")})
        if self.pool is not None:
            out["promotions"] = self.pool.promotions
        if error:
            out["error"] = error
        return out

    def finish(self, summary):
        self.writer.close()
        if self.out_dir is None:
            return
        name = "agent.ckpt" if summary["status"] == "ok" else "diagnostic.ckpt"
        save_agent(self.out_dir / name, self.agent, {"config": serialize_config(self.cfg)})
        if self.pool is not None:
            pool_dir = self.out_dir / "pool"
            pool_dir.mkdir(exist_ok=True)
            target, history = self.pool.snapshots()
            manifest = []
            for i, snap in enumerate([target] + history):
                fname = "target.ckpt" if i == 0 else f"history_{i - 1:03d}.ckpt"
                save_snapshot(pool_dir / fname, snap, self.cfg.algorithm)
                manifest.append({"file": fname, "version": snap.version, "kind": "TARGET" if i == 0 else "HISTORY"})
            (pool_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
        (self.out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))


def run_training(cfg: ExperimentConfig, out_dir=None, *, quiet: bool = True) -> dict:
    return TrainingRun(cfg, out_dir, quiet=quiet).run()


SWEEP_COLUMNS = ("ratio", "steps_to_threshold", "grad_steps_to_threshold", "wall_time", "reached", "measured_ratio",
                 "seed", "env", "algorithm")


def run_reuse_sweep(cfg: ExperimentConfig, ratios, out_dir=None, *, quiet: bool = True) -> dict:
    """One run per reuse ratio, each stopped when the threshold is first met.

    Rows carry env steps (and gradient steps) to threshold; runs that never
    get there report ``reached=False`` and the steps they used. The report
    also says whether steps-to-threshold is nondecreasing in the ratio.
    """
    ratios = [float(r) for r in ratios]
    if len(ratios) < 2:
        raise ValueError("a sweep needs at least two ratios")
    rows = []
    for ratio in ratios:
        run_cfg = cfg.replace(reuse_ratio_target=ratio, stop_at_threshold=True)
        sub = Path(out_dir) / f"ratio_{ratio:g}" if out_dir is not None else None
        summary = TrainingRun(run_cfg, sub, quiet=quiet).run()
        reached = summary["reached"]
        rows.append({
            "ratio": ratio,
            "steps_to_threshold": reached["env_steps"] if reached else summary["env_steps"],
            "grad_steps_to_threshold": reached["grad_steps"] if reached else summary["grad_steps"],
            "wall_time": round(summary["wall_time"], 3),
            "reached": reached is not None,
            "measured_ratio": summary["reuse_ratio"],
            "seed": cfg.seed,
            "env": cfg.env,
            "algorithm": cfg.algorithm,
        })
    ordered = sorted(rows, key=lambda r: r["ratio"])
    steps = [r["steps_to_threshold"] for r in ordered]
    report = {
        "rows": rows,
        "trend_nondecreasing": all(r["reached"] for r in rows) and all(a <= b for a, b in zip(steps, steps[1:])),
    }
    if out_dir is not None:
        (Path(out_dir) / "reuse_sweep.csv").write_text(sweep_csv(rows))
    return report


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()
