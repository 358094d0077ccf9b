"""In-process actor/learner fabric.

Shared services (:class:`ReplayBuffer`, :class:`ParameterServer`,
:class:`ReuseRatioMeter`) are thread-safe; every access goes through one of
their methods. Workers are plain loops that communicate only through those
services and a ``threading.Event`` stop signal. :class:`RolloutWorker` and
:class:`Trainer` also expose single-step methods so a driver can interleave
them deterministically in one thread.
"""

from __future__ import annotations

import hashlib
import queue
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass

import numpy as np

from .agents import QOP, AgentState, greedy_action, min_q, sample_action, train_step
from .envs import GridSoccer
from .mdp import Transition, TrajectorySegment
from .nn import params_to_bytes
from .selfplay import TARGET, WIN, DRAW, LOSS, GateState, OpponentPool, result_from_reward


class NotReady(Exception):
    """The replay buffer has nothing to sample yet."""


class CacheClosed(Exception):
    """The cache was shut down; no more batches will arrive."""


class UndefinedRatio(Exception):
    """Reuse ratio requested before anything was produced in the window."""


class ReplayBuffer:
    """FIFO ring of segments with uniform sampling (with replacement)."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items = deque(maxlen=capacity)
        self._lock = threading.Lock()
        self.total_pushed = 0
        self.total_sampled = 0

    def __len__(self):
        with self._lock:
            return len(self._items)

    def push(self, segment):
        with self._lock:
            self._items.append(segment)
            self.total_pushed += 1

    def sample(self, batch_size: int, rng) -> list:
        with self._lock:
            n = len(self._items)
            if n == 0:
                raise NotReady("replay buffer is empty")
            idx = rng.integers(n, size=batch_size)
            out = [self._items[i] for i in idx]
            self.total_sampled += batch_size
        return out

    def contents(self) -> list:
        with self._lock:
            return list(self._items)


def snapshot_checksum(version: int, nets, alpha: float) -> str:
    h = hashlib.sha256(struct.pack("<qd", version, alpha))
    for net in nets:
        h.update(params_to_bytes(net))
    return h.hexdigest()


@dataclass(frozen=True)
class PolicySnapshot:
    """Immutable acting policy: the network pair whose clipped Q defines it."""

    version: int
    nets: tuple
    alpha: float
    checksum: str

    def verify(self) -> bool:
        return snapshot_checksum(self.version, self.nets, self.alpha) == self.checksum


def make_snapshot(version: int, nets, alpha: float) -> PolicySnapshot:
    nets = tuple(n.copy() for n in nets)
    return PolicySnapshot(version, nets, float(alpha), snapshot_checksum(version, nets, alpha))


def agent_snapshot(agent: AgentState, version: int = 0) -> PolicySnapshot:
    return make_snapshot(version, agent.acting_nets(), agent.alpha)


class ParameterServer:
    def __init__(self, initial: PolicySnapshot | None = None):
        self._lock = threading.Lock()
        self._latest = initial
        self._version = initial.version if initial is not None else 0
        self.pool = None  # self-play opponent pool, when enabled

    def publish(self, nets, alpha: float) -> int:
        """Store a new snapshot; returns its version (previous + 1)."""
        with self._lock:
            version = self._version + 1
            self._latest = make_snapshot(version, nets, alpha)
            self._version = version
            return version

    def fetch(self) -> PolicySnapshot:
        with self._lock:
            return self._latest

    @property
    def version(self) -> int:
        with self._lock:
            return self._version


class ReuseRatioMeter:
    """Segments consumed by the trainer per segment produced by rollouts.

    ``ratio()`` covers the last ``window`` recorded events. Cumulative totals
    drive the throttles: the trainer waits while consuming another batch
    would push it above ``target``, and producers wait while they are more
    than ``slack`` segment-draws ahead of it.
    """

    def __init__(self, window: int = 1000):
        if window < 1:
            raise ValueError("window must be positive")
        self._events = deque(maxlen=window)
        self._cond = threading.Condition()
        self.produced_total = 0
        self.consumed_total = 0

    def record_produced(self, count: int = 1):
        with self._cond:
            self._events.append((count, 0))
            self.produced_total += count
            self._cond.notify_all()

    def record_consumed(self, count: int):
        with self._cond:
            self._events.append((0, count))
            self.consumed_total += count
            self._cond.notify_all()

    def ratio(self) -> float:
        with self._cond:
            produced = sum(p for p, _ in self._events)
            consumed = sum(c for _, c in self._events)
        if produced == 0:
            raise UndefinedRatio("nothing produced in the window")
        return consumed / produced

    def long_run_ratio(self) -> float:
        with self._cond:
            if self.produced_total == 0:
                raise UndefinedRatio("nothing produced yet")
            return self.consumed_total / self.produced_total

    def may_consume(self, batch: int, target: float) -> bool:
        return self.consumed_total + batch <= target * self.produced_total

    def wait_to_consume(self, batch: int, target: float, stop: threading.Event, poll: float = 0.05) -> bool:
        """Block until consuming ``batch`` keeps the ratio at or below target.

        Returns False if ``stop`` was set while waiting.
        """
        with self._cond:
            while not self.may_consume(batch, target):
                if stop.is_set():
                    return False
                self._cond.wait(poll)
        return not stop.is_set()

    def wait_to_produce(self, target: float, slack: float, stop: threading.Event, poll: float = 0.05) -> bool:
        with self._cond:
            while target * self.produced_total - self.consumed_total > slack:
                if stop.is_set():
                    return False
                self._cond.wait(poll)
        return not stop.is_set()


def reuse_ratio(meter: ReuseRatioMeter) -> float:
    return meter.ratio()


class Cache:
    """Background prefetcher of ready-made training batches.

    Keeps up to ``depth`` batches staged. ``take()`` returns a staged batch
    or blocks until one exists; after :meth:`close` it raises
    :class:`CacheClosed`.
    """

    _CLOSED = object()

    def __init__(self, buffer: ReplayBuffer, batch_size: int, depth: int = 2, seed: int = 0, poll: float = 0.005):
        if depth < 1:
            raise ValueError("cache depth must be >= 1")
        self.buffer = buffer
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)
        self._queue = queue.Queue(maxsize=depth)
        self._stop = threading.Event()
        self._poll = poll
        self._thread = None
        self.hits = 0
        self.misses = 0

    def start(self):
        self._thread = threading.Thread(target=self._run, name="cache", daemon=True)
        self._thread.start()
        return self

    def _run(self):
        while not self._stop.is_set():
            try:
                batch = self.buffer.sample(self.batch_size, self.rng)
            except NotReady:
                time.sleep(self._poll)
                continue
            while not self._stop.is_set():
                try:
                    self._queue.put(batch, timeout=0.05)
                    break
                except queue.Full:
                    pass

    def take(self, timeout: float | None = None):
        try:
            item = self._queue.get_nowait()
            self.hits += 1
        except queue.Empty:
            self.misses += 1
            deadline = None if timeout is None else time.monotonic() + timeout
            while True:
                if self._stop.is_set() and self._queue.empty():
                    raise CacheClosed()
                try:
                    item = self._queue.get(timeout=0.05)
                    break
                except queue.Empty:
                    if deadline is not None and time.monotonic() > deadline:
                        raise TimeoutError("no batch staged in time") from None
        if item is self._CLOSED:
            raise CacheClosed()
        return item

    def close(self):
        self._stop.set()
        try:
            self._queue.put_nowait(self._CLOSED)
        except queue.Full:
            pass
        if self._thread is not None:
            self._thread.join(timeout=1.0)

    @property
    def hit_rate(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0


def uniform_random_policy(num_actions: int):
    def policy(obs, rng):
        return int(rng.integers(num_actions)), -float(np.log(num_actions))
    return policy


def snapshot_policy(snapshot: PolicySnapshot, greedy: bool = False):
    def policy(obs, rng):
        q = min_q(snapshot.nets, obs)
        if greedy:
            return int(np.argmax(q)), 0.0
        return sample_action(q, snapshot.alpha, rng)
    return policy


class RolloutWorker:
    """Plays episodes with the latest published policy and pushes n-step segments.

    For two-player environments the agent plays side A; ``opponent_source``
    is called at every episode start with the worker's rng and returns
    ``(policy, kind)`` for side B.
    """

    def __init__(self, env, ps: ParameterServer, buffer: ReplayBuffer, meter: ReuseRatioMeter | None = None, *,
                 n: int = 1, refresh_interval: int = 1, seed: int = 0, opponent_source=None,
                 gate: GateState | None = None, pool: OpponentPool | None = None, worker_id: int = 0):
        if n < 1 or refresh_interval < 1:
            raise ValueError("n and refresh_interval must be >= 1")
        self.env = env
        self.two_player = isinstance(env, GridSoccer)
        self.ps, self.buffer, self.meter = ps, buffer, meter
        self.n = n
        self.refresh_interval = refresh_interval
        self.rng = np.random.default_rng(seed)
        self.seed = seed
        self.opponent_source = opponent_source
        self.gate, self.pool = gate, pool
        self.worker_id = worker_id
        self.snapshot = None
        self.policy = None
        self.segments_since_refresh = 0
        self.obs = None
        self.obs_b = None
        self.opponent = None
        self.opponent_kind = None
        self.episode_return = 0.0
        self.episodes = 0
        self.env_steps = 0
        self.segments = 0
        self.results = {WIN: 0, DRAW: 0, LOSS: 0}
        self.error = None

    def _refresh(self):
        snap = self.ps.fetch()
        if snap is None:
            raise RuntimeError("parameter server has no snapshot")
        self.snapshot = snap
        self.policy = snapshot_policy(snap)
        self.segments_since_refresh = 0

    def _reset_env(self):
        episode_seed = int(self.rng.integers(2**31))
        if self.two_player:
            self.obs, self.obs_b = self.env.reset(episode_seed)
            self.opponent, self.opponent_kind = self.opponent_source(self.rng)
        else:
            self.obs = self.env.reset(episode_seed)
        self.episode_return = 0.0

    def _finish_episode(self, last_reward):
        self.episodes += 1
        if self.two_player:
            result = result_from_reward(last_reward)
            self.results[result] += 1
            if self.gate is not None:
                self.gate.record(result, vs_target=self.opponent_kind == TARGET)
                if self.pool is not None and self.gate.should_promote():
                    self.pool.promote(self.ps.fetch())
                    self.gate.clear()
        self.obs = None

    def run_segment(self) -> TrajectorySegment:
        """Collect up to n steps (fewer at episode end) and push them."""
        if self.snapshot is None or self.segments_since_refresh >= self.refresh_interval:
            self._refresh()
        if self.obs is None:
            self._reset_env()
        version = self.snapshot.version
        transitions = []
        done = False
        reward = 0.0
        while len(transitions) < self.n and not done:
            action, logp = self.policy(self.obs, self.rng)
            if self.two_player:
                b_action, _ = self.opponent(self.obs_b, self.rng)
                next_obs, next_obs_b, reward, done = self.env.step(action, b_action)
                self.obs_b = next_obs_b
            else:
                next_obs, reward, done = self.env.step(action)
            terminal = done and not getattr(self.env, "truncated", False)
            transitions.append(Transition(self.obs, action, reward, next_obs, terminal, logp, version))
            self.obs = next_obs
            self.episode_return += reward
            self.env_steps += 1
        segment = TrajectorySegment(transitions, truncated=not transitions[-1].done)
        self.buffer.push(segment)
        if self.meter is not None:
            self.meter.record_produced(1)
        self.segments += 1
        self.segments_since_refresh += 1
        if done:
            self._finish_episode(reward)
        return segment


def rollout_worker(worker: RolloutWorker, stop: threading.Event, *, reuse_target: float | None = None,
                   slack: float = 64.0, max_env_steps: int | None = None):
    """Loop ``worker.run_segment`` until ``stop`` is set.

    With ``reuse_target`` the worker waits while production runs more than
    ``slack`` segment-draws ahead of the trainer. Exceptions are kept on
    ``worker.error`` instead of propagating.
    """
    try:
        while not stop.is_set():
            if max_env_steps is not None and worker.env_steps >= max_env_steps:
                break
            if reuse_target is not None and worker.meter is not None:
                if not worker.meter.wait_to_produce(reuse_target, slack, stop):
                    break
            worker.run_segment()
    except Exception as exc:  # isolate environment faults to this worker
        worker.error = exc


class Trainer:
    """Owns the :class:`AgentState`; publishes every ``publish_interval`` steps."""

    def __init__(self, agent: AgentState, ps: ParameterServer, meter: ReuseRatioMeter | None = None, *,
                 publish_interval: int = 1):
        if publish_interval < 1:
            raise ValueError("publish_interval must be >= 1")
        self.agent = agent
        self.ps = ps
        self.meter = meter
        self.publish_interval = publish_interval
        self.steps = 0
        self.last_metrics = None

    def publish(self) -> int:
        return self.ps.publish(self.agent.acting_nets(), self.agent.alpha)

    def step(self, segments) -> dict:
        if self.agent.algorithm == QOP:
            batch = segments
        else:
            batch = [t for seg in segments for t in seg.transitions]
        metrics = train_step(self.agent, batch)
        self.steps += 1
        if self.meter is not None:
            self.meter.record_consumed(len(segments))
        if self.steps % self.publish_interval == 0:
            self.publish()
        self.last_metrics = metrics
        return metrics


def train_worker(trainer: Trainer, cache: Cache, stop: threading.Event, *, reuse_target: float, batch_size: int,
                 on_step=None, max_steps: int | None = None):
    """Take staged batches and train, throttled to ``reuse_target``.

    ``on_step(trainer, metrics)`` runs after each step. A non-finite loss
    stops the run (the exception is re-raised after setting ``stop``).
    """
    while not stop.is_set():
        if max_steps is not None and trainer.steps >= max_steps:
            break
        if not trainer.meter.wait_to_consume(batch_size, reuse_target, stop):
            break
        try:
            batch = cache.take()
        except CacheClosed:
            break
        try:
            metrics = trainer.step(batch)
        except FloatingPointError:
            stop.set()
            raise
        if on_step is not None:
            on_step(trainer, metrics)


def play_episode(env, agent_policy, opponent_policy, rng, seed: int):
    """One evaluation episode; returns (return_a, result, terminated)."""
    if isinstance(env, GridSoccer):
        obs_a, obs_b = env.reset(seed)
        total = 0.0
        done = False
        reward = 0.0
        while not done:
            a, _ = agent_policy(obs_a, rng)
            b, _ = opponent_policy(obs_b, rng)
            obs_a, obs_b, reward, done = env.step(a, b)
            total += reward
        return total, result_from_reward(reward), True
    obs = env.reset(seed)
    total = 0.0
    done = False
    while not done:
        a, _ = agent_policy(obs, rng)
        obs, reward, done = env.step(a)
        total += reward
    terminated = not env.truncated
    return total, (WIN if terminated else DRAW), terminated


def test_worker(ps: ParameterServer, env_factory, episodes: int, opponent="random", seed: int = 0) -> dict:
    """Greedy evaluation of the latest snapshot.

    ``opponent`` is ``"random"``, ``"self"`` (the same snapshot, greedy), a
    :class:`PolicySnapshot` (played greedily) or a policy callable. For
    single-agent environments a WIN is reaching a terminal state and a DRAW
    is hitting the time limit.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    snap = ps.fetch()
    env = env_factory()
    rng = np.random.default_rng(seed)
    agent_policy = snapshot_policy(snap, greedy=True)
    if opponent == "random":
        opp = uniform_random_policy(env.num_actions)
    elif opponent == "self":
        opp = snapshot_policy(snap, greedy=True)
    elif isinstance(opponent, PolicySnapshot):
        opp = snapshot_policy(opponent, greedy=True)
    else:
        opp = opponent
    counts = {WIN: 0, DRAW: 0, LOSS: 0}
    total = 0.0
    for _ in range(episodes):
        ret, result, _ = play_episode(env, agent_policy, opp, rng, int(rng.integers(2**31)))
        counts[result] += 1
        total += ret
    win, draw = counts[WIN] / episodes, counts[DRAW] / episodes
    return {
        "win_rate": win,
        "draw_rate": draw,
        "loss_rate": 1.0 - (win + draw),  # keeps the three rates summing to exactly 1
        "mean_return": total / episodes,
        "episodes": episodes,
        "version": snap.version,
    }


test_worker.__test__ = False  # keep pytest from collecting it by name


__all__ = [
    "Cache", "CacheClosed", "NotReady", "ParameterServer", "PolicySnapshot", "ReplayBuffer", "ReuseRatioMeter",
    "RolloutWorker", "Trainer", "UndefinedRatio", "agent_snapshot", "greedy_action", "make_snapshot",
    "play_episode", "reuse_ratio", "rollout_worker", "snapshot_policy", "test_worker", "train_worker",
    "uniform_random_policy",
]
