"""Opponent pool and promotion gate for self-play training.

Most games are played against a frozen *target* opponent; the rest go to a
uniformly chosen past snapshot from a bounded history. The target is
replaced by the current agent once it beats the target often enough.
"""

from __future__ import annotations

import threading
from collections import deque

WIN, DRAW, LOSS = "WIN", "DRAW", "LOSS"
TARGET, HISTORY = "TARGET", "HISTORY"


class OpponentPool:
    def __init__(self, target, history_size: int = 20, mix_prob: float = 0.8):
        if history_size < 1:
            raise ValueError("history_size must be positive")
        if not 0.0 <= mix_prob <= 1.0:
            raise ValueError("mix_prob must lie in [0, 1]")
        self.target = target
        self.history = deque(maxlen=history_size)
        self.mix_prob = mix_prob
        self.promotions = 0
        self._lock = threading.Lock()

    def sample(self, rng):
        """Return ``(snapshot, kind)``; TARGET with probability ``mix_prob``."""
        with self._lock:
            if not self.history or rng.random() < self.mix_prob:
                return self.target, TARGET
            return self.history[int(rng.integers(len(self.history)))], HISTORY

    def promote(self, current):
        """Archive the old target and install ``current`` in its place."""
        with self._lock:
            self.history.append(self.target)
            self.target = current
            self.promotions += 1

    def snapshots(self):
        with self._lock:
            return self.target, list(self.history)


class GateState:
    """Trailing window of results against the target opponent."""

    def __init__(self, threshold: float = 0.6, min_games: int = 100, window: int = 200):
        if min_games < 1 or window < min_games:
            raise ValueError("need 1 <= min_games <= window")
        self.threshold = threshold
        self.min_games = min_games
        self.results = deque(maxlen=window)
        self._lock = threading.Lock()

    def record(self, result: str, vs_target: bool = True):
        if result not in (WIN, DRAW, LOSS):
            raise ValueError(f"unknown result {result!r}")
        if not vs_target:
            return
        with self._lock:
            self.results.append(result)

    def win_rate(self) -> float | None:
        """Wins over games in the window; None until ``min_games`` results."""
        with self._lock:
            games = len(self.results)
            if games < self.min_games:
                return None
            return sum(r == WIN for r in self.results) / games

    def should_promote(self) -> bool:
        with self._lock:
            games = len(self.results)
            if games < self.min_games:
                return False
            wins = sum(r == WIN for r in self.results)
        # absorb rounding in threshold * games so 60 of 100 passes at 0.6
        return wins >= self.threshold * games - 1e-9 * games

    def clear(self):
        with self._lock:
            self.results.clear()


def sample_opponent(pool: OpponentPool, rng):
    return pool.sample(rng)


def record_result(gate: GateState, result: str, vs_target: bool):
    gate.record(result, vs_target)


def should_promote(gate: GateState) -> bool:
    return gate.should_promote()


def promote_target(pool: OpponentPool, current, gate: GateState | None = None):
    pool.promote(current)
    if gate is not None:
        gate.clear()


def result_from_reward(reward_a: float) -> str:
    if reward_a > 0:
        return WIN
    if reward_a < 0:
        return LOSS
    return DRAW
