"""Finite MDPs and experience records.

A :class:`TabularMdp` stores the full transition tensor and the expected
reward table, so every soft-value quantity over it can be computed exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# gridworld action indices
UP, DOWN, LEFT, RIGHT = 0, 1, 2, 3
_MOVES = {UP: (0, -1), DOWN: (0, 1), LEFT: (-1, 0), RIGHT: (1, 0)}

ROW_TOL = 1e-12


@dataclass
class TabularMdp:
    """Exact finite MDP.

    ``transition[s, a, s']`` is P(s'|s,a), ``reward[s, a]`` the expected
    one-step reward. Terminal states self-loop with zero reward.
    """

    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    terminal_mask: np.ndarray = None

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.reward = np.asarray(self.reward, dtype=np.float64)
        if self.terminal_mask is None:
            self.terminal_mask = np.zeros(self.transition.shape[0], dtype=bool)
        self.terminal_mask = np.asarray(self.terminal_mask, dtype=bool)
        self.validate()

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transition.shape[1]

    def validate(self):
        P, R = self.transition, self.reward
        if P.ndim != 3 or P.shape[0] != P.shape[2] or P.shape[0] < 1 or P.shape[1] < 1:
            raise ValueError(f"transition must have shape (S, A, S), got {P.shape}")
        if R.shape != P.shape[:2]:
            raise ValueError(f"reward shape {R.shape} does not match {P.shape[:2]}")
        if self.terminal_mask.shape != (P.shape[0],):
            raise ValueError("terminal_mask must have one entry per state")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if np.any(P < 0.0) or np.any(P > 1.0):
            raise ValueError("transition probabilities must lie in [0, 1]")
        if np.max(np.abs(P.sum(axis=2) - 1.0)) > ROW_TOL:
            raise ValueError("transition rows must sum to 1")
        if not np.all(np.isfinite(R)):
            raise ValueError("rewards must be finite")
        for s in np.flatnonzero(self.terminal_mask):
            if np.any(P[s, :, s] != 1.0) or np.any(R[s] != 0.0):
                raise ValueError(f"terminal state {s} must self-loop with zero reward")


def build_gridworld(width: int, height: int, gamma: float = 0.9, slip_prob: float = 0.0) -> TabularMdp:
    """Grid with four move actions and an absorbing goal in the last cell.

    State ``y * width + x``; the start is cell 0 and the goal cell
    ``width * height - 1``. Entering the goal pays 1. With probability
    ``slip_prob`` one of the three other actions is executed instead.
    Moves off the grid leave the agent in place.
    """
    if width < 1 or height < 1:
        raise ValueError("grid dimensions must be positive")
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
    if not 0.0 <= slip_prob < 1.0:
        raise ValueError(f"slip_prob must lie in [0, 1), got {slip_prob}")

    n = width * height
    goal = n - 1
    P = np.zeros((n, 4, n))
    for s in range(n):
        if s == goal:
            P[s, :, s] = 1.0
            continue
        x, y = s % width, s // width
        dest = []
        for a in range(4):
            dx, dy = _MOVES[a]
            nx = min(max(x + dx, 0), width - 1)
            ny = min(max(y + dy, 0), height - 1)
            dest.append(ny * width + nx)
        for a in range(4):
            for b in range(4):
                p = 1.0 - slip_prob if a == b else slip_prob / 3.0
                P[s, a, dest[b]] += p
    R = P[:, :, goal].copy()
    R[goal] = 0.0
    terminal = np.zeros(n, dtype=bool)
    terminal[goal] = True
    return TabularMdp(P, R, gamma, terminal)


def build_chain(length: int, gamma: float = 0.9) -> TabularMdp:
    """Deterministic chain: action 0 steps left, action 1 steps right.

    The rightmost state is absorbing; entering it pays 1.
    """
    if length < 1:
        raise ValueError("chain length must be positive")
    P = np.zeros((length, 2, length))
    last = length - 1
    for s in range(length):
        if s == last:
            P[s, :, s] = 1.0
        else:
            P[s, 0, max(s - 1, 0)] = 1.0
            P[s, 1, s + 1] = 1.0
    R = P[:, :, last].copy()
    R[last] = 0.0
    terminal = np.zeros(length, dtype=bool)
    terminal[last] = True
    return TabularMdp(P, R, gamma, terminal)


def build_random_mdp(seed: int, num_states: int, num_actions: int, gamma: float = 0.9) -> TabularMdp:
    """Random MDP with Dirichlet(1) transition rows and U[-1, 1] rewards."""
    if num_states < 1 or num_actions < 1:
        raise ValueError("num_states and num_actions must be positive")
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(num_states), size=(num_states, num_actions))
    P /= P.sum(axis=2, keepdims=True)
    R = rng.uniform(-1.0, 1.0, size=(num_states, num_actions))
    return TabularMdp(P, R, gamma)


@dataclass(slots=True)
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    done: bool
    behavior_log_prob: float = 0.0
    policy_version: int = 0


@dataclass(slots=True)
class TrajectorySegment:
    """Up to n consecutive transitions of one episode.

    ``truncated`` marks a segment whose episode was cut by a time limit
    rather than ending in a terminal state.
    """

    transitions: list = field(default_factory=list)
    truncated: bool = False

    def __len__(self):
        return len(self.transitions)

    def validate(self, n_max: int | None = None):
        ts = self.transitions
        if not ts:
            raise ValueError("empty segment")
        if n_max is not None and len(ts) > n_max:
            raise ValueError(f"segment length {len(ts)} exceeds {n_max}")
        for k, t in enumerate(ts[:-1]):
            if t.done:
                raise ValueError(f"transition {k} is done but not last")
            if not np.array_equal(t.next_state, ts[k + 1].state):
                raise ValueError(f"transitions {k} and {k + 1} do not chain")
        for t in ts:
            if t.behavior_log_prob > 0.0:
                raise ValueError("behavior_log_prob must be <= 0")
