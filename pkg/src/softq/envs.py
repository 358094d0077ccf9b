"""Interactive environments: a one-hot wrapper around tabular MDPs and a
two-player grid-soccer game.

Both follow the same small protocol: ``reset(seed)`` returns the initial
observation(s), ``step`` advances one tick and reports ``done``. After a
``done`` step the environment must be reset before stepping again.
``truncated`` is true when the last step ended the episode by time limit
rather than by reaching a terminal state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mdp import TabularMdp


class EpisodeOver(RuntimeError):
    """Raised when stepping an environment whose episode already ended."""


class TabularEnv:
    """Samples trajectories from a :class:`TabularMdp`.

    Observations are one-hot state vectors. If ``start_state`` is None each
    episode starts in a uniformly drawn non-terminal state.
    """

    def __init__(self, mdp: TabularMdp, start_state: int | None = 0, max_steps: int = 100, seed: int = 0):
        self.mdp = mdp
        self.start_state = start_state
        self.max_steps = max_steps
        self.num_actions = mdp.num_actions
        self.observation_length = mdp.num_states
        self._cum = np.cumsum(mdp.transition, axis=2)
        self._cum[:, :, -1] = 1.0
        self._eye = np.eye(mdp.num_states)
        self.rng = np.random.default_rng(seed)
        self.state = None
        self.steps = 0
        self.done = True
        self.truncated = False

    def observe(self, state: int) -> np.ndarray:
        return self._eye[state].copy()

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        if self.start_state is None:
            choices = np.flatnonzero(~self.mdp.terminal_mask)
            if len(choices) == 0:
                choices = np.arange(self.mdp.num_states)
            self.state = int(self.rng.choice(choices))
        else:
            self.state = int(self.start_state)
        self.steps = 0
        self.done = False
        self.truncated = False
        return self.observe(self.state)

    def step(self, action: int):
        if self.done:
            raise EpisodeOver("step() called after episode end; call reset()")
        if not 0 <= action < self.num_actions:
            raise ValueError(f"action {action} out of range [0, {self.num_actions})")
        s = self.state
        reward = float(self.mdp.reward[s, action])
        u = self.rng.random()
        s2 = int(np.searchsorted(self._cum[s, action], u, side="right"))
        s2 = min(s2, self.mdp.num_states - 1)
        self.state = s2
        self.steps += 1
        terminal = bool(self.mdp.terminal_mask[s2])
        self.truncated = not terminal and self.steps >= self.max_steps
        self.done = terminal or self.truncated
        return self.observe(s2), reward, self.done


# grid-soccer actions, egocentric: FORWARD always points at the opponent's goal
STAY, UP, DOWN, FORWARD, BACK, SHOOT = range(6)
ACTION_NAMES = ("stay", "up", "down", "forward", "back", "shoot")

_FREE, _HELD_A, _HELD_B = 0, 1, 2


@dataclass(frozen=True)
class GridSoccerConfig:
    grid_width: int = 7
    grid_height: int = 5
    max_steps: int = 30
    kick_distance: int = 2
    tackle_prob: float = 0.5

    def __post_init__(self):
        if self.grid_width < 3 or self.grid_height < 1:
            raise ValueError("grid-soccer needs width >= 3 and height >= 1")
        if self.max_steps < 1:
            raise ValueError("max_steps must be positive")
        if not 0.0 <= self.tackle_prob <= 1.0:
            raise ValueError("tackle_prob must lie in [0, 1]")

    @property
    def observation_length(self) -> int:
        return 3 * self.grid_width * self.grid_height + 4


class GridSoccer:
    """Two-player, zero-sum soccer on a small grid.

    Player A attacks the right edge, player B the left edge. Both players
    see the field from their own side (B's view is mirrored), so one
    network can play either side. A player holding the ball in the last
    column before the opponent's goal scores by shooting; shooting from
    elsewhere kicks the ball ``kick_distance`` cells forward. Moving into
    the ball carrier's cell while they stand still steals the ball with
    probability ``tackle_prob``. Simultaneous moves into the same cell, or
    swaps, are both blocked.

    ``step`` returns ``(obs_a, obs_b, reward_a, done)``; B's reward is
    ``-reward_a``.
    """

    num_actions = 6

    def __init__(self, config: GridSoccerConfig | None = None, seed: int = 0):
        self.config = config or GridSoccerConfig()
        self.observation_length = self.config.observation_length
        self.rng = np.random.default_rng(seed)
        self.done = True
        self.truncated = False
        self.steps = 0

    def reset(self, seed: int | None = None):
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        c = self.config
        mid_y = c.grid_height // 2
        self.pos = [[1, mid_y], [c.grid_width - 2, mid_y]]
        self.ball = [c.grid_width // 2, mid_y]
        self.holder = _FREE
        self.steps = 0
        self.done = False
        self.truncated = False
        return self.observe(0), self.observe(1)

    def observe(self, player: int) -> np.ndarray:
        c = self.config
        W, H = c.grid_width, c.grid_height
        cells = W * H
        obs = np.zeros(self.observation_length)

        def cell(p):
            x = p[0] if player == 0 else W - 1 - p[0]
            return p[1] * W + x

        me, opp = self.pos[player], self.pos[1 - player]
        obs[cell(me)] = 1.0
        obs[cells + cell(opp)] = 1.0
        obs[2 * cells + cell(self._ball_pos())] = 1.0
        if self.holder == _FREE:
            obs[3 * cells + 2] = 1.0
        elif self.holder == player + 1:
            obs[3 * cells] = 1.0
        else:
            obs[3 * cells + 1] = 1.0
        obs[3 * cells + 3] = 1.0 - self.steps / c.max_steps
        return obs

    def _ball_pos(self):
        if self.holder == _FREE:
            return self.ball
        return self.pos[self.holder - 1]

    def step(self, action_a: int, action_b: int):
        if self.done:
            raise EpisodeOver("step() called after episode end; call reset()")
        for a in (action_a, action_b):
            if not 0 <= a < self.num_actions:
                raise ValueError(f"action {a} out of range [0, {self.num_actions})")
        c = self.config
        W, H = c.grid_width, c.grid_height
        actions = (action_a, action_b)
        forward = (1, -1)
        reward = 0.0
        self.steps += 1

        # shots first: a successful shot ends the game before anyone moves
        for p in (0, 1):
            if actions[p] == SHOOT and self.holder == p + 1:
                x, y = self.pos[p]
                goal_col = W - 1 if p == 0 else 0
                if x == goal_col:
                    reward = 1.0 if p == 0 else -1.0
                    self.done = True
                    return self.observe(0), self.observe(1), reward, True
                land = min(max(x + c.kick_distance * forward[p], 0), W - 1)
                self.ball = [land, y]
                self.holder = _FREE

        targets = []
        for p in (0, 1):
            x, y = self.pos[p]
            a = actions[p]
            if a == UP:
                y -= 1
            elif a == DOWN:
                y += 1
            elif a == FORWARD:
                x += forward[p]
            elif a == BACK:
                x -= forward[p]
            targets.append([min(max(x, 0), W - 1), min(max(y, 0), H - 1)])

        pa, pb = self.pos
        ta, tb = targets
        if ta == tb or (ta == pb and tb == pa):
            targets = [list(pa), list(pb)]
        else:
            for p in (0, 1):
                q = 1 - p
                if targets[p] == self.pos[q] and targets[q] == self.pos[q]:
                    # blocked by a standing opponent; maybe steal the ball
                    targets[p] = list(self.pos[p])
                    if self.holder == q + 1 and self.rng.random() < c.tackle_prob:
                        self.holder = p + 1
        self.pos = targets

        if self.holder == _FREE:
            for p in (0, 1):
                if self.pos[p] == self.ball:
                    self.holder = p + 1

        if self.steps >= c.max_steps:
            self.done = True
        return self.observe(0), self.observe(1), reward, self.done
