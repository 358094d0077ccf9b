"""Soft Q-learning agents: SQN, SQN-CF and n-step QOP.

All three keep two main Q-networks and two polyak-averaged target copies.
Bootstrap values are always computed from ``min(Q1_target, Q2_target)``.
SQN acts with the softmax of the main networks; SQN-CF and QOP act with the
softmax of the target networks, which is the policy their backup improves.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace

import numpy as np

from .mdp import TabularMdp, Transition, TrajectorySegment
from .nn import AdamState, MlpParams, adam_init, adam_step, backward, forward, mlp_init, polyak_update, predict
from .tabular import log_softmax, soft_value_iteration, soft_values, softmax_policy

SQN, SQN_CF, QOP = "SQN", "SQN_CF", "QOP"
ALGORITHMS = (SQN, SQN_CF, QOP)
EXPECTATION, LSE, SAMPLED = "EXPECTATION", "LSE", "SAMPLED"
SCHEMES = (EXPECTATION, LSE, SAMPLED)
FIXED, ADAPTIVE = "FIXED", "ADAPTIVE"


@dataclass
class TemperatureState:
    mode: str = FIXED
    log_alpha: float = 0.0
    target_entropy: float = 0.0
    alpha_lr: float = 3e-4

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha))

    @classmethod
    def fixed(cls, alpha: float) -> "TemperatureState":
        if not alpha > 0.0:
            raise ValueError("alpha must be positive")
        return cls(FIXED, float(np.log(alpha)))


@dataclass
class AgentState:
    q1: MlpParams
    q2: MlpParams
    q1_target: MlpParams
    q2_target: MlpParams
    opt1: AdamState
    opt2: AdamState
    temperature: TemperatureState
    algorithm: str = SQN_CF
    backup_scheme: str = EXPECTATION
    n: int = 1
    gamma: float = 0.99
    tau: float = 0.005
    lr: float = 3e-4
    all_anchors: bool = True
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    steps: int = 0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.backup_scheme not in SCHEMES:
            raise ValueError(f"unknown backup scheme {self.backup_scheme!r}")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        sizes = tuple(self.q1.layer_sizes)
        for net in (self.q2, self.q1_target, self.q2_target):
            if tuple(net.layer_sizes) != sizes:
                raise ValueError("all four networks must share layer sizes")

    @property
    def alpha(self) -> float:
        return self.temperature.alpha

    @property
    def layer_sizes(self) -> tuple:
        return tuple(self.q1.layer_sizes)

    def acting_nets(self):
        if self.algorithm == SQN:
            return self.q1, self.q2
        return self.q1_target, self.q2_target


OUTPUT_INIT_SCALE = 1e-3


def make_agent(
    layer_sizes,
    algorithm: str = SQN_CF,
    *,
    seed: int = 0,
    alpha: float = 0.1,
    alpha_mode: str = FIXED,
    target_entropy_factor: float = 0.5,
    alpha_lr: float = 3e-4,
    gamma: float = 0.99,
    tau: float = 0.005,
    lr: float = 3e-4,
    n: int = 1,
    backup_scheme: str = EXPECTATION,
    all_anchors: bool = True,
) -> AgentState:
    """Fresh agent with independently initialized Q1/Q2 and matching targets.

    In ADAPTIVE mode the target entropy is ``target_entropy_factor *
    log(num_actions)``.
    """
    if alpha_mode not in (FIXED, ADAPTIVE):
        raise ValueError(f"unknown alpha mode {alpha_mode!r}")
    if not alpha > 0.0:
        raise ValueError("alpha must be positive")
    # near-uniform initial softmax even at small alpha; large initial gaps starve actions of samples
    q1 = mlp_init(layer_sizes, seed, output_scale=OUTPUT_INIT_SCALE)
    q2 = mlp_init(layer_sizes, seed + 1, output_scale=OUTPUT_INIT_SCALE)
    num_actions = q1.layer_sizes[-1]
    temp = TemperatureState(alpha_mode, float(np.log(alpha)), target_entropy_factor * float(np.log(num_actions)),
                            alpha_lr)
    return AgentState(q1, q2, q1.copy(), q2.copy(), adam_init(q1), adam_init(q2), temp, algorithm, backup_scheme, n,
                      gamma, tau, lr, all_anchors, np.random.default_rng(seed + 2))


def min_q(nets, obs) -> np.ndarray:
    n1, n2 = nets
    return np.minimum(predict(n1, obs), predict(n2, obs))


def sample_action(q_row: np.ndarray, alpha: float, rng) -> tuple[int, float]:
    """Draw from softmax(q_row / alpha); returns the action and its log-probability."""
    p = softmax_policy(q_row, alpha)
    cdf = np.cumsum(p)
    a = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    a = min(a, len(p) - 1)
    while p[a] == 0.0:  # guard against landing on a zero-mass tail after rounding
        a -= 1
    return a, float(np.log(p[a]))


def act(agent: AgentState, obs, rng) -> tuple[int, float]:
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape != (agent.layer_sizes[0],):
        raise ValueError(f"observation length {obs.shape} does not match network input {agent.layer_sizes[0]}")
    return sample_action(min_q(agent.acting_nets(), obs), agent.alpha, rng)


def greedy_action(nets, obs) -> int:
    return int(np.argmax(min_q(nets, obs)))


def stack_transitions(batch):
    if len(batch) == 0:
        raise ValueError("empty batch")
    obs = np.stack([t.state for t in batch])
    actions = np.array([t.action for t in batch], dtype=np.int64)
    rewards = np.array([t.reward for t in batch], dtype=np.float64)
    next_obs = np.stack([t.next_state for t in batch])
    dones = np.array([t.done for t in batch], dtype=np.float64)
    return obs, actions, rewards, next_obs, dones


def _target_q(agent, obs):
    return min_q((agent.q1_target, agent.q2_target), obs)


def sqn_targets(agent: AgentState, batch, scheme: str | None = None) -> np.ndarray:
    """One-step soft targets r + gamma (1 - done) V(s').

    V(s') comes from the clipped target Q and ``scheme``:
    EXPECTATION takes E_pi[Q - alpha log pi], LSE takes alpha log Z, and
    SAMPLED uses Q(s', a') - alpha log pi(a'|s') for one a' ~ pi.
    """
    scheme = scheme or agent.backup_scheme
    if scheme not in SCHEMES:
        raise ValueError(f"unknown backup scheme {scheme!r}")
    _, _, rewards, next_obs, dones = stack_transitions(batch)
    alpha = agent.alpha
    qbar = _target_q(agent, next_obs)
    if scheme == LSE:
        v = soft_values(qbar, alpha)
    else:
        logp = log_softmax(qbar, alpha)
        if scheme == EXPECTATION:
            v = np.sum(np.exp(logp) * (qbar - alpha * logp), axis=1)
        else:
            p = np.exp(logp)
            cdf = np.cumsum(p, axis=1)
            u = agent.rng.random(len(qbar))[:, None] * cdf[:, -1:]
            a = np.minimum((cdf <= u).sum(axis=1), qbar.shape[1] - 1)
            rows = np.arange(len(qbar))
            v = qbar[rows, a] - alpha * logp[rows, a]
    return rewards + agent.gamma * (1.0 - dones) * v


def cf_targets(agent: AgentState, batch) -> np.ndarray:
    """Corrective-feedback targets r + gamma (1 - done) alpha log Z(s')."""
    return sqn_targets(agent, batch, LSE)


def _target_entropy(agent, obs):
    logp = log_softmax(_target_q(agent, obs), agent.alpha)
    return -np.sum(np.exp(logp) * logp, axis=-1)


def qop_targets(agent: AgentState, segment: TrajectorySegment):
    """n-step corrective-feedback target for the first step of ``segment``.

    sum_k gamma^k r_k + sum_{k>=1} gamma^k alpha H(pi_target(.|s_k))
    + gamma^L (1 - done) alpha log Z(s_L), with exact entropies of the
    target-network softmax at the stored intermediate states. Returns the
    target and the anchor ``(s_0, a_0)``.
    """
    ts = segment.transitions
    if not ts:
        raise ValueError("empty segment")
    L = len(ts)
    alpha, gamma = agent.alpha, agent.gamma
    last = ts[-1]
    v = soft_values(_target_q(agent, last.next_state[None, :]), alpha)[0]
    g = gamma * (1.0 - float(last.done)) * v
    ent = _target_entropy(agent, np.stack([t.state for t in ts[1:]])) if L > 1 else None
    g = ts[-1].reward + g
    for k in range(L - 2, -1, -1):
        g = ts[k].reward + gamma * (alpha * ent[k] + g)
    return g, (ts[0].state, ts[0].action)


def qop_batch(agent: AgentState, segments, all_anchors: bool | None = None):
    """Vectorized n-step targets for a batch of segments.

    With ``all_anchors`` every step of a segment becomes an anchor with the
    (shorter) n-step target formed by the rest of the segment; otherwise
    only the first step is used. Returns ``(obs, actions, targets)``.
    """
    if all_anchors is None:
        all_anchors = agent.all_anchors
    if len(segments) == 0:
        raise ValueError("empty batch")
    alpha, gamma = agent.alpha, agent.gamma
    lengths = [len(s.transitions) for s in segments]
    if min(lengths) == 0:
        raise ValueError("empty segment in batch")
    flat = [t for s in segments for t in s.transitions]
    obs = np.stack([t.state for t in flat])
    actions = np.array([t.action for t in flat], dtype=np.int64)
    rewards = np.array([t.reward for t in flat])
    ent = _target_entropy(agent, obs)
    finals = np.stack([s.transitions[-1].next_state for s in segments])
    v = soft_values(_target_q(agent, finals), alpha)

    targets = np.empty(len(flat))
    anchor = np.zeros(len(flat), dtype=bool)
    start = 0
    for i, (seg, L) in enumerate(zip(segments, lengths)):
        done = float(seg.transitions[-1].done)
        g = rewards[start + L - 1] + gamma * (1.0 - done) * v[i]
        targets[start + L - 1] = g
        for k in range(L - 2, -1, -1):
            g = rewards[start + k] + gamma * (alpha * ent[start + k + 1] + g)
            targets[start + k] = g
        if all_anchors:
            anchor[start:start + L] = True
        else:
            anchor[start] = True
        start += L
    return obs[anchor], actions[anchor], targets[anchor]


def q_loss_and_grad(params: MlpParams, obs, actions, targets) -> tuple[float, MlpParams]:
    """Mean of 1/2 (Q(s, a) - target)^2; targets are constants."""
    targets = np.asarray(targets, dtype=np.float64)
    if not np.all(np.isfinite(targets)):
        raise FloatingPointError("non-finite regression targets")
    obs = np.asarray(obs, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.int64)
    if obs.ndim == 1:
        obs = obs[None, :]
        actions = actions.reshape(1)
        targets = targets.reshape(1)
    if not (len(obs) == len(actions) == len(targets)):
        raise ValueError("obs, actions and targets must have equal length")
    q, cache = forward(params, obs)
    rows = np.arange(len(obs))
    diff = q[rows, actions] - targets
    loss = 0.5 * float(np.mean(diff * diff))
    g = np.zeros_like(q)
    g[rows, actions] = diff / len(obs)
    return loss, backward(params, cache, g)


def temperature_update(temp: TemperatureState, batch_log_probs) -> TemperatureState:
    """Dual step on J(alpha) = E[-alpha (log pi + target_entropy)] in log-alpha.

    ``batch_log_probs`` holds log pi(a|s) samples or their per-state
    expectations -H(pi(.|s)). FIXED mode returns the state unchanged.
    """
    if temp.mode == FIXED:
        return temp
    mean_logp = float(np.mean(batch_log_probs))
    grad = -temp.alpha * (mean_logp + temp.target_entropy)
    return replace(temp, log_alpha=temp.log_alpha - temp.alpha_lr * grad)


def train_step(agent: AgentState, batch) -> dict:
    """One gradient step on both main networks toward a shared target.

    QOP consumes :class:`TrajectorySegment` objects, SQN and SQN-CF consume
    :class:`Transition` objects. Targets are computed once from the target
    networks before either main network moves. Mutates ``agent``.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    if agent.algorithm == QOP:
        if not isinstance(batch[0], TrajectorySegment):
            raise TypeError("QOP trains on TrajectorySegment batches")
        obs, actions, targets = qop_batch(agent, batch)
    else:
        if not isinstance(batch[0], Transition):
            raise TypeError(f"{agent.algorithm} trains on Transition batches")
        obs, actions = stack_transitions(batch)[:2]
        targets = sqn_targets(agent, batch) if agent.algorithm == SQN else cf_targets(agent, batch)

    loss1, g1 = q_loss_and_grad(agent.q1, obs, actions, targets)
    loss2, g2 = q_loss_and_grad(agent.q2, obs, actions, targets)
    if not (np.isfinite(loss1) and np.isfinite(loss2)):
        raise FloatingPointError("non-finite loss")
    agent.q1, agent.opt1 = adam_step(agent.q1, g1, agent.opt1, agent.lr)
    agent.q2, agent.opt2 = adam_step(agent.q2, g2, agent.opt2, agent.lr)
    agent.q1_target = polyak_update(agent.q1_target, agent.q1, agent.tau)
    agent.q2_target = polyak_update(agent.q2_target, agent.q2, agent.tau)

    logp = log_softmax(min_q(agent.acting_nets(), obs), agent.alpha)
    neg_entropy = np.sum(np.exp(logp) * logp, axis=1)
    agent.temperature = temperature_update(agent.temperature, neg_entropy)
    agent.steps += 1
    return {
        "loss1": loss1,
        "loss2": loss2,
        "mean_entropy": float(-np.mean(neg_entropy)),
        "alpha": agent.alpha,
        "target_mean": float(np.mean(targets)),
    }


def tabular_consistency_probe(agent: AgentState, mdp: TabularMdp, *, episodic: bool | None = None) -> float:
    """Sup-norm gap between the agent's clipped target Q and the exact soft Q*.

    The agent is queried on one-hot encodings of every state. When the MDP
    has terminal states, episodes end there, so terminal rows are skipped
    and Q* is computed with zero terminal value.
    """
    if agent.layer_sizes[0] != mdp.num_states or agent.layer_sizes[-1] != mdp.num_actions:
        raise ValueError("agent network does not match the MDP's one-hot encoding")
    if episodic is None:
        episodic = bool(mdp.terminal_mask.any())
    q_agent = _target_q(agent, np.eye(mdp.num_states))
    q_star = soft_value_iteration(mdp, agent.alpha, episodic=episodic)
    rows = ~mdp.terminal_mask if episodic else np.ones(mdp.num_states, dtype=bool)
    return float(np.max(np.abs(q_agent[rows] - q_star[rows])))


def clone_agent(agent: AgentState) -> AgentState:
    return copy.deepcopy(agent)
