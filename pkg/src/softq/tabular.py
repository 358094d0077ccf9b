"""Exact entropy-regularized dynamic programming on tabular MDPs.

Q-tables are ``(S, A)`` float64 arrays and policies are ``(S, A)`` arrays of
row-stochastic probabilities. The soft value of a state under a policy is

    V(s) = E_{a~pi}[Q(s, a) - alpha * log pi(a|s)]

and the soft Bellman backup is ``Q(s, a) = r(s, a) + gamma * E[V(s')]``, so
entropy bonuses accrue from the next state onward.

Several functions take ``episodic``: when true, terminal states contribute
zero value instead of accruing entropy forever in their self-loop. This
matches agents that stop bootstrapping at episode end.
"""

from __future__ import annotations

import numpy as np

from .mdp import TabularMdp

LINEAR_SOLVE_MAX_STATES = 2000


class NotConverged(RuntimeError):
    pass


def _check_alpha(alpha):
    if not alpha > 0.0 or not np.isfinite(alpha):
        raise ValueError(f"alpha must be a positive finite number, got {alpha}")


def _check_rows(q):
    q = np.asarray(q, dtype=np.float64)
    if q.size == 0 or q.shape[-1] == 0:
        raise ValueError("empty Q row")
    if not np.all(np.isfinite(q)):
        raise ValueError("Q values must be finite")
    return q


def logsumexp_rows(x: np.ndarray) -> np.ndarray:
    """log(sum(exp(x))) along the last axis, max-shifted."""
    m = np.max(x, axis=-1, keepdims=True)
    return (m + np.log(np.sum(np.exp(x - m), axis=-1, keepdims=True)))[..., 0]


def soft_values(q: np.ndarray, alpha: float) -> np.ndarray:
    """alpha * logsumexp(q / alpha) along the last axis (vectorized)."""
    return alpha * logsumexp_rows(q / alpha)


def log_softmax(q: np.ndarray, alpha: float) -> np.ndarray:
    z = q / alpha
    return z - logsumexp_rows(z)[..., None]


def softmax_policy(q_row, alpha: float) -> np.ndarray:
    """Boltzmann distribution exp(Q/alpha - log Z) over the last axis.

    Works on a single row or on a stack of rows.
    """
    _check_alpha(alpha)
    q = _check_rows(q_row)
    z = q / alpha
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def soft_value_lse(q_row, alpha: float) -> float:
    """Soft state value alpha * log sum_a exp(Q(a)/alpha)."""
    _check_alpha(alpha)
    q = _check_rows(q_row)
    if q.ndim != 1:
        raise ValueError("expected a single Q row")
    return float(soft_values(q, alpha))


def policy_entropy(dist) -> float | np.ndarray:
    """Shannon entropy in nats along the last axis, with 0 log 0 = 0."""
    p = np.asarray(dist, dtype=np.float64)
    plogp = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    h = -np.sum(plogp, axis=-1)
    if np.ndim(h) == 0:
        return float(max(h, 0.0))
    return np.maximum(h, 0.0)


def _check_shapes(mdp: TabularMdp, table, name):
    table = np.asarray(table, dtype=np.float64)
    if table.shape != (mdp.num_states, mdp.num_actions):
        raise ValueError(f"{name} shape {table.shape} does not match MDP ({mdp.num_states}, {mdp.num_actions})")
    return table


def soft_policy_evaluation(mdp: TabularMdp, policy, alpha: float, *, episodic: bool = False) -> np.ndarray:
    """Soft Q-function of a fixed policy (unique fixed point of the soft backup).

    Uses a direct linear solve over state values; falls back to iterating
    the backup for very large state spaces.
    """
    pi = _check_shapes(mdp, policy, "policy")
    if alpha < 0.0:
        raise ValueError("alpha must be non-negative")
    P, R, gamma = mdp.transition, mdp.reward, mdp.gamma
    S = mdp.num_states
    # expected reward plus entropy bonus collected at s when following pi
    r_pi = np.sum(pi * R, axis=1) + alpha * policy_entropy(pi)
    P_pi = np.einsum("sa,sat->st", pi, P)
    if episodic:
        live = ~mdp.terminal_mask
        r_pi = np.where(live, r_pi, 0.0)
        P_pi = P_pi * live[:, None]
    if S <= LINEAR_SOLVE_MAX_STATES:
        V = np.linalg.solve(np.eye(S) - gamma * P_pi, r_pi)
    else:
        V = np.zeros(S)
        for _ in range(100_000):
            V_new = r_pi + gamma * P_pi @ V
            if np.max(np.abs(V_new - V)) < 1e-10:
                V = V_new
                break
            V = V_new
        else:
            raise NotConverged("iterative policy evaluation did not converge")
    if episodic:
        V = np.where(mdp.terminal_mask, 0.0, V)
    return R + gamma * P @ V


def cf_backup(mdp: TabularMdp, q, alpha: float, *, episodic: bool = False) -> np.ndarray:
    """One sweep of Q'(s,a) = r(s,a) + gamma * E_{s'}[alpha * log Z(s')].

    The expectation over s' is taken exactly from the transition tensor.
    """
    _check_alpha(alpha)
    q = _check_shapes(mdp, q, "q")
    V = soft_values(q, alpha)
    if episodic:
        V = np.where(mdp.terminal_mask, 0.0, V)
    return mdp.reward + mdp.gamma * mdp.transition @ V


def soft_value_iteration(
    mdp: TabularMdp,
    alpha: float,
    tol: float = 1e-12,
    max_iters: int = 100_000,
    *,
    episodic: bool = False,
    q0=None,
    return_residuals: bool = False,
):
    """Iterate :func:`cf_backup` from ``q0`` (zeros) to its fixed point.

    Stops once the sup-norm change between sweeps drops below ``tol``.
    Raises :class:`NotConverged` if ``max_iters`` sweeps are not enough.
    """
    if not tol > 0.0:
        raise ValueError("tol must be positive")
    q = np.zeros((mdp.num_states, mdp.num_actions)) if q0 is None else _check_shapes(mdp, q0, "q0")
    residuals = []
    for _ in range(max_iters):
        q_new = cf_backup(mdp, q, alpha, episodic=episodic)
        res = float(np.max(np.abs(q_new - q)))
        residuals.append(res)
        q = q_new
        if res < tol:
            return (q, residuals) if return_residuals else q
    raise NotConverged(f"soft value iteration: residual {residuals[-1]:.3e} after {max_iters} sweeps")


def hard_value_iteration(mdp: TabularMdp, tol: float = 1e-12, max_iters: int = 100_000, *, episodic: bool = False):
    """Standard (max) value iteration; the alpha -> 0 limit of the soft one."""
    q = np.zeros((mdp.num_states, mdp.num_actions))
    for _ in range(max_iters):
        V = q.max(axis=1)
        if episodic:
            V = np.where(mdp.terminal_mask, 0.0, V)
        q_new = mdp.reward + mdp.gamma * mdp.transition @ V
        if np.max(np.abs(q_new - q)) < tol:
            return q_new
        q = q_new
    raise NotConverged("value iteration did not converge")


def soft_policy_iteration(mdp: TabularMdp, alpha: float, iters: int, *, q0=None, episodic: bool = False):
    """Alternate softmax improvement and exact soft evaluation.

    Starting from ``q0`` (zeros), step k sets pi_k = softmax(Q_{k-1}/alpha)
    and Q_k = Q^{pi_k}. Returns the lists ``(qs, policies)`` of length
    ``iters``.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    _check_alpha(alpha)
    q = np.zeros((mdp.num_states, mdp.num_actions)) if q0 is None else _check_shapes(mdp, q0, "q0")
    qs, policies = [], []
    for _ in range(iters):
        pi = softmax_policy(q, alpha)
        q = soft_policy_evaluation(mdp, pi, alpha, episodic=episodic)
        qs.append(q)
        policies.append(pi)
    return qs, policies


def truncation_bound(mdp: TabularMdp, alpha: float, horizon: int) -> float:
    """Upper bound on the tail dropped by :func:`brute_force_return`."""
    g = mdp.gamma
    r_max = float(np.max(np.abs(mdp.reward)))
    return g ** (horizon + 1) * (r_max + alpha * np.log(mdp.num_actions)) / (1.0 - g)


def horizon_for(mdp: TabularMdp, alpha: float, bound: float) -> int:
    """Smallest horizon whose truncation bound is below ``bound``."""
    if mdp.gamma == 0.0:
        return 1
    h = 1
    while truncation_bound(mdp, alpha, h) >= bound:
        h += 1
    return h


def brute_force_return(mdp: TabularMdp, policy, alpha: float, horizon: int, start) -> float:
    """Expected truncated soft return from ``start = (state, action)``.

    Sums gamma^t r_t + gamma^(t+1) alpha H(pi(.|s_{t+1})) for t = 0..horizon
    by propagating the exact state distribution forward; nothing is
    sampled and no Bellman equation is solved.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    pi = _check_shapes(mdp, policy, "policy")
    P, R, g = mdp.transition, mdp.reward, mdp.gamma
    H = policy_entropy(pi)
    s0, a0 = start
    d = np.zeros_like(pi)  # distribution over (s_t, a_t)
    d[s0, a0] = 1.0
    total = 0.0
    disc = 1.0
    for _ in range(horizon + 1):
        total += disc * float(np.sum(d * R))
        state_next = np.einsum("sa,sat->t", d, P)
        total += disc * g * alpha * float(state_next @ H)
        d = state_next[:, None] * pi
        disc *= g
        if disc == 0.0:
            break
    return total
