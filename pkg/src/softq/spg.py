"""Numerical check that soft Q regression and soft policy gradient coincide.

Writing Q(s, a) = V(s) + alpha * log pi(a|s) with V = alpha log Z and
pi = softmax(Q / alpha), the gradient of 1/2 (Q(s, a) - Qhat)^2 splits into

* a value term: grad V(s) * (V(s) - (Qhat - alpha log pi(a|s))), i.e. value
  regression toward the entropy-augmented target, and
* a policy term: -alpha grad log pi(a|s) * (Qhat - V(s) - alpha log pi(a|s)).

Both paths below backpropagate through the same network but through
different output gradients, so agreement is a real check of the algebra.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import MlpParams, backward, finite_diff_grad, forward, mlp_init, predict
from .tabular import log_softmax, logsumexp_rows


@dataclass
class GradientReport:
    max_abs_deviation: float
    max_rel_deviation: float
    per_layer: list = field(default_factory=list)
    batch: dict = field(default_factory=dict)
    fd_rel_deviation: dict = field(default_factory=dict)
    tolerance: float = 1e-6
    finite: bool = True

    @property
    def passed(self) -> bool:
        return self.finite and self.max_rel_deviation < self.tolerance

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "max_abs_deviation": self.max_abs_deviation,
            "max_rel_deviation": self.max_rel_deviation,
            "tolerance": self.tolerance,
            "finite": self.finite,
            "per_layer": self.per_layer,
            "batch": self.batch,
            "fd_rel_deviation": self.fd_rel_deviation,
        }


def decompose_q(params: MlpParams, obs, alpha: float):
    """Split Q(obs, .) into the soft value V and log pi."""
    if not alpha > 0.0:
        raise ValueError("alpha must be positive")
    q = predict(params, np.asarray(obs, dtype=np.float64))
    lse = logsumexp_rows(q / alpha)
    log_pi = q / alpha - lse[..., None]
    return alpha * lse, log_pi


def _check(targets):
    targets = np.asarray(targets, dtype=np.float64)
    if not np.all(np.isfinite(targets)):
        raise FloatingPointError("non-finite targets")
    return targets


def sql_gradient(params: MlpParams, obs, actions, targets, alpha: float | None = None) -> MlpParams:
    """Gradient of mean 1/2 (Q(s, a) - Qhat)^2. ``alpha`` is unused here."""
    targets = _check(targets)
    q, cache = forward(params, obs)
    rows = np.arange(len(targets))
    g = np.zeros_like(q)
    g[rows, actions] = (q[rows, actions] - targets) / len(targets)
    return backward(params, cache, g)


def spg_terms(params: MlpParams, obs, actions, targets, alpha: float, *, drop_policy_term: bool = False,
              entropy_value_target: bool = True):
    """Value-term and policy-term gradients of the soft policy gradient objective.

    grad V = sum_a pi(a) grad Q(a) and grad log pi(a) = (grad Q(a) - grad V) / alpha,
    so each term is one backward pass with a hand-built output gradient.

    With ``entropy_value_target=False`` V regresses on Qhat itself; that
    variant misses the cross term alpha log pi(a|s) grad V(s) and does not
    match the soft-Q gradient.
    """
    targets = _check(targets)
    q, cache = forward(params, obs)
    B, A = q.shape
    rows = np.arange(B)
    log_pi = log_softmax(q, alpha)
    pi = np.exp(log_pi)
    V = alpha * logsumexp_rows(q / alpha)
    lp = log_pi[rows, actions]
    if not (np.all(np.isfinite(V)) and np.all(np.isfinite(lp))):
        raise FloatingPointError("non-finite value or log-probability")

    value_residual = V - (targets - alpha * lp) if entropy_value_target else V - targets
    g_value = value_residual[:, None] * pi / B

    advantage = targets - V - alpha * lp
    onehot = np.zeros_like(q)
    onehot[rows, actions] = 1.0
    # -alpha * grad log pi * adv, with grad log pi = (e_a - pi) . grad Q / alpha
    g_policy = -advantage[:, None] * (onehot - pi) / B
    if drop_policy_term:
        g_policy = np.zeros_like(g_policy)
    return backward(params, cache, g_value), backward(params, cache, g_policy)


def spg_gradient(params: MlpParams, obs, actions, targets, alpha: float, *, drop_policy_term: bool = False,
                 entropy_value_target: bool = True):
    value, policy = spg_terms(params, obs, actions, targets, alpha, drop_policy_term=drop_policy_term,
                              entropy_value_target=entropy_value_target)
    return MlpParams(tuple(params.layer_sizes), [a + b for a, b in zip(value.weights, policy.weights)],
                     [a + b for a, b in zip(value.biases, policy.biases)])


def sql_loss(params: MlpParams, obs, actions, targets) -> float:
    q = predict(params, obs)
    d = q[np.arange(len(targets)), actions] - targets
    return 0.5 * float(np.mean(d * d))


def spg_surrogate(params: MlpParams, obs, actions, targets, alpha: float, ref: MlpParams) -> float:
    """Scalar whose gradient at ``params == ref`` is the SPG gradient.

    Residuals and advantages are frozen at ``ref`` (stop-gradient), as in
    the usual actor-critic surrogate.
    """
    V0, logpi0 = decompose_q(ref, obs, alpha)
    rows = np.arange(len(targets))
    lp0 = logpi0[rows, actions]
    value_target = targets - alpha * lp0
    adv = targets - V0 - alpha * lp0
    V, logpi = decompose_q(params, obs, alpha)
    value_loss = 0.5 * np.mean((V - value_target) ** 2)
    policy_loss = -alpha * np.mean(logpi[rows, actions] * adv)
    return float(value_loss + policy_loss)


def relative_deviation(a: MlpParams, b: MlpParams, floor: float = 1e-12) -> float:
    """max |a - b| / max(max |b|, floor), over all coordinates."""
    fa, fb = a.flat(), b.flat()
    return float(np.max(np.abs(fa - fb)) / max(float(np.max(np.abs(fb))), floor))


def sample_batch(params: MlpParams, batch_size: int, alpha: float, rng, target_scale: float = 1.0):
    """Synthetic on-policy batch: Gaussian states, actions drawn from the
    network's own softmax, arbitrary constant targets."""
    obs = rng.normal(size=(batch_size, params.layer_sizes[0]))
    pi = np.exp(log_softmax(predict(params, obs), alpha))
    cdf = np.cumsum(pi, axis=1)
    u = rng.random(batch_size)[:, None] * cdf[:, -1:]
    actions = np.minimum((cdf <= u).sum(axis=1), pi.shape[1] - 1)
    targets = rng.normal(scale=target_scale, size=batch_size)
    return obs, actions, targets


def verify_equivalence(
    seed: int = 0,
    net_spec=(8, 16, 4),
    batch_size: int = 16,
    alpha: float = 0.7,
    *,
    tolerance: float = 1e-6,
    check_fd: bool = False,
    fd_epsilon: float = 1e-5,
    drop_policy_term: bool = False,
    targets=None,
) -> GradientReport:
    """Compare the soft-Q regression gradient with the SPG gradient on a
    random network and batch."""
    rng = np.random.default_rng(seed)
    params = mlp_init(net_spec, seed)
    # nonzero biases so the check does not rely on a special initialization
    params.biases = [rng.normal(scale=0.1, size=b.shape) for b in params.biases]
    obs, actions, tgt = sample_batch(params, batch_size, alpha, rng)
    if targets is not None:
        tgt = np.asarray(targets, dtype=np.float64)

    g_sql = sql_gradient(params, obs, actions, tgt, alpha)
    g_spg = spg_gradient(params, obs, actions, tgt, alpha, drop_policy_term=drop_policy_term)
    finite = g_sql.is_finite() and g_spg.is_finite()

    per_layer = []
    for i, (ws, wp, bs, bp) in enumerate(zip(g_sql.weights, g_spg.weights, g_sql.biases, g_spg.biases)):
        d = np.concatenate([(ws - wp).ravel(), (bs - bp).ravel()])
        ref = np.concatenate([ws.ravel(), bs.ravel()])
        per_layer.append({
            "layer": i,
            "max_abs_deviation": float(np.max(np.abs(d))),
            "max_rel_deviation": float(np.max(np.abs(d)) / max(float(np.max(np.abs(ref))), 1e-12)),
        })
    max_abs = float(np.max(np.abs(g_sql.flat() - g_spg.flat()))) if finite else float("inf")
    max_rel = relative_deviation(g_spg, g_sql) if finite else float("inf")

    fd = {}
    if check_fd and finite:
        g_fd_sql = finite_diff_grad(lambda p: sql_loss(p, obs, actions, tgt), params, fd_epsilon)
        g_fd_spg = finite_diff_grad(lambda p: spg_surrogate(p, obs, actions, tgt, alpha, params), params, fd_epsilon)
        fd = {"sql": relative_deviation(g_sql, g_fd_sql), "spg": relative_deviation(g_spg, g_fd_spg)}

    return GradientReport(
        max_abs_deviation=max_abs,
        max_rel_deviation=max_rel,
        per_layer=per_layer,
        batch={"seed": seed, "net_spec": list(net_spec), "batch_size": batch_size, "alpha": alpha},
        fd_rel_deviation=fd,
        tolerance=tolerance,
        finite=finite,
    )
