"""Self-contained property suites behind ``softq verify``.

Each suite returns a JSON-serializable report with a top-level ``passed``
flag and one entry per check carrying the measured value.
"""

from __future__ import annotations

import time

import numpy as np

from .mdp import build_random_mdp
from .nn import backward, finite_diff_grad, forward, mlp_init
from .spg import relative_deviation, verify_equivalence
from .tabular import soft_policy_iteration

GRAD_EQUIV, TABULAR_SUITE, GRADCHECK = "GRAD_EQUIV", "TABULAR_SUITE", "GRADCHECK"
KINDS = (GRAD_EQUIV, TABULAR_SUITE, GRADCHECK)

MONOTONE_SLACK = 1e-9
EQUIV_TOLERANCE = 1e-6
FD_TOLERANCE = 1e-4


def equivalence_cases(seed: int, count: int):
    """Random (network shape, batch size, alpha) draws for the gradient check."""
    rng = np.random.default_rng(seed)
    for i in range(count):
        depth = int(rng.integers(0, 3))
        sizes = [int(rng.integers(2, 9))]
        sizes += [int(rng.integers(3, 17)) for _ in range(depth)]
        sizes.append(int(rng.integers(2, 7)))
        yield {
            "seed": int(rng.integers(2**31)),
            "net_spec": tuple(sizes),
            "batch_size": int(rng.integers(1, 33)),
            "alpha": float(10.0 ** rng.uniform(-2, 1)),
        }


def grad_equiv_suite(seed: int = 0, count: int = 50, check_fd: bool = True) -> dict:
    checks = []
    for case in equivalence_cases(seed, count):
        rep = verify_equivalence(case["seed"], case["net_spec"], case["batch_size"], case["alpha"],
                                 tolerance=EQUIV_TOLERANCE, check_fd=check_fd)
        fd_ok = all(v < FD_TOLERANCE for v in rep.fd_rel_deviation.values())
        checks.append({
            **case,
            "net_spec": list(case["net_spec"]),
            "max_rel_dev": rep.max_rel_deviation,
            "fd_rel_dev": rep.fd_rel_deviation,
            "passed": bool(rep.passed and fd_ok),
        })
    return {
        "kind": GRAD_EQUIV,
        "passed": all(c["passed"] for c in checks),
        "max_rel_dev": max(c["max_rel_dev"] for c in checks),
        "max_fd_rel_dev": max((v for c in checks for v in c["fd_rel_dev"].values()), default=None),
        "tolerance": EQUIV_TOLERANCE,
        "fd_tolerance": FD_TOLERANCE,
        "checks": checks,
    }


def monotone_improvement_check(mdp, alpha: float, q0, iters: int = 20) -> float:
    """Smallest elementwise change Q_{k+1} - Q_k over the policy-iteration steps."""
    qs, _ = soft_policy_iteration(mdp, alpha, iters, q0=q0)
    return float(min(np.min(b - a) for a, b in zip(qs[:-1], qs[1:])))


def tabular_suite(seed: int = 0, count: int = 100, alphas=(0.05, 0.5, 2.0), iters: int = 20) -> dict:
    rng = np.random.default_rng(seed)
    checks = []
    for i in range(count):
        num_states, num_actions = int(rng.integers(2, 7)), int(rng.integers(2, 5))
        gamma = float(rng.uniform(0.5, 0.95))
        mdp = build_random_mdp(int(rng.integers(2**31)), num_states, num_actions, gamma)
        q0 = rng.normal(scale=2.0, size=(num_states, num_actions))
        worst = {a: monotone_improvement_check(mdp, a, q0, iters) for a in alphas}
        checks.append({
            "mdp": i,
            "num_states": num_states,
            "num_actions": num_actions,
            "gamma": gamma,
            "min_improvement": {str(a): v for a, v in worst.items()},
            "passed": all(v >= -MONOTONE_SLACK for v in worst.values()),
        })
    monotone = sum(c["passed"] for c in checks)
    return {
        "kind": TABULAR_SUITE,
        "passed": monotone == count,
        "monotone": monotone,
        "total": count,
        "slack": MONOTONE_SLACK,
        "checks": checks,
    }


def gradcheck_suite(seed: int = 0, count: int = 10) -> dict:
    """Backpropagation against central finite differences on squared-error losses."""
    rng = np.random.default_rng(seed)
    checks = []
    for i in range(count):
        sizes = [int(rng.integers(2, 7))] + [int(rng.integers(2, 9)) for _ in range(int(rng.integers(0, 3)))]
        sizes.append(int(rng.integers(1, 5)))
        params = mlp_init(sizes, int(rng.integers(2**31)))
        params.biases = [rng.normal(scale=0.1, size=b.shape) for b in params.biases]
        x = rng.normal(size=(int(rng.integers(1, 9)), sizes[0]))
        y = rng.normal(size=(x.shape[0], sizes[-1]))

        def loss(p):
            out, _ = forward(p, x)
            return 0.5 * float(np.sum((out - y) ** 2))

        out, cache = forward(params, x)
        grad = backward(params, cache, out - y)
        rel = relative_deviation(grad, finite_diff_grad(loss, params))
        checks.append({"case": i, "layer_sizes": sizes, "rel_err": rel, "passed": rel < FD_TOLERANCE})
    return {
        "kind": GRADCHECK,
        "passed": all(c["passed"] for c in checks),
        "max_rel_err": max(c["rel_err"] for c in checks),
        "tolerance": FD_TOLERANCE,
        "checks": checks,
    }


def run_verify(kind: str, seed: int = 0) -> dict:
    kind = kind.upper()
    suites = {GRAD_EQUIV: grad_equiv_suite, TABULAR_SUITE: tabular_suite, GRADCHECK: gradcheck_suite}
    if kind not in suites:
        raise ValueError(f"unknown verification kind {kind!r}; choose from {', '.join(KINDS)}")
    start = time.monotonic()
    report = suites[kind](seed)
    report["seed"] = seed
    report["runtime_s"] = time.monotonic() - start
    return report
