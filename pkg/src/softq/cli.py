"""Command-line entry point.

Subcommands::

    softq train --config run.ini [--seed N] [--out DIR] [--quiet]
    softq eval CHECKPOINT [--opponent random|self|PATH] [--episodes N]
    softq verify {GRAD_EQUIV,TABULAR_SUITE,GRADCHECK} [--seed N]
    softq reuse-sweep --config run.ini --ratios 0.5,1,4
    softq solve-tabular --config run.ini
    softq config-reference

Exit codes: 0 success, 1 invalid input, 2 runtime failure, 3 a
verification check failed. ``SOFTQ_OUT_DIR`` sets the output directory
when ``--out`` is not given.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import signal
import sys
import threading
from pathlib import Path

from .checkpoint import load_agent
from .config import ConfigError, ExperimentConfig, parse_config, parse_config_text, reference_text
from .harness import ParameterServer, agent_snapshot, test_worker
from .nn import CheckpointError
from .tabular import softmax_policy, soft_value_iteration
from .training import TrainingRun, make_env_factory, make_mdp, run_reuse_sweep, sweep_csv
from .verification import KINDS, run_verify

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3
OUT_DIR_ENV = "SOFTQ_OUT_DIR"
STOP_FILE = "STOP"


class UsageError(ValueError):
    """Bad command-line input."""


def _load_config(args) -> ExperimentConfig:
    cfg = parse_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _out_dir(args, cfg: ExperimentConfig | None = None) -> Path | None:
    if args.out:
        return Path(args.out)
    if os.environ.get(OUT_DIR_ENV):
        return Path(os.environ[OUT_DIR_ENV])
    if cfg is None:
        return None
    return Path("runs") / f"{cfg.algorithm.lower()}_{cfg.env}_seed{cfg.seed}"


def _say(args, text):
    if not args.quiet:
        print(text, file=sys.stderr)


def _watch_stop(stop: threading.Event, out_dir: Path):
    """Sets ``stop`` on SIGINT/SIGTERM or when ``out_dir/STOP`` appears."""
    def handler(signum, frame):
        stop.set()

    if threading.current_thread() is threading.main_thread():
        signal.signal(signal.SIGINT, handler)
        signal.signal(signal.SIGTERM, handler)
    flag = out_dir / STOP_FILE

    def poll():
        while not stop.wait(0.5):
            if flag.exists():
                stop.set()
    threading.Thread(target=poll, name="stop-watch", daemon=True).start()


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.total_steps is not None:
        cfg = cfg.replace(total_steps=args.total_steps)
    out = _out_dir(args, cfg)
    stop = threading.Event()
    run = TrainingRun(cfg, out, quiet=args.quiet, stop=stop)
    _watch_stop(stop, out)
    summary = run.run()
    stop.set()
    print(json.dumps(summary, sort_keys=True))
    _say(args, f"outputs in {out}")
    return EXIT_OK if summary["status"] == "ok" else EXIT_RUNTIME


def _checkpoint_config(extra, args) -> ExperimentConfig:
    if args.config:
        return _load_config(args)
    if "config" not in extra:
        raise UsageError("checkpoint carries no config; pass --config")
    return parse_config_text(extra["config"], "<checkpoint config>")


def cmd_eval(args) -> int:
    agent, extra = load_agent(args.checkpoint)
    cfg = _checkpoint_config(extra, args)
    env_factory = make_env_factory(cfg)
    probe = env_factory(0)
    if agent.layer_sizes[0] != probe.observation_length or agent.layer_sizes[-1] != probe.num_actions:
        raise CheckpointError(f"{args.checkpoint}: network {list(agent.layer_sizes)} does not fit env {cfg.env} "
                              f"(observation {probe.observation_length}, actions {probe.num_actions})")
    if args.opponent in ("random", "self"):
        opponent = args.opponent
    else:
        opp_agent, _ = load_agent(args.opponent)
        if opp_agent.layer_sizes != agent.layer_sizes:
            raise CheckpointError(f"{args.opponent}: network {list(opp_agent.layer_sizes)} does not match "
                                  f"{list(agent.layer_sizes)}")
        opponent = agent_snapshot(opp_agent)
    seed = cfg.seed if args.seed is None else args.seed
    report = test_worker(ParameterServer(agent_snapshot(agent)), lambda: env_factory(seed), args.episodes, opponent,
                         seed=seed)
    report.update({"checkpoint": str(args.checkpoint), "opponent": str(args.opponent), "env": cfg.env})
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_verify(args) -> int:
    report = run_verify(args.kind, args.seed or 0)
    if args.summary:
        report = {k: v for k, v in report.items() if k != "checks"}
    print(json.dumps(report, indent=None if args.quiet else 2))
    return EXIT_OK if report["passed"] else EXIT_VERIFY


def _parse_ratios(text: str):
    try:
        ratios = [float(r) for r in text.split(",") if r.strip()]
    except ValueError:
        raise UsageError(f"--ratios: cannot parse {text!r}") from None
    if len(ratios) < 2 or any(r <= 0 for r in ratios):
        raise UsageError("--ratios needs at least two positive values")
    return ratios


def cmd_reuse_sweep(args) -> int:
    cfg = _load_config(args)
    ratios = _parse_ratios(args.ratios)
    out = _out_dir(args)
    report = run_reuse_sweep(cfg, ratios, out, quiet=True)
    sys.stdout.write(sweep_csv(report["rows"]))
    _say(args, f"steps to threshold nondecreasing in ratio: {report['trend_nondecreasing']}")
    return EXIT_OK


def tabular_csv(q_star, policy) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["state", "action", "q", "pi"])
    for s in range(q_star.shape[0]):
        for a in range(q_star.shape[1]):
            writer.writerow([s, a, repr(float(q_star[s, a])), repr(float(policy[s, a]))])
    return buf.getvalue()


def cmd_solve_tabular(args) -> int:
    cfg = _load_config(args)
    mdp = make_mdp(cfg)
    if mdp is None:
        raise UsageError(f"env {cfg.env!r} is not tabular")
    q_star = soft_value_iteration(mdp, cfg.alpha, episodic=args.episodic)
    text = tabular_csv(q_star, softmax_policy(q_star, cfg.alpha))
    if args.out or os.environ.get(OUT_DIR_ENV):
        out = _out_dir(args)
        out.mkdir(parents=True, exist_ok=True)
        (out / "soft_q.csv").write_text(text)
        _say(args, f"wrote {out / 'soft_q.csv'}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_config_reference(args) -> int:
    sys.stdout.write(reference_text())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="softq", description="Soft Q-learning experiments and checks.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="experiment config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help=f"output directory (default: ${OUT_DIR_ENV}, then runs/<name>)")
        p.add_argument("--quiet", action="store_true", help="suppress progress output")

    p = sub.add_parser("train", help="run training")
    common(p)
    p.add_argument("--total-steps", type=int, help="override total environment steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="greedy match report for a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--opponent", default="random", help="'random', 'self' or an opponent checkpoint")
    p.add_argument("--episodes", type=int, default=1000)
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run a property suite")
    p.add_argument("kind", type=str.upper, choices=KINDS)
    p.add_argument("--summary", action="store_true", help="omit per-check details")
    common(p, config=False)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("reuse-sweep", help="steps to threshold for several reuse ratios (CSV)")
    common(p)
    p.add_argument("--ratios", default="0.5,1,4")
    p.set_defaults(func=cmd_reuse_sweep)

    p = sub.add_parser("solve-tabular", help="exact soft Q* and softmax policy as CSV")
    common(p)
    p.add_argument("--episodic", action="store_true", help="terminal states have zero value")
    p.set_defaults(func=cmd_solve_tabular)

    p = sub.add_parser("config-reference", help="print every config key with its default")
    p.set_defaults(func=cmd_config_reference)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses 2 for usage errors; here that code means a runtime failure
        return EXIT_INVALID if exc.code else EXIT_OK
    if not hasattr(args, "quiet"):
        args.quiet = False
    try:
        return args.func(args)
    except (ConfigError, UsageError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
