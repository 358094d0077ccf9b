"""Experiment configuration: flat ``key = value`` text grouped in sections.

Example::

    [experiment]
    algorithm = QOP
    env = grid_soccer

    [agent]
    n = 4

Every key belongs to exactly one section. Unknown keys are rejected with
the closest valid key suggested.
"""

from __future__ import annotations

import configparser
import difflib
import math
import re
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .agents import ADAPTIVE, ALGORITHMS, FIXED, SCHEMES

ENVS = ("gridworld", "chain", "random_mdp", "grid_soccer")
MODES = ("sync", "threaded")


class ConfigError(ValueError):
    """Invalid configuration; the message names the file, line and key."""


@dataclass
class ExperimentConfig:
    # [experiment]
    algorithm: str = "QOP"
    env: str = "gridworld"
    seed: int = 0
    total_steps: int = 50_000
    mode: str = "sync"
    # [env]
    grid_width: int = 4
    grid_height: int = 4
    slip_prob: float = 0.0
    num_states: int = 5
    num_actions: int = 3
    max_steps: int = 100
    # [agent]
    hidden_sizes: tuple = (64, 64)
    gamma: float = 0.9
    tau: float = 0.05
    lr: float = 1e-3
    n: int = 4
    alpha_mode: str = FIXED
    alpha: float = 0.1
    target_entropy_factor: float = 0.5
    alpha_lr: float = 1e-3
    backup_scheme: str = "EXPECTATION"
    all_anchors: bool = True
    # [harness]
    batch_size: int = 32
    buffer_capacity: int = 50_000
    reuse_ratio_target: float = 4.0
    learning_starts: int = 100
    publish_interval: int = 1
    refresh_interval: int = 1
    num_rollout_workers: int = 1
    cache_depth: int = 2
    log_interval: int = 100
    eval_interval: int = 10_000
    eval_episodes: int = 100
    log_wall_time: bool = False
    stop_at_threshold: bool = False
    threshold: float = -1.0
    # [selfplay]
    selfplay: bool = False
    mix_prob: float = 0.8
    gate_threshold: float = 0.6
    min_games: int = 100
    gate_window: int = 200
    history_size: int = 20

    def validate(self):
        """Range checks; raises ConfigError naming the offending key."""
        def bad(key, msg):
            raise ConfigError(f"{key}: {msg} (got {getattr(self, key)!r})")

        if self.algorithm not in ALGORITHMS:
            bad("algorithm", f"must be one of {', '.join(ALGORITHMS)}")
        if self.env not in ENVS:
            bad("env", f"must be one of {', '.join(ENVS)}")
        if self.mode not in MODES:
            bad("mode", f"must be one of {', '.join(MODES)}")
        if self.alpha_mode not in (FIXED, ADAPTIVE):
            bad("alpha_mode", "must be FIXED or ADAPTIVE")
        if self.backup_scheme not in SCHEMES:
            bad("backup_scheme", f"must be one of {', '.join(SCHEMES)}")
        if not 0.0 <= self.gamma < 1.0:
            bad("gamma", "must lie in [0, 1)")
        if not 0.0 <= self.tau <= 1.0:
            bad("tau", "must lie in [0, 1]")
        if self.n < 1:
            bad("n", "must be >= 1")
        if not (self.alpha > 0.0 and math.isfinite(self.alpha)):
            bad("alpha", "must be > 0")
        if not self.lr > 0.0:
            bad("lr", "must be > 0")
        if not 0.0 <= self.slip_prob < 1.0:
            bad("slip_prob", "must lie in [0, 1)")
        if not 0.0 <= self.mix_prob <= 1.0:
            bad("mix_prob", "must lie in [0, 1]")
        if not 0.0 < self.gate_threshold <= 1.0:
            bad("gate_threshold", "must lie in (0, 1]")
        if not self.reuse_ratio_target > 0.0:
            bad("reuse_ratio_target", "must be > 0")
        for key in ("grid_width", "grid_height", "num_states", "num_actions", "max_steps", "batch_size",
                    "buffer_capacity", "publish_interval", "refresh_interval", "num_rollout_workers",
                    "cache_depth", "log_interval", "eval_interval", "eval_episodes", "min_games", "gate_window",
                    "history_size"):
            if getattr(self, key) < 1:
                bad(key, "must be >= 1")
        for key in ("seed", "total_steps", "learning_starts"):
            if getattr(self, key) < 0:
                bad(key, "must be >= 0")
        if any(h < 1 for h in self.hidden_sizes):
            bad("hidden_sizes", "every hidden layer needs at least one unit")
        if self.gate_window < self.min_games:
            bad("gate_window", "must be >= min_games")
        return self

    def replace(self, **changes) -> "ExperimentConfig":
        data = asdict(self)
        data.update(changes)
        data["hidden_sizes"] = tuple(data["hidden_sizes"])
        return ExperimentConfig(**data).validate()


SECTIONS = {
    "experiment": ("algorithm", "env", "seed", "total_steps", "mode"),
    "env": ("grid_width", "grid_height", "slip_prob", "num_states", "num_actions", "max_steps"),
    "agent": ("hidden_sizes", "gamma", "tau", "lr", "n", "alpha_mode", "alpha", "target_entropy_factor", "alpha_lr",
              "backup_scheme", "all_anchors"),
    "harness": ("batch_size", "buffer_capacity", "reuse_ratio_target", "learning_starts", "publish_interval",
                "refresh_interval", "num_rollout_workers", "cache_depth", "log_interval", "eval_interval",
                "eval_episodes", "log_wall_time", "stop_at_threshold", "threshold"),
    "selfplay": ("selfplay", "mix_prob", "gate_threshold", "min_games", "gate_window", "history_size"),
}
_SECTION_OF = {key: sec for sec, keys in SECTIONS.items() for key in keys}
_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}
_DEFAULTS = ExperimentConfig()

assert set(_SECTION_OF) == set(_TYPES), "every config field must belong to one section"


def _convert(key: str, raw: str):
    kind = _TYPES[key]
    raw = raw.strip()
    if kind == "bool":
        low = raw.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError("expected true or false")
    if kind == "int":
        return int(raw.replace("_", ""))
    if kind == "float":
        return float(raw)
    if kind == "tuple":
        parts = [p for p in re.split(r"[,\s]+", raw) if p]
        return tuple(int(p) for p in parts)
    if key in ("algorithm", "alpha_mode", "backup_scheme"):
        return raw.upper()
    return raw


def _line_of(lines, section, key):
    current = None
    for i, line in enumerate(lines, 1):
        s = line.strip()
        m = re.match(r"^\[(.+)\]$", s)
        if m:
            current = m.group(1).strip().lower()
        elif current == section and re.match(rf"^{re.escape(key)}\s*[=:]", s, re.IGNORECASE):
            return i
    return None


def _suggest(key, candidates):
    close = difflib.get_close_matches(key, candidates, n=1)
    return f"; did you mean {close[0]!r}?" if close else ""


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: malformed config: {exc}") from None
    lines = text.splitlines()
    values = {}
    for section in parser.sections():
        sec = section.strip().lower()
        if sec not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]{_suggest(sec, list(SECTIONS))}")
        for key, raw in parser.items(section):
            where = f"{source}:{_line_of(lines, sec, key) or '?'}"
            if key not in _SECTION_OF:
                raise ConfigError(f"{where}: unknown key {key!r}{_suggest(key, list(_SECTION_OF))}")
            if _SECTION_OF[key] != sec:
                raise ConfigError(f"{where}: key {key!r} belongs in section [{_SECTION_OF[key]}], not [{sec}]")
            try:
                values[key] = _convert(key, raw)
            except ValueError as exc:
                raise ConfigError(f"{where}: {key}: cannot parse {raw!r}: {exc}") from None
    cfg = ExperimentConfig(**values)
    try:
        return cfg.validate()
    except ConfigError as exc:
        key = str(exc).split(":", 1)[0]
        line = _line_of(lines, _SECTION_OF.get(key, ""), key)
        raise ConfigError(f"{source}:{line or '?'}: {exc}") from None


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError(f"{path}: config file not found") from None
    return parse_config_text(text, str(path))


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_config(cfg: ExperimentConfig, only_changed: bool = False) -> str:
    out = []
    for section, keys in SECTIONS.items():
        rows = []
        for key in keys:
            value = getattr(cfg, key)
            if only_changed and value == getattr(_DEFAULTS, key):
                continue
            rows.append(f"{key} = {_format(value)}")
        if rows:
            out.append(f"[{section}]")
            out.extend(rows)
            out.append("")
    return "\n".join(out)


def reference_text() -> str:
    """All keys with their defaults, grouped by section."""
    return serialize_config(_DEFAULTS)
