"""Binary checkpoint formats.

Agent file::

    b"SOFTQAGT" | u32 version | u32 header_len | header (UTF-8 JSON)
    | net block q1 | net block q2 | net block q1_target | net block q2_target

Each net block is the :mod:`softq.nn` format (magic, version, layer sizes,
little-endian float64 W0, b0, W1, b1, ...). Table file::

    b"SOFTQTBL" | u32 version | u32 ndim | u32 dims... | float64 data (C order)
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .agents import AgentState, TemperatureState, make_agent
from .nn import CheckpointError, adam_init, params_from_bytes, params_to_bytes

AGENT_MAGIC = b"SOFTQAGT"
TABLE_MAGIC = b"SOFTQTBL"
FORMAT_VERSION = 1


def agent_to_bytes(agent: AgentState, extra: dict | None = None) -> bytes:
    header = {
        "algorithm": agent.algorithm,
        "alpha": agent.alpha,
        "log_alpha": agent.temperature.log_alpha,
        "alpha_mode": agent.temperature.mode,
        "target_entropy": agent.temperature.target_entropy,
        "alpha_lr": agent.temperature.alpha_lr,
        "n": agent.n,
        "gamma": agent.gamma,
        "tau": agent.tau,
        "lr": agent.lr,
        "backup_scheme": agent.backup_scheme,
        "layer_sizes": list(agent.layer_sizes),
        "steps": agent.steps,
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode()
    parts = [AGENT_MAGIC, struct.pack("<II", FORMAT_VERSION, len(blob)), blob]
    parts += [params_to_bytes(net) for net in (agent.q1, agent.q2, agent.q1_target, agent.q2_target)]
    return b"".join(parts)


def agent_from_bytes(buf: bytes, source: str = "<bytes>") -> tuple[AgentState, dict]:
    if buf[:8] != AGENT_MAGIC:
        raise CheckpointError(f"{source}: not an agent checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", buf, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source}: checkpoint version {version}, expected {FORMAT_VERSION}")
    header = json.loads(buf[16:16 + hlen].decode())
    offset = 16 + hlen
    nets = []
    for name in ("q1", "q2", "q1_target", "q2_target"):
        try:
            net, offset = params_from_bytes(buf, offset)
        except CheckpointError as exc:
            raise CheckpointError(f"{source}: network {name}: {exc}") from None
        if list(net.layer_sizes) != header["layer_sizes"]:
            raise CheckpointError(f"{source}: network {name} has layer sizes {list(net.layer_sizes)}, "
                                  f"header says {header['layer_sizes']}")
        nets.append(net)
    if offset != len(buf):
        raise CheckpointError(f"{source}: {len(buf) - offset} trailing bytes")
    q1, q2, q1t, q2t = nets
    temp = TemperatureState(header["alpha_mode"], header["log_alpha"], header["target_entropy"],
                            header["alpha_lr"])
    agent = AgentState(q1, q2, q1t, q2t, adam_init(q1), adam_init(q2), temp, header["algorithm"],
                       header["backup_scheme"], header["n"], header["gamma"], header["tau"], header["lr"],
                       steps=header.get("steps", 0))
    return agent, header.get("extra", {})


def save_agent(path, agent: AgentState, extra: dict | None = None):
    Path(path).write_bytes(agent_to_bytes(agent, extra))


def load_agent(path) -> tuple[AgentState, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return agent_from_bytes(path.read_bytes(), str(path))


def save_snapshot(path, snapshot, algorithm: str, extra: dict | None = None):
    """Store a policy snapshot in agent format (acting pair as main and target)."""
    n1, n2 = snapshot.nets
    agent = make_agent(n1.layer_sizes, algorithm, alpha=snapshot.alpha)
    agent.q1, agent.q2, agent.q1_target, agent.q2_target = n1, n2, n1, n2
    meta = {"version": snapshot.version, "checksum": snapshot.checksum}
    meta.update(extra or {})
    save_agent(path, agent, meta)


def table_to_bytes(table) -> bytes:
    arr = np.ascontiguousarray(table, dtype="<f8")
    head = TABLE_MAGIC + struct.pack("<II", FORMAT_VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def table_from_bytes(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if buf[:8] != TABLE_MAGIC:
        raise CheckpointError(f"{source}: not a table file (bad magic)")
    version, ndim = struct.unpack_from("<II", buf, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source}: table version {version}, expected {FORMAT_VERSION}")
    shape = struct.unpack_from(f"<{ndim}I", buf, 16)
    start = 16 + 4 * ndim
    count = int(np.prod(shape)) if ndim else 1
    if len(buf) != start + 8 * count:
        raise CheckpointError(f"{source}: table payload does not match shape {shape}")
    return np.frombuffer(buf[start:], dtype="<f8").astype(np.float64).reshape(shape)


def save_table(path, table):
    Path(path).write_bytes(table_to_bytes(table))


def load_table(path) -> np.ndarray:
    return table_from_bytes(Path(path).read_bytes(), str(path))
