"""Dense ReLU network with hand-written backprop, Adam, polyak averaging and
a central-difference gradient oracle. Everything is float64.

Weights are stored ``(fan_out, fan_in)`` so a layer computes
``z = x @ W.T + b`` on a batch of row vectors.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np


@dataclass
class MlpParams:
    layer_sizes: tuple
    weights: list
    biases: list

    def copy(self) -> "MlpParams":
        return MlpParams(tuple(self.layer_sizes), [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def arrays(self):
        """Parameter arrays in storage order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def with_flat(self, theta: np.ndarray) -> "MlpParams":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.size,):
            raise ValueError(f"expected {self.size} parameters, got {theta.shape}")
        ws, bs, i = [], [], 0
        for w, b in zip(self.weights, self.biases):
            ws.append(theta[i:i + w.size].reshape(w.shape).copy())
            i += w.size
            bs.append(theta[i:i + b.size].copy())
            i += b.size
        return MlpParams(tuple(self.layer_sizes), ws, bs)

    def zeros_like(self) -> "MlpParams":
        return MlpParams(tuple(self.layer_sizes), [np.zeros_like(w) for w in self.weights],
                         [np.zeros_like(b) for b in self.biases])

    def same_shape(self, other: "MlpParams") -> bool:
        return tuple(self.layer_sizes) == tuple(other.layer_sizes)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


def mlp_init(layer_sizes, seed: int, output_scale: float = 1.0) -> MlpParams:
    """He-normal weights (variance 2/fan_in), zero biases.

    Args:
        layer_sizes: Input width, hidden widths, output width.
        seed: Seed for the weight draw.
        output_scale: Multiplier on the last layer's weights.
    """
    sizes = tuple(int(n) for n in layer_sizes)
    if len(sizes) < 2:
        raise ValueError("an MLP needs at least an input and an output layer")
    if any(n < 1 for n in sizes):
        raise ValueError("layer sizes must be positive")
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        ws.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in)))
        bs.append(np.zeros(fan_out))
    ws[-1] *= output_scale
    return MlpParams(sizes, ws, bs)


@dataclass
class ForwardCache:
    params: MlpParams
    activations: list  # input to each layer
    preacts: list      # pre-activation of each layer
    single: bool = False


def forward(params: MlpParams, x) -> tuple[np.ndarray, ForwardCache]:
    """Q-values for one input vector or a batch of row vectors."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != params.layer_sizes[0]:
        raise ValueError(f"input length {x.shape[1]} does not match layer size {params.layer_sizes[0]}")
    acts, pres = [], []
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        acts.append(h)
        z = h @ w.T + b
        pres.append(z)
        h = z if i == last else np.maximum(z, 0.0)
    out = h[0] if single else h
    return out, ForwardCache(params, acts, pres, single)


def predict(params: MlpParams, x) -> np.ndarray:
    """Forward pass without keeping a cache."""
    h = np.asarray(x, dtype=np.float64)
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w.T + b
        if i != last:
            h = np.maximum(h, 0.0)
    return h


def backward(params: MlpParams, cache: ForwardCache, output_grad) -> MlpParams:
    """Gradient of sum(output * output_grad) with respect to every parameter.

    For a batch the gradient is summed over rows.
    """
    if cache.params is not params:
        raise ValueError("cache was produced by a different parameter set")
    g = np.asarray(output_grad, dtype=np.float64)
    if cache.single:
        g = g[None, :]
    if g.shape != cache.preacts[-1].shape:
        raise ValueError(f"output_grad shape {g.shape} does not match output {cache.preacts[-1].shape}")
    n = len(params.weights)
    gw, gb = [None] * n, [None] * n
    for i in range(n - 1, -1, -1):
        if i != n - 1:
            g = g * (cache.preacts[i] > 0.0)
        gw[i] = g.T @ cache.activations[i]
        gb[i] = g.sum(axis=0)
        if i > 0:
            g = g @ params.weights[i]
    return MlpParams(tuple(params.layer_sizes), gw, gb)


@dataclass
class AdamState:
    m: MlpParams
    v: MlpParams
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: MlpParams, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    return AdamState(params.zeros_like(), params.zeros_like(), 0, beta1, beta2, eps)


def adam_step(params: MlpParams, grads: MlpParams, state: AdamState, lr: float) -> tuple[MlpParams, AdamState]:
    """Bias-corrected Adam update. Returns new params and state; inputs are untouched."""
    if not (params.same_shape(grads) and params.same_shape(state.m)):
        raise ValueError("params, grads and optimizer state shapes differ")
    if not grads.is_finite():
        raise FloatingPointError("non-finite gradient passed to adam_step")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params.arrays(), grads.arrays(), state.m.arrays(), state.v.arrays()):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        new_p.append(p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)

    def pack(arrs):
        return MlpParams(tuple(params.layer_sizes), arrs[0::2], arrs[1::2])

    return pack(new_p), AdamState(pack(new_m), pack(new_v), t, b1, b2, state.eps)


def polyak_update(target: MlpParams, main: MlpParams, tau: float) -> MlpParams:
    """target <- (1 - tau) * target + tau * main, as a new parameter set."""
    if not target.same_shape(main):
        raise ValueError("target and main networks have different shapes")
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    if tau == 1.0:
        return main.copy()
    if tau == 0.0:
        return target.copy()
    ws = [(1.0 - tau) * t + tau * m for t, m in zip(target.weights, main.weights)]
    bs = [(1.0 - tau) * t + tau * m for t, m in zip(target.biases, main.biases)]
    return MlpParams(tuple(target.layer_sizes), ws, bs)


def finite_diff_grad(loss_fn, params, epsilon: float = 1e-5, relative: bool = True):
    """Central-difference gradient of ``loss_fn(params)``.

    ``params`` may be an :class:`MlpParams` (the result then has the same
    structure) or a flat array. With ``relative`` the step for coordinate i
    is ``epsilon * max(1, |theta_i|)``.
    """
    if isinstance(params, MlpParams):
        theta0 = params.flat()
        f = lambda th: loss_fn(params.with_flat(th))  # noqa: E731
    else:
        theta0 = np.asarray(params, dtype=np.float64).ravel()
        shape = np.shape(params)
        f = lambda th: loss_fn(th.reshape(shape))  # noqa: E731
    grad = np.zeros_like(theta0)
    for i in range(theta0.size):
        h = epsilon * max(1.0, abs(theta0[i])) if relative else epsilon
        th = theta0.copy()
        th[i] = theta0[i] + h
        lp = f(th)
        th[i] = theta0[i] - h
        lm = f(th)
        if not (np.isfinite(lp) and np.isfinite(lm)):
            raise FloatingPointError(f"non-finite loss at coordinate {i}")
        grad[i] = (lp - lm) / (2.0 * h)
    if isinstance(params, MlpParams):
        return params.with_flat(grad)
    return grad.reshape(np.shape(params))


# checkpoint block: magic, format version, layer count, layer sizes, then
# little-endian float64 arrays W0, b0, W1, b1, ...
NET_MAGIC = b"SOFTQNET"
NET_FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def params_to_bytes(params: MlpParams) -> bytes:
    sizes = tuple(params.layer_sizes)
    head = NET_MAGIC + struct.pack("<II", NET_FORMAT_VERSION, len(sizes)) + struct.pack(f"<{len(sizes)}I", *sizes)
    return head + params.flat().astype("<f8").tobytes()


def params_from_bytes(buf: bytes, offset: int = 0) -> tuple[MlpParams, int]:
    """Decode one network block; returns the params and the offset after it."""
    if buf[offset:offset + 8] != NET_MAGIC:
        raise CheckpointError("not a network checkpoint block (bad magic)")
    offset += 8
    if len(buf) < offset + 8:
        raise CheckpointError("truncated network header")
    version, n_layers = struct.unpack_from("<II", buf, offset)
    offset += 8
    if version != NET_FORMAT_VERSION:
        raise CheckpointError(f"unsupported network format version {version}")
    sizes = struct.unpack_from(f"<{n_layers}I", buf, offset)
    offset += 4 * n_layers
    count = sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
    end = offset + 8 * count
    if len(buf) < end:
        raise CheckpointError("truncated network parameters")
    theta = np.frombuffer(buf[offset:end], dtype="<f8").astype(np.float64)
    template = MlpParams(tuple(sizes), [np.zeros((b, a)) for a, b in zip(sizes[:-1], sizes[1:])],
                         [np.zeros(b) for b in sizes[1:]])
    return template.with_flat(theta), end


def save_params(path, params: MlpParams):
    with open(path, "wb") as fh:
        fh.write(params_to_bytes(params))


def load_params(path) -> MlpParams:
    with open(path, "rb") as fh:
        buf = fh.read()
    params, end = params_from_bytes(buf)
    if end != len(buf):
        raise CheckpointError(f"{path}: trailing bytes after network block")
    return params
