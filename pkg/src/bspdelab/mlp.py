"""Dense ReLU network with reverse-mode gradients and Adam.

Hand-rolled on purpose: the policies trained downstream need exactly an
affine-ReLU stack, its exact gradients, and a standard Adam loop, all
deterministic under a seed.  Weights are (out, in) row-major; hidden layers
use ReLU with subgradient 0 at 0, the output layer is affine.
"""

from __future__ import annotations

import dataclasses
from typing import List, Optional

import numpy as np

from .fem import NumericFailure

_HEADER_COUNT = np.dtype("<i8")


@dataclasses.dataclass
class MlpNet:
    widths: tuple
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    _cache: Optional[dict] = dataclasses.field(default=None, repr=False)

    @property
    def dtype(self):
        return self.weights[0].dtype

    def parameters(self) -> List[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out


@dataclasses.dataclass
class MlpGrads:
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    x: np.ndarray

    def parameters(self) -> List[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out


def init(shape, seed: int, dtype=np.float64) -> MlpNet:
    """He-uniform weights, bound (6/fan_in)^{1/2}, zero biases."""
    widths = tuple(int(w) for w in shape)
    if len(widths) < 2:
        raise ValueError(f"need at least input and output widths, got {shape!r}")
    if any(w < 1 for w in widths):
        raise ValueError(f"all widths must be >= 1, got {shape!r}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return MlpNet(widths=widths, weights=weights, biases=biases)


def forward(net: MlpNet, x: np.ndarray) -> np.ndarray:
    """Evaluate the net; accepts (d,) or (batch, d); caches for backward."""
    arr = np.asarray(x, dtype=net.dtype)
    single = arr.ndim == 1
    a = arr[None, :] if single else arr
    if a.ndim != 2 or a.shape[1] != net.widths[0]:
        raise ValueError(f"input shape {np.shape(x)} incompatible with widths {net.widths}")
    acts = [a]
    n_layers = len(net.weights)
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        s = a @ w.T + b
        a = np.maximum(s, 0) if l < n_layers - 1 else s
        acts.append(a)
    net._cache = {"x": arr, "acts": acts, "single": single}
    return a[0] if single else a


def backward(net: MlpNet, x: np.ndarray, upstream: np.ndarray) -> MlpGrads:
    """Exact reverse-mode gradients of sum(upstream * output) w.r.t. params and input.

    Batch rows accumulate into the parameter gradients; the input gradient
    keeps the batch shape.
    """
    cache = net._cache
    if cache is None:
        raise RuntimeError("no cached forward pass; call forward(net, x) first")
    arr = np.asarray(x, dtype=net.dtype)
    if arr.shape != cache["x"].shape or not np.array_equal(arr, cache["x"]):
        raise RuntimeError("cached forward pass was for different input data")
    acts = cache["acts"]
    single = cache["single"]
    g = np.asarray(upstream, dtype=net.dtype)
    if single:
        g = g[None, :]
    if g.shape != acts[-1].shape:
        raise ValueError(f"upstream shape {np.shape(upstream)} does not match output "
                         f"shape {acts[-1].shape if not single else acts[-1].shape[1:]}")
    n_layers = len(net.weights)
    d_weights = [None] * n_layers
    d_biases = [None] * n_layers
    for l in range(n_layers - 1, -1, -1):
        a_in = acts[l]
        d_weights[l] = g.T @ a_in
        d_biases[l] = g.sum(axis=0)
        g = g @ net.weights[l]
        if l > 0:
            # hidden activation was ReLU: kill flow where the unit was off
            g = g * (acts[l] > 0)
    dx = g[0] if single else g
    return MlpGrads(weights=d_weights, biases=d_biases, x=dx)


@dataclasses.dataclass
class AdamState:
    lr: float
    beta1: float
    beta2: float
    eps: float
    step: int
    m: List[np.ndarray]
    v: List[np.ndarray]


def init_adam(net: MlpNet, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    params = net.parameters()
    return AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps, step=0,
                     m=[np.zeros_like(p) for p in params],
                     v=[np.zeros_like(p) for p in params])


def adam_step(state: AdamState, net: MlpNet, grads: MlpGrads) -> MlpNet:
    """One bias-corrected Adam update, in place on the net's parameters."""
    params = net.parameters()
    glist = grads.parameters()
    if len(params) != len(glist):
        raise ValueError("gradient structure does not match the net")
    for g in glist:
        if not np.all(np.isfinite(g)):
            raise NumericFailure("non-finite gradient passed to adam_step")
    state.step += 1
    b1t = 1.0 - state.beta1 ** state.step
    b2t = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, glist, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / b1t) / (np.sqrt(v / b2t) + state.eps)
    return net


def save_net(path, net: MlpNet) -> None:
    """Shape header (count then widths, little-endian int64) + row-major float64."""
    with open(path, "wb") as fh:
        fh.write(np.asarray([len(net.widths)], dtype="<i8").tobytes())
        fh.write(np.asarray(net.widths, dtype="<i8").tobytes())
        for w, b in zip(net.weights, net.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_net(path, dtype=np.float64) -> MlpNet:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise ValueError("checkpoint too short for a shape header")
    count = int(np.frombuffer(raw[:8], dtype="<i8")[0])
    if count < 2 or len(raw) < 8 + 8 * count:
        raise ValueError(f"checkpoint header is invalid: layer count {count}")
    widths = tuple(int(w) for w in np.frombuffer(raw[8:8 + 8 * count], dtype="<i8"))
    if any(w < 1 for w in widths):
        raise ValueError(f"checkpoint header is invalid: widths {widths}")
    n_params = sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))
    if len(raw) != 8 + 8 * count + 8 * n_params:
        raise ValueError(f"checkpoint size {len(raw)} does not match widths {widths}")
    offset = 8 + 8 * count
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        n_w = fan_in * fan_out
        w = np.frombuffer(raw[offset:offset + 8 * n_w], dtype="<f8").reshape(fan_out, fan_in)
        offset += 8 * n_w
        b = np.frombuffer(raw[offset:offset + 8 * fan_out], dtype="<f8")
        offset += 8 * fan_out
        weights.append(w.astype(dtype))
        biases.append(b.astype(dtype))
    if offset != len(raw):
        raise ValueError(f"checkpoint has {len(raw) - offset} trailing bytes")
    return MlpNet(widths=widths, weights=weights, biases=biases)
