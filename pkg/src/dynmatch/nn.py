"""Dense feedforward networks with analytic gradients, in float64 numpy.

Parameters of a network live in one flat vector; per-layer weight and bias
arrays are views into it, which keeps optimizer steps and target-network
blending to a single vector operation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

ACTIVATIONS = ("relu", "linear", "softmax")


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class Mlp:
    """Feedforward stack; ``sizes[l] -> sizes[l+1]`` followed by ``activations[l]``."""

    def __init__(self, sizes: Sequence[int], activations: Sequence[str], params: Optional[np.ndarray] = None):
        sizes = [int(s) for s in sizes]
        activations = list(activations)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError("need at least two layer sizes, all >= 1")
        if len(activations) != len(sizes) - 1:
            raise ValueError("one activation per weight layer")
        for k, a in enumerate(activations):
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
            if a == "softmax" and k != len(activations) - 1:
                raise ValueError("softmax is only allowed on the final layer")
        self.sizes = sizes
        self.activations = activations
        self._shapes = []
        total = 0
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            self._shapes.append((total, fan_in, fan_out))
            total += fan_in * fan_out + fan_out
        self.n_params = total
        if params is None:
            params = np.zeros(total)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (total,):
            raise ValueError(f"expected {total} parameters, got {params.shape}")
        self.params = params.copy()
        self._bind()

    def _bind(self) -> None:
        self.W: List[np.ndarray] = []
        self.b: List[np.ndarray] = []
        for off, fan_in, fan_out in self._shapes:
            w_end = off + fan_in * fan_out
            self.W.append(self.params[off:w_end].reshape(fan_in, fan_out))
            self.b.append(self.params[w_end : w_end + fan_out])

    def layer_views(self, flat: np.ndarray):
        """Split a flat vector shaped like ``params`` into (W, b) views per layer."""
        out = []
        for off, fan_in, fan_out in self._shapes:
            w_end = off + fan_in * fan_out
            out.append((flat[off:w_end].reshape(fan_in, fan_out), flat[w_end : w_end + fan_out]))
        return out

    def copy(self) -> "Mlp":
        return Mlp(self.sizes, self.activations, self.params)

    def set_params(self, params: np.ndarray) -> None:
        self.params[...] = params

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def to_dict(self) -> dict:
        return {
            "sizes": self.sizes,
            "activations": self.activations,
            "weights": [W.tolist() for W in self.W],
            "biases": [b.tolist() for b in self.b],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Mlp":
        net = cls(d["sizes"], d["activations"])
        for W, b, Wd, bd in zip(net.W, net.b, d["weights"], d["biases"]):
            W[...] = np.asarray(Wd, dtype=np.float64)
            b[...] = np.asarray(bd, dtype=np.float64)
        return net


def init_network(
    layer_sizes: Sequence[int],
    activations: Sequence[str],
    rng: np.random.Generator,
    final_layer_bound: float = 0.003,
) -> Mlp:
    """Hidden layers uniform in +-1/sqrt(fan_in); final layer uniform in +-final_layer_bound."""
    net = Mlp(layer_sizes, activations)
    last = len(net.W) - 1
    for k, (W, b) in enumerate(zip(net.W, net.b)):
        bound = final_layer_bound if k == last else 1.0 / np.sqrt(W.shape[0])
        W[...] = rng.uniform(-bound, bound, size=W.shape)
        b[...] = rng.uniform(-bound, bound, size=b.shape)
    return net


@dataclass
class ForwardCache:
    inputs: List[np.ndarray]
    outputs: List[np.ndarray]
    squeeze: bool

    @property
    def output(self) -> np.ndarray:
        y = self.outputs[-1]
        return y[0] if self.squeeze else y


def forward(net: Mlp, x) -> np.ndarray:
    return forward_cached(net, x).output


def forward_cached(net: Mlp, x) -> ForwardCache:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.shape[1] != net.in_dim:
        raise ValueError(f"input width {h.shape[1]} != {net.in_dim}")
    inputs, outputs = [], []
    for W, b, act in zip(net.W, net.b, net.activations):
        inputs.append(h)
        z = h @ W + b
        if act == "relu":
            h = np.maximum(z, 0.0)
        elif act == "softmax":
            h = _softmax(z)
        else:
            h = z
        outputs.append(h)
    return ForwardCache(inputs, outputs, squeeze)


@dataclass
class GradRecord:
    """Flat parameter gradient (same layout as ``Mlp.params``), input gradient and loss."""

    params: np.ndarray
    inputs: Optional[np.ndarray]
    loss: float = 0.0


def backward(net: Mlp, cache: ForwardCache, upstream, loss: float = 0.0, input_grad: bool = True) -> GradRecord:
    """Backpropagate ``upstream`` = dL/d(output) through the cached pass."""
    dy = np.asarray(upstream, dtype=np.float64)
    if cache.squeeze and dy.ndim == 1:
        dy = dy[None, :]
    if dy.shape != cache.outputs[-1].shape:
        raise ValueError(f"upstream shape {dy.shape} != output {cache.outputs[-1].shape}")
    grad = np.zeros(net.n_params)
    views = net.layer_views(grad)
    for k in range(len(net.W) - 1, -1, -1):
        act = net.activations[k]
        out = cache.outputs[k]
        if act == "relu":
            dz = dy * (out > 0.0)
        elif act == "softmax":
            dz = out * (dy - np.sum(dy * out, axis=1, keepdims=True))
        else:
            dz = dy
        gW, gb = views[k]
        gW[...] = cache.inputs[k].T @ dz
        gb[...] = dz.sum(axis=0)
        if k == 0 and not input_grad:
            return GradRecord(grad, None, loss)
        dy = dz @ net.W[k].T
    dx = dy[0] if cache.squeeze else dy
    return GradRecord(grad, dx, loss)


def mse_loss_grad(net: Mlp, x, target) -> GradRecord:
    """Gradient of mean((target - net(x))^2) over the batch."""
    cache = forward_cached(net, x)
    y = cache.outputs[-1]
    t = np.asarray(target, dtype=np.float64).reshape(y.shape)
    diff = y - t
    n = diff.shape[0]
    loss = float(np.sum(diff**2) / n)
    return backward(net, cache, 2.0 * diff / n, loss, input_grad=False)


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


def optimizer_step(net: Mlp, grad: np.ndarray, state: OptimizerState):
    """Descend along ``grad`` in place; returns (net, state)."""
    g = grad.params if isinstance(grad, GradRecord) else np.asarray(grad)
    if g.shape != net.params.shape:
        raise ValueError("gradient shape does not match parameters")
    if state.kind == "sgd":
        net.params -= state.lr * g
        state.step += 1
        return net, state
    if state.m is None:
        state.m = np.zeros_like(net.params)
        state.v = np.zeros_like(net.params)
    state.step += 1
    buf = g * g
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * buf
    # params -= lr * m_hat / (sqrt(v_hat) + eps), with no full-size temporaries beyond buf
    np.divide(state.v, 1.0 - state.beta2**state.step, out=buf)
    np.sqrt(buf, out=buf)
    buf += state.eps
    np.divide(state.m, buf, out=buf)
    buf *= state.lr / (1.0 - state.beta1**state.step)
    net.params -= buf
    return net, state


def finite_difference_grad(f: Callable[[np.ndarray], float], theta: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` at ``theta`` (theta is restored afterwards)."""
    grad = np.zeros_like(theta)
    for k in range(theta.size):
        old = theta[k]
        theta[k] = old + h
        up = f(theta)
        theta[k] = old - h
        down = f(theta)
        theta[k] = old
        grad[k] = (up - down) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - b| / max(|a|, |b|, floor), elementwise."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
