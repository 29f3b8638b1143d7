"""Minimal feedforward networks: dense layers, backprop and Adam in numpy."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

ACTIVATIONS = {
    "tanh": (np.tanh, lambda y: 1.0 - y * y),
    "identity": (lambda x: x, lambda y: np.ones_like(y)),
}


@dataclass
class TrainConfig:
    """Optimizer settings.

    ``max_iterations`` counts epochs (full passes over the training set in
    shuffled mini-batches of ``batch_size``) when ``iteration_unit`` is
    ``"epoch"``, or single mini-batch updates when it is ``"step"``.
    ``warmup`` uses the same unit.
    """

    learning_rate: float = 2e-4
    batch_size: int = 50
    max_iterations: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    warmup: int = 50
    iteration_unit: str = "epoch"

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_iterations < 0:
            raise ValueError("learning rate, batch size and iterations must be positive")
        if self.iteration_unit not in ("epoch", "step"):
            raise ValueError("iteration_unit must be 'epoch' or 'step'")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class Mlp:
    """Stack of affine layers with ``activation`` between them; the last layer is affine."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"
    cache_input: bool = field(default=True, repr=False)

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need matching, non-empty weight and bias lists")
        for W, b, W2 in zip(self.weights, self.biases, self.weights[1:] + [None]):
            if b.shape != (W.shape[1],):
                raise ValueError("bias does not match layer width")
            if W2 is not None and W2.shape[0] != W.shape[1]:
                raise ValueError("layer dimensions do not chain")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @classmethod
    def init(cls, dims: list[int], rng: np.random.Generator, activation: str = "tanh") -> "Mlp":
        """Glorot-uniform weights, zero biases."""
        Ws, bs = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            Ws.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
            bs.append(np.zeros(fan_out))
        return cls(Ws, bs, activation)

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def forward(self, x: np.ndarray):
        return mlp_forward(self, x)

    def backward(self, cache, grad_out: np.ndarray):
        return mlp_backward(self, cache, grad_out)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return mlp_forward(self, x)[0]

    def to_json(self) -> dict:
        return {"dims": self.dims, "activation": self.activation,
                "weights": [W.ravel().tolist() for W in self.weights],
                "biases": [b.tolist() for b in self.biases]}

    @classmethod
    def from_json(cls, obj: dict) -> "Mlp":
        dims = obj["dims"]
        Ws = [np.array(w, dtype=float).reshape(a, b)
              for w, a, b in zip(obj["weights"], dims[:-1], dims[1:])]
        bs = [np.array(b, dtype=float) for b in obj["biases"]]
        return cls(Ws, bs, obj["activation"])


def mlp_forward(net: Mlp, x: np.ndarray):
    """Returns ``(output, cache)``; the cache holds each layer's input."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != net.weights[0].shape[0]:
        raise ValueError(f"input width {x.shape[-1]} != {net.weights[0].shape[0]}")
    act = ACTIVATIONS[net.activation][0]
    cache = []
    h = x
    last = len(net.weights) - 1
    for j, (W, b) in enumerate(zip(net.weights, net.biases)):
        cache.append(h)
        h = h @ W + b
        if j < last:
            h = act(h)
    return h, cache


def mlp_backward(net: Mlp, cache, grad_out: np.ndarray):
    """Reverse-mode pass. Returns ``(grads, grad_input)`` with grads ordered like ``net.params``."""
    dact = ACTIVATIONS[net.activation][1]
    grads: list[np.ndarray] = []
    g = grad_out
    for j in range(len(net.weights) - 1, -1, -1):
        inp = cache[j]
        grads.append(g.sum(axis=0))
        grads.append(inp.T @ g)
        g = g @ net.weights[j].T
        if j > 0:
            g = g * dact(inp)
    grads.reverse()
    return grads, g


class Adam:
    """Adam with bias correction over a fixed list of arrays, updated in place."""

    def __init__(self, params: list[np.ndarray], config: TrainConfig):
        self.params = params
        self.cfg = config
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        adam_step(self.params, grads, self, self.cfg)


def adam_step(params, grads, state: Adam, config: TrainConfig) -> None:
    if len(params) != len(grads):
        raise ValueError("parameter and gradient lists differ in length")
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    step = config.learning_rate / c1
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        # p -= lr * (m / c1) / (sqrt(v / c2) + eps), without large temporaries
        denom = np.sqrt(v)
        denom *= 1.0 / np.sqrt(c2)
        denom += config.epsilon
        np.divide(m, denom, out=denom)
        denom *= step
        p -= denom


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo:lo + batch_size]


def schedule(n: int, config: TrainConfig, rng: np.random.Generator):
    """Yield ``(iteration, rows)`` for the whole run.

    ``iteration`` is the index in ``config.iteration_unit``: the epoch for
    epoch counting, the update number for step counting.
    """
    if config.iteration_unit == "epoch":
        for epoch in range(config.max_iterations):
            for rows in minibatches(n, config.batch_size, rng):
                yield epoch, rows
        return
    step = 0
    while step < config.max_iterations:
        for rows in minibatches(n, config.batch_size, rng):
            if step >= config.max_iterations:
                return
            yield step, rows
            step += 1
