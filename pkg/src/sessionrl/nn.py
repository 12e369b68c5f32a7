"""Minimal dense-network engine: layers, exact analytic gradients, Adam, BCE.

All math is float64 numpy. Forward passes accept a single vector (n,) or a
batch (B, n); tapes recorded by `forward` are consumed by `backward`, which
returns gradients aligned with `MlpNet.params()` plus the gradient w.r.t. the
input (needed to chain encoders in front of the trunk).
"""

from __future__ import annotations

import json

import numpy as np

from .errors import ConfigError, TrainingError, UsageError

ACTIVATIONS = ("identity", "relu", "sigmoid")

CHECKPOINT_FORMAT_VERSION = 1


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _apply_activation(name: str, pre: np.ndarray) -> np.ndarray:
    if name == "identity":
        return pre
    if name == "relu":
        return np.maximum(pre, 0.0)
    if name == "sigmoid":
        return sigmoid(pre)
    raise ConfigError(f"unknown activation {name!r}")


def _activation_grad(name: str, pre: np.ndarray, post: np.ndarray) -> np.ndarray:
    """Derivative of the activation evaluated at `pre` (post = act(pre))."""
    if name == "identity":
        return np.ones_like(pre)
    if name == "relu":
        return (pre > 0.0).astype(np.float64)
    if name == "sigmoid":
        return post * (1.0 - post)
    raise ConfigError(f"unknown activation {name!r}")


class DenseLayer:
    """Fully connected layer: act(W x + b), weights shaped (out, in)."""

    def __init__(self, weights: np.ndarray, bias: np.ndarray, activation: str = "identity"):
        weights = np.asarray(weights, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if weights.ndim != 2 or bias.ndim != 1:
            raise ConfigError("weights must be 2-D and bias 1-D")
        if bias.shape[0] != weights.shape[0]:
            raise ConfigError(
                f"bias length {bias.shape[0]} != weight rows {weights.shape[0]}"
            )
        if activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}")
        if not (np.all(np.isfinite(weights)) and np.all(np.isfinite(bias))):
            raise ConfigError("non-finite layer parameters")
        self.weights = weights
        self.bias = bias
        self.activation = activation

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def init(cls, n_in: int, n_out: int, activation: str, rng: np.random.Generator) -> "DenseLayer":
        limit = np.sqrt(6.0 / (n_in + n_out))
        w = rng.uniform(-limit, limit, size=(n_out, n_in))
        return cls(w, np.zeros(n_out), activation)

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weights.copy(), self.bias.copy(), self.activation)


class MlpNet:
    """Stack of DenseLayers; the last layer's width equals the number of heads."""

    def __init__(self, layers: list[DenseLayer], head_names: tuple[str, ...]):
        if not layers:
            raise ConfigError("MlpNet needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.n_out != nxt.n_in:
                raise ConfigError(
                    f"layer widths do not chain: {prev.n_out} -> {nxt.n_in}"
                )
        head_names = tuple(head_names)
        if layers[-1].n_out != len(head_names):
            raise ConfigError(
                f"final layer width {layers[-1].n_out} != head count {len(head_names)}"
            )
        self.layers = layers
        self.head_names = head_names

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    @classmethod
    def build(
        cls,
        n_in: int,
        hidden: list[int],
        head_names: tuple[str, ...],
        rng: np.random.Generator,
        hidden_activation: str = "relu",
        head_activation: str = "sigmoid",
    ) -> "MlpNet":
        widths = [n_in] + list(hidden) + [len(head_names)]
        layers = []
        for i, (a, b) in enumerate(zip(widths, widths[1:])):
            act = head_activation if i == len(widths) - 2 else hidden_activation
            layers.append(DenseLayer.init(a, b, act, rng))
        return cls(layers, head_names)

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.append(layer.weights)
            out.append(layer.bias)
        return out

    def set_params(self, params: list[np.ndarray]) -> None:
        if len(params) != 2 * len(self.layers):
            raise ConfigError("parameter list length mismatch")
        for i, layer in enumerate(self.layers):
            w, b = params[2 * i], params[2 * i + 1]
            if w.shape != layer.weights.shape or b.shape != layer.bias.shape:
                raise ConfigError("parameter shape mismatch")
            layer.weights = np.asarray(w, dtype=np.float64)
            layer.bias = np.asarray(b, dtype=np.float64)

    def copy(self) -> "MlpNet":
        return MlpNet([layer.copy() for layer in self.layers], self.head_names)


class Tape:
    """Activation cache from one forward pass, owned by the matching backward."""

    def __init__(self, net: MlpNet, inputs: list[np.ndarray], pres: list[np.ndarray], posts: list[np.ndarray], squeeze: bool):
        self.net = net
        self.inputs = inputs
        self.pres = pres
        self.posts = posts
        self.squeeze = squeeze


def forward(net: MlpNet, x: np.ndarray) -> tuple[np.ndarray, Tape]:
    """Evaluate the net on a vector (n,) or batch (B, n); returns output and tape."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.shape[1] != net.n_in:
        raise ConfigError(f"input width {x.shape[1]} != net input width {net.n_in}")
    inputs, pres, posts = [], [], []
    cur = x
    for layer in net.layers:
        inputs.append(cur)
        pre = cur @ layer.weights.T + layer.bias
        post = _apply_activation(layer.activation, pre)
        pres.append(pre)
        posts.append(post)
        cur = post
    out = cur[0] if squeeze else cur
    return out, Tape(net, inputs, pres, posts, squeeze)


def backward(net: MlpNet, tape: Tape, output_grad: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Backprop `output_grad` through the taped forward pass.

    Returns (grads, input_grad) where grads aligns with `net.params()`.
    """
    if tape.net is not net:
        raise UsageError("tape does not belong to this net")
    g = np.asarray(output_grad, dtype=np.float64)
    if tape.squeeze:
        if g.shape != (net.n_out,):
            raise UsageError(f"output_grad shape {g.shape} != ({net.n_out},)")
        g = g[None, :]
    elif g.shape != tape.posts[-1].shape:
        raise UsageError(f"output_grad shape {g.shape} != {tape.posts[-1].shape}")
    grads: list[np.ndarray] = [None] * (2 * len(net.layers))  # type: ignore[list-item]
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        dpre = g * _activation_grad(layer.activation, tape.pres[i], tape.posts[i])
        grads[2 * i] = dpre.T @ tape.inputs[i]
        grads[2 * i + 1] = dpre.sum(axis=0)
        g = dpre @ layer.weights
    input_grad = g[0] if tape.squeeze else g
    return grads, input_grad


class AdamState:
    """Adam moments plus hyperparameters; treated as an immutable value by adam_step."""

    def __init__(
        self,
        first_moment: list[np.ndarray],
        second_moment: list[np.ndarray],
        step_count: int,
        learning_rate: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
    ):
        if learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if step_count < 0:
            raise ConfigError("step_count must be >= 0")
        self.first_moment = first_moment
        self.second_moment = second_moment
        self.step_count = step_count
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon

    @classmethod
    def init_like(cls, params: list[np.ndarray], learning_rate: float, **kw) -> "AdamState":
        return cls(
            [np.zeros_like(p) for p in params],
            [np.zeros_like(p) for p in params],
            0,
            learning_rate,
            **kw,
        )


def adam_step(
    params: list[np.ndarray], grads: list[np.ndarray], state: AdamState
) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update. Pure: inputs are not mutated."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ConfigError("params/grads/state length mismatch")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingError("non-finite gradient in adam_step")
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape:
            raise ConfigError("gradient shape mismatch")
        m2 = b1 * m + (1.0 - b1) * g
        v2 = b2 * v + (1.0 - b2) * g * g
        m_hat = m2 / corr1
        v_hat = v2 / corr2
        new_params.append(p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon))
        new_m.append(m2)
        new_v.append(v2)
    new_state = AdamState(
        new_m, new_v, t, state.learning_rate, b1, b2, state.epsilon
    )
    return new_params, new_state


BCE_CLAMP = 1e-7


def bce_loss(pred: np.ndarray, label: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy over heads and its gradient w.r.t. pred.

    Predictions are clamped to [BCE_CLAMP, 1 - BCE_CLAMP]; the gradient is zero
    where the clamp is active.
    """
    pred = np.asarray(pred, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    if pred.shape != label.shape:
        raise UsageError(f"pred shape {pred.shape} != label shape {label.shape}")
    p = np.clip(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
    loss = float(-np.mean(label * np.log(p) + (1.0 - label) * np.log1p(-p)))
    inside = (pred > BCE_CLAMP) & (pred < 1.0 - BCE_CLAMP)
    grad = np.where(inside, (p - label) / (p * (1.0 - p)), 0.0) / pred.size
    return loss, grad


def save_checkpoint(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write a lossless checkpoint: JSON meta plus named float64 arrays."""
    meta = dict(meta)
    meta["format_version"] = CHECKPOINT_FORMAT_VERSION
    payload = {"__meta__": np.array(json.dumps(meta))}
    for name, arr in arrays.items():
        if name.startswith("__"):
            raise ConfigError(f"reserved array name {name!r}")
        payload[name] = np.asarray(arr)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ConfigError(
                f"unsupported checkpoint format_version {meta.get('format_version')!r}"
            )
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
    return meta, arrays


def net_to_arrays(net: MlpNet, prefix: str) -> dict[str, np.ndarray]:
    out = {}
    for i, layer in enumerate(net.layers):
        out[f"{prefix}_w{i}"] = layer.weights
        out[f"{prefix}_b{i}"] = layer.bias
    return out


def net_meta(net: MlpNet) -> dict:
    return {
        "activations": [layer.activation for layer in net.layers],
        "widths": [net.layers[0].n_in] + [layer.n_out for layer in net.layers],
        "head_names": list(net.head_names),
    }


def net_from_arrays(meta: dict, arrays: dict[str, np.ndarray], prefix: str) -> MlpNet:
    acts = meta["activations"]
    layers = [
        DenseLayer(arrays[f"{prefix}_w{i}"], arrays[f"{prefix}_b{i}"], acts[i])
        for i in range(len(acts))
    ]
    return MlpNet(layers, tuple(meta["head_names"]))
