"""Neural building blocks on top of the autodiff tape.

Parameters are plain float64 arrays held in small container classes; each
training step binds them onto a fresh tape as leaves (``bind``), runs the
forward pass, and updates the arrays in place from the gradient map. Naming
inside a bound dict is flat, e.g. ``"layer1.weight"`` or ``"lstm0.wx"``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor, Tape

LSTM_HIDDEN = 16
PROJECTION_DIM = 8

BoundParams = dict[str, Tensor]
ParamArrays = dict[str, np.ndarray]


def _uniform_fan_in(rng: np.random.Generator, shape: tuple[int, ...],
                    fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class LinearLayer:
    """Affine map x @ weight + bias with weight [in, out]."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        weight = np.asarray(weight, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if weight.ndim != 2 or bias.shape != (weight.shape[1],):
            raise ValueError(f"linear layer shapes inconsistent: "
                             f"weight {weight.shape}, bias {bias.shape}")
        if not (np.isfinite(weight).all() and np.isfinite(bias).all()):
            raise ValueError("linear layer parameters must be finite")
        self.weight = weight
        self.bias = bias

    @classmethod
    def init(cls, rng: np.random.Generator, in_dim: int, out_dim: int) -> "LinearLayer":
        return cls(_uniform_fan_in(rng, (in_dim, out_dim), in_dim),
                   _uniform_fan_in(rng, (out_dim,), in_dim))

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


def linear_forward(weight: Tensor, bias: Tensor, x: Tensor) -> Tensor:
    return dm.add(dm.matmul(x, weight), bias)


class MlpAcquirerParams:
    """One-hidden-layer MLP scoring every feature, plus learnable logits
    for the very first request (before anything has been observed).

    Input width is 2F+1: previous masked observation, previous mask, and the
    normalized time step.
    """

    def __init__(self, layer1: LinearLayer, layer2: LinearLayer,
                 init_logits: np.ndarray):
        self.layer1 = layer1
        self.layer2 = layer2
        self.init_logits = np.asarray(init_logits, dtype=np.float64)
        n_features = layer2.out_dim
        if layer1.in_dim != 2 * n_features + 1:
            raise ValueError(f"acquirer input width must be 2F+1="
                             f"{2 * n_features + 1}, got {layer1.in_dim}")
        if self.init_logits.shape != (n_features,):
            raise ValueError("init_logits must have one entry per feature")

    @classmethod
    def init(cls, rng: np.random.Generator, n_features: int,
             hidden: int) -> "MlpAcquirerParams":
        return cls(LinearLayer.init(rng, 2 * n_features + 1, hidden),
                   LinearLayer.init(rng, hidden, n_features),
                   np.zeros(n_features))

    @property
    def n_features(self) -> int:
        return self.layer2.out_dim

    def parameters(self) -> ParamArrays:
        return {
            "layer1.weight": self.layer1.weight,
            "layer1.bias": self.layer1.bias,
            "layer2.weight": self.layer2.weight,
            "layer2.bias": self.layer2.bias,
            "init_logits": self.init_logits,
        }

    def load_arrays(self, arrays: ParamArrays) -> None:
        self.layer1 = LinearLayer(arrays["layer1.weight"], arrays["layer1.bias"])
        self.layer2 = LinearLayer(arrays["layer2.weight"], arrays["layer2.bias"])
        self.init_logits = np.asarray(arrays["init_logits"], dtype=np.float64)

    def bind(self, tape: Tape) -> BoundParams:
        return {name: tape.leaf(value) for name, value in self.parameters().items()}


def mlp_acquirer_forward(bound: BoundParams, prev_obs: Tensor,
                         prev_mask: Tensor, t_norm: Tensor) -> Tensor:
    """Feature logits [B, F] from the previous step's measurements."""
    if prev_obs.shape != prev_mask.shape or t_norm.shape != (prev_obs.shape[0], 1):
        raise ValueError(f"acquirer inputs mismatch: obs {prev_obs.shape}, "
                         f"mask {prev_mask.shape}, t {t_norm.shape}")
    x = dm.concat_cols([prev_obs, prev_mask, t_norm])
    h = dm.relu(linear_forward(bound["layer1.weight"], bound["layer1.bias"], x))
    return linear_forward(bound["layer2.weight"], bound["layer2.bias"], h)


class LstmClassifierParams:
    """Stacked LSTM (16 hidden units per layer) -> linear projection to 8
    -> ReLU -> linear head to class logits.

    Per layer: wx [in, 4H], wh [H, 4H], b [4H]; gate order (i, f, g, o).
    Layer 0 consumes concat[x_meas, mask, t_norm] of width 2F+1.
    """

    def __init__(self, layers: list[dict[str, np.ndarray]],
                 projection: LinearLayer, head: LinearLayer,
                 n_features: int, n_classes: int):
        self.layers = layers
        self.projection = projection
        self.head = head
        self.n_features = n_features
        self.n_classes = n_classes
        h = LSTM_HIDDEN
        in_dim = 2 * n_features + 1
        for i, layer in enumerate(layers):
            if layer["wx"].shape != (in_dim, 4 * h) or \
               layer["wh"].shape != (h, 4 * h) or layer["b"].shape != (4 * h,):
                raise ValueError(f"lstm layer {i} gate shapes inconsistent")
            in_dim = h

    @classmethod
    def init(cls, rng: np.random.Generator, n_features: int, n_classes: int,
             n_layers: int) -> "LstmClassifierParams":
        h = LSTM_HIDDEN
        layers = []
        in_dim = 2 * n_features + 1
        for _ in range(n_layers):
            layers.append({
                "wx": _uniform_fan_in(rng, (in_dim, 4 * h), in_dim),
                "wh": _uniform_fan_in(rng, (h, 4 * h), h),
                "b": _uniform_fan_in(rng, (4 * h,), h),
            })
            in_dim = h
        projection = LinearLayer.init(rng, h, PROJECTION_DIM)
        head = LinearLayer.init(rng, PROJECTION_DIM, n_classes)
        return cls(layers, projection, head, n_features, n_classes)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def parameters(self) -> ParamArrays:
        out: ParamArrays = {}
        for i, layer in enumerate(self.layers):
            for key in ("wx", "wh", "b"):
                out[f"lstm{i}.{key}"] = layer[key]
        out["projection.weight"] = self.projection.weight
        out["projection.bias"] = self.projection.bias
        out["head.weight"] = self.head.weight
        out["head.bias"] = self.head.bias
        return out

    def load_arrays(self, arrays: ParamArrays) -> None:
        for i in range(self.n_layers):
            for key in ("wx", "wh", "b"):
                self.layers[i][key] = np.asarray(arrays[f"lstm{i}.{key}"],
                                                 dtype=np.float64)
        self.projection = LinearLayer(arrays["projection.weight"],
                                      arrays["projection.bias"])
        self.head = LinearLayer(arrays["head.weight"], arrays["head.bias"])

    def bind(self, tape: Tape) -> BoundParams:
        return {name: tape.leaf(value) for name, value in self.parameters().items()}

    def initial_state(self, tape: Tape, batch: int) -> list[tuple[Tensor, Tensor]]:
        zeros = np.zeros((batch, LSTM_HIDDEN))
        return [(tape.leaf(zeros), tape.leaf(zeros)) for _ in range(self.n_layers)]


def lstm_step(wx: Tensor, wh: Tensor, b: Tensor, x: Tensor,
              h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM cell update: returns (h', c')."""
    hid = wh.shape[0]
    z = dm.add(dm.add(dm.matmul(x, wx), dm.matmul(h, wh)), b)
    i = dm.sigmoid(dm.slice_cols(z, 0, hid))
    f = dm.sigmoid(dm.slice_cols(z, hid, 2 * hid))
    g = dm.tanh(dm.slice_cols(z, 2 * hid, 3 * hid))
    o = dm.sigmoid(dm.slice_cols(z, 3 * hid, 4 * hid))
    c_new = dm.add(dm.mul(f, c), dm.mul(i, g))
    h_new = dm.mul(o, dm.tanh(c_new))
    return h_new, c_new


def classifier_step(bound: BoundParams, state: list[tuple[Tensor, Tensor]],
                    x_meas: Tensor, mask: Tensor,
                    t_norm: Tensor) -> list[tuple[Tensor, Tensor]]:
    """Advance every LSTM layer one step on concat[x_meas, mask, t_norm]."""
    x = dm.concat_cols([x_meas, mask, t_norm])
    new_state = []
    for i, (h, c) in enumerate(state):
        h2, c2 = lstm_step(bound[f"lstm{i}.wx"], bound[f"lstm{i}.wh"],
                           bound[f"lstm{i}.b"], x, h, c)
        new_state.append((h2, c2))
        x = h2
    return new_state


def classifier_predict(bound: BoundParams,
                       state: list[tuple[Tensor, Tensor]]) -> Tensor:
    """Class logits [B, C] from the top layer's hidden state."""
    h_top = state[-1][0]
    proj = dm.relu(linear_forward(bound["projection.weight"],
                                  bound["projection.bias"], h_top))
    return linear_forward(bound["head.weight"], bound["head.bias"], proj)


def predict_from_hidden(bound: BoundParams, h_top: Tensor) -> Tensor:
    """Same head as classifier_predict but from an explicit hidden tensor."""
    proj = dm.relu(linear_forward(bound["projection.weight"],
                                  bound["projection.bias"], h_top))
    return linear_forward(bound["head.weight"], bound["head.bias"], proj)


def cross_entropy(class_logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels)
    batch, n_classes = class_logits.shape
    if labels.shape != (batch,):
        raise ValueError(f"labels shape {labels.shape} != ({batch},)")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"label out of range [0, {n_classes})")
    one_hot = np.zeros((batch, n_classes))
    one_hot[np.arange(batch), labels] = 1.0
    tape = class_logits.tape
    picked = dm.reduce_sum(dm.mul(dm.log_softmax(class_logits),
                                  tape.leaf(one_hot)), axis=-1)
    return -dm.reduce_mean(picked)


class AdamState:
    """Adam with bias correction; moments mirror the parameter dict."""

    def __init__(self, params: ParamArrays, lr: float = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}


def adam_step(state: AdamState, params: ParamArrays, grads: ParamArrays) -> None:
    """One in-place Adam update; raises on non-finite gradients."""
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape "
                             f"{p.shape} for {name!r}")
        if not np.isfinite(g).all():
            raise dm.NonFiniteError(f"non-finite gradient for {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_HEADER = "dfalab-checkpoint v1"


def save_checkpoint(path: str | Path, params: ParamArrays,
                    meta: dict[str, str] | None = None) -> None:
    """Text checkpoint: hex floats for bit-exact round-trips."""
    lines = [CHECKPOINT_HEADER]
    for key, value in (meta or {}).items():
        if any(c.isspace() for c in key):
            raise ValueError(f"meta key may not contain whitespace: {key!r}")
        lines.append(f"meta {key} {value}")
    for name, arr in params.items():
        dims = ",".join(str(d) for d in arr.shape)
        body = " ".join(float(x).hex() for x in arr.ravel())
        lines.append(f"param {name} {dims} {body}".rstrip())
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path: str | Path) -> tuple[ParamArrays, dict[str, str]]:
    text = Path(path).read_text().splitlines()
    if not text or text[0] != CHECKPOINT_HEADER:
        raise ValueError(f"not a {CHECKPOINT_HEADER!r} file: {path}")
    params: ParamArrays = {}
    meta: dict[str, str] = {}
    for line in text[1:]:
        if not line.strip():
            continue
        kind, rest = line.split(" ", 1)
        if kind == "meta":
            key, _, value = rest.partition(" ")
            meta[key] = value
        elif kind == "param":
            parts = rest.split(" ")
            name, dims = parts[0], parts[1]
            shape = tuple(int(d) for d in dims.split(",") if d)
            values = [float.fromhex(tok) for tok in parts[2:]]
            arr = np.array(values, dtype=np.float64).reshape(shape)
            params[name] = arr
        else:
            raise ValueError(f"unknown checkpoint record {kind!r}")
    return params, meta


def merge_prefixed(**groups: ParamArrays) -> ParamArrays:
    """Combine parameter dicts under dotted prefixes, e.g. acquirer.*, classifier.*."""
    out: ParamArrays = {}
    for prefix, params in groups.items():
        for name, arr in params.items():
            out[f"{prefix}.{name}"] = arr
    return out


def split_prefixed(params: ParamArrays) -> dict[str, ParamArrays]:
    out: dict[str, ParamArrays] = {}
    for name, arr in params.items():
        prefix, _, rest = name.partition(".")
        out.setdefault(prefix, {})[rest] = arr
    return out
