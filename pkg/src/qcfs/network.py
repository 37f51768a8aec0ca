"""ANN/SNN model containers, reference architectures and the ReLU -> QCFS rewrite."""
from __future__ import annotations

import copy
import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tn
from .activation import LAMBDA_INIT, QcfsParams, clip_act, qcfs
from .errors import ConfigurationError, DimensionError, TransformError

LAYER_KINDS = ("dense", "conv2d", "avgpool2d", "maxpool2d", "flatten", "activation")
ACTIVATIONS = ("relu", "qcfs", "qcf_noshift", "clip_only", "if_neuron")
# activations that carry a QcfsParams record
PARAMETRIC_ACTIVATIONS = ("qcfs", "qcf_noshift", "clip_only")


@dataclass
class LayerSpec:
    kind: str
    in_features: int = 0
    out_features: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    pool: int = 0
    activation: str = ""

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        if self.kind == "activation" and self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")

    @property
    def parametric(self) -> bool:
        return self.kind in ("dense", "conv2d")

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v not in (0, "") or k == "kind"}


def dense(i: int, o: int) -> LayerSpec:
    return LayerSpec("dense", in_features=i, out_features=o)


def conv(c_in: int, c_out: int, k: int, stride: int = 1, pad: int = 0) -> LayerSpec:
    return LayerSpec("conv2d", in_channels=c_in, out_channels=c_out, kernel=k,
                     stride=stride, pad=pad)


def avgpool(k: int) -> LayerSpec:
    return LayerSpec("avgpool2d", pool=k)


def maxpool(k: int) -> LayerSpec:
    return LayerSpec("maxpool2d", pool=k)


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def act(kind: str) -> LayerSpec:
    return LayerSpec("activation", activation=kind)


def infer_shapes(input_shape, layers) -> list[tuple[int, ...]]:
    """Per-sample output shape of every layer; raises if adjacent layers do not compose."""
    shape = tuple(int(s) for s in input_shape)
    shapes = []
    for i, layer in enumerate(layers):
        if layer.kind == "dense":
            if len(shape) != 1 or shape[0] != layer.in_features:
                raise DimensionError(f"layer {i} (dense {layer.in_features}->{layer.out_features}) "
                                     f"cannot take input of shape {shape}")
            shape = (layer.out_features,)
        elif layer.kind == "conv2d":
            if len(shape) != 3 or shape[0] != layer.in_channels:
                raise DimensionError(f"layer {i} (conv2d, {layer.in_channels} channels) "
                                     f"cannot take input of shape {shape}")
            ho = tn.conv_output_size(shape[1], layer.kernel, layer.stride, layer.pad)
            wo = tn.conv_output_size(shape[2], layer.kernel, layer.stride, layer.pad)
            shape = (layer.out_channels, ho, wo)
        elif layer.kind in ("avgpool2d", "maxpool2d"):
            k = layer.pool
            if len(shape) != 3 or k < 1 or shape[1] % k or shape[2] % k:
                raise ConfigurationError(f"layer {i} ({layer.kind} k={k}) cannot pool shape {shape}")
            shape = (shape[0], shape[1] // k, shape[2] // k)
        elif layer.kind == "flatten":
            shape = (int(np.prod(shape)),)
        shapes.append(shape)
    return shapes


def param_shapes(layer: LayerSpec) -> dict[str, tuple[int, ...]]:
    if layer.kind == "dense":
        return {"weight": (layer.out_features, layer.in_features), "bias": (layer.out_features,)}
    if layer.kind == "conv2d":
        return {"weight": (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel),
                "bias": (layer.out_channels,)}
    return {}


def _validate_params(layers, params):
    for i, layer in enumerate(layers):
        for name, shape in param_shapes(layer).items():
            key = f"{i}.{name}"
            if key not in params:
                raise ConfigurationError(f"missing parameter {key}")
            if params[key].shape != shape:
                raise DimensionError(f"parameter {key} has shape {params[key].shape}, expected {shape}")


@dataclass
class AnnModel:
    input_shape: tuple[int, ...]
    layers: list[LayerSpec]
    params: dict[str, np.ndarray]
    qcfs: dict[int, QcfsParams] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in self.params.items()}
        self.shapes = infer_shapes(self.input_shape, self.layers)
        _validate_params(self.layers, self.params)
        for i, layer in enumerate(self.layers):
            needs = layer.kind == "activation" and layer.activation in PARAMETRIC_ACTIVATIONS
            if needs and i not in self.qcfs:
                raise ConfigurationError(f"activation layer {i} ({layer.activation}) has no QcfsParams")
            if not needs and i in self.qcfs:
                raise ConfigurationError(f"layer {i} is not a QCFS activation but has QcfsParams")
            if layer.kind == "activation" and layer.activation == "if_neuron":
                raise ConfigurationError(f"layer {i}: if_neuron is only valid in an SnnModel")

    kind = "ann"

    @property
    def activation_layers(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.kind == "activation"]

    def trainable(self) -> dict[str, np.ndarray]:
        """Weights, biases and every ``lambda`` (as 0-d arrays), keyed by name."""
        out = {k: v for k, v in self.params.items()}
        for i, p in self.qcfs.items():
            if self.layers[i].activation != "relu":
                out[f"{i}.lambda"] = np.asarray(p.lam)
        return out

    def load_trainable(self, values: dict[str, np.ndarray]) -> None:
        for k, v in values.items():
            idx, name = k.split(".")
            if name == "lambda":
                self.qcfs[int(idx)].lam = float(v)
            else:
                self.params[k] = np.asarray(v, dtype=np.float64)

    def copy(self) -> "AnnModel":
        return copy.deepcopy(self)


@dataclass
class SnnModel:
    """Spiking mirror of an AnnModel: activation layers become IF neurons."""

    input_shape: tuple[int, ...]
    layers: list[LayerSpec]
    params: dict[str, np.ndarray]
    theta: dict[int, float]
    v0: dict[int, float]
    meta: dict = field(default_factory=dict)

    kind = "snn"

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in self.params.items()}
        self.shapes = infer_shapes(self.input_shape, self.layers)
        _validate_params(self.layers, self.params)
        for i, layer in enumerate(self.layers):
            if layer.kind == "maxpool2d":
                raise ConfigurationError(f"layer {i}: maxpool has no spiking counterpart")
            if layer.kind != "activation":
                continue
            if layer.activation != "if_neuron":
                raise ConfigurationError(f"layer {i}: SNN activations must be if_neuron")
            if i not in self.theta or i not in self.v0:
                raise ConfigurationError(f"spiking layer {i} lacks a threshold or initial potential")
            if not self.theta[i] > 0:
                raise ConfigurationError(f"spiking layer {i} threshold must be positive, got {self.theta[i]}")

    @property
    def spiking_layers(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.kind == "activation"]


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(layers, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for i, layer in enumerate(layers):
        shapes = param_shapes(layer)
        if not shapes:
            continue
        w_shape = shapes["weight"]
        fan_in = int(np.prod(w_shape[1:]))
        params[f"{i}.weight"] = kaiming_uniform(rng, w_shape, fan_in)
        params[f"{i}.bias"] = np.zeros(shapes["bias"])
    return params


def build_mlp(input_shape=(1, 28, 28), hidden=(100,), n_classes=10, seed=0) -> AnnModel:
    """ReLU MLP; MLP-784-100-10 with the defaults."""
    input_shape = tuple(input_shape)
    layers = [flatten()] if len(input_shape) > 1 else []
    width = int(np.prod(input_shape))
    for h in hidden:
        layers += [dense(width, h), act("relu")]
        width = h
    layers.append(dense(width, n_classes))
    return AnnModel(input_shape, layers, init_params(layers, seed))


def build_conv_small(input_shape=(1, 28, 28), n_classes=10, seed=0) -> AnnModel:
    """conv16@3x3 -> pool2 -> conv32@3x3 -> pool2 -> dense, as a ReLU/maxpool source net."""
    c, h, w = input_shape
    layers = [
        conv(c, 16, 3, pad=1), act("relu"), maxpool(2),
        conv(16, 32, 3, pad=1), act("relu"), maxpool(2),
        flatten(), dense(32 * (h // 4) * (w // 4), n_classes),
    ]
    return AnnModel(tuple(input_shape), layers, init_params(layers, seed))


def transform_to_qcfs(model: AnnModel, L: int, shift: float = 0.5,
                      lam_init: float = LAMBDA_INIT) -> AnnModel:
    """Swap every ReLU for a QCFS activation and every maxpool for an avgpool.

    ``shift == 0`` produces the clip-floor variant without shift. Weights are
    copied unchanged; layers that are already QCFS keep their parameters.
    """
    layers, qparams = [], {}
    for i, layer in enumerate(model.layers):
        if layer.kind == "maxpool2d":
            layers.append(avgpool(layer.pool))
        elif layer.kind == "activation" and layer.activation == "relu":
            layers.append(act("qcfs" if shift > 0 else "qcf_noshift"))
            qparams[i] = QcfsParams(L, lam_init, shift)
        elif layer.kind == "activation" and layer.activation in ("qcfs", "qcf_noshift"):
            layers.append(copy.copy(layer))
            qparams[i] = copy.copy(model.qcfs[i])
        elif layer.kind == "activation":
            raise TransformError(f"layer {i}: cannot rewrite activation {layer.activation!r} to QCFS")
        else:
            layers.append(copy.copy(layer))
    params = {k: v.copy() for k, v in model.params.items()}
    return AnnModel(model.input_shape, layers, params, qparams, dict(model.meta))


# ---------------------------------------------------------------------------
# forward pass


def apply_linear(layer: LayerSpec, h: tn.Tensor, w=None, b=None) -> tn.Tensor:
    """Run one non-activation layer on a batch (weights as tensors or arrays)."""
    if layer.kind == "dense":
        return tn.dense(h, w, b)
    if layer.kind == "conv2d":
        return tn.add_bias(tn.conv2d(h, w, layer.stride, layer.pad), b)
    if layer.kind == "avgpool2d":
        return tn.avgpool2d(h, layer.pool)
    if layer.kind == "maxpool2d":
        return tn.maxpool2d(h, layer.pool)
    if layer.kind == "flatten":
        return tn.flatten(h)
    raise ConfigurationError(f"apply_linear cannot run layer kind {layer.kind!r}")


def _apply_activation(layer, i, model: AnnModel, h, lam):
    kind = layer.activation
    if kind == "relu":
        return tn.relu(h)
    p = model.qcfs[i]
    if kind == "qcfs":
        return qcfs(h, lam, p.L, p.shift)
    if kind == "qcf_noshift":
        return qcfs(h, lam, p.L, 0.0)
    if kind == "clip_only":
        return clip_act(h, lam)
    raise ConfigurationError(f"activation {kind!r} cannot run in an ANN")


def forward_graph(model: AnnModel, x, leaves: dict[str, tn.Tensor] | None = None):
    """Forward pass returning the output tensor of every layer.

    ``leaves`` maps names from :meth:`AnnModel.trainable` to tracked tensors;
    anything missing falls back to the model's own (untracked) values.
    """
    leaves = leaves or {}
    h = tn.as_tensor(x)
    if h.shape[1:] != model.input_shape:
        raise DimensionError(f"input batch shape {h.shape} does not match model input {model.input_shape}")
    outs = []
    for i, layer in enumerate(model.layers):
        if layer.kind == "activation":
            lam = leaves.get(f"{i}.lambda")
            if lam is None and i in model.qcfs:
                lam = tn.Tensor(model.qcfs[i].lam)
            h = _apply_activation(layer, i, model, h, lam)
        else:
            w = leaves.get(f"{i}.weight", model.params.get(f"{i}.weight"))
            b = leaves.get(f"{i}.bias", model.params.get(f"{i}.bias"))
            h = apply_linear(layer, h, w, b)
        outs.append(h)
    return outs


def ann_forward(model: AnnModel, x) -> tuple[np.ndarray, list[np.ndarray]]:
    """Logits plus the post-activation output of every activation layer."""
    outs = forward_graph(model, x)
    acts = [outs[i].data for i in model.activation_layers]
    return outs[-1].data, acts


def ann_preactivations(model: AnnModel, x) -> dict[int, np.ndarray]:
    """Input to each activation layer, keyed by layer index."""
    outs = forward_graph(model, x)
    pre = {}
    for i in model.activation_layers:
        pre[i] = (outs[i - 1] if i > 0 else tn.as_tensor(x)).data
    return pre


def predict(model: AnnModel, x, batch_size: int = 1000) -> np.ndarray:
    preds = []
    for s in range(0, len(x), batch_size):
        logits, _ = ann_forward(model, x[s:s + batch_size])
        preds.append(np.argmax(logits, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=int)


def weight_checksum(model) -> str:
    """SHA-256 over every weight/bias tensor in name order (bit-level)."""
    h = hashlib.sha256()
    for k in sorted(model.params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(model.params[k], dtype="<f8").tobytes())
    return h.hexdigest()
