"""
The CIFAR-10 CNN as composable layers with scheme-driven quantization points.

Every layer output is stored wide, then constrained to the `outputs` format before the next
layer reads it; every gradient handed backwards, and every parameter gradient, is constrained
to the `gradients` format. Under the power-of-two scheme those two classes are float[6,0], so
forward propagation, weight gradients and error propagation all run on shift kernels.
"""
import json
import logging
import os
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from lpnum.common.context import Context, ContextRegistry, ParameterClass, refresh_contexts
from lpnum.common.errors import CheckpointError, DomainError, FormatError, InvalidScheme, ShapeMismatch
from lpnum.common.models import OpTally
from lpnum.common.qformats import (WIDE, GlobalScale, FormatSpec, RoundingMode, is_representable,
                                   parse_format, quantize_array)
from lpnum.common.qtensor import Kernel, QTensor, elementwise, matmul
from lpnum.common.util import RngStreams, log2_histogram

logger = logging.getLogger("rich")

KEEP_PROBABILITY = 0.6
CONV_INIT_STD = 0.01
FC_INIT_STD = 0.005

_FIXED12 = {
    ParameterClass.WEIGHTS: "fixed[0,12]",
    ParameterClass.BIASES: "fixed[0,12]",
    ParameterClass.OUTPUTS: "fixed[6,6]",
    ParameterClass.GRADIENTS: "fixed[0,12]",
    ParameterClass.WEIGHT_UPDATES: "fixed[0,12]",
    ParameterClass.BIAS_UPDATES: "fixed[0,12]",
}

SCHEMES: Dict[str, Dict[ParameterClass, str]] = {
    "fp32-baseline": {c: "wide" for c in ParameterClass},
    "fixed12": dict(_FIXED12),
    "scaled-fixed12": {c: f"{literal}*2^-4" for c, literal in _FIXED12.items()},
    "float12": {c: "float[5,6]" for c in ParameterClass},
    "ctx-fixed12": {c: "ctx-fixed[6,6]" for c in ParameterClass},
    "ctx-float12": {c: "ctx-float[4,7]" for c in ParameterClass},
    "pot": {**_FIXED12, ParameterClass.OUTPUTS: "pot[6]", ParameterClass.GRADIENTS: "pot[6]"},
}


class SchemeConfig:
    name: str
    formats: Dict[ParameterClass, FormatSpec]
    overrides: Dict[str, str]

    def __init__(self, name: str, formats: Dict[ParameterClass, FormatSpec], overrides: Dict[str, str] = None):
        missing = [c.value for c in ParameterClass if c not in formats]
        if missing:
            raise InvalidScheme(name, f"no format for {', '.join(missing)}")
        self.name = name
        self.formats = formats
        self.overrides = overrides or {}

    @classmethod
    def from_name(cls, name: str, overrides: Dict[str, str] = None) -> "SchemeConfig":
        if name not in SCHEMES:
            raise InvalidScheme(name, f"known schemes are {', '.join(SCHEMES)}")
        literals = {c: literal for c, literal in SCHEMES[name].items()}
        for key, literal in (overrides or {}).items():
            try:
                literals[ParameterClass(key)] = literal
            except ValueError:
                raise InvalidScheme(name, f"'{key}' is not a parameter class")
        try:
            formats = {c: parse_format(literal) for c, literal in literals.items()}
        except FormatError as e:
            raise InvalidScheme(name, str(e))
        return cls(name, formats, dict(overrides or {}))

    def spec(self, cls: ParameterClass) -> FormatSpec:
        return self.formats[ParameterClass(cls)]

    @property
    def uses_contexts(self) -> bool:
        return any(f.contextual for f in self.formats.values())

    @property
    def is_pot(self) -> bool:
        return self.spec(ParameterClass.OUTPUTS).is_pot and self.spec(ParameterClass.GRADIENTS).is_pot

    def as_dict(self) -> Dict:
        return {
            "name": self.name,
            "formats": {c.value: str(f) for c, f in self.formats.items()},
            "overrides": self.overrides,
        }

    def as_markdown_table(self) -> str:
        rows = ["| Class | Format |", "|---|---|"]
        rows += [f"| {c.value} | {f} |" for c, f in self.formats.items()]
        return "\n".join(rows)


class LayerKind(str, Enum):
    CONV = "conv"
    MAXPOOL = "maxpool"
    RELU = "relu"
    FC = "fc"
    DROPOUT = "dropout"
    SOFTMAX_XENT = "softmax_xent"


class LayerSpec:
    def __init__(self, name: str, kind: LayerKind, in_channels: int = 0, out_channels: int = 0, kernel: int = 0,
                 stride: int = 1, padding: int = 0, rate: float = 0.0):
        self.name = name
        self.kind = LayerKind(kind)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.rate = rate

    @property
    def has_params(self) -> bool:
        return self.kind in (LayerKind.CONV, LayerKind.FC)

    @property
    def fan_in(self) -> int:
        if self.kind == LayerKind.CONV:
            return self.in_channels * self.kernel * self.kernel
        return self.in_channels

    @property
    def weight_shape(self) -> Tuple[int, ...]:
        if self.kind == LayerKind.CONV:
            return self.out_channels, self.in_channels, self.kernel, self.kernel
        return self.out_channels, self.in_channels

    def output_shape(self, input_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        if self.kind == LayerKind.CONV:
            _, h, w = input_shape
            ho = (h + 2 * self.padding - self.kernel) // self.stride + 1
            wo = (w + 2 * self.padding - self.kernel) // self.stride + 1
            return self.out_channels, ho, wo
        if self.kind == LayerKind.MAXPOOL:
            c, h, w = input_shape
            return c, (h - self.kernel) // self.stride + 1, (w - self.kernel) // self.stride + 1
        if self.kind == LayerKind.FC:
            return (self.out_channels,)
        return tuple(input_shape)

    def as_dict(self) -> Dict:
        return {
            "name": self.name, "kind": self.kind.value, "in_channels": self.in_channels,
            "out_channels": self.out_channels, "kernel": self.kernel, "stride": self.stride,
            "padding": self.padding, "rate": self.rate,
        }

    @classmethod
    def from_dict(cls, d: Dict) -> "LayerSpec":
        return cls(**d)


class Topology:
    def __init__(self, input_shape: Tuple[int, int, int], layers: List[LayerSpec]):
        self.input_shape = tuple(input_shape)
        self.layers = layers
        shape = self.input_shape
        self.shapes: Dict[str, Tuple[Tuple[int, ...], Tuple[int, ...]]] = {}
        for layer in layers:
            out = layer.output_shape(shape)
            if layer.kind == LayerKind.FC and int(np.prod(shape)) != layer.in_channels:
                raise ShapeMismatch(f"{layer.name} expects {layer.in_channels} inputs, receives {int(np.prod(shape))}")
            if layer.kind == LayerKind.CONV and shape[0] != layer.in_channels:
                raise ShapeMismatch(f"{layer.name} expects {layer.in_channels} channels, receives {shape[0]}")
            if min(out) <= 0:
                raise ShapeMismatch(f"{layer.name} produces the empty shape {out}")
            self.shapes[layer.name] = (shape, out)
            shape = out

    @property
    def parametric(self) -> List[LayerSpec]:
        return [layer for layer in self.layers if layer.has_params]

    @property
    def classes(self) -> int:
        return self.layers[-1].out_channels

    def parameter_count(self) -> int:
        return sum(int(np.prod(layer.weight_shape)) + layer.out_channels for layer in self.parametric)

    def as_dict(self) -> Dict:
        return {"input_shape": list(self.input_shape), "layers": [layer.as_dict() for layer in self.layers]}

    @classmethod
    def from_dict(cls, d: Dict) -> "Topology":
        return cls(tuple(d["input_shape"]), [LayerSpec.from_dict(layer) for layer in d["layers"]])


def build_topology(input_shape: Tuple[int, int, int] = (3, 32, 32), classes: int = 10,
                   widths: Sequence[int] = (32, 32, 64), fc_width: int = 1000, kernel: int = 5,
                   dropout: float = 0.4) -> Topology:
    """
    Three conv -> max-pool -> ReLU blocks, one hidden fully connected layer with ReLU and
    dropout, and a softmax classifier. The defaults give the CIFAR-10 network.
    """
    layers: List[LayerSpec] = []
    channels = input_shape[0]
    for i, width in enumerate(widths, start=1):
        layers += [
            LayerSpec(f"conv{i}", LayerKind.CONV, channels, width, kernel=kernel, stride=1, padding=kernel // 2),
            LayerSpec(f"pool{i}", LayerKind.MAXPOOL, width, width, kernel=3, stride=2),
            LayerSpec(f"relu{i}", LayerKind.RELU),
        ]
        channels = width
    shape = tuple(input_shape)
    for layer in layers:
        shape = layer.output_shape(shape)
    n = len(widths) + 1
    layers += [
        LayerSpec("fc1", LayerKind.FC, int(np.prod(shape)), fc_width),
        LayerSpec(f"relu{n}", LayerKind.RELU),
        LayerSpec("drop1", LayerKind.DROPOUT, rate=dropout),
        LayerSpec("out", LayerKind.FC, fc_width, classes),
        LayerSpec("loss", LayerKind.SOFTMAX_XENT),
    ]
    return Topology(tuple(input_shape), layers)


def valid_taps(size: int, kernel: int, padding: int, stride: int) -> int:
    """
    Number of (output position, kernel offset) pairs along one axis that land inside the
    unpadded input.
    """
    out = (size + 2 * padding - kernel) // stride + 1
    taps = 0
    for o in range(out):
        for k in range(kernel):
            if 0 <= o * stride + k - padding < size:
                taps += 1
    return taps


def im2col(x: np.ndarray, kernel: int, stride: int, padding: int) -> np.ndarray:
    b, c, _, _ = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = windows.shape[2], windows.shape[3]
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kernel * kernel)


def col2im(cols: np.ndarray, input_shape: Tuple[int, int, int, int], kernel: int, stride: int,
           padding: int) -> np.ndarray:
    b, c, h, w = input_shape
    ho = (h + 2 * padding - kernel) // stride + 1
    wo = (w + 2 * padding - kernel) // stride + 1
    patches = cols.reshape(b, ho, wo, c, kernel, kernel).transpose(0, 3, 1, 2, 4, 5)
    xp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    for ky in range(kernel):
        for kx in range(kernel):
            xp[:, :, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride] += patches[:, :, :, :, ky, kx]
    return xp[:, :, padding:padding + h, padding:padding + w]


class NetworkState:
    """
    Parameters, momentum buffers, contexts and RNG streams of one network under one scheme.
    """

    def __init__(self, topology: Topology, scheme: SchemeConfig, rounding: RoundingMode = RoundingMode.STOCHASTIC,
                 seed: int = 0, kernel: str = "exact", debug: bool = False, initialize: bool = True):
        if kernel not in ("blas", "exact", "exact-multiply"):
            raise ValueError(f"Unknown kernel mode '{kernel}'")
        self.topology = topology
        self.scheme = scheme
        self.rounding = RoundingMode(rounding)
        self.seed = seed
        self.rng = RngStreams(seed)
        self.kernel = kernel
        self.debug = debug
        self.record_activations = False
        self.contexts = ContextRegistry()
        self.tally = OpTally()
        self.step = 0
        self.epoch = 0
        self.params: Dict[str, Dict[str, np.ndarray]] = {}
        self.momentum: Dict[str, Dict[str, np.ndarray]] = {}
        self.last_outputs: Dict[str, np.ndarray] = {}
        self.last_gradients: Dict[str, np.ndarray] = {}
        for layer in topology.parametric:
            self.params[layer.name] = {"weights": np.zeros(layer.weight_shape), "biases": np.zeros(layer.out_channels)}
            self.momentum[layer.name] = {"weights": np.zeros(layer.weight_shape),
                                         "biases": np.zeros(layer.out_channels)}
        if initialize:
            self.initialize()

    def initialize(self) -> None:
        init = self.rng.stream("init")
        for layer in self.topology.parametric:
            std = CONV_INIT_STD if layer.kind == LayerKind.CONV else FC_INIT_STD
            self.params[layer.name]["weights"] = init.normal(0.0, std, size=layer.weight_shape)
        for cls in ParameterClass.WEIGHTS, ParameterClass.BIASES, ParameterClass.WEIGHT_UPDATES, \
                ParameterClass.BIAS_UPDATES:
            self.requantize_class(cls)

    # Quantization points

    def quantize(self, values: np.ndarray, layer: str, cls: ParameterClass, key: Tuple = ()) -> np.ndarray:
        spec = self.scheme.spec(cls)
        if spec.is_wide:
            return values + 0.0
        rng = None
        if self.rounding == RoundingMode.STOCHASTIC:
            rng = self.rng.stream("quantize", *key, layer, ParameterClass(cls).value)
        if spec.contextual:
            ctx = self.contexts.update(layer, cls, values)
            return quantize_array(values, spec.base, GlobalScale(ctx.scale_exponent), self.rounding, rng)
        return quantize_array(values, spec.base, spec.scale, self.rounding, rng)

    def representable(self, values: np.ndarray, layer: str, cls: ParameterClass) -> bool:
        spec = self.scheme.spec(cls)
        if spec.is_wide:
            return bool(np.all(np.isfinite(values)))
        scale = spec.scale
        if spec.contextual:
            scale = GlobalScale(self.contexts.get(layer, cls).scale_exponent)
        return bool(np.all(is_representable(values, spec.base, scale)))

    # Context protocol used by refresh_contexts

    def context_base(self, cls: ParameterClass):
        return self.scheme.spec(cls).base

    def _class_slot(self, cls: ParameterClass) -> Tuple[Dict[str, Dict[str, np.ndarray]], str]:
        cls = ParameterClass(cls)
        if cls == ParameterClass.WEIGHTS:
            return self.params, "weights"
        if cls == ParameterClass.BIASES:
            return self.params, "biases"
        if cls == ParameterClass.WEIGHT_UPDATES:
            return self.momentum, "weights"
        if cls == ParameterClass.BIAS_UPDATES:
            return self.momentum, "biases"
        raise ValueError(f"{cls.value} are transient and not stored in the network state")

    def class_tensors(self, cls: ParameterClass) -> Dict[str, np.ndarray]:
        cls = ParameterClass(cls)
        if cls == ParameterClass.OUTPUTS:
            return dict(self.last_outputs)
        if cls == ParameterClass.GRADIENTS:
            return dict(self.last_gradients)
        store, slot = self._class_slot(cls)
        return {name: tensors[slot] for name, tensors in store.items()}

    def set_class_tensor(self, layer: str, cls: ParameterClass, values: np.ndarray) -> None:
        cls = ParameterClass(cls)
        if cls == ParameterClass.OUTPUTS:
            self.last_outputs[layer] = values
            return
        if cls == ParameterClass.GRADIENTS:
            self.last_gradients[layer] = values
            return
        store, slot = self._class_slot(cls)
        store[layer][slot] = values

    def requantize_class(self, cls: ParameterClass) -> None:
        spec = self.scheme.spec(cls)
        if spec.is_wide:
            return
        if spec.contextual:
            refresh_contexts(self, cls, RoundingMode.NEAREST)
            return
        for layer, values in self.class_tensors(cls).items():
            self.set_class_tensor(layer, cls, quantize_array(values, spec.base, spec.scale, RoundingMode.NEAREST))

    # Kernels

    def kernel_for(self, pot_operand: bool) -> Kernel:
        """
        `exact` and `exact-multiply` reduce in index order; `blas` is faster but its order,
        and so its rounding, depends on the BLAS build.
        """
        if self.kernel == "blas":
            return Kernel.BLAS
        if self.kernel == "exact" and pot_operand:
            return Kernel.SHIFT
        return Kernel.MULTIPLY

    def align(self, values: np.ndarray, source: Tuple[str, ParameterClass], target: Tuple[str, ParameterClass],
              per: int = 1) -> np.ndarray:
        """
        Accounts for `values`, held in the `source` (layer, class) context, entering `per`
        operations each with members of the `target` context.
        """
        if not self.scheme.uses_contexts:
            return values
        return self.contexts.rescale(values, self.contexts.lookup(*source), self.contexts.lookup(*target),
                                     tally=self.tally, per=per)

    @property
    def pot_forward(self) -> bool:
        return self.scheme.spec(ParameterClass.OUTPUTS).is_pot

    @property
    def pot_backward(self) -> bool:
        return self.scheme.spec(ParameterClass.GRADIENTS).is_pot

    def parameter_tensors(self) -> Dict[str, QTensor]:
        tensors = {}
        for layer, params in self.params.items():
            for slot, data in params.items():
                tensors[f"{layer}.{slot}"] = QTensor(data)
            for slot, data in self.momentum[layer].items():
                tensors[f"{layer}.momentum.{slot}"] = QTensor(data)
        return tensors

    # Checkpoints

    def save_checkpoint(self, directory: str) -> str:
        os.makedirs(directory, exist_ok=True)
        header = {
            "topology": self.topology.as_dict(),
            "scheme": self.scheme.as_dict(),
            "rounding": self.rounding.value,
            "seed": self.seed,
            "epoch": self.epoch,
            "step": self.step,
            "kernel": self.kernel,
            "contexts": self.contexts.snapshot(),
        }
        with open(os.path.join(directory, "checkpoint.json"), "w") as f:
            json.dump(header, f, sort_keys=True, indent=2)
        for name, tensor in self.parameter_tensors().items():
            tensor.dump(os.path.join(directory, name))
        logger.debug("Checkpoint written to %s (epoch %d)", directory, self.epoch)
        return directory

    @classmethod
    def load_checkpoint(cls, directory: str, scheme: Optional[SchemeConfig] = None,
                        rounding: Optional[RoundingMode] = None) -> "NetworkState":
        """
        Restores a state. When `scheme` differs from the stored one, every stored tensor is
        re-quantized to the new scheme's formats.
        """
        try:
            with open(os.path.join(directory, "checkpoint.json"), "r") as f:
                header = json.load(f)
            stored = header["scheme"]
            stored_scheme = SchemeConfig.from_name(stored["name"], stored.get("overrides"))
            state = cls(Topology.from_dict(header["topology"]), scheme or stored_scheme,
                        rounding=rounding or header["rounding"], seed=header["seed"], kernel=header["kernel"],
                        initialize=False)
            state.epoch = int(header["epoch"])
            state.step = int(header["step"])
            for layer in state.topology.parametric:
                for slot in ("weights", "biases"):
                    state.params[layer.name][slot] = QTensor.load(
                        os.path.join(directory, f"{layer.name}.{slot}")).data.reshape(
                        state.params[layer.name][slot].shape)
                    state.momentum[layer.name][slot] = QTensor.load(
                        os.path.join(directory, f"{layer.name}.momentum.{slot}")).data.reshape(
                        state.momentum[layer.name][slot].shape)
        except (OSError, KeyError, ValueError) as e:
            raise CheckpointError(f"Could not load the checkpoint in {directory}: {e}")
        if scheme is None or scheme.as_dict() == stored:
            for context_id, exponent in header.get("contexts", {}).items():
                state.contexts.set(Context(id=context_id, scale_exponent=int(exponent)))
            return state
        logger.info("Switching the checkpoint from %s to %s", stored["name"], scheme.name)
        for c in ParameterClass.WEIGHTS, ParameterClass.BIASES, ParameterClass.WEIGHT_UPDATES, \
                ParameterClass.BIAS_UPDATES:
            state.requantize_class(c)
        return state

    def assert_conformance(self) -> None:
        for layer in self.topology.parametric:
            for cls, store, slot in ((ParameterClass.WEIGHTS, self.params, "weights"),
                                     (ParameterClass.BIASES, self.params, "biases"),
                                     (ParameterClass.WEIGHT_UPDATES, self.momentum, "weights"),
                                     (ParameterClass.BIAS_UPDATES, self.momentum, "biases")):
                if not self.representable(store[layer.name][slot], layer.name, cls):
                    raise FormatError(f"{layer.name} {cls.value} violate {self.scheme.spec(cls)}")
        for layer, values in self.last_outputs.items():
            if not self.representable(values, layer, ParameterClass.OUTPUTS):
                raise FormatError(f"{layer} outputs violate {self.scheme.spec(ParameterClass.OUTPUTS)}")
        for layer, values in self.last_gradients.items():
            if not self.representable(values, layer, ParameterClass.GRADIENTS):
                raise FormatError(f"{layer} gradients violate {self.scheme.spec(ParameterClass.GRADIENTS)}")


class ForwardCache:
    def __init__(self, key: Tuple, training: bool):
        self.key = key
        self.training = training
        self.inputs: Dict[str, np.ndarray] = {}
        self.extras: Dict[str, object] = {}
        self.logits: Optional[np.ndarray] = None


def forward(state: NetworkState, images: np.ndarray, training: bool = True,
            key: Optional[Tuple] = None) -> Tuple[np.ndarray, ForwardCache]:
    images = np.asarray(images, dtype=np.float64)
    if images.shape[1:] != state.topology.input_shape:
        raise ShapeMismatch(f"Input shape {images.shape[1:]} does not match the topology's "
                            f"{state.topology.input_shape}")
    key = key if key is not None else ("train", state.step)
    cache = ForwardCache(key, training)
    outputs = {} if state.debug or state.record_activations else None
    x = state.quantize(images, "input", ParameterClass.OUTPUTS, key)
    if outputs is not None:
        outputs["input"] = x
    tally = state.tally
    b = x.shape[0]
    kernel = state.kernel_for(state.pot_forward)
    pot_operand = "a" if state.pot_forward else None
    source = "input"
    for layer in state.topology.layers:
        if layer.kind == LayerKind.SOFTMAX_XENT:
            break
        cache.inputs[layer.name] = x
        if layer.kind == LayerKind.CONV:
            w = state.params[layer.name]["weights"]
            cols = im2col(x, layer.kernel, layer.stride, layer.padding)
            _, (co, ho, wo) = state.topology.shapes[layer.name]
            cols = state.align(cols, (source, ParameterClass.OUTPUTS), (layer.name, ParameterClass.WEIGHTS), per=co)
            p = matmul(cols, w.reshape(co, -1).T, kernel, tally, pot_operand=pot_operand)
            biases = state.align(state.params[layer.name]["biases"], (layer.name, ParameterClass.BIASES),
                                 (layer.name, ParameterClass.OUTPUTS), per=p.shape[0])
            p = elementwise("add", p, biases, WIDE, tally=tally).data
            cache.extras[layer.name] = cols
            y = p.reshape(b, ho, wo, co).transpose(0, 3, 1, 2)
        elif layer.kind == LayerKind.MAXPOOL:
            windows = sliding_window_view(x, (layer.kernel, layer.kernel), axis=(2, 3))
            windows = windows[:, :, ::layer.stride, ::layer.stride]
            flat = windows.reshape(windows.shape[:4] + (-1,))
            arg = np.argmax(flat, axis=-1)
            y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
            tally.record("cmp", y.size * (layer.kernel * layer.kernel - 1))
            cache.extras[layer.name] = arg
        elif layer.kind == LayerKind.RELU:
            y = elementwise("max", x, 0.0, WIDE, tally=tally).data
        elif layer.kind == LayerKind.DROPOUT:
            keep = 1.0 - layer.rate
            if training:
                mask = (state.rng.stream("dropout", *key, layer.name).random(size=x.shape) < keep).astype(np.float64)
                # masking is a select, tallied as one compare per element
                y = elementwise("mul", x, mask, WIDE).data
                cache.extras[layer.name] = mask
                tally.record("cmp", y.size)
            else:
                y = x * keep
                cache.extras[layer.name] = keep
        else:
            w = state.params[layer.name]["weights"]
            flat_x = state.align(x.reshape(b, -1), (source, ParameterClass.OUTPUTS),
                                 (layer.name, ParameterClass.WEIGHTS), per=layer.out_channels)
            cache.inputs[layer.name] = flat_x
            y = matmul(flat_x, w.T, kernel, tally, pot_operand=pot_operand)
            biases = state.align(state.params[layer.name]["biases"], (layer.name, ParameterClass.BIASES),
                                 (layer.name, ParameterClass.OUTPUTS), per=b)
            y = elementwise("add", y, biases, WIDE, tally=tally).data
        x = state.quantize(y, layer.name, ParameterClass.OUTPUTS, key)
        source = layer.name
        if outputs is not None:
            outputs[layer.name] = x
    cache.logits = x
    if outputs is not None:
        state.last_outputs = outputs
    if state.debug:
        state.assert_conformance()
    return x, cache


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=1, keepdims=True)


def _check_labels(labels: np.ndarray, classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise DomainError(f"Labels must lie in [0, {classes - 1}]")
    return labels.astype(np.int64)


def loss(logits: np.ndarray, labels: np.ndarray) -> float:
    """
    Mean softmax cross-entropy, computed wide with a log-sum-exp shift.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(labels, logits.shape[1])
    m = np.max(logits, axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.sum(np.exp(logits - m), axis=1))
    return float(np.mean(lse - logits[np.arange(labels.size), labels]))


def backward(state: NetworkState, cache: Optional[ForwardCache], labels: np.ndarray) -> Dict[str, Dict[str, np.ndarray]]:
    """
    Returns per-layer {"weights", "biases"} gradients, each constrained to the gradients format.
    """
    if cache is None or cache.logits is None:
        raise ValueError("backward needs the cache of a completed forward pass")
    key = cache.key
    labels = _check_labels(labels, cache.logits.shape[1])
    b = cache.logits.shape[0]
    tally = state.tally
    kernel = state.kernel_for(state.pot_backward)
    pot_operand = "a" if state.pot_backward else None
    gradients = {} if state.debug or state.record_activations else None
    probs = softmax(cache.logits)
    probs[np.arange(b), labels] -= 1.0
    dy = state.quantize(probs / b, "loss", ParameterClass.GRADIENTS, key)
    if gradients is not None:
        gradients["loss"] = dy
    grads: Dict[str, Dict[str, np.ndarray]] = {}
    layers = [layer for layer in state.topology.layers if layer.kind != LayerKind.SOFTMAX_XENT]
    source = "loss"
    for index in range(len(layers) - 1, -1, -1):
        layer = layers[index]
        first = index == 0
        x = cache.inputs[layer.name]
        inputs = (layers[index - 1].name if index else "input", ParameterClass.OUTPUTS)
        signal = (source, ParameterClass.GRADIENTS)
        if layer.kind == LayerKind.CONV:
            w = state.params[layer.name]["weights"]
            co = layer.out_channels
            dp = dy.transpose(0, 2, 3, 1).reshape(-1, co)
            cols = cache.extras[layer.name]
            cols = state.align(cols, inputs, signal, per=co)
            dw = matmul(dp.T, cols, kernel, tally, pot_operand=pot_operand).reshape(w.shape)
            db = np.sum(dp, axis=0)
            tally.record("add", co * (dp.shape[0] - 1))
            grads[layer.name] = {
                "weights": state.quantize(dw, f"{layer.name}.weights", ParameterClass.GRADIENTS, key),
                "biases": state.quantize(db, f"{layer.name}.biases", ParameterClass.GRADIENTS, key),
            }
            if first:
                break
            wt = state.align(w.reshape(co, -1), (layer.name, ParameterClass.WEIGHTS), signal, per=dp.shape[0])
            dcols = matmul(dp, wt, kernel, tally, pot_operand=pot_operand)
            _, c, h, wd = x.shape
            dx = col2im(dcols, x.shape, layer.kernel, layer.stride, layer.padding)
            taps = valid_taps(h, layer.kernel, layer.padding, layer.stride) * \
                valid_taps(wd, layer.kernel, layer.padding, layer.stride)
            tally.record("add", b * c * (taps - h * wd))
        elif layer.kind == LayerKind.MAXPOOL:
            arg = cache.extras[layer.name]
            _, c, ho, wo = dy.shape
            k, s = layer.kernel, layer.stride
            rows = np.arange(ho)[:, None] * s + arg // k
            cols_ = np.arange(wo)[None, :] * s + arg % k
            dx = np.zeros_like(x)
            bi, ci = np.meshgrid(np.arange(b), np.arange(c), indexing="ij")
            np.add.at(dx, (bi[:, :, None, None], ci[:, :, None, None], rows, cols_), dy)
        elif layer.kind == LayerKind.RELU:
            dx = np.where(x > 0.0, dy, 0.0)
        elif layer.kind == LayerKind.DROPOUT:
            dx = dy * cache.extras[layer.name]
        else:
            w = state.params[layer.name]["weights"]
            x = state.align(x, inputs, signal, per=dy.shape[1])
            dw = matmul(dy.T, x, kernel, tally, pot_operand=pot_operand)
            db = np.sum(dy, axis=0)
            tally.record("add", dy.shape[1] * (b - 1))
            grads[layer.name] = {
                "weights": state.quantize(dw, f"{layer.name}.weights", ParameterClass.GRADIENTS, key),
                "biases": state.quantize(db, f"{layer.name}.biases", ParameterClass.GRADIENTS, key),
            }
            if first:
                break
            wt = state.align(w, (layer.name, ParameterClass.WEIGHTS), signal, per=b)
            dx = matmul(dy, wt, kernel, tally, pot_operand=pot_operand)
            previous = layers[index - 1]
            dx = dx.reshape((b,) + state.topology.shapes[previous.name][1])
        if first:
            break
        dy = state.quantize(dx, layer.name, ParameterClass.GRADIENTS, key)
        source = layer.name
        if gradients is not None:
            gradients[layer.name] = dy
    if gradients is not None:
        state.last_gradients = gradients
    if state.debug:
        state.assert_conformance()
    return grads


def layer_histograms(state: NetworkState) -> Dict[str, Dict[str, Dict[str, int]]]:
    """
    log2-magnitude histograms of every stored tensor, keyed by layer then parameter class.
    Outputs and gradients are included when the last pass kept them (debug mode).
    """
    histograms: Dict[str, Dict[str, Dict[str, int]]] = {}
    for cls in ParameterClass:
        for layer, values in state.class_tensors(cls).items():
            histograms.setdefault(layer, {})[cls.value] = log2_histogram(values)
    return histograms
