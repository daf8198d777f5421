"""
Explicit layer-graph classifiers: construction, forward/backward passes,
momentum-SGD training, parameter randomization and the model file format.
"""

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.metrics import accuracy_score, f1_score

from . import numerics
from .errors import (
    DivergenceError,
    InvalidClassIndexError,
    ModelFileError,
    ShapeMismatchError,
)

logger = logging.getLogger(__name__)

LAYER_KINDS = ("conv", "relu", "maxpool", "avgpool", "flatten", "dense", "global_avgpool")
PARAMETERIZED_KINDS = ("conv", "dense")
MODEL_FORMAT_VERSION = 1
LABEL_THRESHOLD = 0.5


@dataclass(frozen=True, eq=False)
class LayerSpec:
    """Container for one layer: kind, hyperparameters and optional parameters"""
    kind: str
    hyperparams: Dict[str, int] = field(default_factory=dict)
    weights: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unsupported layer kind: {self.kind}")
        if self.kind not in PARAMETERIZED_KINDS:
            return
        expected = self.parameter_shapes()
        if self.weights is not None and self.weights.shape != expected[0]:
            raise ShapeMismatchError(f"{self.kind} weights {self.weights.shape}, expected {expected[0]}")
        if self.bias is not None and self.bias.shape != expected[1]:
            raise ShapeMismatchError(f"{self.kind} bias {self.bias.shape}, expected {expected[1]}")

    @property
    def parameterized(self) -> bool:
        return self.kind in PARAMETERIZED_KINDS

    def parameter_shapes(self) -> Tuple[Tuple[int, ...], Tuple[int, ...]]:
        hp = self.hyperparams
        if self.kind == "conv":
            k = hp["kernel"]
            return (hp["out_channels"], hp["in_channels"], k, k), (hp["out_channels"],)
        if self.kind == "dense":
            return (hp["out_features"], hp["in_features"]), (hp["out_features"],)
        return (), ()

    def fan_in(self) -> int:
        hp = self.hyperparams
        if self.kind == "conv":
            return hp["in_channels"] * hp["kernel"] * hp["kernel"]
        return hp["in_features"]

    def output_shape(self, input_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        hp = self.hyperparams
        if self.kind == "conv":
            _, h, w = input_shape
            k, s, p = hp["kernel"], hp.get("stride", 1), hp.get("pad", 0)
            return hp["out_channels"], (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        if self.kind in ("maxpool", "avgpool"):
            c, h, w = input_shape
            k, s = hp["window"], hp.get("stride", hp["window"])
            return c, (h - k) // s + 1, (w - k) // s + 1
        if self.kind == "flatten":
            return (int(np.prod(input_shape)),)
        if self.kind == "global_avgpool":
            return (input_shape[0],)
        if self.kind == "dense":
            return (hp["out_features"],)
        return input_shape


@dataclass(frozen=True, eq=False)
class ModelGraph:
    """Immutable ordered layer stack mapping [C,H,W] inputs to L logits"""
    layers: Tuple[LayerSpec, ...]
    input_shape: Tuple[int, int, int]
    num_classes: int
    rng_seed: int = 0

    def __post_init__(self):
        shape = tuple(self.input_shape)
        for index, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
            except (KeyError, ValueError) as e:
                raise ShapeMismatchError(f"layer {index} ({layer.kind}) cannot take input {shape}: {e}")
        if shape != (self.num_classes,):
            raise ShapeMismatchError(f"model output shape {shape} != ({self.num_classes},)")

    @property
    def parameterized_indices(self) -> List[int]:
        return [i for i, layer in enumerate(self.layers) if layer.parameterized]

    @property
    def conv_indices(self) -> List[int]:
        return [i for i, layer in enumerate(self.layers) if layer.kind == "conv"]

    def parameters(self) -> List[np.ndarray]:
        """Weights then bias of every parameterized layer, in declaration order"""
        params = []
        for layer in self.layers:
            if layer.parameterized:
                params.extend([layer.weights, layer.bias])
        return params

    def with_parameters(self, params: Sequence[np.ndarray], rng_seed: Optional[int] = None) -> "ModelGraph":
        values = iter(params)
        layers = []
        for layer in self.layers:
            if layer.parameterized:
                layer = replace(layer, weights=np.array(next(values), dtype=np.float64),
                                bias=np.array(next(values), dtype=np.float64))
            layers.append(layer)
        seed = self.rng_seed if rng_seed is None else rng_seed
        return ModelGraph(tuple(layers), self.input_shape, self.num_classes, seed)


@dataclass
class Prediction:
    """Container for logits, per-class sigmoid probabilities and 0/1 labels"""
    logits: np.ndarray
    probabilities: np.ndarray
    labels: np.ndarray

    @classmethod
    def from_logits(cls, logits: np.ndarray) -> "Prediction":
        probabilities = numerics.activation(logits, "sigmoid")
        labels = (probabilities >= LABEL_THRESHOLD).astype(np.uint8)
        return cls(logits=logits, probabilities=probabilities, labels=labels)


@dataclass
class ActivationTrace:
    """Per-layer inputs and outputs of a forward pass, always batched [N,...]"""
    layers: Tuple[LayerSpec, ...]
    inputs: List[np.ndarray]
    outputs: List[np.ndarray]
    pool_indices: Dict[int, np.ndarray] = field(default_factory=dict)
    batched: bool = True

    def __len__(self) -> int:
        return len(self.outputs)

    def contributions(self, index: int) -> np.ndarray:
        """Pre-activation contributions z_st = x_s * w_st of a parameterized layer.

        Dense layers give [N, out, in]; conv layers give [N, F, H', W', C, kH, kW].
        """
        layer = self.layers[index]
        x = self.inputs[index]
        if layer.kind == "dense":
            return x[:, None, :] * layer.weights[None, :, :]
        if layer.kind == "conv":
            hp = layer.hyperparams
            padded = numerics._pad_spatial(x, hp.get("pad", 0))
            k = hp["kernel"]
            windows = numerics._windows(padded, k, k, hp.get("stride", 1))
            return np.einsum("nchwij,fcij->nfhwcij", windows, layer.weights)
        raise ValueError(f"layer {index} ({layer.kind}) has no parameters")


@dataclass
class Gradients:
    """Container for gradients of a class logit (or loss) w.r.t. input, activations and parameters"""
    input: np.ndarray
    activations: List[np.ndarray]
    parameters: List[Optional[Tuple[np.ndarray, np.ndarray]]]


def _layer_forward(layer: LayerSpec, x: np.ndarray) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    hp = layer.hyperparams
    if layer.kind == "conv":
        return numerics.conv2d(x, layer.weights, layer.bias, hp.get("stride", 1), hp.get("pad", 0)), None
    if layer.kind == "relu":
        return numerics.activation(x, "relu"), None
    if layer.kind in ("maxpool", "avgpool"):
        mode = "max" if layer.kind == "maxpool" else "avg"
        return numerics.pool2d(x, mode, hp["window"], hp.get("stride", hp["window"]), return_indices=True)
    if layer.kind == "flatten":
        return x.reshape(x.shape[0], -1), None
    if layer.kind == "global_avgpool":
        return x.mean(axis=(2, 3)), None
    return numerics.dense(x, layer.weights, layer.bias), None


def _layer_backward(layer: LayerSpec, grad: np.ndarray, x: np.ndarray,
                    argmax: Optional[np.ndarray]) -> Tuple[np.ndarray, Optional[Tuple[np.ndarray, np.ndarray]]]:
    hp = layer.hyperparams
    if layer.kind == "conv":
        gi, gw, gb = numerics.conv2d_backward(grad, x, layer.weights, hp.get("stride", 1), hp.get("pad", 0))
        return gi, (gw, gb)
    if layer.kind == "relu":
        return grad * (x > 0), None
    if layer.kind in ("maxpool", "avgpool"):
        mode = "max" if layer.kind == "maxpool" else "avg"
        return numerics.pool2d_backward(grad, x.shape, mode, hp["window"],
                                        hp.get("stride", hp["window"]), argmax), None
    if layer.kind == "flatten":
        return grad.reshape(x.shape), None
    if layer.kind == "global_avgpool":
        h, w = x.shape[2:]
        return np.broadcast_to(grad[:, :, None, None] / (h * w), x.shape).copy(), None
    return grad @ layer.weights, (grad.T @ x, grad.sum(axis=0))


def run_layers(model: ModelGraph, x: np.ndarray, trace: bool = False):
    """Batched forward pass; returns (logits [N,L], optional ActivationTrace)"""
    inputs, outputs, indices = [], [], {}
    out = x
    for index, layer in enumerate(model.layers):
        if trace:
            inputs.append(out)
        out, argmax = _layer_forward(layer, out)
        if trace:
            outputs.append(out)
            if argmax is not None:
                indices[index] = argmax
    if not trace:
        return out, None
    return out, ActivationTrace(model.layers, inputs, outputs, indices)


def _check_input(model: ModelGraph, x: np.ndarray, batched: bool):
    shape = x.shape[1:] if batched else x.shape
    if tuple(shape) != tuple(model.input_shape) or (batched and x.ndim != 4):
        raise ShapeMismatchError(f"input {x.shape} does not match model input {model.input_shape}")


def forward(model: ModelGraph, x: np.ndarray, trace: bool = False) -> Tuple[Prediction, Optional[ActivationTrace]]:
    x = numerics.as_tensor(x)
    _check_input(model, x, batched=False)
    logits, activation_trace = run_layers(model, x[np.newaxis], trace)
    if activation_trace is not None:
        activation_trace.batched = False
    return Prediction.from_logits(logits[0]), activation_trace


def forward_batch(model: ModelGraph, images: np.ndarray) -> np.ndarray:
    """Logits [N,L] for a batch of inputs [N,C,H,W]"""
    images = numerics.as_tensor(images)
    _check_input(model, images, batched=True)
    return run_layers(model, images)[0]


def predict_multilabel(model: ModelGraph, x: np.ndarray) -> Prediction:
    return forward(model, x)[0]


def backward_from(model: ModelGraph, trace: ActivationTrace, grad_logits: np.ndarray) -> Gradients:
    """Backpropagate an arbitrary batched output gradient [N,L]"""
    grad = grad_logits
    activations: List[np.ndarray] = [None] * len(model.layers)
    params: List[Optional[Tuple[np.ndarray, np.ndarray]]] = [None] * len(model.layers)
    for index in reversed(range(len(model.layers))):
        activations[index] = grad
        grad, params[index] = _layer_backward(model.layers[index], grad, trace.inputs[index],
                                              trace.pool_indices.get(index))
    if not trace.batched:
        grad = grad[0]
        activations = [a[0] for a in activations]
    return Gradients(input=grad, activations=activations, parameters=params)


def backward(model: ModelGraph, trace: ActivationTrace, class_index: int) -> Gradients:
    """Gradient of the pre-sigmoid logit of `class_index` w.r.t. input and every activation"""
    if not 0 <= class_index < model.num_classes:
        raise InvalidClassIndexError(f"class index {class_index} outside [0, {model.num_classes})")
    if len(trace) != len(model.layers):
        raise ShapeMismatchError(f"trace has {len(trace)} layers, model has {len(model.layers)}")
    n = trace.outputs[-1].shape[0]
    seed = np.zeros((n, model.num_classes))
    seed[:, class_index] = 1.0
    return backward_from(model, trace, seed)


def input_gradient(model: ModelGraph, x: np.ndarray, class_index: int) -> np.ndarray:
    _, trace = forward(model, x, trace=True)
    return backward(model, trace, class_index).input


def _init_parameters(model: ModelGraph, rng: np.random.Generator) -> List[np.ndarray]:
    # He-uniform weights, bias U(-1/sqrt(fan_in), 1/sqrt(fan_in))
    params = []
    for layer in model.layers:
        if not layer.parameterized:
            continue
        w_shape, b_shape = layer.parameter_shapes()
        fan_in = layer.fan_in()
        limit = np.sqrt(6.0 / fan_in)
        params.append(rng.uniform(-limit, limit, size=w_shape))
        bound = 1.0 / np.sqrt(fan_in)
        params.append(rng.uniform(-bound, bound, size=b_shape))
    return params


def build_model(layer_defs: Sequence[Tuple[str, Dict[str, int]]], input_shape: Tuple[int, int, int],
                num_classes: int, seed: int) -> ModelGraph:
    """Build and initialize a layer stack.

    Conv and dense entries give their output size as `width`; input sizes
    are inferred from the preceding layers.
    """
    layers = []
    shape = tuple(input_shape)
    for kind, hp in layer_defs:
        hp = dict(hp)
        if kind == "conv":
            hp = {"in_channels": shape[0], "out_channels": hp.pop("width"), "kernel": hp.pop("kernel", 3),
                  "stride": hp.pop("stride", 1), "pad": hp.pop("pad", 0), **hp}
        elif kind == "dense":
            hp = {"in_features": shape[0], "out_features": hp.pop("width"), **hp}
        elif kind in ("maxpool", "avgpool"):
            hp.setdefault("stride", hp["window"])
        layer = LayerSpec(kind, hp)
        if layer.parameterized:
            w_shape, b_shape = layer.parameter_shapes()
            layer = replace(layer, weights=np.zeros(w_shape), bias=np.zeros(b_shape))
        layers.append(layer)
        shape = layer.output_shape(shape)

    skeleton = ModelGraph(tuple(layers), tuple(input_shape), num_classes, seed)
    return skeleton.with_parameters(_init_parameters(skeleton, np.random.default_rng(seed)))


def build_tiny_cnn(input_shape: Tuple[int, int, int], num_classes: int, seed: int,
                   widths: Tuple[int, int] = (16, 32)) -> ModelGraph:
    """conv/ReLU/maxpool x2 -> global average pool -> dense(L)"""
    return build_model([
        ("conv", {"width": widths[0], "kernel": 3, "pad": 1}),
        ("relu", {}),
        ("maxpool", {"window": 2}),
        ("conv", {"width": widths[1], "kernel": 3, "pad": 1}),
        ("relu", {}),
        ("maxpool", {"window": 2}),
        ("global_avgpool", {}),
        ("dense", {"width": num_classes}),
    ], input_shape, num_classes, seed)


@dataclass
class TrainConfig:
    """Container for momentum-SGD training settings"""
    epochs: int = 30
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 0
    holdout_fraction: float = 0.2


def bce_with_logits(logits: np.ndarray, targets: np.ndarray) -> float:
    """Mean per-class binary cross-entropy on logits"""
    return float(np.mean(np.logaddexp(0.0, logits) - targets * logits))


def train(model: ModelGraph, images: np.ndarray, labels: np.ndarray,
          config: TrainConfig) -> Tuple[ModelGraph, List[float]]:
    """Mini-batch momentum SGD on mean binary cross-entropy.

    Returns the trained model and the per-epoch mean loss. Deterministic
    given config.seed.
    """
    images = numerics.as_tensor(images)
    targets = numerics.as_tensor(labels)
    if images.shape[0] == 0:
        raise ValueError("training set is empty")
    _check_input(model, images, batched=True)

    rng = np.random.default_rng(config.seed)
    params = [p.copy() for p in model.parameters()]
    velocity = [np.zeros_like(p) for p in params]
    history: List[float] = []
    n = images.shape[0]

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            current = model.with_parameters(params)
            logits, trace = run_layers(current, images[idx], trace=True)
            loss = bce_with_logits(logits, targets[idx])
            if not np.isfinite(loss):
                raise DivergenceError(f"loss became non-finite at epoch {epoch}")
            grad_logits = (numerics.activation(logits, "sigmoid") - targets[idx]) / logits.size
            grads = backward_from(current, trace, grad_logits)

            flat_grads = []
            for index in current.parameterized_indices:
                flat_grads.extend(grads.parameters[index])
            for p, v, g in zip(params, velocity, flat_grads):
                v *= config.momentum
                v -= config.lr * g
                p += v
            batch_losses.append(loss)

        epoch_loss = float(np.mean(batch_losses))
        history.append(epoch_loss)
        logger.debug(f"epoch {epoch + 1}/{config.epochs}: loss {epoch_loss:.5f}")

    logger.info(f"Training finished after {config.epochs} epochs, final loss {history[-1] if history else float('nan'):.5f}")
    return model.with_parameters(params), history


def split_holdout(n: int, fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Sorted (train, holdout) index arrays; the holdout takes round(fraction * n) items"""
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"holdout fraction must lie in [0, 1), got {fraction}")
    order = np.random.default_rng(seed).permutation(n)
    cut = int(round(fraction * n))
    return np.sort(order[cut:]), np.sort(order[:cut])


def evaluate_predictions(model: ModelGraph, images: np.ndarray, labels: np.ndarray) -> Dict:
    """Macro-F1, per-class F1 and exact-match accuracy of thresholded predictions"""
    probabilities = numerics.activation(forward_batch(model, images), "sigmoid")
    predicted = (probabilities >= LABEL_THRESHOLD).astype(np.uint8)
    truth = np.asarray(labels, dtype=np.uint8)
    return {
        "macro_f1": float(f1_score(truth, predicted, average="macro", zero_division=0)),
        "per_class_f1": [float(v) for v in f1_score(truth, predicted, average=None, zero_division=0)],
        "subset_accuracy": float(accuracy_score(truth, predicted)),
        "samples": int(truth.shape[0]),
    }


def randomize_parameters(model: ModelGraph, seed: int) -> ModelGraph:
    """Fresh draw of every parameter from the initialization distribution"""
    return model.with_parameters(_init_parameters(model, np.random.default_rng(seed)), rng_seed=seed)


def perturb_parameters(model: ModelGraph, std: float, seed: int) -> ModelGraph:
    """Additive zero-mean Gaussian noise of the given std on every parameter"""
    if std < 0:
        raise ValueError(f"noise std must be >= 0, got {std}")
    rng = np.random.default_rng(seed)
    params = [p + rng.normal(0.0, std, size=p.shape) if std > 0 else p.copy() for p in model.parameters()]
    return model.with_parameters(params)


def _header(model: ModelGraph) -> Dict:
    return {
        "format_version": MODEL_FORMAT_VERSION,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "rng_seed": model.rng_seed,
        "layers": [
            {
                "kind": layer.kind,
                "hyperparams": layer.hyperparams,
                "weight_shape": list(layer.weights.shape) if layer.parameterized else None,
                "bias_shape": list(layer.bias.shape) if layer.parameterized else None,
            }
            for layer in model.layers
        ],
    }


def model_to_bytes(model: ModelGraph) -> bytes:
    header = json.dumps(_header(model), indent=2, sort_keys=True).encode("utf-8")
    blob = b"".join(p.astype("<f4").tobytes() for p in model.parameters())
    return header + b"\0" + blob


def save_model(model: ModelGraph, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(model_to_bytes(model))
    logger.info(f"Saved model with {len(model.layers)} layers to {path}")


def model_from_bytes(data: bytes) -> ModelGraph:
    separator = data.find(b"\0")
    if separator < 0:
        raise ModelFileError("missing header separator")
    try:
        header = json.loads(data[:separator].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ModelFileError(f"unreadable header: {e}")
    if header.get("format_version") != MODEL_FORMAT_VERSION:
        raise ModelFileError(f"unsupported format version {header.get('format_version')}")

    blob = data[separator + 1:]
    offset = 0
    layers = []
    for index, entry in enumerate(header.get("layers", [])):
        try:
            layer = LayerSpec(entry["kind"], dict(entry["hyperparams"]))
            if layer.parameterized:
                w_shape, b_shape = layer.parameter_shapes()
                if list(w_shape) != entry["weight_shape"] or list(b_shape) != entry["bias_shape"]:
                    raise ModelFileError("header shapes disagree with hyperparameters", index)
                arrays = []
                for shape in (w_shape, b_shape):
                    nbytes = int(np.prod(shape)) * 4
                    if offset + nbytes > len(blob):
                        raise ModelFileError("parameter blob truncated", index)
                    arrays.append(np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=offset)
                                  .astype(np.float64).reshape(shape))
                    offset += nbytes
                layer = replace(layer, weights=arrays[0], bias=arrays[1])
        except (KeyError, TypeError, ValueError) as e:
            raise ModelFileError(f"invalid layer record: {e}", index)
        layers.append(layer)
    if offset != len(blob):
        raise ModelFileError(f"{len(blob) - offset} trailing bytes after last parameter")

    try:
        return ModelGraph(tuple(layers), tuple(header["input_shape"]), int(header["num_classes"]),
                          int(header.get("rng_seed", 0)))
    except (KeyError, ShapeMismatchError) as e:
        raise ModelFileError(f"inconsistent model: {e}")


def load_model(path: Path) -> ModelGraph:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        logger.error(f"Failed to read model file {path}: {e}")
        raise
    return model_from_bytes(data)
