"""
Feature-attribution methods producing per-class relevance maps over H x W.

Every method is registered in METHODS under its id and called as
``fn(model, x, class_index, config, seed) -> AttributionMap``.
"""

import logging
from dataclasses import dataclass, replace
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
from sklearn.linear_model import LinearRegression, Ridge

from . import model_zoo, numerics
from .errors import (
    InvalidClassIndexError,
    NonFiniteAttributionError,
    LayerNotConvError,
    SingularFitError,
    UnsupportedLayerError,
)
from .model_zoo import LayerSpec, ModelGraph
from .perturbations import (
    BaselineSpec,
    Segmentation,
    apply_mask,
    baseline_image,
    resolve_baseline,
    segment_slic_like,
)

logger = logging.getLogger(__name__)

LRP_RULES = ("gamma", "epsilon", "zero")
STABILIZER = 1e-12
STORED_DTYPE = np.dtype("<f4")


@dataclass
class AttributionMap:
    """Container for a channel-aggregated relevance map of one (sample, class)"""
    values: np.ndarray
    class_index: int
    method_id: str
    normalized: bool = False


def _check_window_cover(window: Sequence[int], stride: Sequence[int]):
    if any(s > w for w, s in zip(window, stride)):
        raise ValueError(f"occlusion stride {tuple(stride)} exceeds window {tuple(window)}; "
                         "some pixels would never be occluded")


def stored_precision(attr: AttributionMap) -> AttributionMap:
    """Copy of a map rounded to the archive's float32 precision, held as float64"""
    values = np.asarray(attr.values, dtype=STORED_DTYPE).astype(np.float64)
    return AttributionMap(values, attr.class_index, attr.method_id, attr.normalized)


@dataclass
class MethodConfig:
    """Hyperparameters of every attribution method"""
    occlusion_window: Tuple[int, int] = (25, 25)
    occlusion_stride: Tuple[int, int] = (5, 5)
    occlusion_baseline: str = "black"
    lime_segments: int = 15
    lime_samples: int = 1000
    lime_kernel_width: float = 500.0
    lime_ridge: float = 0.01
    lime_keep_probability: float = 0.5
    lime_baseline: str = "black"
    lime_compactness: float = 10.0
    lime_iterations: int = 10
    gradcam_layer: Optional[int] = None
    lrp_gamma: float = 0.25
    lrp_epsilon_scale: float = 0.25
    lrp_rules: Optional[Tuple[str, ...]] = None
    deeplift_baseline: str = "black"
    deeplift_eps: float = 1e-7
    batch_size: int = 64

    def __post_init__(self):
        dimensional = [*self.occlusion_window, *self.occlusion_stride, self.lime_segments,
                       self.lime_samples, self.lime_kernel_width, self.batch_size]
        if any(v <= 0 for v in dimensional):
            raise ValueError("window, stride, segment, sample, kernel width and batch settings must be positive")
        _check_window_cover(self.occlusion_window, self.occlusion_stride)
        if self.lrp_rules is not None and any(r not in LRP_RULES for r in self.lrp_rules):
            raise ValueError(f"LRP rules must be drawn from {LRP_RULES}")

    @classmethod
    def full_scale(cls) -> "MethodConfig":
        return cls(occlusion_window=(50, 50), occlusion_stride=(10, 10))


def _check_class(model: ModelGraph, class_index: int):
    if not 0 <= class_index < model.num_classes:
        raise InvalidClassIndexError(f"class index {class_index} outside [0, {model.num_classes})")


def class_probabilities(model: ModelGraph, images: np.ndarray, class_index: int,
                        batch_size: int = 64) -> np.ndarray:
    """Sigmoid probability of one class for a stack of inputs [N,C,H,W]"""
    out = []
    for start in range(0, images.shape[0], batch_size):
        logits = model_zoo.forward_batch(model, images[start:start + batch_size])
        out.append(numerics.activation(logits[:, class_index], "sigmoid"))
    return np.concatenate(out) if out else np.zeros(0)


def _window_starts(size: int, window: int, stride: int) -> list:
    # last start is the first window touching the border
    starts = [0]
    while starts[-1] + window < size:
        starts.append(starts[-1] + stride)
    return starts


def occlusion(model: ModelGraph, x: np.ndarray, class_index: int, window: Tuple[int, int],
              stride: Tuple[int, int], baseline: BaselineSpec, batch_size: int = 64) -> AttributionMap:
    """Mean probability drop over all (border-clipped) windows covering each pixel"""
    _check_class(model, class_index)
    _, h, w = x.shape
    if window[0] > h or window[1] > w:
        raise ValueError(f"occlusion window {window} larger than image {h}x{w}")
    _check_window_cover(window, stride)

    masks = []
    for top in _window_starts(h, window[0], stride[0]):
        for left in _window_starts(w, window[1], stride[1]):
            mask = np.zeros((h, w), dtype=bool)
            mask[top:top + window[0], left:left + window[1]] = True
            masks.append(mask)
    masks = np.stack(masks)

    base = resolve_baseline(baseline, x)
    reference = class_probabilities(model, x[None], class_index)[0]
    drops = []
    for start in range(0, masks.shape[0], batch_size):
        perturbed = apply_mask(x, masks[start:start + batch_size], base)
        drops.append(reference - class_probabilities(model, perturbed, class_index, batch_size))
    drops = np.concatenate(drops)

    totals = np.tensordot(drops, masks.astype(np.float64), axes=1)
    coverage = masks.sum(axis=0)
    return AttributionMap(totals / coverage, class_index, "occlusion")


def fit_surrogate(design: np.ndarray, targets: np.ndarray, weights: np.ndarray,
                  ridge_lambda: float) -> np.ndarray:
    """Weighted (ridge) regression of targets on binary features; returns coefficients"""
    if ridge_lambda <= 0:
        augmented = np.hstack([design, np.ones((design.shape[0], 1))]) * np.sqrt(weights)[:, None]
        if np.linalg.matrix_rank(augmented) < augmented.shape[1]:
            raise SingularFitError("weighted design matrix is rank-deficient and no ridge term is set")
        regressor = LinearRegression()
    else:
        regressor = Ridge(alpha=ridge_lambda)
    regressor.fit(design, targets, sample_weight=weights)
    return np.asarray(regressor.coef_, dtype=np.float64)


def lime(model: ModelGraph, x: np.ndarray, class_index: int, segments: int, n_samples: int,
         kernel_width: float, ridge_lambda: float, baseline: BaselineSpec, seed: int,
         keep_probability: float = 0.5, compactness: float = 10.0, iterations: int = 10,
         segmentation: Optional[Segmentation] = None, batch_size: int = 64) -> AttributionMap:
    """Superpixel surrogate: each pixel gets its superpixel's regression coefficient"""
    _check_class(model, class_index)
    if segmentation is None:
        if segments < 2:
            raise ValueError(f"LIME needs at least 2 superpixels, got {segments}")
        segmentation = segment_slic_like(x, segments, compactness, iterations, seed)

    rng = np.random.default_rng(seed)
    design = np.vstack([
        np.ones((1, segmentation.count)),
        (rng.random((n_samples, segmentation.count)) < keep_probability).astype(np.float64),
    ])
    base = resolve_baseline(baseline, x)
    segment_masks = segmentation.masks()

    targets, distances = [], []
    for start in range(0, design.shape[0], batch_size):
        removed = np.tensordot(1.0 - design[start:start + batch_size], segment_masks, axes=1) > 0
        perturbed = apply_mask(x, removed, base)
        targets.append(class_probabilities(model, perturbed, class_index, batch_size))
        distances.append(np.sqrt(((perturbed - x[None]) ** 2).reshape(len(perturbed), -1).sum(axis=1)))
    targets = np.concatenate(targets)
    weights = np.exp(-np.concatenate(distances) ** 2 / kernel_width ** 2)

    coefficients = fit_surrogate(design, targets, weights, ridge_lambda)
    return AttributionMap(coefficients[segmentation.segment_id], class_index, "lime")


def grad_cam_map(activations: np.ndarray, gradients: np.ndarray, height: int, width: int) -> np.ndarray:
    """ReLU of the gradient-weighted sum of feature maps [P,h,w], upsampled to H x W"""
    weights = gradients.mean(axis=(1, 2))
    cam = numerics.activation(np.tensordot(weights, activations, axes=1), "relu")
    return np.maximum(numerics.bilinear_resize(cam, height, width), 0.0)


def gradcam(model: ModelGraph, x: np.ndarray, class_index: int, layer: Optional[int] = None) -> AttributionMap:
    _check_class(model, class_index)
    if layer is None:
        if not model.conv_indices:
            raise LayerNotConvError("model has no convolution layer")
        layer = model.conv_indices[-1]
    if not 0 <= layer < len(model.layers) or model.layers[layer].kind != "conv":
        raise LayerNotConvError(f"layer {layer} is not a convolution")

    _, trace = model_zoo.forward(model, x, trace=True)
    grads = model_zoo.backward(model, trace, class_index)
    values = grad_cam_map(trace.outputs[layer][0], grads.activations[layer], x.shape[1], x.shape[2])
    return AttributionMap(values, class_index, "gradcam")


def lrp_rule_assignment(model: ModelGraph, rules: Optional[Sequence[str]] = None) -> Dict[int, str]:
    """Rule per parameterized layer: gamma, epsilon, zero by thirds from the input side"""
    indices = model.parameterized_indices
    if rules is not None:
        if len(rules) != len(indices):
            raise ValueError(f"{len(rules)} LRP rules given for {len(indices)} parameterized layers")
        return dict(zip(indices, rules))
    base, remainder = divmod(len(indices), 3)
    sizes = [base + (remainder > 0), base + (remainder > 1), base]
    assignment = {}
    position = 0
    for rule, size in zip(LRP_RULES, sizes):
        for index in indices[position:position + size]:
            assignment[index] = rule
        position += size
    return assignment


def _safe_divide(numerator: np.ndarray, denominator: np.ndarray) -> np.ndarray:
    out = np.zeros_like(numerator)
    np.divide(numerator, denominator, out=out, where=np.abs(denominator) > STABILIZER)
    return out


def _linear_forward(layer: LayerSpec, a: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if layer.kind == "conv":
        hp = layer.hyperparams
        return numerics.conv2d(a, weights, bias, hp.get("stride", 1), hp.get("pad", 0))
    return numerics.dense(a, weights, bias)


def _linear_transpose(layer: LayerSpec, s: np.ndarray, a: np.ndarray, weights: np.ndarray) -> np.ndarray:
    if layer.kind == "conv":
        hp = layer.hyperparams
        return numerics.conv2d_backward(s, a, weights, hp.get("stride", 1), hp.get("pad", 0))[0]
    return s @ weights


def lrp_layer_relevance(layer: LayerSpec, a: np.ndarray, relevance: np.ndarray, rule: str = "zero",
                        gamma: float = 0.25, epsilon_scale: float = 0.25,
                        argmax: Optional[np.ndarray] = None) -> np.ndarray:
    """Redistribute batched output relevance of one layer onto its input `a`"""
    hp = layer.hyperparams
    if layer.parameterized:
        weights, bias = layer.weights, layer.bias
        if rule == "gamma":
            weights = weights + gamma * np.maximum(weights, 0.0)
            bias = bias + gamma * np.maximum(bias, 0.0)
        z = _linear_forward(layer, a, weights, bias)
        if rule == "epsilon":
            eps = epsilon_scale * z.std()
            z = z + eps * np.where(z >= 0, 1.0, -1.0)
        elif rule not in ("gamma", "zero"):
            raise ValueError(f"unknown LRP rule '{rule}'")
        return a * _linear_transpose(layer, _safe_divide(relevance, z), a, weights)
    if layer.kind == "relu":
        return relevance
    if layer.kind == "flatten":
        return relevance.reshape(a.shape)
    if layer.kind == "maxpool":
        return numerics.pool2d_backward(relevance, a.shape, "max", hp["window"],
                                        hp.get("stride", hp["window"]), argmax)
    if layer.kind == "avgpool":
        window, stride = hp["window"], hp.get("stride", hp["window"])
        z = numerics.pool2d(a, "avg", window, stride)
        return a * numerics.pool2d_backward(_safe_divide(relevance, z), a.shape, "avg", window, stride)
    if layer.kind == "global_avgpool":
        h, w = a.shape[2:]
        s = _safe_divide(relevance, a.mean(axis=(2, 3)))
        return a * s[:, :, None, None] / (h * w)
    raise UnsupportedLayerError(f"no LRP rule for layer kind '{layer.kind}'")


def lrp_relevances(model: ModelGraph, x: np.ndarray, class_index: int, gamma: float = 0.25,
                   epsilon_scale: float = 0.25, rules: Optional[Sequence[str]] = None) -> list:
    """Relevance at the input of every layer (index 0 is the image), plus the output relevance last"""
    _check_class(model, class_index)
    prediction, trace = model_zoo.forward(model, x, trace=True)
    assignment = lrp_rule_assignment(model, rules)

    relevance = np.zeros((1, model.num_classes))
    relevance[0, class_index] = prediction.logits[class_index]
    stages = [relevance]
    for index in reversed(range(len(model.layers))):
        relevance = lrp_layer_relevance(model.layers[index], trace.inputs[index], relevance,
                                        assignment.get(index, "zero"), gamma, epsilon_scale,
                                        trace.pool_indices.get(index))
        stages.append(relevance)
    return [r[0] for r in reversed(stages)]


def lrp(model: ModelGraph, x: np.ndarray, class_index: int, gamma: float = 0.25,
        epsilon_scale: float = 0.25, rules: Optional[Sequence[str]] = None) -> AttributionMap:
    """Composite LRP map: input relevance summed over channels"""
    input_relevance = lrp_relevances(model, x, class_index, gamma, epsilon_scale, rules)[0]
    return AttributionMap(input_relevance.sum(axis=0), class_index, "lrp")


def _maxpool_multipliers(m_out: np.ndarray, x_in: np.ndarray, ref_in: np.ndarray,
                         argmax_x: np.ndarray, argmax_ref: np.ndarray, window: int,
                         stride: int, eps: float) -> np.ndarray:
    # each output contribution m*dout is split between the winners for x and
    # reference; shares only land on inputs whose delta is resolvable
    delta = x_in - ref_in
    c, oh, ow = m_out.shape
    out_rows = np.arange(oh)[:, None] * stride
    out_cols = np.arange(ow)[None, :] * stride
    channel = np.broadcast_to(np.arange(c)[:, None, None], m_out.shape)

    def positions(flat):
        return out_rows + flat // window, out_cols + flat % window

    abs_windows = np.abs(numerics._windows(delta, window, window, stride)).reshape(c, oh, ow, -1)
    candidates = [positions(argmax_x), positions(argmax_ref), positions(abs_windows.argmax(axis=-1))]
    resolvable = [np.abs(delta[channel, r, col]) >= eps for r, col in candidates]
    same = (candidates[0][0] == candidates[1][0]) & (candidates[0][1] == candidates[1][1])

    both = resolvable[0] & resolvable[1] & ~same
    share_x = np.where(both, 0.5, resolvable[0].astype(np.float64))
    share_ref = np.where(both, 0.5, np.where(same, 0.0, (resolvable[1] & ~resolvable[0]).astype(np.float64)))
    share_fallback = ((share_x + share_ref) == 0) & resolvable[2]

    x_out = numerics.pool2d(x_in, "max", window, stride)
    ref_out = numerics.pool2d(ref_in, "max", window, stride)
    contribution = m_out * (x_out - ref_out)

    totals = np.zeros_like(delta)
    for (r, col), share in zip(candidates, (share_x, share_ref, share_fallback.astype(np.float64))):
        np.add.at(totals, (channel, r, col), contribution * share)
    return _safe_divide(totals, np.where(np.abs(delta) >= eps, delta, 0.0))


def deeplift(model: ModelGraph, x: np.ndarray, class_index: int, baseline: BaselineSpec,
             eps: float = 1e-7) -> AttributionMap:
    """Rescale-rule DeepLIFT; attributions sum to Y^c(x) - Y^c(reference)"""
    _check_class(model, class_index)
    reference = baseline_image(baseline, x)
    _, trace = model_zoo.run_layers(model, np.stack([x, reference]), trace=True)

    multipliers = np.zeros((1, model.num_classes))
    multipliers[0, class_index] = 1.0
    for index in reversed(range(len(model.layers))):
        layer = model.layers[index]
        hp = layer.hyperparams
        x_in, ref_in = trace.inputs[index][0], trace.inputs[index][1]
        if layer.parameterized:
            multipliers = _linear_transpose(layer, multipliers, x_in[None], layer.weights)
        elif layer.kind == "relu":
            delta_in = x_in - ref_in
            delta_out = trace.outputs[index][0] - trace.outputs[index][1]
            ratio = (x_in > 0).astype(np.float64)
            np.divide(delta_out, delta_in, out=ratio, where=np.abs(delta_in) >= eps)
            multipliers = multipliers * ratio[None]
        elif layer.kind == "maxpool":
            argmax = trace.pool_indices[index]
            multipliers = _maxpool_multipliers(multipliers[0], x_in, ref_in, argmax[0], argmax[1],
                                               hp["window"], hp.get("stride", hp["window"]), eps)[None]
        elif layer.kind == "avgpool":
            multipliers = numerics.pool2d_backward(multipliers, (1,) + x_in.shape, "avg", hp["window"],
                                                   hp.get("stride", hp["window"]))
        elif layer.kind == "global_avgpool":
            h, w = x_in.shape[1:]
            multipliers = np.broadcast_to(multipliers[:, :, None, None] / (h * w), (1,) + x_in.shape).copy()
        elif layer.kind == "flatten":
            multipliers = multipliers.reshape((1,) + x_in.shape)
        else:
            raise UnsupportedLayerError(f"no DeepLIFT rule for layer kind '{layer.kind}'")

    values = (multipliers[0] * (x - reference)).sum(axis=0)
    return AttributionMap(values, class_index, "deeplift")


def random_attribution(x: np.ndarray, class_index: int, seed: int) -> AttributionMap:
    """U(0,1) map seeded per sample only, hence identical across classes"""
    rng = np.random.default_rng(seed)
    return AttributionMap(rng.uniform(0.0, 1.0, size=x.shape[1:]), class_index, "random")


def normalize_map(attr: AttributionMap) -> AttributionMap:
    return replace(attr, values=numerics.min_max_normalize(attr.values), normalized=True)


def _explain_occlusion(model, x, c, config: MethodConfig, seed: int) -> AttributionMap:
    return occlusion(model, x, c, config.occlusion_window, config.occlusion_stride,
                     BaselineSpec.parse(config.occlusion_baseline, seed), config.batch_size)


def _explain_lime(model, x, c, config: MethodConfig, seed: int) -> AttributionMap:
    return lime(model, x, c, config.lime_segments, config.lime_samples, config.lime_kernel_width,
                config.lime_ridge, BaselineSpec.parse(config.lime_baseline, seed), seed,
                config.lime_keep_probability, config.lime_compactness, config.lime_iterations,
                batch_size=config.batch_size)


def _explain_gradcam(model, x, c, config: MethodConfig, seed: int) -> AttributionMap:
    return gradcam(model, x, c, config.gradcam_layer)


def _explain_lrp(model, x, c, config: MethodConfig, seed: int) -> AttributionMap:
    return lrp(model, x, c, config.lrp_gamma, config.lrp_epsilon_scale, config.lrp_rules)


def _explain_deeplift(model, x, c, config: MethodConfig, seed: int) -> AttributionMap:
    return deeplift(model, x, c, BaselineSpec.parse(config.deeplift_baseline, seed), config.deeplift_eps)


def _explain_random(model, x, c, config: MethodConfig, seed: int) -> AttributionMap:
    return random_attribution(x, c, seed)


Explainer = Callable[[ModelGraph, np.ndarray, int, MethodConfig, int], AttributionMap]

METHODS: Dict[str, Explainer] = {
    "occlusion": _explain_occlusion,
    "lime": _explain_lime,
    "gradcam": _explain_gradcam,
    "lrp": _explain_lrp,
    "deeplift": _explain_deeplift,
    "random": _explain_random,
}


def explain(method_id: str, model: ModelGraph, x: np.ndarray, class_index: int,
            config: Optional[MethodConfig] = None, seed: int = 0) -> AttributionMap:
    if method_id not in METHODS:
        raise KeyError(f"unknown method '{method_id}', expected one of {sorted(METHODS)}")
    attr = METHODS[method_id](model, x, class_index, config or MethodConfig(), seed)
    attr.method_id = method_id
    if not np.all(np.isfinite(attr.values)):
        raise NonFiniteAttributionError(f"{method_id} produced non-finite attributions")
    return attr
