"""
Explanation-quality metrics and their orientation to higher-is-better scores.

Each metric kernel returns the raw score; `score_metric` wraps a kernel from
the METRICS registry into a MetricRecord, turning computation failures into
status codes rather than silent values.
"""

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from . import attribution, model_zoo, numerics
from .attribution import AttributionMap, MethodConfig
from .errors import (
    AllZeroAttributionError,
    DegenerateNeighbourhoodError,
    EmptyMaskError,
    MetricComputationError,
    MissingMaskError,
    NonFiniteAttributionError,
    SingularFitError,
    ZeroComplexityError,
    ZeroNormError,
    ZeroPredictionError,
)
from .model_zoo import ModelGraph
from .perturbations import (
    BaselineSpec,
    Segmentation,
    apply_mask,
    gaussian_input_noise,
    rank_pixels,
    resolve_baseline,
    segment_slic_like,
    uniform_ball_noise,
)
from .seeding import derive_seed

logger = logging.getLogger(__name__)

CATEGORIES = ("faithfulness", "robustness", "localization", "complexity", "randomization")
STATUS_OK = "ok"
STATUS_EXPLAIN_FAILED = "explain_failed"
EXPLAIN_FAILURES = (SingularFitError, NonFiniteAttributionError)
MIN_PREDICTION = 1e-6
MIN_COMPLEXITY = 1e-9

Explainer = Callable[[np.ndarray], np.ndarray]


@dataclass
class MetricRecord:
    """Container for one scored (metric, method, sample, class) evaluation"""
    metric_id: str
    method_id: str
    sample_id: int
    class_index: int
    raw_score: float
    oriented_score: float
    status: str = STATUS_OK

    @property
    def ok(self) -> bool:
        return self.status == STATUS_OK

    @property
    def key(self) -> Tuple[int, int, str, str]:
        return self.sample_id, self.class_index, self.method_id, self.metric_id


@dataclass
class MetricConfig:
    """Per-metric settings"""
    fe_subset_fraction: float = 0.05
    fe_subsets: int = 100
    fe_baseline: str = "mean"
    irof_segments: int = 64
    irof_baseline: str = "mean"
    irof_strategy: str = "morf"
    irof_steps: Optional[int] = None
    irof_compactness: float = 10.0
    irof_iterations: int = 10
    robustness_eps: float = 0.1
    robustness_samples: int = 20
    robustness_noise: str = "uniform"
    tki_k: Optional[int] = None
    entropy_bins: int = numerics.ENTROPY_BINS
    ssim_window: int = numerics.SSIM_WINDOW
    batch_size: int = 64

    def __post_init__(self):
        if self.fe_subsets < 3:
            raise ValueError("faithfulness estimate needs at least 3 subsets")
        if not 0 < self.fe_subset_fraction <= 1:
            raise ValueError("fe_subset_fraction must lie in (0, 1]")
        if self.robustness_eps <= 0 or self.robustness_samples < 1:
            raise ValueError("robustness neighbourhood needs eps > 0 and at least one sample")
        if self.robustness_noise not in ("uniform", "gaussian"):
            raise ValueError("robustness_noise must be 'uniform' or 'gaussian'")
        if self.irof_strategy not in ("morf", "lerf"):
            raise ValueError("irof_strategy must be 'morf' or 'lerf'")


def _probability(model: ModelGraph, images: np.ndarray, class_index: int, batch_size: int = 64) -> np.ndarray:
    return attribution.class_probabilities(model, images, class_index, batch_size)


def faithfulness_estimate(model: ModelGraph, x: np.ndarray, class_index: int, attr: np.ndarray,
                          subset_size: int, n_subsets: int, baseline: BaselineSpec, seed: int,
                          batch_size: int = 64) -> float:
    """Correlation between attribution mass and probability drop over random pixel subsets"""
    values = np.asarray(attr, dtype=np.float64).ravel()
    h, w = x.shape[1:]
    if not 1 <= subset_size <= h * w or n_subsets < 3:
        raise ValueError(f"need 1 <= K <= {h * w} and >= 3 subsets")
    rng = np.random.default_rng(seed)
    masks = np.zeros((n_subsets, h * w), dtype=bool)
    for i in range(n_subsets):
        masks[i, rng.choice(h * w, size=subset_size, replace=False)] = True

    base = resolve_baseline(baseline, x)
    reference = _probability(model, x[None], class_index)[0]
    perturbed = apply_mask(x, masks.reshape(n_subsets, h, w), base)
    drops = reference - _probability(model, perturbed, class_index, batch_size)
    return numerics.pearson_corr(masks @ values, drops)


def segment_order(attr: np.ndarray, segmentation: Segmentation, strategy: str) -> np.ndarray:
    """Segments sorted by mean attribution (morf: descending), ties by segment id"""
    values = np.asarray(attr, dtype=np.float64).ravel()
    ids = segmentation.segment_id.ravel()
    means = np.bincount(ids, weights=values, minlength=segmentation.count) / np.bincount(
        ids, minlength=segmentation.count)
    return rank_pixels(means, strategy).order


def irof_curve(model: ModelGraph, x: np.ndarray, class_index: int, segmentation: Segmentation,
               order: Sequence[int], baseline: BaselineSpec, steps: Optional[int] = None,
               batch_size: int = 64) -> np.ndarray:
    """Probability ratio f_c(x_k)/f_c(x) after removing the first k segments, k = 1..steps"""
    reference = _probability(model, x[None], class_index)[0]
    if reference < MIN_PREDICTION:
        raise ZeroPredictionError(f"class probability {reference:.2e} too small for a ratio curve")
    steps = len(order) if steps is None else min(steps, len(order))
    if steps == 0:
        return np.zeros(0)
    segment_masks = segmentation.masks()[np.asarray(order[:steps])]
    removed = np.cumsum(segment_masks, axis=0) > 0
    perturbed = apply_mask(x, removed, resolve_baseline(baseline, x))
    return _probability(model, perturbed, class_index, batch_size) / reference


def irof(model: ModelGraph, x: np.ndarray, class_index: int, attr: np.ndarray, segmentation: Segmentation,
         baseline: BaselineSpec, strategy: str = "morf", steps: Optional[int] = None,
         batch_size: int = 64) -> float:
    """Mean ratio of the segment-removal curve; 1.0 when nothing is removed"""
    order = segment_order(attr, segmentation, strategy)
    curve = irof_curve(model, x, class_index, segmentation, order, baseline, steps, batch_size)
    return float(curve.mean()) if curve.size else 1.0


def _neighbourhood(x: np.ndarray, eps: float, n_samples: int, seed: int, noise: str):
    for i in range(n_samples):
        sample_seed = derive_seed("neighbourhood", seed, i)
        if noise == "gaussian":
            yield gaussian_input_noise(x, eps, sample_seed)
        else:
            yield uniform_ball_noise(x, eps, sample_seed)


def avg_sensitivity(x: np.ndarray, explainer: Explainer, eps: float, n_samples: int, seed: int,
                    noise: str = "uniform", reference: Optional[np.ndarray] = None) -> float:
    """Mean explanation change over the eps-neighbourhood, relative to the input norm"""
    if eps <= 0:
        raise ValueError("eps must be positive")
    input_norm = np.linalg.norm(x)
    if input_norm == 0:
        raise ZeroNormError("input has zero norm")
    base = explainer(x) if reference is None else reference
    changes = [np.linalg.norm(base - explainer(xp)) / input_norm
               for xp in _neighbourhood(x, eps, n_samples, seed, noise)]
    return float(np.mean(changes))


def local_lipschitz_estimate(x: np.ndarray, explainer: Explainer, eps: float, n_samples: int, seed: int,
                             noise: str = "uniform", reference: Optional[np.ndarray] = None) -> float:
    """Largest explanation change per unit input change over the eps-neighbourhood"""
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = explainer(x) if reference is None else reference
    ratios = []
    for xp in _neighbourhood(x, eps, n_samples, seed, noise):
        step = np.linalg.norm(x - xp)
        if step < 1e-12:
            continue
        ratios.append(np.linalg.norm(base - explainer(xp)) / step)
    if not ratios:
        raise DegenerateNeighbourhoodError("every neighbourhood sample coincided with the input")
    return float(np.max(ratios))


def _mask_pixels(mask: Optional[np.ndarray]) -> np.ndarray:
    if mask is None:
        raise MissingMaskError("no reference mask available")
    flat = np.asarray(mask).ravel() > 0
    if not flat.any():
        raise EmptyMaskError("reference mask has no positive pixel")
    return flat


def top_k_intersection(attr: np.ndarray, mask: np.ndarray, k: Optional[int] = None) -> float:
    """Fraction of the K highest-ranked pixels inside the mask (K defaults to the mask size)"""
    flat = _mask_pixels(mask)
    k = int(flat.sum()) if k is None else int(k)
    if k < 1:
        raise ValueError("K must be >= 1")
    top = rank_pixels(attr, "morf").order[:k]
    return float(flat[top].sum() / k)


def relevance_rank_accuracy(attr: np.ndarray, mask: np.ndarray) -> float:
    flat = _mask_pixels(mask)
    total = int(flat.sum())
    top = rank_pixels(attr, "morf").order[:total]
    return float(flat[top].sum() / total)


def sparseness(attr: np.ndarray) -> float:
    return numerics.gini_index(np.abs(np.asarray(attr, dtype=np.float64)))


def complexity(attr: np.ndarray) -> float:
    """Shannon entropy (nats) of the normalized absolute attribution"""
    magnitude = np.abs(np.asarray(attr, dtype=np.float64)).ravel()
    total = magnitude.sum()
    if total == 0:
        raise AllZeroAttributionError("complexity undefined for an all-zero map")
    return float(stats.entropy(magnitude / total))


def model_parameter_randomization(attr: np.ndarray, randomized_attr: np.ndarray,
                                  bins: int = numerics.ENTROPY_BINS) -> float:
    """Relative rise of histogram entropy when the model is randomized"""
    original = numerics.histogram_entropy(attr, bins)
    if original < MIN_COMPLEXITY:
        raise ZeroComplexityError("explanation of the trained model has zero histogram entropy")
    return (numerics.histogram_entropy(randomized_attr, bins) - original) / original


def choose_non_target(class_index: int, labels: np.ndarray, seed: int) -> int:
    """Random class predicted absent; else any other class; else the class itself"""
    labels = np.asarray(labels).ravel()
    candidates = [k for k in range(labels.size) if k != class_index and labels[k] == 0]
    if not candidates:
        candidates = [k for k in range(labels.size) if k != class_index]
    if not candidates:
        return class_index
    return int(np.random.default_rng(seed).choice(candidates))


def random_logit(attr: np.ndarray, other_attr: np.ndarray, window: int = numerics.SSIM_WINDOW) -> float:
    """SSIM between the normalized explanations of the target and a non-target class"""
    return numerics.ssim(numerics.min_max_normalize(attr), numerics.min_max_normalize(other_attr),
                         data_range=1.0, window=window)


@dataclass
class EvaluationContext:
    """Everything a metric may need about one (sample, class, method) explanation"""
    model: ModelGraph
    x: np.ndarray
    class_index: int
    attr: AttributionMap
    method_id: str
    sample_id: int
    method_config: MethodConfig = field(default_factory=MethodConfig)
    method_seed: int = 0
    seed: int = 0
    mask: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    randomized_model: Optional[ModelGraph] = None
    explainer_override: Optional[Callable[[ModelGraph, np.ndarray, int], np.ndarray]] = None
    # re-explanations match `attr` when it was read back from an archive
    stored_precision: bool = False

    def explain(self, x: Optional[np.ndarray] = None, model: Optional[ModelGraph] = None,
                class_index: Optional[int] = None) -> np.ndarray:
        x = self.x if x is None else x
        model = self.model if model is None else model
        class_index = self.class_index if class_index is None else class_index
        if self.explainer_override is not None:
            return self.explainer_override(model, x, class_index)
        attr = attribution.explain(self.method_id, model, x, class_index, self.method_config, self.method_seed)
        if self.stored_precision:
            attr = attribution.stored_precision(attr)
        return attr.values

    def metric_seed(self, metric_id: str) -> int:
        return derive_seed("metric", self.seed, metric_id, self.sample_id, self.class_index)


@dataclass(frozen=True)
class MetricSpec:
    """Registry entry: category, kernel adapter and orientation"""
    metric_id: str
    category: str
    compute: Callable[[EvaluationContext, MetricConfig], float]
    orient: Optional[Callable[[float, int], float]]
    needs_mask: bool = False
    config_overrides: Tuple[Tuple[str, object], ...] = ()


def _fe(ctx: EvaluationContext, cfg: MetricConfig) -> float:
    h, w = ctx.x.shape[1:]
    k = max(1, int(round(cfg.fe_subset_fraction * h * w)))
    return faithfulness_estimate(ctx.model, ctx.x, ctx.class_index, ctx.attr.values, k, cfg.fe_subsets,
                                 BaselineSpec.parse(cfg.fe_baseline, ctx.metric_seed("fe:baseline")),
                                 ctx.metric_seed("fe"), cfg.batch_size)


def _irof(ctx: EvaluationContext, cfg: MetricConfig) -> float:
    segmentation = segment_slic_like(ctx.x, cfg.irof_segments, cfg.irof_compactness, cfg.irof_iterations,
                                     seed=ctx.metric_seed("irof:segments"))
    baseline = BaselineSpec.parse(cfg.irof_baseline, ctx.metric_seed("irof:baseline"))
    return irof(ctx.model, ctx.x, ctx.class_index, ctx.attr.values, segmentation, baseline,
                cfg.irof_strategy, cfg.irof_steps, cfg.batch_size)


def _as(ctx: EvaluationContext, cfg: MetricConfig) -> float:
    return avg_sensitivity(ctx.x, lambda xp: ctx.explain(x=xp), cfg.robustness_eps, cfg.robustness_samples,
                           ctx.metric_seed("robustness"), cfg.robustness_noise, ctx.attr.values)


def _lle(ctx: EvaluationContext, cfg: MetricConfig) -> float:
    return local_lipschitz_estimate(ctx.x, lambda xp: ctx.explain(x=xp), cfg.robustness_eps,
                                    cfg.robustness_samples, ctx.metric_seed("robustness"),
                                    cfg.robustness_noise, ctx.attr.values)


def _tki(ctx: EvaluationContext, cfg: MetricConfig) -> float:
    return top_k_intersection(ctx.attr.values, ctx.mask, cfg.tki_k)


def _rra(ctx: EvaluationContext, cfg: MetricConfig) -> float:
    return relevance_rank_accuracy(ctx.attr.values, ctx.mask)


def _sp(ctx: EvaluationContext, cfg: MetricConfig) -> float:
    return sparseness(ctx.attr.values)


def _co(ctx: EvaluationContext, cfg: MetricConfig) -> float:
    return complexity(ctx.attr.values)


def _mprt(ctx: EvaluationContext, cfg: MetricConfig) -> float:
    randomized = ctx.randomized_model
    if randomized is None:
        randomized = model_zoo.randomize_parameters(ctx.model, ctx.metric_seed("mprt"))
    return model_parameter_randomization(ctx.attr.values, ctx.explain(model=randomized), cfg.entropy_bins)


def _rl(ctx: EvaluationContext, cfg: MetricConfig) -> float:
    labels = ctx.labels
    if labels is None:
        labels = model_zoo.predict_multilabel(ctx.model, ctx.x).labels
    other = choose_non_target(ctx.class_index, labels, ctx.metric_seed("rl"))
    return random_logit(ctx.attr.values, ctx.explain(class_index=other), cfg.ssim_window)


def _orient_fe(raw: float, pixel_count: int) -> float:
    return (raw + 1.0) / 2.0


def _orient_irof(raw: float, pixel_count: int) -> float:
    return float(np.clip(1.0 - raw, 0.0, 1.0))


def _orient_stability(raw: float, pixel_count: int) -> float:
    return 1.0 / (1.0 + raw)


def _identity(raw: float, pixel_count: int) -> float:
    return raw


def _orient_rl(raw: float, pixel_count: int) -> float:
    return 1.0 - float(np.clip(raw, 0.0, 1.0))


def orient_complexity(raw: float, pixel_count: int) -> float:
    if pixel_count <= 1:
        return 1.0
    return 1.0 - raw / math.log(pixel_count)


METRICS: Dict[str, MetricSpec] = {
    "fe": MetricSpec("fe", "faithfulness", _fe, _orient_fe),
    "irof": MetricSpec("irof", "faithfulness", _irof, _orient_irof),
    "as": MetricSpec("as", "robustness", _as, _orient_stability),
    "lle": MetricSpec("lle", "robustness", _lle, _orient_stability),
    "tki": MetricSpec("tki", "localization", _tki, _identity, needs_mask=True),
    "rra": MetricSpec("rra", "localization", _rra, _identity, needs_mask=True),
    "sp": MetricSpec("sp", "complexity", _sp, _identity),
    "co": MetricSpec("co", "complexity", _co, orient_complexity),
    # oriented per input across the evaluated methods, see orient_records
    "mprt": MetricSpec("mprt", "randomization", _mprt, None),
    "rl": MetricSpec("rl", "randomization", _rl, _orient_rl),
}

IROF_ABLATION = tuple(f"irof:{b}:{s}" for b in ("mean", "black", "uniform") for s in ("morf", "lerf"))


def resolve_metric(metric_id: str) -> MetricSpec:
    """Registry lookup; `irof:<baseline>:<strategy>` addresses IROF variants"""
    if metric_id in METRICS:
        return METRICS[metric_id]
    parts = metric_id.split(":")
    if len(parts) == 3 and parts[0] == "irof" and parts[1] in ("mean", "black", "uniform") \
            and parts[2] in ("morf", "lerf"):
        return replace(METRICS["irof"], metric_id=metric_id,
                       config_overrides=(("irof_baseline", parts[1]), ("irof_strategy", parts[2])))
    raise KeyError(f"unknown metric '{metric_id}', expected one of {sorted(METRICS)} or irof:<baseline>:<strategy>")


def failed_record(metric_id: str, method_id: str, sample_id: int, class_index: int) -> MetricRecord:
    """Placeholder for a score whose attribution map could not be produced"""
    return MetricRecord(metric_id, method_id, sample_id, class_index,
                        float("nan"), float("nan"), STATUS_EXPLAIN_FAILED)


def score_metric(metric_id: str, ctx: EvaluationContext, config: Optional[MetricConfig] = None) -> MetricRecord:
    """Evaluate one metric; computation failures become a status code with NaN scores"""
    spec = resolve_metric(metric_id)
    config = config or MetricConfig()
    if spec.config_overrides:
        config = replace(config, **dict(spec.config_overrides))
    try:
        raw = float(spec.compute(ctx, config))
    except MetricComputationError as e:
        logger.debug(f"{metric_id} on sample {ctx.sample_id} class {ctx.class_index} ({ctx.method_id}): {e}")
        return MetricRecord(metric_id, ctx.method_id, ctx.sample_id, ctx.class_index,
                            float("nan"), float("nan"), e.status)
    except EXPLAIN_FAILURES as e:
        logger.debug(f"{metric_id} on sample {ctx.sample_id} class {ctx.class_index}: re-explanation failed: {e}")
        return failed_record(metric_id, ctx.method_id, ctx.sample_id, ctx.class_index)

    if spec.orient is None:
        oriented = float("nan")
    else:
        oriented = spec.orient(raw, ctx.attr.values.size)
    return MetricRecord(metric_id, ctx.method_id, ctx.sample_id, ctx.class_index, raw, oriented)


def orient_scores(metric_id: str, raw: np.ndarray, pixel_count: Optional[int] = None) -> np.ndarray:
    """Oriented scores for a raw matrix [inputs, methods].

    MPRT is min-max scaled within each row across methods (constant row -> 0.5);
    every other metric is oriented elementwise. NaN stays NaN.
    """
    raw = np.asarray(raw, dtype=np.float64)
    spec = resolve_metric(metric_id)
    if spec.metric_id == "mprt":
        out = np.full_like(raw, np.nan)
        for i, row in enumerate(raw):
            finite = np.isfinite(row)
            if not finite.any():
                continue
            lo, hi = row[finite].min(), row[finite].max()
            out[i, finite] = 0.5 if hi == lo else (row[finite] - lo) / (hi - lo)
        return out
    if spec.metric_id == "co" and pixel_count is None:
        raise ValueError("complexity orientation needs the pixel count")
    return np.vectorize(lambda v: spec.orient(v, pixel_count or 0), otypes=[float])(raw)


def orient_records(records: List[MetricRecord]) -> List[MetricRecord]:
    """Fill MPRT oriented scores: min-max across methods within each (sample, class)"""
    groups: Dict[Tuple[int, int, str], List[int]] = defaultdict(list)
    for i, record in enumerate(records):
        if resolve_metric(record.metric_id).metric_id == "mprt":
            groups[(record.sample_id, record.class_index, record.metric_id)].append(i)
    out = list(records)
    for indices in groups.values():
        row = np.array([[records[i].raw_score for i in indices]])
        oriented = orient_scores("mprt", row)[0]
        for i, value in zip(indices, oriented):
            out[i] = replace(records[i], oriented_score=float(value))
    return out


def aggregate_records(records: Iterable[MetricRecord]) -> Dict[Tuple[str, str], float]:
    """Mean oriented score per (method, metric): over classes within a sample, then over samples"""
    per_sample: Dict[Tuple[str, str, int], List[float]] = defaultdict(list)
    for record in records:
        if record.ok and np.isfinite(record.oriented_score):
            per_sample[(record.method_id, record.metric_id, record.sample_id)].append(record.oriented_score)
    per_pair: Dict[Tuple[str, str], List[float]] = defaultdict(list)
    for (method_id, metric_id, _), values in per_sample.items():
        per_pair[(method_id, metric_id)].append(float(np.mean(values)))
    return {pair: float(np.mean(values)) for pair, values in sorted(per_pair.items())}


def metric_category(metric_id: str) -> str:
    return resolve_metric(metric_id).category
