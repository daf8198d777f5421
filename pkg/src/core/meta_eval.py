"""
Reliability of explanation metrics under minor and disruptive perturbations.

For each metric, oriented scores of every explanation method are collected on
unperturbed samples and under calibrated input- and model-space noise. Intra-
consistency (IAC) compares score distributions per method with a Wilcoxon
test; inter-consistency (IEC) checks how the ranking of methods behaves. The
four components average into the MC score.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from . import attribution, model_zoo, numerics
from .attribution import MethodConfig
from .errors import CalibrationFailedError, CoverageError, InsufficientSampleError
from .metrics import EvaluationContext, MetricConfig, orient_scores, resolve_metric, score_metric
from .model_zoo import ModelGraph
from .perturbations import gaussian_input_noise
from .scene_synth import Scene
from .seeding import derive_seed

logger = logging.getLogger(__name__)

SPACES = ("input", "model")
MODES = ("minor", "disruptive")
COMPONENTS = ("iac_nr", "iac_ar", "iec_nr", "iec_ar")
START_STD = 0.01
MAX_ATTEMPTS = 20
MAX_SKIPPED_FRACTION = 0.5


@dataclass
class PerturbationPlan:
    """Container for a verified noise level and how it was found"""
    space: str
    mode: str
    noise_std: float
    seed: int
    attempts: int
    std_trace: List[float] = field(default_factory=list)

    def apply(self, model: ModelGraph, x: np.ndarray) -> Tuple[ModelGraph, np.ndarray]:
        if self.space == "input":
            return model, gaussian_input_noise(x, self.noise_std, self.seed)
        return model_zoo.perturb_parameters(model, self.noise_std, self.seed), x


@dataclass
class MetaRecord:
    """Container for the four consistency components and MC of one metric"""
    metric_id: str
    iac_nr: float
    iac_ar: float
    iec_nr: float
    iec_ar: float
    mc: float
    space: str
    iteration: int = 0


@dataclass
class MetaEvalConfig:
    """Meta-evaluation scale settings"""
    n_samples: int = 128
    k_plans: int = 5
    iterations: int = 3
    spaces: Tuple[str, ...] = SPACES
    start_std: float = START_STD
    max_attempts: int = MAX_ATTEMPTS

    def __post_init__(self):
        if min(self.n_samples, self.k_plans, self.iterations, self.max_attempts) < 1:
            raise ValueError("sample count, plans, iterations and attempts must be >= 1")
        if not self.spaces or any(s not in SPACES for s in self.spaces):
            raise ValueError(f"spaces must be drawn from {SPACES}")

    @classmethod
    def full_scale(cls) -> "MetaEvalConfig":
        return cls(n_samples=512)


def calibrate_perturbation(model: ModelGraph, x: np.ndarray, space: str, mode: str, seed: int,
                           start_std: float = START_STD, max_attempts: int = MAX_ATTEMPTS) -> PerturbationPlan:
    """Search the noise std until the mode's label condition holds.

    Minor noise must keep the predicted label set, disruptive noise must change
    it. The std starts at `start_std` and is halved (minor) or doubled
    (disruptive) after every failed attempt.
    """
    if space not in SPACES or mode not in MODES:
        raise ValueError(f"unknown perturbation {space}/{mode}")
    labels = model_zoo.predict_multilabel(model, x).labels
    std = start_std
    trace = []
    for attempt in range(1, max_attempts + 1):
        trace.append(std)
        plan = PerturbationPlan(space, mode, std, seed, attempt, list(trace))
        perturbed_model, perturbed_x = plan.apply(model, x)
        changed = not np.array_equal(model_zoo.predict_multilabel(perturbed_model, perturbed_x).labels, labels)
        if changed == (mode == "disruptive"):
            return plan
        std = std * 2.0 if mode == "disruptive" else std / 2.0
    raise CalibrationFailedError(f"no {mode} {space} perturbation found after {max_attempts} attempts")


def _paired(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    keep = np.isfinite(a) & np.isfinite(b)
    return a[keep], b[keep]


def iac(scores_unperturbed: Sequence[float], scores_perturbed: Sequence[Sequence[float]], mode: str,
        sparse_as_identical: bool = False) -> float:
    """Mean Wilcoxon p-value (minor) or mean 1 - p (disruptive) over perturbation plans.

    Identical score vectors count as p = 1. With `sparse_as_identical`, vectors
    differing in fewer than five pairs are treated the same way.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode '{mode}'")
    q = np.asarray(scores_unperturbed, dtype=np.float64)
    values = []
    for perturbed in scores_perturbed:
        a, b = _paired(q, np.asarray(perturbed, dtype=np.float64))
        if a.size == 0:
            continue
        try:
            p = numerics.wilcoxon_signed_rank(a, b).p_value
        except InsufficientSampleError as e:
            if e.nonzero and not sparse_as_identical:
                raise
            p = 1.0
        values.append(p if mode == "minor" else 1.0 - p)
    return float(np.mean(values)) if values else float("nan")


def _complete_rows(*matrices: np.ndarray) -> np.ndarray:
    keep = np.ones(matrices[0].shape[0], dtype=bool)
    for m in matrices:
        keep &= np.isfinite(m).all(axis=1)
    return keep


def iec(scores: np.ndarray, perturbed: Sequence[np.ndarray], mode: str) -> float:
    """Share of (input, method) cells keeping their rank (minor) or strictly dropping (disruptive)"""
    if mode not in MODES:
        raise ValueError(f"unknown mode '{mode}'")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[1] < 2:
        raise ValueError("inter-consistency needs a score matrix with at least 2 methods")
    values = []
    for q_perturbed in perturbed:
        q_perturbed = np.asarray(q_perturbed, dtype=np.float64)
        keep = _complete_rows(scores, q_perturbed)
        a, b = scores[keep], q_perturbed[keep]
        if a.shape[0] == 0:
            continue
        if mode == "minor":
            agreement = stats.rankdata(a, method="average", axis=1) == stats.rankdata(b, method="average", axis=1)
        else:
            agreement = a > b
        values.append(agreement.mean())
    return float(np.mean(values)) if values else float("nan")


def mc_score(iac_nr: float, iac_ar: float, iec_nr: float, iec_ar: float) -> float:
    return float(np.mean([iac_nr, iac_ar, iec_nr, iec_ar]))


@dataclass
class SampleScores:
    """Oriented score rows [methods] per metric for one sample, per setting"""
    sample_id: int
    class_index: int
    unperturbed: Dict[str, np.ndarray] = field(default_factory=dict)
    perturbed: Dict[Tuple[str, str, int], Dict[str, np.ndarray]] = field(default_factory=dict)
    skipped: Dict[Tuple[str, str], bool] = field(default_factory=dict)


@dataclass
class MetaResult:
    """Container for all records, per-metric summaries and coverage of a run"""
    records: List[MetaRecord]
    coverage: Dict[str, Dict[str, int]]
    config: Dict

    def summary(self) -> Dict[str, Dict[str, Dict[str, Dict[str, float]]]]:
        """metric -> space -> component -> {mean, std} across iterations"""
        grouped: Dict[str, Dict[str, List[MetaRecord]]] = {}
        for record in self.records:
            grouped.setdefault(record.metric_id, {}).setdefault(record.space, []).append(record)
        out = {}
        for metric_id, spaces in grouped.items():
            out[metric_id] = {}
            for space, records in spaces.items():
                out[metric_id][space] = {
                    name: {"mean": float(np.mean([getattr(r, name) for r in records])),
                           "std": float(np.std([getattr(r, name) for r in records]))}
                    for name in COMPONENTS + ("mc",)
                }
        return out

    def to_dict(self) -> Dict:
        return {
            "config": self.config,
            "coverage": self.coverage,
            "metrics": {
                metric_id: {"category": resolve_metric(metric_id).category, "spaces": spaces}
                for metric_id, spaces in self.summary().items()
            },
            "records": [asdict(r) for r in self.records],
        }


def _oriented_row(model: ModelGraph, x: np.ndarray, scene: Scene, class_index: int,
                  methods: Sequence[str], metrics: Sequence[str], method_config: MethodConfig,
                  metric_config: MetricConfig, seed: int) -> Dict[str, np.ndarray]:
    labels = model_zoo.predict_multilabel(model, x).labels
    randomized = model_zoo.randomize_parameters(model, derive_seed("mprt", seed))
    mask = scene.masks[class_index] if scene.masks is not None else None
    raw = {metric_id: np.full(len(methods), np.nan) for metric_id in metrics}
    for j, method_id in enumerate(methods):
        method_seed = derive_seed("method", seed, scene.scene_id, method_id)
        attr = attribution.explain(method_id, model, x, class_index, method_config, method_seed)
        ctx = EvaluationContext(model=model, x=x, class_index=class_index, attr=attr, method_id=method_id,
                                sample_id=scene.scene_id, method_config=method_config, method_seed=method_seed,
                                seed=seed, mask=mask, labels=labels, randomized_model=randomized)
        for metric_id in metrics:
            raw[metric_id][j] = score_metric(metric_id, ctx, metric_config).raw_score
    pixel_count = x.shape[1] * x.shape[2]
    return {metric_id: orient_scores(metric_id, raw[metric_id][None], pixel_count)[0] for metric_id in metrics}


def score_sample(model: ModelGraph, scene: Scene, methods: Sequence[str], metrics: Sequence[str],
                 config: MetaEvalConfig, method_config: MethodConfig, metric_config: MetricConfig,
                 seed: int) -> SampleScores:
    """Unperturbed and perturbed oriented scores of one sample for every plan"""
    prediction = model_zoo.predict_multilabel(model, scene.image)
    class_index = int(np.argmax(prediction.probabilities))
    result = SampleScores(scene.scene_id, class_index)
    result.unperturbed = _oriented_row(model, scene.image, scene, class_index, methods, metrics,
                                       method_config, metric_config, seed)
    for space in config.spaces:
        for mode in MODES:
            plans = []
            try:
                for k in range(config.k_plans):
                    plan_seed = derive_seed("plan", seed, scene.scene_id, space, mode, k)
                    plans.append(calibrate_perturbation(model, scene.image, space, mode, plan_seed,
                                                        config.start_std, config.max_attempts))
            except CalibrationFailedError as e:
                logger.warning(f"Sample {scene.scene_id} skipped for {space}/{mode}: {e}")
                result.skipped[(space, mode)] = True
                continue
            result.skipped[(space, mode)] = False
            for k, plan in enumerate(plans):
                perturbed_model, perturbed_x = plan.apply(model, scene.image)
                result.perturbed[(space, mode, k)] = _oriented_row(
                    perturbed_model, perturbed_x, scene, class_index, methods, metrics,
                    method_config, metric_config, seed)
    return result


def _consistency(samples: List[SampleScores], metric_id: str, space: str, k_plans: int,
                 iteration: int) -> MetaRecord:
    components = {}
    for mode in MODES:
        kept = [s for s in samples if not s.skipped.get((space, mode), True)]
        base = np.stack([s.unperturbed[metric_id] for s in kept])
        perturbed = [np.stack([s.perturbed[(space, mode, k)][metric_id] for s in kept]) for k in range(k_plans)]
        suffix = "nr" if mode == "minor" else "ar"
        per_method = [iac(base[:, j], [p[:, j] for p in perturbed], mode, sparse_as_identical=True)
                      for j in range(base.shape[1])]
        components[f"iac_{suffix}"] = float(np.mean(per_method))
        components[f"iec_{suffix}"] = iec(base, perturbed, mode)
    return MetaRecord(metric_id=metric_id, mc=mc_score(**components), space=space, iteration=iteration,
                      **components)


def run_meta_evaluation(model: ModelGraph, scenes: Sequence[Scene], methods: Sequence[str],
                        metrics: Sequence[str], config: Optional[MetaEvalConfig] = None,
                        seed: int = 0, method_config: Optional[MethodConfig] = None,
                        metric_config: Optional[MetricConfig] = None, engine=None) -> MetaResult:
    """IAC/IEC/MC per metric and space, repeated over iterations with fresh seeds.

    `engine` (an EvaluationEngine) parallelizes per-sample scoring; results do
    not depend on worker count.
    """
    config = config or MetaEvalConfig()
    method_config = method_config or MethodConfig()
    metric_config = metric_config or MetricConfig()
    if len(methods) < 2:
        raise ValueError("meta-evaluation needs at least 2 explanation methods")
    for metric_id in metrics:
        resolve_metric(metric_id)
    n = min(config.n_samples, len(scenes))

    records: List[MetaRecord] = []
    coverage: Dict[str, Dict[str, int]] = {}
    for iteration in range(config.iterations):
        iteration_seed = derive_seed("meta", seed, iteration)
        chosen = np.sort(np.random.default_rng(iteration_seed).choice(len(scenes), size=n, replace=False))
        jobs = {
            int(i): (lambda scene=scenes[int(i)]: score_sample(model, scene, methods, metrics, config,
                                                               method_config, metric_config, iteration_seed))
            for i in chosen
        }
        if engine is not None:
            outcomes = engine.run_keyed(jobs)
        else:
            outcomes = {key: job() for key, job in sorted(jobs.items())}
        samples = [outcomes[key] for key in sorted(outcomes)]

        for space in config.spaces:
            for mode in MODES:
                skipped = sum(s.skipped.get((space, mode), True) for s in samples)
                entry = coverage.setdefault(f"{space}/{mode}", {"attempted": 0, "calibrated": 0, "skipped": 0})
                entry["attempted"] += len(samples)
                entry["calibrated"] += len(samples) - skipped
                entry["skipped"] += skipped
                if skipped > MAX_SKIPPED_FRACTION * len(samples):
                    raise CoverageError(f"{skipped}/{len(samples)} samples skipped for {space}/{mode}")

        for metric_id in metrics:
            per_space = [_consistency(samples, metric_id, space, config.k_plans, iteration)
                         for space in config.spaces]
            records.extend(per_space)
            combined = {name: float(np.mean([getattr(r, name) for r in per_space])) for name in COMPONENTS}
            records.append(MetaRecord(metric_id=metric_id, mc=mc_score(**combined), space="combined",
                                      iteration=iteration, **combined))
        logger.info(f"Meta-evaluation iteration {iteration + 1}/{config.iterations} finished on {n} samples")

    echo = {"meta": asdict(config), "methods": list(methods), "metrics": list(metrics), "seed": seed,
            "method_config": asdict(method_config), "metric_config": asdict(metric_config)}
    return MetaResult(records=records, coverage=coverage, config=echo)
