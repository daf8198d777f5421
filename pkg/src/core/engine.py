import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from typing import Callable, Dict, Hashable, List, Optional, Sequence, Tuple

import numpy as np

from . import attribution, model_zoo
from .attribution import AttributionMap, MethodConfig
from .metrics import (
    EXPLAIN_FAILURES,
    EvaluationContext,
    MetricConfig,
    MetricRecord,
    failed_record,
    orient_records,
    score_metric,
)
from .model_zoo import ModelGraph
from .scene_synth import Scene
from .seeding import derive_seed

AttributionKey = Tuple[int, int, str]


@dataclass
class EvaluationStats:
    """Statistics for evaluation runs"""
    start_time: float
    jobs_done: int = 0
    jobs_failed: int = 0
    records: int = 0

    @property
    def duration(self) -> float:
        return time.time() - self.start_time

    @property
    def speed(self) -> float:
        """Jobs per second"""
        duration = self.duration
        return self.jobs_done / duration if duration > 0 else 0


def select_samples(scenes: Sequence[Scene], n: Optional[int], seed: int, stage: str) -> List[Scene]:
    """Seeded subset of n scenes in scene-id order; all scenes when n is None or too large"""
    if n is None or n >= len(scenes):
        return sorted(scenes, key=lambda s: s.scene_id)
    rng = np.random.default_rng(derive_seed("select", stage, seed))
    chosen = rng.choice(len(scenes), size=n, replace=False)
    return sorted((scenes[int(i)] for i in chosen), key=lambda s: s.scene_id)


def explained_classes(model: ModelGraph, x: np.ndarray) -> List[int]:
    """Predicted-positive classes of one input"""
    return [int(c) for c in np.flatnonzero(model_zoo.predict_multilabel(model, x).labels)]


def method_seed(seed: int, sample_id: int, method_id: str) -> int:
    return derive_seed("method", seed, sample_id, method_id)


class EvaluationEngine:
    """Worker pool running per-sample explanation and metric jobs"""

    def __init__(self, workers: Optional[int] = None):
        self.logger = logging.getLogger(__name__)
        self.workers = max(1, workers or min(os.cpu_count() or 2, 4))
        self.stats = EvaluationStats(start_time=time.time())

    def run_keyed(self, jobs: Dict[Hashable, Callable[[], object]], raise_errors: bool = True) -> Dict:
        """Run callables in parallel and return their results keyed and sorted.

        Failed jobs are logged; with `raise_errors` the first failure in key order
        is re-raised after every job finished, otherwise failed keys are omitted.
        """
        results = {}
        failures = {}
        with ThreadPoolExecutor(max_workers=self.workers, thread_name_prefix="EvalWorker") as executor:
            future_to_key = {executor.submit(job): key for key, job in jobs.items()}
            for future in as_completed(future_to_key):
                key = future_to_key[future]
                try:
                    results[key] = future.result()
                    self.stats.jobs_done += 1
                except Exception as e:
                    self.logger.error(f"Job {key} failed: {e}")
                    failures[key] = e
                    self.stats.jobs_failed += 1
        if failures and raise_errors:
            raise failures[sorted(failures)[0]]
        return {key: results[key] for key in sorted(results)}

    def explain_all(self, model: ModelGraph, scenes: Sequence[Scene], methods: Sequence[str],
                    config: MethodConfig, seed: int) -> Dict[AttributionKey, AttributionMap]:
        """Attribution maps for every (sample, predicted class, method)"""
        def job(scene: Scene) -> Dict[AttributionKey, AttributionMap]:
            maps = {}
            for class_index in explained_classes(model, scene.image):
                for method_id in methods:
                    maps[(scene.scene_id, class_index, method_id)] = attribution.explain(
                        method_id, model, scene.image, class_index, config,
                        method_seed(seed, scene.scene_id, method_id))
            return maps

        outcomes = self.run_keyed({scene.scene_id: (lambda s=scene: job(s)) for scene in scenes})
        merged = {}
        for maps in outcomes.values():
            merged.update(maps)
        self.logger.info(f"Explained {len(scenes)} samples: {len(merged)} attribution maps")
        return {key: merged[key] for key in sorted(merged)}

    def _score_sample(self, model: ModelGraph, scene: Scene, methods: Sequence[str], metrics: Sequence[str],
                      method_config: MethodConfig, metric_config: MetricConfig, seed: int,
                      randomized: ModelGraph,
                      attributions: Optional[Dict[AttributionKey, AttributionMap]]) -> List[MetricRecord]:
        labels = model_zoo.predict_multilabel(model, scene.image).labels
        records = []
        for class_index in np.flatnonzero(labels):
            class_index = int(class_index)
            mask = scene.masks[class_index] if scene.masks is not None else None
            for method_id in methods:
                seed_m = method_seed(seed, scene.scene_id, method_id)
                key = (scene.scene_id, class_index, method_id)
                if attributions is not None and key in attributions:
                    attr = attributions[key]
                else:
                    try:
                        attr = attribution.explain(method_id, model, scene.image, class_index,
                                                   method_config, seed_m)
                    except EXPLAIN_FAILURES as e:
                        self.logger.error(f"{method_id} failed on sample {scene.scene_id} class {class_index}: {e}")
                        records.extend(failed_record(m, method_id, scene.scene_id, class_index) for m in metrics)
                        continue
                # archived maps are float32, so fresh ones are scored at the same precision
                ctx = EvaluationContext(model=model, x=scene.image, class_index=class_index,
                                        attr=attribution.stored_precision(attr),
                                        method_id=method_id, sample_id=scene.scene_id,
                                        method_config=method_config, method_seed=seed_m, seed=seed,
                                        mask=mask, labels=labels, randomized_model=randomized,
                                        stored_precision=True)
                for metric_id in metrics:
                    record = score_metric(metric_id, ctx, metric_config)
                    if not record.ok:
                        self.logger.error(f"{metric_id}/{method_id} on sample {scene.scene_id} "
                                          f"class {class_index}: {record.status}")
                    records.append(record)
        return records

    def evaluate(self, model: ModelGraph, scenes: Sequence[Scene], methods: Sequence[str], metrics: Sequence[str],
                 method_config: MethodConfig, metric_config: MetricConfig, seed: int,
                 attributions: Optional[Dict[AttributionKey, AttributionMap]] = None) -> List[MetricRecord]:
        """Metric records for every (sample, predicted class, method, metric), sorted by key"""
        randomized = model_zoo.randomize_parameters(model, derive_seed("mprt", seed))
        jobs = {
            scene.scene_id: (lambda s=scene: self._score_sample(model, s, methods, metrics, method_config,
                                                                metric_config, seed, randomized, attributions))
            for scene in scenes
        }
        outcomes = self.run_keyed(jobs, raise_errors=False)
        records = [record for sample_records in outcomes.values() for record in sample_records]
        records = sorted(orient_records(records), key=lambda r: r.key)
        self.stats.records += len(records)
        self.logger.info(f"Evaluated {len(outcomes)}/{len(scenes)} samples: {len(records)} records "
                         f"in {self.stats.duration:.1f}s ({self.stats.speed:.2f} jobs/s)")
        return records
