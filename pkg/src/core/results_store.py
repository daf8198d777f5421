import csv
import logging
import math
from collections import Counter
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import CorruptManifestError
from .metrics import STATUS_OK, MetricRecord, aggregate_records

CSV_HEADER = ("metric_id", "method_id", "sample_id", "class_index", "raw_score", "oriented_score", "status")


def _format_score(value: float) -> str:
    return "" if math.isnan(value) else repr(float(value))


def _parse_score(text: str) -> float:
    return float("nan") if text == "" else float(text)


class ResultsStore:
    """Manages the metric results CSV and the statistics derived from it"""

    def __init__(self, path: Path):
        self.logger = logging.getLogger(__name__)
        self.path = Path(path)

    def write(self, records: Sequence[MetricRecord]) -> Path:
        """One row per record, sorted by (sample, class, method, metric)"""
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            for r in sorted(records, key=lambda r: r.key):
                writer.writerow([r.metric_id, r.method_id, r.sample_id, r.class_index,
                                 _format_score(r.raw_score), _format_score(r.oriented_score), r.status])
        self.logger.info(f"Wrote {len(records)} metric records to {self.path}")
        return self.path

    def read(self) -> List[MetricRecord]:
        try:
            with open(self.path, newline="") as f:
                rows = list(csv.reader(f))
        except FileNotFoundError:
            raise CorruptManifestError(f"no results file at {self.path}")
        if not rows or tuple(rows[0]) != CSV_HEADER:
            raise CorruptManifestError(f"{self.path} is not a metric results file")
        records = []
        try:
            for row in rows[1:]:
                metric_id, method_id, sample_id, class_index, raw, oriented, status = row
                records.append(MetricRecord(metric_id, method_id, int(sample_id), int(class_index),
                                            _parse_score(raw), _parse_score(oriented), status))
        except ValueError as e:
            raise CorruptManifestError(f"malformed row in {self.path}: {e}")
        return records

    @staticmethod
    def status_counts(records: Sequence[MetricRecord]) -> Dict[str, Dict[str, int]]:
        """metric -> status -> count"""
        counts: Dict[str, Counter] = {}
        for r in records:
            counts.setdefault(r.metric_id, Counter())[r.status] += 1
        return {metric_id: dict(sorted(c.items())) for metric_id, c in sorted(counts.items())}

    @staticmethod
    def statistics(records: Sequence[MetricRecord]) -> Dict[Tuple[str, str], Dict[str, float]]:
        """Per (method, metric): aggregated oriented mean, raw mean/std and record counts"""
        means = aggregate_records(records)
        grouped: Dict[Tuple[str, str], List[MetricRecord]] = {}
        for r in records:
            grouped.setdefault((r.method_id, r.metric_id), []).append(r)
        stats = {}
        for pair, group in sorted(grouped.items()):
            raw = np.array([r.raw_score for r in group if r.status == STATUS_OK])
            stats[pair] = {
                "oriented_mean": means.get(pair, float("nan")),
                "raw_mean": float(raw.mean()) if raw.size else float("nan"),
                "raw_std": float(raw.std()) if raw.size else float("nan"),
                "records": len(group),
                "ok": int(raw.size),
            }
        return stats

    def summary(self, records: Optional[Sequence[MetricRecord]] = None) -> Dict:
        records = self.read() if records is None else records
        return {
            "records": len(records),
            "samples": len({r.sample_id for r in records}),
            "status_counts": self.status_counts(records),
        }
