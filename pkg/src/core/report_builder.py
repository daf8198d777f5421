"""
Console tables, the consolidated markdown report and the MC bar chart
"""

import json
import logging
import platform
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import matplotlib
import matplotlib.pyplot as plt
import numpy as np
import psutil
from matplotlib.patches import Patch
from texttable import Texttable

from .metrics import CATEGORIES, IROF_ABLATION
from .results_store import ResultsStore

matplotlib.use("Agg")

GAP = "GAP"
CATEGORY_COLORS = {
    "faithfulness": "#1f77b4",
    "robustness": "#ff7f0e",
    "localization": "#2ca02c",
    "complexity": "#d62728",
    "randomization": "#9467bd",
}
CHART_NAME = "mc_chart.svg"
REPORT_NAME = "report.md"


def format_score(value: Optional[float], precision: int = 3) -> str:
    if value is None or not np.isfinite(value):
        return GAP
    return f"{value:.{precision}f}"


def render_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    table = Texttable(max_width=0)
    table.set_cols_dtype(["t"] * len(header))
    table.set_cols_align(["l"] + ["r"] * (len(header) - 1))
    table.add_rows([list(header), *[list(r) for r in rows]])
    return table.draw()


def score_matrix(stats: Dict[Tuple[str, str], float], methods: Sequence[str],
                 metrics: Sequence[str]) -> np.ndarray:
    """[methods, metrics] mean oriented scores, NaN where no record exists"""
    return np.array([[stats.get((m, k), np.nan) for k in metrics] for m in methods], dtype=np.float64)


def normalize_columns(matrix: np.ndarray) -> np.ndarray:
    """Min-max per column over the finite entries; a constant column maps to 0.5"""
    out = np.full_like(matrix, np.nan)
    for j in range(matrix.shape[1]):
        column = matrix[:, j]
        finite = np.isfinite(column)
        if not finite.any():
            continue
        lo, hi = column[finite].min(), column[finite].max()
        out[finite, j] = 0.5 if hi == lo else (column[finite] - lo) / (hi - lo)
    return out


def method_metric_rows(matrix: np.ndarray, methods: Sequence[str], with_average: bool = False) -> List[List[str]]:
    rows = []
    for i, method_id in enumerate(methods):
        row = [method_id] + [format_score(v) for v in matrix[i]]
        if with_average:
            finite = matrix[i][np.isfinite(matrix[i])]
            row.append(format_score(float(finite.mean())) if finite.size else GAP)
        rows.append(row)
    return rows


def combined_mc(meta: Dict, metric_id: str) -> Tuple[float, float]:
    entry = meta.get("metrics", {}).get(metric_id, {}).get("spaces", {}).get("combined")
    if entry is None:
        return float("nan"), float("nan")
    return entry["mc"]["mean"], entry["mc"]["std"]


def mc_rows(meta: Dict) -> List[List[str]]:
    """metric, category, MC mean ± std per space and combined"""
    spaces = ("input", "model", "combined")
    rows = []
    for metric_id, entry in sorted(meta.get("metrics", {}).items()):
        row = [metric_id, entry["category"]]
        for space in spaces:
            mc = entry["spaces"].get(space, {}).get("mc")
            row.append(GAP if mc is None else f"{format_score(mc['mean'])} ± {format_score(mc['std'])}")
        rows.append(row)
    return rows


def category_winners(meta: Dict) -> Dict[str, Optional[str]]:
    """Most reliable metric per category by combined MC; ablation variants excluded"""
    winners: Dict[str, Optional[str]] = {c: None for c in CATEGORIES}
    best: Dict[str, float] = {}
    for metric_id, entry in sorted(meta.get("metrics", {}).items()):
        if ":" in metric_id:
            continue
        mean, _ = combined_mc(meta, metric_id)
        category = entry["category"]
        if np.isfinite(mean) and mean > best.get(category, -np.inf):
            best[category] = mean
            winners[category] = metric_id
    return winners


def irof_ablation_rows(meta: Dict) -> List[List[str]]:
    rows = []
    for baseline in ("mean", "black", "uniform"):
        row = [baseline]
        for strategy in ("morf", "lerf"):
            mean, std = combined_mc(meta, f"irof:{baseline}:{strategy}")
            row.append(GAP if not np.isfinite(mean) else f"{format_score(mean)} ± {format_score(std)}")
        rows.append(row)
    return rows


def render_mc_chart(meta: Dict, path: Path) -> Path:
    """One bar per metric (combined MC, std as error bar), coloured by category"""
    metric_ids = sorted(meta.get("metrics", {}))
    with plt.rc_context({"svg.hashsalt": "attrex", "svg.fonttype": "none"}):
        return _draw_mc_chart(meta, metric_ids, path)


def _draw_mc_chart(meta: Dict, metric_ids: List[str], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(max(6, 0.7 * len(metric_ids) + 2), 4))
    try:
        for i, metric_id in enumerate(metric_ids):
            mean, std = combined_mc(meta, metric_id)
            category = meta["metrics"][metric_id]["category"]
            bars = ax.bar(i, 0.0 if not np.isfinite(mean) else mean,
                          yerr=None if not np.isfinite(std) else std,
                          color=CATEGORY_COLORS[category], capsize=3)
            bars.patches[0].set_gid(f"bar_{metric_id}")
        ax.set_xticks(range(len(metric_ids)))
        ax.set_xticklabels(metric_ids, rotation=45, ha="right")
        ax.set_ylim(0, 1)
        ax.set_ylabel("MC score")
        ax.set_title("Mean MC score per metric")
        legend = ax.legend(handles=[Patch(color=CATEGORY_COLORS[c], label=c) for c in CATEGORIES],
                           loc="upper right", fontsize="small")
        legend.set_gid("category_legend")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
    finally:
        plt.close(fig)
    return path


def environment_echo() -> Dict[str, object]:
    return {
        "platform": platform.system(),
        "platform_release": platform.release(),
        "architecture": platform.machine(),
        "python_version": platform.python_version(),
        "cpu_count": psutil.cpu_count(),
        "memory_total": psutil.virtual_memory().total,
    }


class ReportBuilder:
    """Assembles report.md and mc_chart.svg from the results CSV and meta.json"""

    def __init__(self, out_dir: Path):
        self.logger = logging.getLogger(__name__)
        self.out_dir = Path(out_dir)
        self.gaps: List[str] = []

    def _gap(self, what: str) -> str:
        self.logger.warning(f"Report gap: {what}")
        self.gaps.append(what)
        return f"**{GAP}**: {what}"

    def _load_records(self, results_path: Optional[Path]):
        if results_path is None or not Path(results_path).is_file():
            return None
        return ResultsStore(results_path).read()

    def _load_meta(self, meta_path: Optional[Path]) -> Optional[Dict]:
        if meta_path is None or not Path(meta_path).is_file():
            return None
        return json.loads(Path(meta_path).read_text())

    def _score_sections(self, records) -> List[str]:
        if records is None:
            return ["## Oriented scores", "", self._gap("metric results missing"), "",
                    "## Normalized scores", "", self._gap("metric results missing"), ""]
        stats = {pair: s["oriented_mean"] for pair, s in ResultsStore.statistics(records).items()}
        methods = sorted({m for m, _ in stats})
        metrics = sorted({k for _, k in stats if ":" not in k})
        matrix = score_matrix(stats, methods, metrics)
        normalized = normalize_columns(matrix)
        return [
            "## Oriented scores", "",
            "```", render_table(["method", *metrics], method_metric_rows(matrix, methods)), "```", "",
            "## Normalized scores", "",
            "```", render_table(["method", *metrics, "normalized average"],
                                method_metric_rows(normalized, methods, with_average=True)), "```", "",
            "## Record status", "",
            "```", render_table(["metric", "status", "count"],
                                [[m, s, str(n)] for m, counts in ResultsStore.status_counts(records).items()
                                 for s, n in counts.items()]), "```", "",
        ]

    def _meta_sections(self, meta: Optional[Dict]) -> List[str]:
        if meta is None:
            gap = self._gap("meta-evaluation results missing")
            return ["## Metric reliability (MC)", "", gap, "",
                    "## Most reliable metric per category", "", gap, "",
                    "## IROF baseline and ordering ablation", "", gap, ""]
        winners = category_winners(meta)
        sections = [
            "## Metric reliability (MC)", "",
            "```", render_table(["metric", "category", "input", "model", "combined"], mc_rows(meta)), "```", "",
            f"![MC scores]({CHART_NAME})", "",
            "## Most reliable metric per category", "",
            "```", render_table(["category", "metric", "MC"],
                                [[c, w or GAP, format_score(combined_mc(meta, w)[0]) if w else GAP]
                                 for c, w in winners.items()]), "```", "",
            "## IROF baseline and ordering ablation", "",
        ]
        if any(variant in meta.get("metrics", {}) for variant in IROF_ABLATION):
            sections += ["```", render_table(["baseline", "morf", "lerf"], irof_ablation_rows(meta)), "```", ""]
        else:
            sections += [self._gap("IROF ablation not run"), ""]
        return sections

    def build(self, results_path: Optional[Path], meta_path: Optional[Path], config: Dict) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.gaps = []
        records = self._load_records(results_path)
        meta = self._load_meta(meta_path)

        lines = ["# AttrEx report", ""]
        lines += self._score_sections(records)
        lines += self._meta_sections(meta)
        if meta is not None:
            render_mc_chart(meta, self.out_dir / CHART_NAME)
        lines += ["## Environment", "", "```json", json.dumps(environment_echo(), indent=2, sort_keys=True), "```", "",
                  "## Configuration", "", "```json", json.dumps(config, indent=2, sort_keys=True, default=str),
                  "```", ""]
        report_path = self.out_dir / REPORT_NAME
        report_path.write_text("\n".join(lines))
        self.logger.info(f"Report written to {report_path} with {len(self.gaps)} gap(s)")
        return report_path