import json
import logging

import numpy as np
import pytest

from src.core import report_builder
from src.core.metrics import MetricRecord
from src.core.report_builder import GAP, ReportBuilder
from src.core.results_store import ResultsStore


def meta_entry(category, mc_mean, mc_std=0.0):
    combined = {name: {"mean": 0.5, "std": 0.0} for name in ("iac_nr", "iac_ar", "iec_nr", "iec_ar")}
    combined["mc"] = {"mean": mc_mean, "std": mc_std}
    return {"category": category, "spaces": {"model": combined, "combined": combined}}


@pytest.fixture
def meta():
    return {"metrics": {
        "sp": meta_entry("complexity", 0.62, 0.01),
        "co": meta_entry("complexity", 0.71, 0.02),
        "fe": meta_entry("faithfulness", 0.55),
        "irof:black:morf": meta_entry("faithfulness", 0.9),
        "irof:mean:lerf": meta_entry("faithfulness", 0.4),
    }}


@pytest.fixture
def results(tmp_path):
    records = [
        MetricRecord("sp", "lrp", 0, 0, 0.8, 0.8),
        MetricRecord("sp", "random", 0, 0, 0.2, 0.2),
        MetricRecord("co", "lrp", 0, 0, 3.0, 0.4),
        MetricRecord("co", "random", 0, 0, 5.0, 0.4),
        MetricRecord("rra", "lrp", 0, 0, float("nan"), float("nan"), "missing_mask"),
    ]
    return ResultsStore(tmp_path / "results.csv").write(records)


class TestFormatting:
    @pytest.mark.parametrize("value,expected", [(0.12345, "0.123"), (None, GAP), (float("nan"), GAP),
                                                (float("inf"), GAP), (1.0, "1.000")])
    def test_format_score(self, value, expected):
        assert report_builder.format_score(value) == expected

    def test_render_table(self):
        table = report_builder.render_table(["method", "sp"], [["lrp", "0.500"]])
        assert "method" in table and "0.500" in table

    def test_normalize_columns(self):
        matrix = np.array([[1.0, 2.0, np.nan], [3.0, 2.0, np.nan], [2.0, np.nan, np.nan]])
        out = report_builder.normalize_columns(matrix)
        np.testing.assert_allclose(out[:, 0], [0.0, 1.0, 0.5])
        assert out[0, 1] == out[1, 1] == 0.5
        assert np.isnan(out[2, 1]) and np.isnan(out[:, 2]).all()

    def test_average_column(self):
        rows = report_builder.method_metric_rows(np.array([[0.2, np.nan, 0.4], [np.nan, np.nan, np.nan]]),
                                                 ["lrp", "random"], with_average=True)
        assert rows[0] == ["lrp", "0.200", GAP, "0.400", "0.300"]
        assert rows[1][-1] == GAP


class TestMetaTables:
    def test_category_winners(self, meta):
        winners = report_builder.category_winners(meta)
        assert winners["complexity"] == "co"
        assert winners["faithfulness"] == "fe"
        assert winners["localization"] is None

    def test_mc_rows(self, meta):
        rows = {row[0]: row for row in report_builder.mc_rows(meta)}
        assert rows["co"] == ["co", "complexity", GAP, "0.710 ± 0.020", "0.710 ± 0.020"]

    def test_irof_ablation_rows(self, meta):
        rows = {row[0]: row[1:] for row in report_builder.irof_ablation_rows(meta)}
        assert rows["black"] == ["0.900 ± 0.000", GAP]
        assert rows["mean"] == [GAP, "0.400 ± 0.000"]
        assert rows["uniform"] == [GAP, GAP]

    def test_chart_element_ids(self, meta, tmp_path):
        path = report_builder.render_mc_chart(meta, tmp_path / "chart.svg")
        chart = path.read_text()
        for metric_id in meta["metrics"]:
            assert f'id="bar_{metric_id}"' in chart
        assert 'id="category_legend"' in chart

    def test_chart_is_reproducible(self, meta, tmp_path):
        a = report_builder.render_mc_chart(meta, tmp_path / "a.svg").read_bytes()
        b = report_builder.render_mc_chart(meta, tmp_path / "b.svg").read_bytes()
        assert a == b


class TestReportBuilder:
    def test_full_report(self, meta, results, tmp_path):
        meta_path = tmp_path / "meta.json"
        meta_path.write_text(json.dumps(meta))
        builder = ReportBuilder(tmp_path / "report")
        path = builder.build(results, meta_path, {"seed": 3})

        report = path.read_text()
        assert report.startswith("# AttrEx report")
        for heading in ("## Oriented scores", "## Normalized scores", "## Record status",
                        "## Metric reliability (MC)", "## Most reliable metric per category",
                        "## IROF baseline and ordering ablation", "## Environment", "## Configuration"):
            assert heading in report
        assert "normalized average" in report
        assert "missing_mask" in report
        assert '"seed": 3' in report
        assert builder.gaps == []
        assert (tmp_path / "report" / report_builder.CHART_NAME).is_file()

    def test_missing_inputs_become_gaps(self, tmp_path):
        builder = ReportBuilder(tmp_path)
        report = builder.build(None, tmp_path / "absent.json", {}).read_text()
        assert "metric results missing" in builder.gaps
        assert "meta-evaluation results missing" in builder.gaps
        assert f"**{GAP}**: metric results missing" in report
        assert not (tmp_path / report_builder.CHART_NAME).exists()

    def test_gaps_logged_through_module_logger(self, tmp_path, caplog):
        builder = ReportBuilder(tmp_path)
        assert builder.logger.name == "src.core.report_builder"
        with caplog.at_level(logging.WARNING, logger=builder.logger.name):
            builder.build(None, None, {})
        assert any(r.name == builder.logger.name and "Report gap" in r.getMessage() for r in caplog.records)

    def test_ablation_gap(self, results, tmp_path):
        meta_path = tmp_path / "meta.json"
        meta_path.write_text(json.dumps({"metrics": {"sp": meta_entry("complexity", 0.6)}}))
        builder = ReportBuilder(tmp_path / "report")
        builder.build(results, meta_path, {})
        assert builder.gaps == ["IROF ablation not run"]

    def test_environment_echo(self):
        echo = report_builder.environment_echo()
        assert {"platform", "python_version", "cpu_count", "memory_total"} <= set(echo)
        assert echo["cpu_count"] >= 1
