"""
Core functionality: models, scenes, attribution methods, metrics and meta-evaluation
"""

from .attribution_archive import AttributionArchive
from .engine import EvaluationEngine
from .report_builder import ReportBuilder
from .results_store import ResultsStore

__all__ = ['AttributionArchive', 'EvaluationEngine', 'ReportBuilder', 'ResultsStore']
