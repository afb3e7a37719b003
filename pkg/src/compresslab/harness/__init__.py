"""Metrics, experiment suites, the region-removal defense, reports and the CLI."""
from .defense import region_removal_defense
from .metrics import MetricsRecord, compute_metrics, robustness_gap
from .report import emit_report
from .suites import KINDS, ExperimentSpec, ReportBundle, run_suite

__all__ = ["MetricsRecord", "compute_metrics", "robustness_gap", "region_removal_defense", "emit_report",
           "KINDS", "ExperimentSpec", "ReportBundle", "run_suite"]
