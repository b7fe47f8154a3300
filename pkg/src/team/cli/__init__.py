"""Command-line front door: config parsing, pipeline stages and reports."""
from team.cli.config import ExperimentFile, parse_experiment, parse_mapping, parse_text
from team.cli.reporting import MetricsTable, emit_reports

__all__ = ["ExperimentFile", "MetricsTable", "emit_reports", "parse_experiment", "parse_mapping", "parse_text"]
