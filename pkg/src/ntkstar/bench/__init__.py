"""Desk-scale experiment harness."""

from .datasets import Task, generate_dataset, teacher
from .harness import CSV_COLUMNS, MODEL_KINDS, ConfigError, RunConfig, run_experiment
from .plot import CsvFormatError, emit_plot
