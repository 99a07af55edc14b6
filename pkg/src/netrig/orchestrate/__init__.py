"""Experiment orchestration: configs, validation, process supervision,
the single-process reference executor, and trace verification."""
