"""Numerical services: compressors, analysis, tasks and the simulation engine."""
