"""Experiment configuration, pipeline orchestration and command-line interface."""
