"""Experiment configuration, pipelines and command-line entry point."""
