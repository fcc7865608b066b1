"""Experiment harness: configs, datasets, synthetic tasks, pipelines and the CLI."""
