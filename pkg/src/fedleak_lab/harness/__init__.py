"""Experiment front end: configuration, data ingestion, orchestration and the CLI."""
