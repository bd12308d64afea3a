"""Scenario runner, trace ingestion, audit tooling and the command line."""
