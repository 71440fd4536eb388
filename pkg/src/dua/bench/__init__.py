"""Benchmark data, simulated users, metrics and experiment orchestration."""
