"""Deterministic fault-injection cluster simulator and resilient solvers."""
