"""Simulation, memory, recovery and solver services."""
