"""Closed-loop highway driving workbench: simulation, scenario generation,
trajectory-value learning, and a tabular convergence laboratory."""

__version__ = "0.1.0"
