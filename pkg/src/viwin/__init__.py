"""Windowed visual-inertial SLAM backend with marginalization-based
pose-graph factors, loop closure, a synthetic data generator, and
trajectory evaluation tools."""

__version__ = "0.1.0"
