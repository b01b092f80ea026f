"""Planner and bit-exact simulator for streaming residual-CNN accelerators."""

__version__ = "0.1.0"
