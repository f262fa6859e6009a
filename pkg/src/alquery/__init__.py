"""Closed-loop 3D patch active learning with class-stratified, scheduled power-noised queries."""

__version__ = "0.1.0"
