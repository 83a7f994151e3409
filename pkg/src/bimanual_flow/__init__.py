"""Desk-scale bimanual manipulation engine.

Trains small unimanual flow-matching policies on synthetic planar tasks,
reinterprets them as energy functions, composes them into a coordinated
bimanual policy with temporal-spatial energy constraints, and samples
actions with energy-aware adaptive denoising.
"""

__version__ = "0.1.0"
