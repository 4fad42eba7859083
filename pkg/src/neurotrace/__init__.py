"""Contour extraction for binary neuron images with branch overlaps.

The pipeline splits a cell into soma and a one-pixel periphery skeleton,
tracks every branch across bifurcations, crossings and superpositions, and
follows the outline with jumps across overlaps so that each branch keeps its
own contour.
"""
from __future__ import annotations

__version__ = "0.1.0"
