"""Hierarchical primal-dual voltage regulation on radial multi-phase feeders."""

from .__about__ import __version__
