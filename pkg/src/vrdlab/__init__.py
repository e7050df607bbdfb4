"""Relationship-proposal lab: negative-proposal taxonomy, balanced sampling,
graph attention and a spatial mask decoder on a small numpy autodiff core."""

__version__ = "0.1.0"
