"""Mean-field coarsening dynamics on the unit interval."""

__version__ = "0.1.0"
