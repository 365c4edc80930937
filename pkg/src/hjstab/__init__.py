"""Learning input-output dynamics that are L2 stable by construction."""

__version__ = "0.1.0"
