"""Region-to-whole human motion transfer on a synthetic articulated-figure dataset."""

__version__ = "0.1.0"
