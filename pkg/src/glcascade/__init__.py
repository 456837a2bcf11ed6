"""Graph inference from cascades by per-node l1-regularised maximum likelihood."""

__version__ = "0.1.0"
