"""N-player contingency games solved as mixed complementarity problems."""

__version__ = "0.1.0"
