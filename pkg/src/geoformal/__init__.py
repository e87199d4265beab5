"""Formal geometry toolkit: caption/program language, symbolic solver, and a
toy diagram-language alignment stack with its training objectives and metrics.
"""

__version__ = "0.1.0"
