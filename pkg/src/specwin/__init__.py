"""Measure the speculation window left behind by LFENCE/JMP."""

__version__ = "0.1.0"
