"""Directed greybox fuzzing engine over a simulated program under test."""

__version__ = "0.1.0"
