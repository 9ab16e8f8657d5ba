"""Small-model NL2SQL pipeline with execution-based evaluation."""

__version__ = "0.1.0"
