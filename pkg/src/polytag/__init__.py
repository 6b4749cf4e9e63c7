"""polytag: multi-source language-adapter ensembling for sequence labeling."""

__version__ = "0.1.0"
