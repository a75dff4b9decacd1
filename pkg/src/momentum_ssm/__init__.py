"""Selective state-space layers with momentum-augmented recurrences,
parallel affine scans and a small numpy training pipeline."""

__version__ = "0.1.0"
