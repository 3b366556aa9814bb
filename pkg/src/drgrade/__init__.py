"""Diabetic retinopathy grading over precomputed encoder embeddings."""

__version__ = "0.1.0"
