"""recency-lab: a desk-scale laboratory for training-order signals in transformer activations."""

__version__ = "0.1.0"
