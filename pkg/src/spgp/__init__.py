"""Structure-prototype guided pooling for graph classification."""

__version__ = "0.1.0"
