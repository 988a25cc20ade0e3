"""Planning-guided hand-object interaction synthesis with diffusion models."""

__version__ = "0.1.0"
