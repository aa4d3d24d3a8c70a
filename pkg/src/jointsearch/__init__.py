"""Joint differentiable search over cell architectures and augmentation policies."""

__version__ = "0.1.0"
