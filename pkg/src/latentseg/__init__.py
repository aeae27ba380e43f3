"""Resolution- and pose-aware 2D segmentation networks with a latent-space transform module."""

__version__ = "0.1.0"
