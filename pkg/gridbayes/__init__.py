"""
gridbayes - Bayesian grid segmentation of radar point clouds.

This package contains everything the CLI and the REST inference service share:
- tensor: a small reverse-mode differentiation engine and Adam
- layers / network: variational and MC-dropout convolution layers, ASPP network
- services: scene gridding, synthetic world, training, uncertainty, metrics
"""

__version__ = "1.0.0"
