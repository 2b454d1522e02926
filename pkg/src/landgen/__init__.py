"""Autoregressive generative modeling and probabilistic inpainting for
categorical land-cover rasters, with a spatial CAR benchmark model."""

__version__ = "0.1.0"
