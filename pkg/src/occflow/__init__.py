"""Building shape completion from partial point clouds.

Two-stage pipeline: an occupancy-function autoencoder conditioned on a point
encoder, then flow-matching latent diffusion over the autoencoder's latent
space, with multiresolution isosurface extraction to meshes.
"""

__version__ = "0.1.0"
