"""Semantic 3D occupancy prediction at desk scale.

Pipeline: synthetic scene -> simulated LiDAR sweeps -> diffusion-based
point-cloud completion -> hybrid Gaussian initialization -> multi-view
anchor feature fusion -> voxel splatting -> occupancy metrics.  All
trainable parts run on the reverse-mode tape in `autodiff`.
"""

__version__ = "0.1.0"
