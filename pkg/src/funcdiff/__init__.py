"""Diffusion posterior sampling in function space: score training, guidance and Gaussian oracles."""
