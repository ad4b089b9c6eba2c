"""Desk-scale splat-and-distill: lift 2D features into Gaussians, render them to new views, distill."""

__version__ = "0.1.0"
