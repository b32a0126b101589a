"""Pose-controllable talking faces from modularized audio-visual latent spaces."""

__version__ = "0.3.0"
