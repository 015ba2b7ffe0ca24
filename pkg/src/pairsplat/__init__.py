"""Paired-dropout training for 3D Gaussian splatting on synthetic scenes."""

from .dropout import DropoutMask, sample_mask
from .render import render, render_backward
from .scene import Camera, GaussianField, GaussianPrimitive, ViewSet
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Camera", "DropoutMask", "GaussianField", "GaussianPrimitive", "TrainConfig", "ViewSet",
    "render", "render_backward", "sample_mask", "train",
]
