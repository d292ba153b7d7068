"""Differentiable Gaussian splatting: cameras, EWA projection and tile compositing."""

from .camera import Camera, default_camera, load_cameras, look_at, orbit_cameras, save_cameras
from .projection import ProjectedGaussian, compose_covariance, project_gaussian, project_gaussians
from .splat import (RenderGradients, RenderOptions, RenderOutput, SplatScene, render, render_backward,
                    render_reference)
