"""Learned hard and soft shadows from vanilla shadow-map buffers.

Submodules:
    scene      procedural geometry, emitter, camera, trajectories, jitter
    raster     shadow-map / G-buffer passes, input features, motion vectors
    raytrace   Monte-Carlo visibility reference and Gaussian filtering
    autodiff   minimal reverse-mode tensor engine plus Adam
    network    the compact encoder-decoder and its sizing rules
    training   losses (perceptual + perturbation) and the training loop
    analysis   sensitivity, feature selection, penumbra model, temporal metric
    dataset    generation, manifest, and loading
    cli        the `shadowkit` command
"""

from . import analysis, autodiff, dataset, fileio, network, raster, raytrace, scene, training

__version__ = "0.1.0"

__all__ = [
    "analysis", "autodiff", "dataset", "fileio", "network",
    "raster", "raytrace", "scene", "training",
]
