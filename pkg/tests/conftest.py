import numpy as np
import pytest

from shadowkit import raster
from shadowkit.experiments import canonical_scene


@pytest.fixture(scope="session")
def small_scene():
    """Canonical sphere-over-plane at a small resolution for fast tests."""
    return canonical_scene(resolution=(64, 128))


@pytest.fixture(scope="session")
def small_buffers(small_scene):
    scene, camera = small_scene
    sm = raster.render_shadowmap(scene, scene.emitter, (256, 256))
    g = raster.render_gbuffer(scene, camera, scene.emitter)
    fs = raster.assemble_features(g, sm, scene.emitter.size_index)
    return {"scene": scene, "camera": camera, "sm": sm, "g": g, "fs": fs}


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
