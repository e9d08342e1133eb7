"""Self-contained experiment recipes built from the canonical scene.

The canonical test scene is a sphere hovering over a ground rectangle with
the emitter overhead: its penumbra has a closed-form description under the
bounding-sphere model, which makes it the reference configuration for
sizing, overfit, and selection runs.
"""

from __future__ import annotations

import io
import math
from pathlib import Path

import numpy as np

from . import analysis, raster, raytrace, network, training
from . import autodiff as ad
from .scene import CameraPose, Emitter, Plane, Scene, Sphere

__all__ = [
    "canonical_scene",
    "canonical_scene_toml",
    "orbit_trajectory_toml",
    "emitter_pan_trajectory_toml",
    "run_overfit",
    "run_feature_selection",
]


def canonical_scene(sphere_height: float = 1.2, sphere_radius: float = 0.5,
                    emitter_height: float = 4.0, size_index: float = 2.0,
                    camera_pos=(0.0, 2.3, -2.7), look_at=(0.0, 0.0, 0.3),
                    fov_deg: float = 45.0, resolution=(128, 256),
                    ground: float = 8.0) -> tuple[Scene, CameraPose]:
    """Sphere-over-plane scene with an overhead emitter."""
    objects = (
        Plane(point=(0.0, 0.0, 0.0), normal=(0.0, 1.0, 0.0),
              half_extent=(ground, ground)),
        Sphere(center=(0.0, sphere_height, 0.0), radius=sphere_radius),
    )
    emitter = Emitter((0.0, emitter_height, 0.0), size_index)
    camera = CameraPose.look_at(camera_pos, look_at,
                                fov_y=math.radians(fov_deg),
                                resolution=tuple(resolution))
    return Scene(objects, emitter), camera


def canonical_scene_toml(sphere_height: float = 1.2, sphere_radius: float = 0.5,
                         emitter_height: float = 4.0, size_index: float = 2.0,
                         camera_pos=(0.0, 2.3, -2.7), look_at=(0.0, 0.0, 0.3),
                         fov_deg: float = 45.0, resolution=(128, 256),
                         ground: float = 8.0, perturbations: int = 3,
                         camera_scale: float = 0.01,
                         emitter_scale: float = 0.1) -> str:
    def vec(v):
        return "[" + ", ".join(f"{float(x)!r}" for x in v) + "]"

    return f"""[scene]
[[scene.objects]]
type = "plane"
point = [0.0, 0.0, 0.0]
normal = [0.0, 1.0, 0.0]
half_extent = [{float(ground)!r}, {float(ground)!r}]

[[scene.objects]]
type = "sphere"
center = [0.0, {float(sphere_height)!r}, 0.0]
radius = {float(sphere_radius)!r}

[emitter]
center = [0.0, {float(emitter_height)!r}, 0.0]
size_index = {float(size_index)!r}

[camera]
position = {vec(camera_pos)}
look_at = {vec(look_at)}
fov_deg = {float(fov_deg)!r}
resolution = [{resolution[0]}, {resolution[1]}]

[perturbation]
count = {perturbations}
camera_scale = {float(camera_scale)!r}
emitter_scale = {float(emitter_scale)!r}
"""


def orbit_trajectory_toml(radius: float = 3.5, height: float = 2.3,
                          look_at=(0.0, 0.0, 0.0), angle_deg: float = 40.0,
                          keys: int = 5, duration: float = 1.0) -> str:
    """Camera arc around the scene center at constant height."""
    parts = []
    for i in range(keys):
        t = duration * i / max(keys - 1, 1)
        a = math.radians(angle_deg) * (i / max(keys - 1, 1) - 0.5)
        pos = (radius * math.sin(a), height, -radius * math.cos(a))
        parts.append(
            "[[camera_keys]]\n"
            f"time = {t!r}\n"
            f"position = [{pos[0]!r}, {pos[1]!r}, {pos[2]!r}]\n"
            f"look_at = [{float(look_at[0])!r}, {float(look_at[1])!r}, "
            f"{float(look_at[2])!r}]\n")
    return "\n".join(parts)


def emitter_pan_trajectory_toml(start=(-0.8, 4.0, 0.0), end=(0.8, 4.0, 0.0),
                                keys: int = 2, duration: float = 1.0) -> str:
    parts = []
    for i in range(keys):
        t = duration * i / max(keys - 1, 1)
        w = i / max(keys - 1, 1)
        c = tuple((1 - w) * s + w * e for s, e in zip(start, end))
        parts.append(
            "[[emitter_keys]]\n"
            f"time = {t!r}\n"
            f"center = [{c[0]!r}, {c[1]!r}, {c[2]!r}]\n")
    return "\n".join(parts)


def render_feature_target(scene: Scene, camera: CameraPose, size_index: float,
                          spp: int = 128, msaa: int = 4, sigma: float = 0.5,
                          shadow_res=(512, 512), seed: int = 0, frame: int = 0):
    """One (FeatureStack, target image) supervised pair."""
    em = scene.emitter.with_size(size_index)
    sm = raster.render_shadowmap(scene, em, shadow_res)
    g = raster.render_gbuffer(scene, camera, em)
    fs = raster.assemble_features(g, sm, size_index)
    tgt = raytrace.trace_targets(scene, camera, em.center, [size_index],
                                 spp=spp, msaa=msaa, seed=seed, frame=frame)
    img = raytrace.gaussian_filter(tgt[size_index], sigma)
    return fs, img.values


def run_overfit(layers: int = 3, steps: int = 500, seed: int = 0,
                deterministic: bool = False,
                resolution=(128, 256)) -> dict[str, float]:
    """Memorize a single canonical frame in both first-level modes.

    Returns the final full-frame MSE per mode; a healthy setup lands well
    under 0.02 within 500 steps.
    """
    scene, camera = canonical_scene(resolution=resolution)
    fs, target = render_feature_target(scene, camera, scene.emitter.size_index,
                                       seed=seed)
    sample = training.TrainingSample(stacks=(fs.data,), target=target,
                                     size_index=fs.size_index)
    out = {}
    for mode, shuffle in (("space-to-depth", True), ("plain", False)):
        cfg = network.NetworkConfig(layers=layers, use_space_to_depth=shuffle)
        result = training.train([sample], cfg, training.LossConfig(perturbations=0),
                                steps=steps, seed=seed, deterministic=deterministic)
        with ad.no_grad():
            y = network.forward(result.weights, cfg, sample.stacks[0]).data[0]
        out[mode] = analysis.mse(y, target)
    return out


def run_feature_selection(scene_path=None, frames: int = 6, seed: int = 0,
                          steps: int = 240, noise_channel: bool = False,
                          spp: int = 64, deterministic: bool = False,
                          resolution=(64, 128), size_index: float = 2.0,
                          tiers=(), threshold: float = analysis.PRUNE_THRESHOLD):
    """Tiered pruning on freshly rendered candidate stacks.

    The candidate set defaults to the four production channels plus an
    optional injected white-noise channel; ``tiers`` can stage additional
    named buffers for later rounds.
    """
    from .scene import load_scene

    if scene_path:
        scene, camera, _ = load_scene(scene_path)
    else:
        scene, camera = canonical_scene(resolution=resolution)
    camera = CameraPose(camera.position, camera.forward, camera.up,
                        camera.fov_y, tuple(resolution))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5E1]))

    em = scene.emitter.with_size(size_index)
    sm_cache = raster.render_shadowmap(scene, em)
    gbuffers = []
    targets = []
    cam_traj = []
    for i in range(frames):
        # small deterministic camera jitter gives the trainer some variety
        jitter = 0.08 * np.array([math.sin(1.7 * i), 0.0, math.cos(2.3 * i)])
        cam_i = CameraPose(camera.position + jitter, camera.forward, camera.up,
                           camera.fov_y, camera.resolution)
        g = raster.render_gbuffer(scene, cam_i, em)
        gbuffers.append(g)
        cam_traj.append(cam_i)
        tgt = raytrace.trace_targets(scene, cam_i, em.center, [size_index],
                                     spp=spp, msaa=2, seed=seed, frame=i)
        targets.append(raytrace.gaussian_filter(tgt[size_index], 0.5).values)

    noise_stacks = [rng.normal(0.0, 1.0, size=camera.resolution).astype(np.float32)
                    for _ in range(frames)]

    def build_stacks(names):
        real = [n for n in names if n != "noise"]
        stacks = []
        for i, g in enumerate(gbuffers):
            data, labels = raster.candidate_channels(g, sm_cache, real, size_index)
            chans = {lbl: data[j] for j, lbl in enumerate(labels)}
            chans["noise"] = noise_stacks[i]
            stacks.append(np.stack([chans[n] for n in names]))
        return stacks

    def trainer(names):
        stacks = build_stacks(names)
        samples = [training.TrainingSample(stacks=(s,), target=t,
                                           size_index=size_index)
                   for s, t in zip(stacks[:-1], targets[:-1])]
        heldout = [training.TrainingSample(stacks=(s,), target=t,
                                           size_index=size_index)
                   for s, t in zip(stacks[-1:], targets[-1:])]
        cfg = network.NetworkConfig(layers=2, base_channels=16,
                                    in_channels=len(names))
        result = training.train(samples, cfg, training.LossConfig(perturbations=0),
                                heldout=heldout, steps=steps, seed=seed,
                                deterministic=deterministic)

        def phi(stack):
            with ad.no_grad():
                return network.forward(result.weights, cfg, stack).data[0]

        return analysis.CandidateFit(phi=phi, stacks=tuple(stacks),
                                     heldout_mse=result.heldout_mse)

    channels = list(raster.FEATURE_CHANNELS)
    if noise_channel:
        channels.append("noise")
    sel_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5E2]))
    return analysis.select_features(trainer, channels, tiers=tiers,
                                    threshold=threshold, rng=sel_rng)
