"""Dataset generation, the manifest, and sample loading.

Layout under the output directory:

    manifest.json
    <frame_id>/features_k.pfm   k = 0..p   (5 planes: 4 channels + coverage)
    <frame_id>/gbuffer.pfm                 (11 planes, see GBUFFER_PLANES)
    <frame_id>/target_<s>.pfm + .png       one per softness index

Feature stacks are stored with a zero softness offset; loading shifts
channel 2 by the requested size index on covered pixels. Targets are
filtered reference renders. Each frame records the emitter-space occluder
depth range (z_min, z_max) measured from primitive bounding spheres.
Generation is deterministic for a fixed seed: per-frame RNG streams are
derived from (seed, frame).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import fileio, raster, raytrace
from .raster import FeatureStack, GBuffer
from .scene import (CameraPose, Emitter, PerturbationSpec, Scene, Trajectory,
                    load_scene, load_trajectory, sample_perturbation,
                    trajectory_at)
from .training import TrainingSample

__all__ = [
    "DatasetManifest",
    "FrameRecord",
    "GenerateSettings",
    "generate_dataset",
    "load_manifest",
    "load_feature_stack",
    "load_gbuffer",
    "load_target",
    "load_samples",
    "DatasetError",
]

GBUFFER_PLANES = ("d", "nx", "ny", "nz", "px", "py", "pz",
                  "z_f", "c_e", "c_c", "coverage")
DEFAULT_SIZES = (0.0, 1.0, 2.0, 3.0)


class DatasetError(RuntimeError):
    """Missing, truncated, or inconsistent dataset files."""


def _pose_to_dict(pose: CameraPose) -> dict:
    return {
        "position": [float(x) for x in pose.position],
        "forward": [float(x) for x in pose.forward],
        "up": [float(x) for x in pose.up],
        "fov_y": float(pose.fov_y),
        "resolution": list(pose.resolution),
    }


def _pose_from_dict(d: dict) -> CameraPose:
    return CameraPose(d["position"], d["forward"], d["up"], d["fov_y"],
                      tuple(d["resolution"]))


@dataclass(frozen=True)
class GenerateSettings:
    frames: int = 8
    spp: int = raytrace.DEFAULT_SPP
    msaa: int = raytrace.DEFAULT_MSAA
    sigma: float = raytrace.DEFAULT_SIGMA
    sizes: tuple[float, ...] = DEFAULT_SIZES
    shadow_res: tuple[int, int] = raster.DEFAULT_SHADOW_RES
    bias: float | None = None           # None: 1e-3 * scene diagonal
    perturbations: int | None = None    # None: from the scene's perturbation spec
    seed: int = 0


@dataclass
class FrameRecord:
    frame_id: str
    time: float
    camera: dict
    emitter_center: list
    z_min: float
    z_max: float
    features: list[str]
    gbuffer: str
    targets: dict[str, str]


@dataclass
class DatasetManifest:
    root: Path
    scene_file: str
    scene_hash: str
    settings: dict
    frames: list[FrameRecord]
    manifest_hash: str = ""

    @property
    def resolution(self) -> tuple[int, int]:
        return tuple(self.settings["resolution"])

    @property
    def sizes(self) -> tuple[float, ...]:
        return tuple(self.settings["sizes"])


def _canonical(manifest: DatasetManifest) -> str:
    body = {
        "scene_file": manifest.scene_file,
        "scene_hash": manifest.scene_hash,
        "settings": manifest.settings,
        "frames": [vars(f) for f in manifest.frames],
    }
    return json.dumps(body, sort_keys=True, separators=(",", ":"))


def generate_dataset(scene_path, traj_path, out_dir,
                     settings: GenerateSettings = GenerateSettings()) -> DatasetManifest:
    """Render features, reference targets, and metadata for every frame."""
    scene, camera, pspec = load_scene(scene_path)
    trajs = load_trajectory(traj_path, camera) if traj_path else {}
    p = pspec.count if settings.perturbations is None else settings.perturbations
    pspec = replace(pspec, count=max(p, 1))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if settings.frames < 1:
        raise DatasetError("need at least one frame")
    t0, t1 = (0.0, 0.0)
    for traj in trajs.values():
        lo, hi = traj.span
        t0, t1 = min(t0, lo), max(t1, hi)
    times = (np.linspace(t0, t1, settings.frames)
             if settings.frames > 1 else np.array([t0]))

    records: list[FrameRecord] = []
    for i, t in enumerate(times):
        cam = trajectory_at(trajs["camera"], t) if "camera" in trajs else camera
        center = (trajectory_at(trajs["emitter"], t)
                  if "emitter" in trajs else scene.emitter.center)
        emitter = scene.emitter.moved_to(center)
        frame_scene = replace(scene, emitter=emitter)
        frame_dir = out / f"{i:04d}"
        frame_dir.mkdir(exist_ok=True)

        states = [(cam, emitter)]
        if p > 0:
            rng = np.random.default_rng(np.random.SeedSequence([settings.seed, i]))
            states += sample_perturbation(frame_scene, cam, pspec, rng)[:p]

        feature_files = []
        gb0 = None
        for k, (cam_k, em_k) in enumerate(states):
            sm = raster.render_shadowmap(frame_scene, em_k, settings.shadow_res)
            g = raster.render_gbuffer(frame_scene, cam_k, em_k)
            fs = raster.assemble_features(g, sm, 0.0, bias=settings.bias)
            path = frame_dir / f"features_{k}.pfm"
            fileio.save_floatmap(path, np.concatenate(
                [fs.data, fs.coverage[None].astype(np.float32)]))
            feature_files.append(str(path.relative_to(out)))
            if k == 0:
                gb0 = g
        gb_path = frame_dir / "gbuffer.pfm"
        fileio.save_floatmap(gb_path, _gbuffer_planes(gb0))

        targets = raytrace.trace_targets(frame_scene, cam, center, settings.sizes,
                                         spp=settings.spp, msaa=settings.msaa,
                                         seed=settings.seed, frame=i)
        target_files = {}
        for s in settings.sizes:
            img = raytrace.gaussian_filter(targets[s], settings.sigma)
            tpath = frame_dir / f"target_{s:g}.pfm"
            fileio.save_floatmap(tpath, img.values.astype(np.float32))
            fileio.save_gray_png(str(tpath) + ".png", img.values)
            target_files[f"{s:g}"] = str(tpath.relative_to(out))

        z_min, z_max = frame_scene.occluder_depth_range(center)
        records.append(FrameRecord(
            frame_id=f"{i:04d}", time=float(t), camera=_pose_to_dict(cam),
            emitter_center=[float(x) for x in center],
            z_min=z_min, z_max=z_max,
            features=feature_files, gbuffer=str(gb_path.relative_to(out)),
            targets=target_files,
        ))

    scene_hash = hashlib.sha256(Path(scene_path).read_bytes()).hexdigest()
    manifest = DatasetManifest(
        root=out, scene_file=str(scene_path), scene_hash=scene_hash,
        settings={
            "frames": settings.frames, "spp": settings.spp, "msaa": settings.msaa,
            "sigma": settings.sigma, "sizes": list(settings.sizes),
            "shadow_res": list(settings.shadow_res),
            "bias": settings.bias, "perturbations": p, "seed": settings.seed,
            "resolution": list(camera.resolution),
        },
        frames=records,
    )
    manifest.manifest_hash = hashlib.sha256(_canonical(manifest).encode()).hexdigest()
    payload = json.loads(_canonical(manifest))
    payload["manifest_hash"] = manifest.manifest_hash
    (out / "manifest.json").write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")
    return manifest


def _gbuffer_planes(g: GBuffer) -> np.ndarray:
    return np.stack([
        g.d, g.normal[0], g.normal[1], g.normal[2],
        g.position[0], g.position[1], g.position[2],
        g.z_f, g.c_e, g.c_c, g.coverage.astype(np.float64),
    ]).astype(np.float32)


def load_manifest(root) -> DatasetManifest:
    """Read and integrity-check a dataset directory."""
    root = Path(root)
    try:
        payload = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise DatasetError(f"{root}: no manifest.json") from exc
    frames = [FrameRecord(**f) for f in payload["frames"]]
    manifest = DatasetManifest(
        root=root, scene_file=payload["scene_file"], scene_hash=payload["scene_hash"],
        settings=payload["settings"], frames=frames,
        manifest_hash=payload.get("manifest_hash", ""),
    )
    h, w = manifest.resolution
    for fr in frames:
        for rel in [*fr.features, fr.gbuffer, *fr.targets.values()]:
            path = root / rel
            if not path.exists():
                raise DatasetError(f"missing file {path}")
            try:
                c, fh, fw = fileio.floatmap_shape(path)
            except fileio.FormatError as exc:
                raise DatasetError(str(exc)) from exc
            if (fh, fw) != (h, w):
                raise DatasetError(
                    f"{path}: resolution {fh}x{fw} does not match manifest {h}x{w}")
            # catch truncation beyond the header
            fileio.load_floatmap(path)
    return manifest


def load_feature_stack(manifest: DatasetManifest, frame: int, k: int = 0,
                       size_index: float = 0.0) -> FeatureStack:
    rec = manifest.frames[frame]
    planes = fileio.load_floatmap(manifest.root / rec.features[k])
    cov = planes[4] > 0.5
    stack = FeatureStack(data=planes[:4], size_index=0.0, coverage=cov,
                         bias=float("nan"))
    return stack.with_size_index(size_index) if size_index else stack


def load_gbuffer(manifest: DatasetManifest, frame: int) -> GBuffer:
    """Rebuild the unperturbed G-buffer of a frame.

    Emitter-frame normals are not persisted; the loaded buffer carries zeros
    there (candidate-stack assembly re-renders instead of loading).
    """
    rec = manifest.frames[frame]
    planes = fileio.load_floatmap(manifest.root / rec.gbuffer).astype(np.float64)
    cam = _pose_from_dict(rec.camera)
    cov = planes[10] > 0.5
    return GBuffer(d=planes[0], normal=planes[1:4], position=planes[4:7],
                   n_e=np.zeros_like(planes[1:4]), z_f=planes[7],
                   c_e=planes[8], c_c=planes[9], coverage=cov, camera=cam)


def load_target(manifest: DatasetManifest, frame: int, size_index: float) -> np.ndarray:
    rec = manifest.frames[frame]
    key = f"{float(size_index):g}"
    if key not in rec.targets:
        raise DatasetError(f"frame {frame} has no target for size {key}")
    return fileio.load_floatmap(manifest.root / rec.targets[key])[0].astype(np.float64)


def load_samples(manifest: DatasetManifest, frames=None, sizes=None,
                 perturbations: int | None = None) -> list[TrainingSample]:
    """TrainingSamples for the (frame, size) grid, unperturbed stack first."""
    if frames is None:
        frames = range(len(manifest.frames))
    if sizes is None:
        sizes = manifest.sizes
    p_avail = len(manifest.frames[0].features) - 1
    p = p_avail if perturbations is None else min(perturbations, p_avail)
    samples = []
    for fi in frames:
        stacks0 = [load_feature_stack(manifest, fi, k) for k in range(p + 1)]
        for s in sizes:
            shifted = tuple(st.with_size_index(s).data for st in stacks0)
            samples.append(TrainingSample(
                stacks=shifted, target=load_target(manifest, fi, s),
                size_index=float(s)))
    return samples
