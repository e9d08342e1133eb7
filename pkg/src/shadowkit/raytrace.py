"""Brute-force visibility reference for a spherical area emitter.

Per sub-pixel sample: find the primary hit through the camera, then cast
shadow rays into the emitter's silhouette cone (uniform in solid angle) and
average binary visibility. Sub-pixels follow fixed MSAA sample patterns.
Shadow rays start at hit + eps * normal and occluders are tested double-sided.

Randomness is reproducible regardless of scheduling: one counter-based
stream per (seed, frame, pass, size) drawing per-pixel arrays in fixed order.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .scene import CameraPose, Emitter, Scene

__all__ = [
    "TargetImage",
    "trace_visibility",
    "trace_targets",
    "gaussian_filter",
    "sample_visibility",
    "MSAA_OFFSETS",
]

DEFAULT_SPP = 256
DEFAULT_MSAA = 8
DEFAULT_SIGMA = 0.5
EPS_FACTOR = 1e-4

# Sub-pixel offsets in [0, 1)^2 (x, y), standard rooks/rotated-grid patterns.
MSAA_OFFSETS: dict[int, tuple[tuple[float, float], ...]] = {
    1: ((0.5, 0.5),),
    2: ((0.75, 0.25), (0.25, 0.75)),
    4: ((0.375, 0.125), (0.875, 0.375), (0.125, 0.625), (0.625, 0.875)),
    8: ((0.5625, 0.3125), (0.4375, 0.6875), (0.8125, 0.5625), (0.3125, 0.1875),
        (0.1875, 0.8125), (0.0625, 0.4375), (0.6875, 0.9375), (0.9375, 0.0625)),
}


@dataclass(frozen=True)
class TargetImage:
    """Reference visibility in [0, 1] at camera resolution."""

    values: np.ndarray
    size_index: float
    spp: int
    msaa: int

    @property
    def resolution(self) -> tuple[int, int]:
        return self.values.shape


def _stream(seed: int, frame: int, pass_idx: int, size_slot: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(
        key=np.random.SeedSequence([seed, frame, pass_idx, size_slot]).generate_state(2, np.uint64)))


def _offset_rays(camera: CameraPose, ox: float, oy: float) -> np.ndarray:
    import math
    h, w = camera.resolution
    half_h = math.tan(camera.fov_y / 2.0)
    half_w = half_h * (w / h)
    xs = ((np.arange(w) + ox) / w * 2.0 - 1.0) * half_w
    ys = (1.0 - (np.arange(h) + oy) / h * 2.0) * half_h
    d = (camera.forward[None, None, :]
         + xs[None, :, None] * camera.right[None, None, :]
         + ys[:, None, None] * camera.up[None, None, :])
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def _orthobasis(w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Two unit vectors orthogonal to each unit vector in w (..., 3)."""
    a = np.where(np.abs(w[..., 2:3]) < 0.9,
                 np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0]))
    t1 = np.cross(w, a)
    t1 /= np.linalg.norm(t1, axis=-1, keepdims=True)
    t2 = np.cross(w, t1)
    return t1, t2


def sample_visibility(scene: Scene, points: np.ndarray, normals: np.ndarray,
                      emitter: Emitter, n_rays: int, rng: np.random.Generator,
                      eps: float | None = None) -> np.ndarray:
    """Fraction of unblocked shadow rays per point, (N,) in [0, 1].

    Directions are uniform in solid angle inside the cone subtending the
    emitter sphere (half-angle asin(r_e / distance)); each ray runs until it
    enters the emitter surface.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    nrm = np.atleast_2d(np.asarray(normals, dtype=np.float64))
    if eps is None:
        eps = EPS_FACTOR * scene.diagonal
    to_e = emitter.center - pts
    dist = np.linalg.norm(to_e, axis=-1)
    inside = dist <= emitter.radius
    wn = to_e / np.maximum(dist, 1e-300)[:, None]

    r_e = emitter.radius
    origins = pts + eps * nrm
    if r_e == 0.0:
        dirs = np.broadcast_to(wn[:, None, :], (len(pts), n_rays, 3))
        t_max = np.broadcast_to(dist[:, None], (len(pts), n_rays))
    else:
        cos_e = np.sqrt(np.clip(1.0 - (r_e / np.maximum(dist, r_e)) ** 2, 0.0, 1.0))
        u = rng.random((len(pts), n_rays))
        v = rng.random((len(pts), n_rays))
        cos_t = 1.0 - u * (1.0 - cos_e[:, None])
        sin_t = np.sqrt(np.clip(1.0 - cos_t ** 2, 0.0, 1.0))
        phi = 2.0 * np.pi * v
        t1, t2 = _orthobasis(wn)
        dirs = (cos_t[..., None] * wn[:, None, :]
                + (sin_t * np.cos(phi))[..., None] * t1[:, None, :]
                + (sin_t * np.sin(phi))[..., None] * t2[:, None, :])
        # run each ray to its entry point on the emitter sphere
        oc = origins[:, None, :] - emitter.center
        b = np.sum(oc * dirs, axis=-1)
        disc = b * b - (np.sum(oc * oc, axis=-1) - r_e ** 2)
        t_max = -b - np.sqrt(np.maximum(disc, 0.0))
    blocked = scene.occluded(np.broadcast_to(origins[:, None, :], dirs.shape),
                             dirs, t_max)
    vis = 1.0 - blocked.mean(axis=1)
    vis[inside] = 1.0
    return vis


def trace_visibility(scene: Scene, camera: CameraPose, emitter: Emitter,
                     spp: int = DEFAULT_SPP, msaa: int = DEFAULT_MSAA,
                     *, seed: int = 0, frame: int = 0) -> TargetImage:
    """Full-frame reference render; ``spp`` counts total shadow rays per pixel."""
    out = trace_targets(scene, camera, emitter.center, [emitter.size_index],
                        spp=spp, msaa=msaa, seed=seed, frame=frame)
    return out[emitter.size_index]


def trace_targets(scene: Scene, camera: CameraPose, emitter_center,
                  size_indices, spp: int = DEFAULT_SPP, msaa: int = DEFAULT_MSAA,
                  *, seed: int = 0, frame: int = 0) -> dict[float, TargetImage]:
    """Render all softness levels in one sweep over shared primary hits."""
    if spp < 1:
        raise ValueError("spp must be >= 1")
    if msaa not in MSAA_OFFSETS:
        raise ValueError(f"msaa must be one of {sorted(MSAA_OFFSETS)}")
    sizes = [float(s) for s in size_indices]
    rays_per = max(spp // msaa, 1)
    h, w = camera.resolution
    acc = {s: np.zeros((h, w)) for s in sizes}
    for pi, (ox, oy) in enumerate(MSAA_OFFSETS[msaa]):
        dirs = _offset_rays(camera, ox, oy)
        origins = np.broadcast_to(camera.position, dirs.shape)
        t, n, _ = scene.intersect(origins, dirs)
        cov = np.isfinite(t)
        pts = camera.position + np.where(cov, t, 0.0)[..., None] * dirs
        for si, s in enumerate(sizes):
            em = Emitter(emitter_center, s)
            vis = np.ones((h, w))
            if np.any(cov):
                rng = _stream(seed, frame, pi, si)
                vis[cov] = sample_visibility(scene, pts[cov], n[cov], em,
                                             rays_per, rng)
            acc[s] += vis
    k = len(MSAA_OFFSETS[msaa])
    return {s: TargetImage(values=acc[s] / k, size_index=s,
                           spp=rays_per * msaa, msaa=msaa)
            for s in sizes}


def _gauss_kernel(sigma: float) -> np.ndarray:
    radius = int(np.floor(3.0 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(xs ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def _blur_axis(a: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = len(kernel) // 2
    if radius == 0:
        return a * kernel[0]
    pad = [(0, 0)] * a.ndim
    pad[axis] = (radius, radius)
    ap = np.pad(a, pad, mode="edge")
    out = np.zeros_like(a)
    for i, kv in enumerate(kernel):
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(i, i + a.shape[axis])
        out += kv * ap[tuple(sl)]
    return out


def gaussian_filter(img, sigma: float):
    """Separable Gaussian, kernel truncated at +-3 sigma, edges clamped.

    sigma = 0 is the exact identity. Accepts a TargetImage or a bare array
    and returns the same kind.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    arr = img.values if isinstance(img, TargetImage) else np.asarray(img)
    if sigma == 0.0:
        out = arr.copy()
    else:
        kernel = _gauss_kernel(sigma)
        out = _blur_axis(_blur_axis(arr, kernel, axis=-2), kernel, axis=-1)
    if isinstance(img, TargetImage):
        return replace(img, values=out)
    return out
