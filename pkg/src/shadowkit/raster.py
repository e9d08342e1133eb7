"""Buffer generation: shadow-map pass, G-buffer pass, derived input features,
and motion vectors.

The shadow map stores the radial distance from the emitter center to the
nearest hit through each texel center (misses hold +inf). Feature assembly
projects every covered shade point into the map, looks up the nearest texel,
and applies a constant acne bias on the receiver side of the comparison: the
stored occluder depth becomes ``lookup + b`` (a miss clamps to exactly the
receiver distance), so "in shadow" is ``lookup < z_f - b``, i.e. channel 0
going negative.

Feature channels at camera resolution:

    ch0 = z - z_f            (m)
    ch1 = z / z_f            (dimensionless)
    ch2 = c_e + size_index   (cosine with the softness index as a dc offset)
    ch3 = c_c / d            (1/m)

Uncovered pixels are zeroed. Passes are deterministic and allocate fresh
output buffers; nothing is shared between calls.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .scene import CameraPose, Emitter, Scene, SceneError

__all__ = [
    "FrustumError",
    "ShadowMap",
    "GBuffer",
    "FeatureStack",
    "MotionField",
    "render_shadowmap",
    "render_gbuffer",
    "assemble_features",
    "candidate_channels",
    "motion_vectors",
    "hard_shadow_mask",
    "CANDIDATE_CHANNELS",
    "FEATURE_CHANNELS",
]

DEFAULT_SHADOW_RES = (512, 512)
DEFAULT_BIAS_FACTOR = 1e-3

# Candidate buffer names for feature selection; vector-valued entries expand
# to one scalar channel per component.
CANDIDATE_CHANNELS = (
    "d", "n", "z", "n_e", "z_f", "c_e", "c_c",
    "z-z_f", "z/z_f", "c_c/d", "n.n_e",
)
FEATURE_CHANNELS = ("z-z_f", "z/z_f", "c_e", "c_c/d")


class FrustumError(RuntimeError):
    """A covered camera pixel projects outside the emitter frustum."""


@dataclass(frozen=True)
class EmitterView:
    """Square perspective frustum from the emitter center covering the scene."""

    position: np.ndarray
    forward: np.ndarray
    up: np.ndarray
    right: np.ndarray
    tan_half: float
    resolution: tuple[int, int]

    def texel_rays(self) -> np.ndarray:
        h, w = self.resolution
        xs = ((np.arange(w) + 0.5) / w * 2.0 - 1.0) * self.tan_half
        ys = (1.0 - (np.arange(h) + 0.5) / h * 2.0) * self.tan_half
        d = (self.forward[None, None, :]
             + xs[None, :, None] * self.right[None, None, :]
             + ys[:, None, None] * self.up[None, None, :])
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(row, col, forward_depth) texel coordinates of world points."""
        h, w = self.resolution
        rel = np.asarray(points, dtype=np.float64) - self.position
        zc = rel @ self.forward
        with np.errstate(divide="ignore", invalid="ignore"):
            xn = (rel @ self.right) / (zc * self.tan_half)
            yn = (rel @ self.up) / (zc * self.tan_half)
        col = (xn + 1.0) / 2.0 * w - 0.5
        row = (1.0 - yn) / 2.0 * h - 0.5
        return row, col, zc


def fit_emitter_view(scene: Scene, emitter_center, resolution=DEFAULT_SHADOW_RES,
                     margin: float = 1.05) -> EmitterView:
    """Aim a square frustum from the emitter at the scene bounds.

    Raises if the emitter sits inside geometry or the AABB cannot be covered
    by a sub-160-degree frustum.
    """
    pos = np.asarray(emitter_center, dtype=np.float64)
    for obj in scene.objects:
        if obj.contains(pos):
            raise SceneError("emitter center lies inside scene geometry")
    lo, hi = scene.bounds
    center = (lo + hi) / 2.0
    fwd = center - pos
    dist = np.linalg.norm(fwd)
    if dist < 1e-9:
        raise SceneError("emitter at the scene bounds center")
    fwd = fwd / dist
    aux = np.array([0.0, 0.0, 1.0]) if abs(fwd[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    right = np.cross(fwd, aux)
    right /= np.linalg.norm(right)
    up = np.cross(right, fwd)
    # fit against each primitive's own box: the union box has phantom corners
    corners = np.array([[x, y, z]
                        for obj in scene.objects
                        for olo, ohi in [obj.aabb()]
                        for x in (olo[0], ohi[0])
                        for y in (olo[1], ohi[1])
                        for z in (olo[2], ohi[2])])
    rel = corners - pos
    zc = rel @ fwd
    if np.any(zc <= 0):
        raise SceneError("scene bounds extend behind the emitter")
    tan_needed = np.max(np.maximum(np.abs(rel @ right), np.abs(rel @ up)) / zc)
    tan_half = float(tan_needed * margin)
    if tan_half > math.tan(math.radians(80.0)):
        raise SceneError("emitter too close: frustum cannot cover the scene")
    return EmitterView(pos, fwd, up, right, tan_half, tuple(resolution))


@dataclass(frozen=True)
class ShadowMap:
    """Radial emitter-space depth per texel; +inf marks background."""

    depth: np.ndarray
    view: EmitterView
    scene_diag: float

    @property
    def resolution(self) -> tuple[int, int]:
        return self.view.resolution

    @property
    def default_bias(self) -> float:
        return DEFAULT_BIAS_FACTOR * self.scene_diag


@dataclass(frozen=True)
class GBuffer:
    """Per-pixel nearest-hit attributes through camera pixel centers."""

    d: np.ndarray           # view-space depth along camera forward (m)
    normal: np.ndarray      # (3, H, W) world normal
    position: np.ndarray    # (3, H, W) world position
    n_e: np.ndarray         # (3, H, W) normal in the emitter frame
    z_f: np.ndarray         # pixel-to-emitter distance (m)
    c_e: np.ndarray         # clamped cosine with the emitter direction
    c_c: np.ndarray         # clamped cosine with the view direction
    coverage: np.ndarray    # bool mask
    camera: CameraPose

    @property
    def resolution(self) -> tuple[int, int]:
        return self.coverage.shape


@dataclass(frozen=True)
class FeatureStack:
    """The 4 network input channels plus coverage; float32 at camera resolution."""

    data: np.ndarray
    size_index: float
    coverage: np.ndarray
    bias: float

    def __post_init__(self):
        if self.data.shape[0] != 4 or self.data.ndim != 3:
            raise ValueError(f"feature stack wants (4, H, W), got {self.data.shape}")

    @property
    def resolution(self) -> tuple[int, int]:
        return self.data.shape[1:]

    def with_size_index(self, size_index: float) -> "FeatureStack":
        """Re-target the softness dc offset on channel 2."""
        data = self.data.copy()
        shift = np.float32(size_index - self.size_index)
        data[2][self.coverage] += shift
        return replace(self, data=data, size_index=float(size_index))


@dataclass(frozen=True)
class MotionField:
    """(dy, dx) pixel offsets mapping this frame to the previous one."""

    vectors: np.ndarray     # (2, H, W)
    valid: np.ndarray       # bool (H, W)


def render_shadowmap(scene: Scene, emitter: Emitter,
                     resolution=DEFAULT_SHADOW_RES) -> ShadowMap:
    """Depth pass from the emitter center point through every texel center."""
    view = fit_emitter_view(scene, emitter.center, resolution)
    dirs = view.texel_rays()
    origins = np.broadcast_to(view.position, dirs.shape)
    t, _, _ = scene.intersect(origins, dirs)
    # unit directions: the ray parameter is the radial distance
    return ShadowMap(depth=t, view=view, scene_diag=scene.diagonal)


def render_gbuffer(scene: Scene, camera: CameraPose, emitter: Emitter) -> GBuffer:
    """Nearest-hit attribute pass through camera pixel centers (no MSAA)."""
    dirs = camera.pixel_rays()
    origins = np.broadcast_to(camera.position, dirs.shape)
    t, n, _ = scene.intersect(origins, dirs)
    cov = np.isfinite(t)
    ts = np.where(cov, t, 0.0)
    pos = origins + ts[..., None] * dirs
    d = ts * (dirs @ camera.forward)

    to_e = emitter.center - pos
    z_f = np.linalg.norm(to_e, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        e_dir = to_e / z_f[..., None]
    c_e = np.clip(np.sum(n * e_dir, axis=-1), 0.0, 1.0)
    c_c = np.clip(np.sum(n * -dirs, axis=-1), 0.0, 1.0)

    ev = fit_emitter_view(scene, emitter.center)
    n_e = np.stack([n @ ev.right, n @ ev.up, n @ ev.forward])

    zero = ~cov
    for arr in (d, z_f, c_e, c_c):
        arr[zero] = 0.0
    n_e[:, zero] = 0.0
    return GBuffer(d=d, normal=np.moveaxis(n, -1, 0) * cov, position=np.moveaxis(pos, -1, 0) * cov,
                   n_e=n_e, z_f=z_f, c_e=c_e, c_c=c_c, coverage=cov, camera=camera)


def _shadow_lookup(g: GBuffer, sm: ShadowMap, bias: float) -> np.ndarray:
    """Biased occluder depth per covered pixel (miss clamps to z_f)."""
    row, col, zc = sm.view.project(np.moveaxis(g.position, 0, -1))
    h, w = sm.resolution
    ri = np.rint(row).astype(np.int64)
    ci = np.rint(col).astype(np.int64)
    outside = g.coverage & ((ri < 0) | (ri >= h) | (ci < 0) | (ci >= w) | (zc <= 0))
    if np.any(outside):
        y, x = np.argwhere(outside)[0]
        raise FrustumError(
            f"covered pixel ({y}, {x}) projects outside the emitter frustum")
    ri = np.clip(ri, 0, h - 1)
    ci = np.clip(ci, 0, w - 1)
    lookup = sm.depth[ri, ci]
    # An occluder is never registered behind the receiver by more than the
    # bias: beyond-receiver lookups clamp to the receiver, misses to exactly
    # z_f, so "in shadow" stays `lookup < z_f - bias`, i.e. ch0 < 0.
    z = np.where(np.isfinite(lookup), np.minimum(lookup, g.z_f) + bias, g.z_f)
    return np.where(g.coverage, z, 0.0)


def assemble_features(g: GBuffer, sm: ShadowMap, size_index: float,
                      bias: float | None = None) -> FeatureStack:
    """Derive the 4 input channels from a G-buffer and a shadow map."""
    b = sm.default_bias if bias is None else float(bias)
    z = _shadow_lookup(g, sm, b)
    cov = g.coverage
    with np.errstate(divide="ignore", invalid="ignore"):
        ch1 = np.where(cov, z / g.z_f, 0.0)
        ch3 = np.where(cov, g.c_c / g.d, 0.0)
    ch0 = np.where(cov, z - g.z_f, 0.0)
    ch2 = np.where(cov, g.c_e + float(size_index), 0.0)
    data = np.stack([ch0, ch1, ch2, ch3]).astype(np.float32)
    return FeatureStack(data=data, size_index=float(size_index), coverage=cov, bias=b)


def hard_shadow_mask(stack: FeatureStack) -> np.ndarray:
    """Point-light shadow test: occluder in front of the receiver by > bias."""
    return (stack.data[0] < 0.0) & stack.coverage


def candidate_channels(g: GBuffer, sm: ShadowMap, names, size_index: float = 0.0,
                       bias: float | None = None) -> tuple[np.ndarray, list[str]]:
    """Assemble an extended (C, H, W) stack of candidate buffers.

    ``names`` mixes buffer names (vector-valued ones contribute one channel
    per component, e.g. "n" -> nx, ny, nz) and already-expanded scalar
    labels. Returns the float32 stack (uncovered pixels zeroed) and the
    expanded labels.
    """
    b = sm.default_bias if bias is None else float(bias)
    z = _shadow_lookup(g, sm, b)
    cov = g.coverage
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(cov, z / g.z_f, 0.0)
        slope = np.where(cov, g.c_c / g.d, 0.0)
    table: dict[str, list[tuple[str, np.ndarray]]] = {
        "d": [("d", g.d)],
        "n": [(f"n{ax}", g.normal[i]) for i, ax in enumerate("xyz")],
        "z": [("z", z)],
        "n_e": [(f"n_e{ax}", g.n_e[i]) for i, ax in enumerate("xyz")],
        "z_f": [("z_f", g.z_f)],
        "c_e": [("c_e", g.c_e + float(size_index))],
        "c_c": [("c_c", g.c_c)],
        "z-z_f": [("z-z_f", z - g.z_f)],
        "z/z_f": [("z/z_f", ratio)],
        "c_c/d": [("c_c/d", slope)],
        "n.n_e": [("n.n_e", np.sum(g.normal * g.n_e, axis=0))],
    }
    scalars = {label: arr for entries in table.values() for label, arr in entries}
    channels: list[np.ndarray] = []
    labels: list[str] = []
    for name in names:
        if name in table:
            entries = table[name]
        elif name in scalars:
            entries = [(name, scalars[name])]
        else:
            raise KeyError(f"unknown candidate buffer {name!r}")
        for label, arr in entries:
            channels.append(np.where(cov, arr, 0.0))
            labels.append(label)
    return np.stack(channels).astype(np.float32), labels


def motion_vectors(g_t: GBuffer, camera_prev: CameraPose, g_prev: GBuffer) -> MotionField:
    """Screen-space offsets mapping frame t pixels into frame t-1.

    A pixel is valid when its reprojection lands in bounds on covered
    geometry, the relative depth difference is <= 1%, and the normals agree
    (dot >= 0.9).
    """
    if g_t.resolution != g_prev.resolution:
        raise ValueError("motion vectors need equal resolutions")
    h, w = g_t.resolution
    row, col, depth = camera_prev.project(np.moveaxis(g_t.position, 0, -1))
    ys, xs = np.mgrid[0:h, 0:w]
    vec = np.stack([row - ys, col - xs])
    vec[:, ~g_t.coverage] = 0.0

    ri = np.rint(row).astype(np.int64)
    ci = np.rint(col).astype(np.int64)
    inb = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w) & (depth > 0)
    ris = np.clip(ri, 0, h - 1)
    cis = np.clip(ci, 0, w - 1)

    prev_cov = g_prev.coverage[ris, cis]
    prev_d = g_prev.d[ris, cis]
    with np.errstate(divide="ignore", invalid="ignore"):
        rel_depth = np.abs(prev_d - depth) / np.maximum(depth, 1e-12)
    n_dot = np.sum(g_t.normal * g_prev.normal[:, ris, cis], axis=0)
    valid = (g_t.coverage & inb & prev_cov
             & (rel_depth <= 0.01) & (n_dot >= 0.9))
    return MotionField(vectors=vec, valid=valid)
