"""Procedural scenes, spherical emitter, pinhole camera, and keyframed motion.

Everything is in SI units (meters, seconds, radians). Scenes are plain
containers of analytic primitives; rendering modules cast rays against them
via the vectorized ``intersect`` methods. All objects are immutable after
construction and safe to share across threads; randomized operations take an
explicit ``numpy.random.Generator``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

__all__ = [
    "SceneError",
    "Emitter",
    "CameraPose",
    "Plane",
    "Sphere",
    "Box",
    "TriMesh",
    "Scene",
    "Trajectory",
    "PerturbationSpec",
    "emitter_radius",
    "trajectory_at",
    "sample_perturbation",
    "load_scene",
    "load_trajectory",
]

# Emitter size convention: size index 0 is a point light, 4 the largest
# emitter (50 cm diameter). The mapping to radius is linear.
EMITTER_MAX_DIAMETER = 0.5
EMITTER_SIZE_MAX = 4.0

# Point lights still get perturbed; 1 cm floor on the emitter displacement scale.
PERTURB_RADIUS_FLOOR = 0.01


class SceneError(ValueError):
    """Invalid scene, camera, or trajectory description."""


def emitter_radius(size_index: float) -> float:
    """Emitter radius in meters for a softness index in [0, 4]."""
    if not 0.0 <= size_index <= EMITTER_SIZE_MAX:
        raise SceneError(f"size_index {size_index} outside [0, {EMITTER_SIZE_MAX}]")
    return size_index * (EMITTER_MAX_DIAMETER / 2.0) / EMITTER_SIZE_MAX


def _as_vec3(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.shape != (3,):
        raise SceneError(f"expected a 3-vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise SceneError("non-finite 3-vector")
    v = v.copy()
    v.flags.writeable = False
    return v


def _unit(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise SceneError("zero-length direction")
    return v / n


@dataclass(frozen=True)
class Emitter:
    """Spherical area emitter; radius is derived from the softness index."""

    center: np.ndarray
    size_index: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "center", _as_vec3(self.center))
        object.__setattr__(self, "size_index", float(self.size_index))
        emitter_radius(self.size_index)  # range check

    @property
    def radius(self) -> float:
        return emitter_radius(self.size_index)

    def moved_to(self, center) -> "Emitter":
        return Emitter(center, self.size_index)

    def with_size(self, size_index: float) -> "Emitter":
        return Emitter(self.center, size_index)


@dataclass(frozen=True)
class CameraPose:
    """Pinhole camera. ``resolution`` is (height, width) in pixels.

    ``forward`` and ``up`` are re-orthonormalized on construction; ``fov_y``
    is the full vertical field of view in radians.
    """

    position: np.ndarray
    forward: np.ndarray
    up: np.ndarray
    fov_y: float
    resolution: tuple[int, int]

    def __post_init__(self):
        pos = _as_vec3(self.position)
        f = _unit(np.asarray(self.forward, dtype=np.float64))
        u0 = np.asarray(self.up, dtype=np.float64)
        r = np.cross(f, u0)
        if np.linalg.norm(r) < 1e-12:
            raise SceneError("camera up is parallel to forward")
        r = _unit(r)
        u = np.cross(r, f)
        for name, v in (("position", pos), ("forward", f), ("up", u)):
            v = np.ascontiguousarray(v)
            v.flags.writeable = False
            object.__setattr__(self, name, v)
        if not 0.0 < self.fov_y < math.pi:
            raise SceneError(f"fov_y {self.fov_y} outside (0, pi)")
        h, w = self.resolution
        if h <= 0 or w <= 0:
            raise SceneError("resolution must be positive")
        object.__setattr__(self, "resolution", (int(h), int(w)))

    @classmethod
    def look_at(cls, position, target, up=(0.0, 1.0, 0.0), fov_y=math.radians(45.0),
                resolution=(128, 256)) -> "CameraPose":
        position = _as_vec3(position)
        target = _as_vec3(target)
        return cls(position, target - position, up, fov_y, resolution)

    @property
    def right(self) -> np.ndarray:
        return np.cross(self.forward, self.up)

    @property
    def focal_px(self) -> float:
        """Focal length in pixels (vertical)."""
        h, _ = self.resolution
        return (h / 2.0) / math.tan(self.fov_y / 2.0)

    def pixel_rays(self) -> np.ndarray:
        """Unit directions through every pixel center, shape (H, W, 3)."""
        h, w = self.resolution
        half_h = math.tan(self.fov_y / 2.0)
        half_w = half_h * (w / h)
        xs = ((np.arange(w) + 0.5) / w * 2.0 - 1.0) * half_w
        ys = (1.0 - (np.arange(h) + 0.5) / h * 2.0) * half_h
        d = (self.forward[None, None, :]
             + xs[None, :, None] * self.right[None, None, :]
             + ys[:, None, None] * self.up[None, None, :])
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Project world points (..., 3) to pixel coordinates.

        Returns (row, col, view_depth); pixel centers land on integer
        coordinates. Points behind the camera get non-positive depth.
        """
        h, w = self.resolution
        half_h = math.tan(self.fov_y / 2.0)
        half_w = half_h * (w / h)
        rel = np.asarray(points, dtype=np.float64) - self.position
        zc = rel @ self.forward
        xc = rel @ self.right
        yc = rel @ self.up
        with np.errstate(divide="ignore", invalid="ignore"):
            xn = xc / (zc * half_w)
            yn = yc / (zc * half_h)
        col = (xn + 1.0) / 2.0 * w - 0.5
        row = (1.0 - yn) / 2.0 * h - 0.5
        return row, col, zc


# ---------------------------------------------------------------------------
# Primitives. Each returns hit distance +inf on miss and the outward
# geometric normal at the hit. Directions passed in must be unit length.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Plane:
    """Finite rectangle: anchor point, unit normal, in-plane half extents."""

    point: np.ndarray
    normal: np.ndarray
    half_extent: tuple[float, float] = (10.0, 10.0)
    occluder: bool = False

    def __post_init__(self):
        object.__setattr__(self, "point", _as_vec3(self.point))
        n = _unit(np.asarray(self.normal, dtype=np.float64))
        n.flags.writeable = False
        object.__setattr__(self, "normal", n)
        su, sv = self.half_extent
        if su <= 0 or sv <= 0:
            raise SceneError("plane half_extent must be positive")
        object.__setattr__(self, "half_extent", (float(su), float(sv)))

    @property
    def tangents(self) -> tuple[np.ndarray, np.ndarray]:
        n = self.normal
        a = np.array([0.0, 0.0, 1.0]) if abs(n[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        u = _unit(np.cross(n, a))
        v = np.cross(n, u)
        return u, v

    def intersect(self, origins: np.ndarray, dirs: np.ndarray):
        denom = dirs @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.point - origins) @ self.normal) / denom
        t = np.where((np.abs(denom) > 1e-12) & (t > 0.0), t, np.inf)
        hit = origins + np.where(np.isfinite(t), t, 0.0)[..., None] * dirs
        u, v = self.tangents
        lu = (hit - self.point) @ u
        lv = (hit - self.point) @ v
        su, sv = self.half_extent
        inside = (np.abs(lu) <= su) & (np.abs(lv) <= sv)
        t = np.where(inside, t, np.inf)
        normals = np.broadcast_to(self.normal, t.shape + (3,))
        return t, normals

    def aabb(self):
        u, v = self.tangents
        su, sv = self.half_extent
        corners = np.array([self.point + a * su * u + b * sv * v
                            for a in (-1, 1) for b in (-1, 1)])
        return corners.min(axis=0), corners.max(axis=0)

    def bounding_sphere(self):
        su, sv = self.half_extent
        return self.point, math.hypot(su, sv)

    def contains(self, p) -> bool:
        return False


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float
    occluder: bool = True

    def __post_init__(self):
        object.__setattr__(self, "center", _as_vec3(self.center))
        if not (np.isfinite(self.radius) and self.radius > 0):
            raise SceneError("sphere radius must be positive and finite")
        object.__setattr__(self, "radius", float(self.radius))

    def intersect(self, origins: np.ndarray, dirs: np.ndarray):
        oc = origins - self.center
        b = np.sum(oc * dirs, axis=-1)
        c = np.sum(oc * oc, axis=-1) - self.radius ** 2
        disc = b * b - c
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0 = -b - sq
        t1 = -b + sq
        t = np.where(t0 > 1e-12, t0, np.where(t1 > 1e-12, t1, np.inf))
        t = np.where(disc >= 0.0, t, np.inf)
        hit = origins + t[..., None] * dirs
        normals = (hit - self.center) / self.radius
        return t, normals

    def aabb(self):
        r = self.radius
        return self.center - r, self.center + r

    def bounding_sphere(self):
        return self.center, self.radius

    def contains(self, p) -> bool:
        return float(np.linalg.norm(np.asarray(p) - self.center)) < self.radius


@dataclass(frozen=True)
class Box:
    """Axis-aligned box given by min/max corners."""

    lo: np.ndarray
    hi: np.ndarray
    occluder: bool = True

    def __post_init__(self):
        lo = _as_vec3(self.lo)
        hi = _as_vec3(self.hi)
        if not np.all(hi > lo):
            raise SceneError("box needs hi > lo on every axis")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def intersect(self, origins: np.ndarray, dirs: np.ndarray):
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
        t1 = (self.lo - origins) * inv
        t2 = (self.hi - origins) * inv
        tmin = np.minimum(t1, t2)
        tmax = np.maximum(t1, t2)
        # Axis-parallel rays: slabs degenerate; substitute +-inf bounds.
        par = np.abs(dirs) < 1e-15
        inside_slab = (origins >= self.lo) & (origins <= self.hi)
        tmin = np.where(par, np.where(inside_slab, -np.inf, np.inf), tmin)
        tmax = np.where(par, np.where(inside_slab, np.inf, -np.inf), tmax)
        tn = tmin.max(axis=-1)
        tf = tmax.min(axis=-1)
        t = np.where(tn > 1e-12, tn, tf)
        t = np.where((tf >= tn) & (t > 1e-12), t, np.inf)
        hit = origins + t[..., None] * dirs
        center = (self.lo + self.hi) / 2.0
        half = (self.hi - self.lo) / 2.0
        local = (hit - center) / half
        axis = np.argmax(np.abs(local), axis=-1)
        normals = np.zeros(t.shape + (3,))
        idx = np.indices(t.shape)
        sign = np.sign(np.take_along_axis(local, axis[..., None], axis=-1))[..., 0]
        normals[(*idx, axis)] = np.where(sign == 0.0, 1.0, sign)
        return t, normals

    def aabb(self):
        return self.lo, self.hi

    def bounding_sphere(self):
        c = (self.lo + self.hi) / 2.0
        return c, float(np.linalg.norm(self.hi - c))

    def contains(self, p) -> bool:
        p = np.asarray(p)
        return bool(np.all(p > self.lo) and np.all(p < self.hi))


@dataclass(frozen=True)
class TriMesh:
    """Small triangle mesh; double-sided Moller-Trumbore intersection."""

    vertices: np.ndarray
    faces: np.ndarray
    occluder: bool = True

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3 or not np.all(np.isfinite(v)):
            raise SceneError("mesh vertices must be a finite (n, 3) array")
        if f.ndim != 2 or f.shape[1] != 3 or f.min() < 0 or f.max() >= len(v):
            raise SceneError("mesh faces must index vertices as (m, 3)")
        v.flags.writeable = False
        f.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    def intersect(self, origins: np.ndarray, dirs: np.ndarray):
        shape = origins.shape[:-1]
        o = origins.reshape(-1, 3)
        d = dirs.reshape(-1, 3)
        v0 = self.vertices[self.faces[:, 0]]
        e1 = self.vertices[self.faces[:, 1]] - v0
        e2 = self.vertices[self.faces[:, 2]] - v0
        best_t = np.full(len(o), np.inf)
        best_n = np.zeros((len(o), 3))
        for k in range(len(self.faces)):
            p = np.cross(d, e2[k])
            det = p @ e1[k]
            ok = np.abs(det) > 1e-14
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / det
            tv = o - v0[k]
            u = np.sum(tv * p, axis=-1) * inv
            q = np.cross(tv, e1[k])
            vpar = np.sum(q * d, axis=-1) * inv
            t = (q @ e2[k]) * inv
            hit = ok & (u >= 0) & (vpar >= 0) & (u + vpar <= 1) & (t > 1e-12) & (t < best_t)
            if np.any(hit):
                best_t[hit] = t[hit]
                n = _unit(np.cross(e1[k], e2[k]))
                # report the side facing the ray
                facing = np.where((d[hit] @ n) < 0, 1.0, -1.0)
                best_n[hit] = facing[:, None] * n
        return best_t.reshape(shape), best_n.reshape(shape + (3,))

    def aabb(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def bounding_sphere(self):
        c = (self.vertices.min(axis=0) + self.vertices.max(axis=0)) / 2.0
        return c, float(np.max(np.linalg.norm(self.vertices - c, axis=1)))

    def contains(self, p) -> bool:
        return False


Primitive = Plane | Sphere | Box | TriMesh


@dataclass(frozen=True)
class Scene:
    """Primitives plus the emitter; bounds are the union AABB."""

    objects: tuple
    emitter: Emitter

    def __post_init__(self):
        if len(self.objects) == 0:
            raise SceneError("scene needs at least one object")
        object.__setattr__(self, "objects", tuple(self.objects))

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        los, his = zip(*(obj.aabb() for obj in self.objects))
        return np.min(los, axis=0), np.max(his, axis=0)

    @property
    def bounds_center(self) -> np.ndarray:
        lo, hi = self.bounds
        return (lo + hi) / 2.0

    @property
    def diagonal(self) -> float:
        lo, hi = self.bounds
        return float(np.linalg.norm(hi - lo))

    def intersect(self, origins: np.ndarray, dirs: np.ndarray):
        """Nearest hit over all objects: (t, normal, object_index)."""
        t = np.full(origins.shape[:-1], np.inf)
        n = np.zeros(origins.shape[:-1] + (3,))
        idx = np.full(origins.shape[:-1], -1, dtype=np.int64)
        for k, obj in enumerate(self.objects):
            tk, nk = obj.intersect(origins, dirs)
            closer = tk < t
            t = np.where(closer, tk, t)
            n = np.where(closer[..., None], nk, n)
            idx = np.where(closer, k, idx)
        return t, n, idx

    def occluded(self, origins: np.ndarray, dirs: np.ndarray, t_max: np.ndarray) -> np.ndarray:
        """True where any object lies strictly between origin and t_max."""
        blocked = np.zeros(origins.shape[:-1], dtype=bool)
        for obj in self.objects:
            todo = ~blocked
            if not np.any(todo):
                break
            tk, _ = obj.intersect(origins[todo], dirs[todo])
            blocked[todo] = tk < t_max[todo]
        return blocked

    def occluder_depth_range(self, emitter_center) -> tuple[float, float]:
        """(z_min, z_max): distance range of occluder bounding spheres from the emitter."""
        e = np.asarray(emitter_center, dtype=np.float64)
        lo = np.inf
        hi = -np.inf
        for obj in self.objects:
            if not getattr(obj, "occluder", True):
                continue
            c, r = obj.bounding_sphere()
            d = float(np.linalg.norm(c - e))
            lo = min(lo, d - r)
            hi = max(hi, d + r)
        if not np.isfinite(lo):
            raise SceneError("scene has no occluder primitives")
        return max(lo, 0.0), hi


# ---------------------------------------------------------------------------
# Keyframed motion
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Trajectory:
    """Piecewise-linear keyframes for either camera poses or 3-D points.

    Evaluation clamps outside the key range. Exactly one of ``poses`` /
    ``points`` is set.
    """

    times: np.ndarray
    poses: tuple = ()
    points: np.ndarray | None = None

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        if t.ndim != 1 or len(t) == 0:
            raise SceneError("trajectory needs at least one keyframe")
        if len(t) > 1 and not np.all(np.diff(t) > 0):
            raise SceneError("keyframe times must be strictly increasing")
        t.flags.writeable = False
        object.__setattr__(self, "times", t)
        if (len(self.poses) > 0) == (self.points is not None):
            raise SceneError("trajectory holds either poses or points, not both")
        if self.poses:
            if len(self.poses) != len(t):
                raise SceneError("one pose per keyframe required")
            object.__setattr__(self, "poses", tuple(self.poses))
        else:
            p = np.asarray(self.points, dtype=np.float64)
            if p.shape != (len(t), 3):
                raise SceneError("points must be (K, 3)")
            p.flags.writeable = False
            object.__setattr__(self, "points", p)

    @property
    def span(self) -> tuple[float, float]:
        return float(self.times[0]), float(self.times[-1])


def trajectory_at(traj: Trajectory, t: float):
    """Evaluate a trajectory at time t (seconds); clamped, piecewise linear."""
    times = traj.times
    t = float(t)
    if t <= times[0]:
        i, w = 0, 0.0
    elif t >= times[-1]:
        i, w = max(len(times) - 2, 0), 1.0
    else:
        i = int(np.searchsorted(times, t, side="right") - 1)
        w = (t - times[i]) / (times[i + 1] - times[i])
    if traj.points is not None:
        if len(times) == 1:
            return traj.points[0].copy()
        return (1.0 - w) * traj.points[i] + w * traj.points[i + 1]
    if len(times) == 1:
        return traj.poses[0]
    a, b = traj.poses[i], traj.poses[min(i + 1, len(times) - 1)]
    if w == 0.0:
        return a
    if w == 1.0:
        return b
    return CameraPose(
        position=(1 - w) * a.position + w * b.position,
        forward=(1 - w) * a.forward + w * b.forward,
        up=(1 - w) * a.up + w * b.up,
        fov_y=(1 - w) * a.fov_y + w * b.fov_y,
        resolution=a.resolution,
    )


@dataclass(frozen=True)
class PerturbationSpec:
    """How many jittered (camera, emitter) states to draw and at what scale."""

    count: int = 3
    camera_scale: float = 0.01
    emitter_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.count < 0:
            raise SceneError("perturbation count must be >= 0")
        if self.camera_scale < 0 or self.emitter_scale < 0:
            raise SceneError("perturbation scales must be >= 0")


def _unit_sample(rng: np.random.Generator) -> np.ndarray:
    while True:
        v = rng.normal(size=3)
        n = np.linalg.norm(v)
        if n > 1e-12:
            return v / n


def sample_perturbation(scene: Scene, camera: CameraPose, spec: PerturbationSpec,
                        rng: np.random.Generator) -> list[tuple[CameraPose, Emitter]]:
    """Draw ``spec.count`` jittered (camera, emitter) states.

    Camera displacement has norm exactly camera_scale * |camera -> scene
    center|; emitter displacement exactly emitter_scale * max(radius, 1 cm).
    Orientations are unchanged.
    """
    if spec.count < 1:
        raise SceneError("sample_perturbation needs count >= 1")
    d_scene = float(np.linalg.norm(camera.position - scene.bounds_center))
    e = scene.emitter
    e_scale = spec.emitter_scale * max(e.radius, PERTURB_RADIUS_FLOOR)
    out = []
    for _ in range(spec.count):
        u = _unit_sample(rng)
        v = _unit_sample(rng)
        cam = replace(camera, position=camera.position + spec.camera_scale * d_scene * u)
        out.append((cam, e.moved_to(e.center + e_scale * v)))
    return out


# ---------------------------------------------------------------------------
# Config loading (TOML). Field names are documented in the README.
# ---------------------------------------------------------------------------

def _build_object(entry: dict) -> Primitive:
    kind = entry.get("type")
    occ = entry.get("occluder")
    kwargs = {} if occ is None else {"occluder": bool(occ)}
    if kind == "plane":
        return Plane(entry["point"], entry["normal"],
                     tuple(entry.get("half_extent", (10.0, 10.0))), **kwargs)
    if kind == "sphere":
        return Sphere(entry["center"], entry["radius"], **kwargs)
    if kind == "box":
        return Box(entry["min"], entry["max"], **kwargs)
    if kind == "mesh":
        return TriMesh(entry["vertices"], entry["faces"], **kwargs)
    raise SceneError(f"unknown object type {kind!r}")


def _build_camera(cfg: dict) -> CameraPose:
    fov = math.radians(float(cfg.get("fov_deg", 45.0)))
    res = tuple(int(x) for x in cfg.get("resolution", (128, 256)))
    if "look_at" in cfg:
        return CameraPose.look_at(cfg["position"], cfg["look_at"],
                                  cfg.get("up", (0.0, 1.0, 0.0)), fov, res)
    return CameraPose(cfg["position"], cfg["forward"],
                      cfg.get("up", (0.0, 1.0, 0.0)), fov, res)


def load_scene(path) -> tuple[Scene, CameraPose, PerturbationSpec]:
    """Read scene + default camera + perturbation constants from a TOML file."""
    raw = Path(path).read_bytes()
    cfg = tomllib.loads(raw.decode("utf-8"))
    try:
        objects = tuple(_build_object(o) for o in cfg["scene"]["objects"])
        em = cfg["emitter"]
        emitter = Emitter(em["center"], float(em.get("size_index", 0.0)))
        camera = _build_camera(cfg["camera"])
    except KeyError as exc:
        raise SceneError(f"scene config missing section/field: {exc}") from exc
    pert = cfg.get("perturbation", {})
    spec = PerturbationSpec(
        count=int(pert.get("count", 3)),
        camera_scale=float(pert.get("camera_scale", 0.01)),
        emitter_scale=float(pert.get("emitter_scale", 0.1)),
        seed=int(pert.get("seed", 0)),
    )
    return Scene(objects, emitter), camera, spec


def load_trajectory(path, camera_template: CameraPose) -> dict[str, Trajectory]:
    """Read camera/emitter keyframes; camera keys inherit fov/resolution."""
    cfg = tomllib.loads(Path(path).read_bytes().decode("utf-8"))
    out: dict[str, Trajectory] = {}
    if "camera_keys" in cfg:
        keys = cfg["camera_keys"]
        times = [float(k["time"]) for k in keys]
        poses = []
        for k in keys:
            if "look_at" in k:
                poses.append(CameraPose.look_at(
                    k["position"], k["look_at"], k.get("up", (0, 1, 0)),
                    camera_template.fov_y, camera_template.resolution))
            else:
                poses.append(CameraPose(
                    k["position"], k.get("forward", camera_template.forward),
                    k.get("up", (0, 1, 0)),
                    camera_template.fov_y, camera_template.resolution))
        out["camera"] = Trajectory(np.asarray(times), poses=tuple(poses))
    if "emitter_keys" in cfg:
        keys = cfg["emitter_keys"]
        out["emitter"] = Trajectory(
            np.asarray([float(k["time"]) for k in keys]),
            points=np.asarray([k["center"] for k in keys], dtype=np.float64),
        )
    if not out:
        raise SceneError("trajectory file has neither camera_keys nor emitter_keys")
    return out
