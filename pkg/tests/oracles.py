"""Independent reference implementations the tests check production code
against. Everything here is deliberately naive: scalar loops, textbook
formulas, quadrature. Nothing imports the production render/autodiff paths.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.integrate import quad


# ---------------------------------------------------------------------------
# Naive per-ray scene intersection (scalar, textbook formulations)
# ---------------------------------------------------------------------------

def _hit_sphere(o, d, center, radius):
    # geometric construction: project center onto the ray
    oc = [center[i] - o[i] for i in range(3)]
    proj = sum(oc[i] * d[i] for i in range(3))
    perp2 = sum(oc[i] * oc[i] for i in range(3)) - proj * proj
    if perp2 > radius * radius:
        return math.inf, None
    half = math.sqrt(radius * radius - perp2)
    t = proj - half
    if t <= 1e-12:
        t = proj + half
        if t <= 1e-12:
            return math.inf, None
    hit = [o[i] + t * d[i] for i in range(3)]
    n = [(hit[i] - center[i]) / radius for i in range(3)]
    return t, n


def _hit_rect(o, d, point, normal, u, v, su, sv):
    denom = sum(d[i] * normal[i] for i in range(3))
    if abs(denom) < 1e-12:
        return math.inf, None
    t = sum((point[i] - o[i]) * normal[i] for i in range(3)) / denom
    if t <= 1e-12:
        return math.inf, None
    hit = [o[i] + t * d[i] for i in range(3)]
    rel = [hit[i] - point[i] for i in range(3)]
    lu = sum(rel[i] * u[i] for i in range(3))
    lv = sum(rel[i] * v[i] for i in range(3))
    if abs(lu) > su or abs(lv) > sv:
        return math.inf, None
    return t, list(normal)


def _hit_box(o, d, lo, hi):
    tmin, tmax = -math.inf, math.inf
    axis_min = -1
    for i in range(3):
        if abs(d[i]) < 1e-15:
            if o[i] < lo[i] or o[i] > hi[i]:
                return math.inf, None
            continue
        t1 = (lo[i] - o[i]) / d[i]
        t2 = (hi[i] - o[i]) / d[i]
        near, far = min(t1, t2), max(t1, t2)
        if near > tmin:
            tmin, axis_min = near, i
        tmax = min(tmax, far)
    if tmax < tmin:
        return math.inf, None
    t = tmin if tmin > 1e-12 else tmax
    if t <= 1e-12:
        return math.inf, None
    hit = [o[i] + t * d[i] for i in range(3)]
    center = [(lo[i] + hi[i]) / 2 for i in range(3)]
    half = [(hi[i] - lo[i]) / 2 for i in range(3)]
    scaled = [(hit[i] - center[i]) / half[i] for i in range(3)]
    ax = max(range(3), key=lambda i: abs(scaled[i]))
    n = [0.0, 0.0, 0.0]
    n[ax] = 1.0 if scaled[ax] >= 0 else -1.0
    return t, n


def raycast(scene, origin, direction) -> tuple[float, list | None]:
    """Nearest hit (t, normal) over a Scene's primitives, scalar math only."""
    from shadowkit.scene import Box, Plane, Sphere, TriMesh

    o = [float(x) for x in origin]
    d = [float(x) for x in direction]
    best_t, best_n = math.inf, None
    for obj in scene.objects:
        if isinstance(obj, Sphere):
            t, n = _hit_sphere(o, d, list(obj.center), obj.radius)
        elif isinstance(obj, Plane):
            u, v = obj.tangents
            t, n = _hit_rect(o, d, list(obj.point), list(obj.normal),
                             list(u), list(v), *obj.half_extent)
        elif isinstance(obj, Box):
            t, n = _hit_box(o, d, list(obj.lo), list(obj.hi))
        elif isinstance(obj, TriMesh):
            t, n = _hit_mesh(o, d, obj.vertices, obj.faces)
        else:  # pragma: no cover
            raise TypeError(type(obj))
        if t < best_t:
            best_t, best_n = t, n
    return best_t, best_n


def _hit_mesh(o, d, vertices, faces):
    best_t, best_n = math.inf, None
    for f in faces:
        a, b, c = (vertices[f[0]], vertices[f[1]], vertices[f[2]])
        e1 = b - a
        e2 = c - a
        n = np.cross(e1, e2)
        nn = np.linalg.norm(n)
        if nn < 1e-18:
            continue
        n = n / nn
        denom = float(np.dot(n, d))
        if abs(denom) < 1e-14:
            continue
        t = float(np.dot(n, a - np.asarray(o))) / denom
        if t <= 1e-12 or t >= best_t:
            continue
        p = np.asarray(o) + t * np.asarray(d)
        # inside test via same-side cross products
        inside = True
        for v0, v1 in ((a, b), (b, c), (c, a)):
            edge = v1 - v0
            if float(np.dot(np.cross(edge, p - v0), n)) < -1e-12:
                inside = False
                break
        if inside:
            best_t = t
            best_n = list(n if denom < 0 else -n)
    return best_t, best_n


def camera_ray(camera, row: int, col: int):
    """Pixel-center ray, re-derived from first principles."""
    h, w = camera.resolution
    half_h = math.tan(camera.fov_y / 2.0)
    half_w = half_h * w / h
    x = ((col + 0.5) / w * 2.0 - 1.0) * half_w
    y = (1.0 - (row + 0.5) / h * 2.0) * half_h
    d = camera.forward + x * camera.right + y * camera.up
    return np.asarray(camera.position, float), d / np.linalg.norm(d)


# ---------------------------------------------------------------------------
# Spherical-cap overlap (two-cap occlusion) via 1-D quadrature
# ---------------------------------------------------------------------------

def cap_overlap_fraction(alpha: float, beta: float, gamma: float) -> float:
    """Fraction of the cap of angular radius alpha that lies within beta of a
    second axis separated by gamma."""
    if alpha <= 0:
        return 1.0 if gamma <= beta else 0.0

    def ring(t):
        if t < 1e-15:
            lam = math.pi if gamma <= beta else 0.0
        elif gamma < 1e-15:
            lam = math.pi if t <= beta else 0.0
        else:
            c = (math.cos(beta) - math.cos(gamma) * math.cos(t)) / (
                math.sin(gamma) * math.sin(t))
            lam = math.acos(min(1.0, max(-1.0, c)))
        return 2.0 * lam * math.sin(t)

    pts = sorted(x for x in (abs(gamma - beta), gamma + beta) if 0 < x < alpha)
    area, _ = quad(ring, 0.0, alpha, points=pts or None, limit=200)
    return area / (2.0 * math.pi * (1.0 - math.cos(alpha)))


def mse_two_pass(a, b) -> float:
    """Exactly summed mean squared error."""
    diffs = [(float(x) - float(y)) ** 2
             for x, y in zip(np.ravel(a), np.ravel(b))]
    return math.fsum(diffs) / len(diffs)


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

def finite_difference_grads(make_loss, params, h: float = 1e-5):
    """Central-difference gradients of a scalar graph builder, per parameter.

    ``make_loss()`` must rebuild the graph from the current parameter data
    (float64 recommended).
    """
    grads = []
    for p in params:
        flat = p.data.ravel()
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = float(make_loss().data)
            flat[i] = orig - h
            lm = float(make_loss().data)
            flat[i] = orig
            g[i] = (lp - lm) / (2.0 * h)
        grads.append(g.reshape(p.data.shape))
    return grads


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray,
                  floor: float = 1e-6) -> float:
    denom = np.maximum(np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
