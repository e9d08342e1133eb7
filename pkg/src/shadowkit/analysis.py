"""Evaluation mathematics: input-channel sensitivity and pruning, the
bounding-sphere penumbra model with screen-space histograms, the
motion-compensated temporal-instability metric, and plain MSE.

Sensitivity of channel i under a model ``phi`` (any callable mapping a
(C, H, W) stack to an image): perturb the channel with per-pixel Gaussian
noise of scale 0.1 * sigma_i (sigma_i estimated over the whole dataset),
average |phi(f + eps) - phi(f)| / (0.1 * sigma_i) over pixels, frames, and
repeats. The absolute difference is what makes the statistic non-degenerate
for zero-mean noise. Relative sensitivity divides by the sum over channels.

The penumbra model treats the occluder as a bounding sphere spanning
emitter-space depths [z_min, z_max] and an emitter of radius r_e lighting a
receiver at distance z_f:

    z_m = (z_max + z_min) / 2        r_s = (z_max - z_min) / 2
    theta_d = asin(r_s / sqrt(z_m^2 + r_e^2))
    theta   = atan((BQ + r_e) / z_f),  BQ = r_e (z_f - z_m) / z_m
    x_a = z_f tan(theta - theta_d) - r_e
    x_b = z_f tan(theta + theta_d) - r_e

The screen-space width of (x_a + x_b) at a pixel uses the pinhole projection
at that pixel's view depth; the 95th percentile over all covered pixels of
all frames is the conservative receptive-field requirement.

Temporal instability over frames I_1..I_T with motion fields m_t:

    E = (1/P) sum_{p,t} (exp(alpha_t * |I_t(p) - I_{t-1}(m_t(p))|) - 1)

counting only pixels whose reprojection passed depth/normal rejection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .raster import MotionField

__all__ = [
    "ZeroVarianceChannel",
    "NoValidPixels",
    "SensitivityReport",
    "CandidateFit",
    "SelectionResult",
    "PenumbraStats",
    "PenumbraFrame",
    "TemporalReport",
    "channel_sensitivity",
    "sensitivity_report",
    "select_features",
    "penumbra_extents",
    "penumbra_histogram",
    "temporal_instability",
    "mse",
]

SENSITIVITY_NOISE_SCALE = 0.1
PRUNE_THRESHOLD = 0.015


class ZeroVarianceChannel(ValueError):
    """Channel has no variation across the dataset; sensitivity undefined."""


class NoValidPixels(RuntimeError):
    """Every pixel of every frame pair was rejected."""


# ---------------------------------------------------------------------------
# Sensitivity and feature selection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SensitivityReport:
    channels: tuple[str, ...]
    absolute: np.ndarray        # S_i
    relative: np.ndarray        # s_i, sums to 1
    frames: int
    repeats: int

    def as_text(self) -> str:
        lines = ["channel sensitivity (absolute, relative %):"]
        for name, s, rel in zip(self.channels, self.absolute, self.relative):
            lines.append(f"  {name:>8s}  {s:10.6f}  {100 * rel:6.2f}%")
        lines.append(f"  frames={self.frames} repeats={self.repeats}")
        return "\n".join(lines)

    def write_csv(self, path) -> None:
        import csv
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["channel", "absolute", "relative"])
            for name, s, rel in zip(self.channels, self.absolute, self.relative):
                wr.writerow([name, repr(float(s)), repr(float(rel))])


def channel_sensitivity(phi, stacks, channel: int, repeats: int = 8,
                        rng: np.random.Generator | None = None,
                        sigma: float | None = None) -> float:
    """Absolute sensitivity S_i of one channel; see the module docstring."""
    stacks = [np.asarray(s) for s in stacks]
    if rng is None:
        rng = np.random.default_rng(0)
    if sigma is None:
        sigma = float(np.std(np.concatenate([s[channel].ravel() for s in stacks])))
    if sigma <= 0.0 or not math.isfinite(sigma):
        raise ZeroVarianceChannel(f"channel {channel} has zero variance")
    noise = SENSITIVITY_NOISE_SCALE * sigma
    base = [np.asarray(phi(s), dtype=np.float64) for s in stacks]
    total = 0.0
    count = 0
    for _ in range(repeats):
        for s, b in zip(stacks, base):
            pert = s.copy()
            pert[channel] = pert[channel] + rng.normal(
                0.0, noise, size=s.shape[1:]).astype(s.dtype)
            delta = np.abs(np.asarray(phi(pert), dtype=np.float64) - b)
            total += float(delta.sum())
            count += delta.size
    return total / count / noise


def sensitivity_report(phi, stacks, channels, repeats: int = 8,
                       rng: np.random.Generator | None = None) -> SensitivityReport:
    """S_i and s_i for every channel of a stack list."""
    if rng is None:
        rng = np.random.default_rng(0)
    absolute = np.array([
        channel_sensitivity(phi, stacks, i, repeats, rng) for i in range(len(channels))
    ])
    denom = absolute.sum()
    if denom <= 0:
        raise ZeroVarianceChannel("all channels produced zero sensitivity")
    return SensitivityReport(channels=tuple(channels), absolute=absolute,
                             relative=absolute / denom,
                             frames=len(stacks), repeats=repeats)


@dataclass(frozen=True)
class CandidateFit:
    """What a selection trainer returns for one channel combination."""

    phi: object                 # callable stack -> image
    stacks: tuple               # evaluation stacks in this channel space
    heldout_mse: float


@dataclass
class SelectionResult:
    selected: tuple[str, ...]
    rounds: list[dict] = field(default_factory=list)

    def write_csv(self, path) -> None:
        import csv
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["round", "channels", "relative_sensitivity",
                         "dropped", "added", "heldout_mse"])
            for i, r in enumerate(self.rounds):
                wr.writerow([
                    i, " ".join(r["channels"]),
                    " ".join(f"{s:.5f}" for s in r["relative"]),
                    " ".join(r["dropped"]), " ".join(r["added"]),
                    repr(float(r["heldout_mse"])),
                ])

    def as_text(self) -> str:
        lines = []
        for i, r in enumerate(self.rounds):
            pairs = ", ".join(f"{c}={100 * s:.2f}%"
                              for c, s in zip(r["channels"], r["relative"]))
            lines.append(f"round {i}: {pairs}")
            if r["dropped"]:
                lines.append(f"  dropped {' '.join(r['dropped'])}")
            if r["added"]:
                lines.append(f"  added {' '.join(r['added'])}")
            lines.append(f"  heldout_mse={r['heldout_mse']:.6g}")
        lines.append("selected: " + " ".join(self.selected))
        return "\n".join(lines)


def select_features(trainer, channels, tiers=(), threshold: float = PRUNE_THRESHOLD,
                    tie_margin: float = 0.0, repeats: int = 8,
                    rng: np.random.Generator | None = None) -> SelectionResult:
    """Tiered pruning loop: train, rank by relative sensitivity, drop the
    channels below the threshold, optionally admit the next candidate tier,
    retrain until stable.

    ``trainer(channel_names) -> CandidateFit`` owns data assembly and
    training. With a nonzero ``tie_margin``, channels whose relative
    sensitivity lies inside ``threshold ± tie_margin`` are resolved by
    comparing held-out error with and without them.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    active = list(channels)
    pending = [list(t) for t in tiers]
    result = SelectionResult(selected=tuple(active))
    while True:
        if not active:
            raise ValueError("selection pruned every channel")
        fit = trainer(tuple(active))
        report = sensitivity_report(fit.phi, fit.stacks, active, repeats, rng)
        rel = dict(zip(active, report.relative))
        drop = [c for c in active if rel[c] < threshold - tie_margin]
        if tie_margin > 0.0:
            unsure = [c for c in active
                      if abs(rel[c] - threshold) <= tie_margin]
            for c in unsure:
                without = trainer(tuple(x for x in active if x != c))
                if without.heldout_mse <= fit.heldout_mse:
                    drop.append(c)
        added: list[str] = []
        if not drop and pending:
            added = pending.pop(0)
        result.rounds.append({
            "channels": list(active),
            "relative": [float(rel[c]) for c in active],
            "dropped": list(drop),
            "added": list(added),
            "heldout_mse": float(fit.heldout_mse),
        })
        if drop:
            active = [c for c in active if c not in drop]
        elif added:
            active = active + added
        else:
            break
    result.selected = tuple(active)
    return result


# ---------------------------------------------------------------------------
# Penumbra model
# ---------------------------------------------------------------------------

def penumbra_extents(z_min, z_max, z_f, r_e):
    """Inner/outer penumbra extents (x_a, x_b) in meters; broadcasts.

    Preconditions: 0 < z_min <= z_max < z_f and r_e >= 0; raises on geometry
    where the model degenerates (mid-depth <= 0 or the outer cone reaching
    90 degrees).
    """
    z_min = np.asarray(z_min, dtype=np.float64)
    z_max = np.asarray(z_max, dtype=np.float64)
    z_f = np.asarray(z_f, dtype=np.float64)
    r_e = np.asarray(r_e, dtype=np.float64)
    if np.any(z_min <= 0) or np.any(z_max < z_min) or np.any(z_f <= z_max):
        raise ValueError("need 0 < z_min <= z_max < z_f")
    if np.any(r_e < 0):
        raise ValueError("emitter radius must be >= 0")
    z_m = (z_max + z_min) / 2.0
    r_s = (z_max - z_min) / 2.0
    hyp = np.sqrt(z_m ** 2 + r_e ** 2)
    if np.any(z_m <= 0) or np.any(r_s > hyp):
        raise ValueError("occluder sphere inconsistent with emitter distance")
    theta_d = np.arcsin(r_s / hyp)
    bq = r_e * (z_f - z_m) / z_m
    theta = np.arctan((bq + r_e) / z_f)
    if np.any(theta + theta_d >= math.pi / 2):
        raise ValueError("outer penumbra cone reaches 90 degrees")
    x_a = z_f * np.tan(theta - theta_d) - r_e
    x_b = z_f * np.tan(theta + theta_d) - r_e
    if np.ndim(x_a) == 0:
        return float(x_a), float(x_b)
    return x_a, x_b


@dataclass(frozen=True)
class PenumbraFrame:
    """Per-frame inputs for the histogram: the occluder depth range recorded
    at generation time plus per-pixel receiver geometry."""

    z_min: float
    z_max: float
    r_e: float
    z_f: np.ndarray          # pixel-to-emitter distance (m)
    d: np.ndarray            # view depth (m)
    coverage: np.ndarray
    focal_px: float


@dataclass(frozen=True)
class PenumbraStats:
    counts: np.ndarray
    bin_edges: np.ndarray
    p95: float
    depth_ranges: tuple      # per-frame (z_min, z_max)
    pixels: int

    def write_csv(self, path) -> None:
        import csv
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["bin_left", "count"])
            for left, c in zip(self.bin_edges[:-1], self.counts):
                wr.writerow([repr(float(left)), int(c)])


def penumbra_histogram(frames: list[PenumbraFrame], bins: int = 64) -> PenumbraStats:
    """Screen-space penumbra widths over every covered receiver pixel.

    A pixel contributes (x_a + x_b) * focal_px / d; pixels whose emitter
    distance does not exceed the frame's z_max (the occluder surface itself)
    carry no modeled penumbra and are skipped. Point lights contribute exact
    zeros.
    """
    widths = []
    for fr in frames:
        sel = fr.coverage & (fr.d > 0) & (fr.z_f > fr.z_max)
        if not np.any(sel):
            continue
        if fr.r_e == 0.0:
            widths.append(np.zeros(int(sel.sum())))
            continue
        x_a, x_b = penumbra_extents(fr.z_min, fr.z_max, fr.z_f[sel], fr.r_e)
        widths.append((x_a + x_b) * fr.focal_px / fr.d[sel])
    if not widths:
        raise ValueError("no receiver pixels to build a histogram from")
    w = np.concatenate(widths)
    p95 = float(np.percentile(w, 95.0))
    hi = max(float(w.max()), 1e-9)
    counts, edges = np.histogram(w, bins=bins, range=(0.0, hi))
    return PenumbraStats(counts=counts, bin_edges=edges, p95=p95,
                         depth_ranges=tuple((f.z_min, f.z_max) for f in frames),
                         pixels=int(w.size))


# ---------------------------------------------------------------------------
# Temporal instability
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TemporalReport:
    instability: float       # E
    alpha_t: float
    frames_compared: int
    valid_pixels: int
    rejected_fraction: float

    def as_text(self) -> str:
        return (f"E={self.instability:.6g} alpha_t={self.alpha_t} "
                f"pairs={self.frames_compared} valid={self.valid_pixels} "
                f"rejected={100 * self.rejected_fraction:.2f}%")


def temporal_instability(frames: list[np.ndarray], motions: list[MotionField],
                         alpha_t: float = 3.0) -> TemporalReport:
    """Exponentially penalized motion-compensated frame differences."""
    if len(frames) < 2:
        raise ValueError("need at least two frames")
    if len(motions) != len(frames) - 1:
        raise ValueError("need one motion field per consecutive frame pair")
    total = 0.0
    valid_count = 0
    pixel_count = 0
    for t in range(1, len(frames)):
        cur = np.asarray(frames[t], dtype=np.float64)
        prev = np.asarray(frames[t - 1], dtype=np.float64)
        m = motions[t - 1]
        h, w = cur.shape
        ys, xs = np.mgrid[0:h, 0:w]
        ri = np.clip(np.rint(ys + m.vectors[0]).astype(np.int64), 0, h - 1)
        ci = np.clip(np.rint(xs + m.vectors[1]).astype(np.int64), 0, w - 1)
        d = np.abs(cur - prev[ri, ci])
        sel = m.valid
        total += float(np.expm1(alpha_t * d[sel]).sum())
        valid_count += int(sel.sum())
        pixel_count += d.size
    if valid_count == 0:
        raise NoValidPixels("every pixel was rejected by reprojection tests")
    return TemporalReport(instability=total / valid_count, alpha_t=float(alpha_t),
                          frames_compared=len(frames) - 1, valid_pixels=valid_count,
                          rejected_fraction=1.0 - valid_count / pixel_count)


def mse(img: np.ndarray, ref: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Mean squared difference, optionally over covered pixels only."""
    a = np.asarray(img, dtype=np.float64)
    b = np.asarray(ref, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    d = (a - b) ** 2
    if mask is not None:
        if mask.shape != a.shape:
            raise ValueError("mask shape mismatch")
        if not np.any(mask):
            raise ValueError("empty mask")
        return float(d[mask].mean())
    return float(d.mean())
