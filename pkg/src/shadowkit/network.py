"""Compact encoder-decoder for screen-space shadow prediction.

Every processing level is one 3x3 plus one 1x1 convolution (ReLU after
each). The encoder downsamples with 2x2 average pooling, the decoder
upsamples bilinearly and merges skips by algebraic sum; the outermost level
has no skip so raw aliased inputs cannot reach the output directly. With
``use_space_to_depth`` the full-resolution level is replaced by a lossless
2x2-block-to-channel shuffle, the head emits 4 half-resolution channels, and
the full-resolution image is rebuilt as bilinear(ch0) plus the three detail
channels at block offsets (0,1), (1,0), (1,1). A sigmoid keeps the output in
[0, 1].

The receptive-field rule for an l-layer network is 3 * 2**l pixels; the depth
needed for a target penumbra width p_w is the smallest l >= 2 with
3 * 2**l >= p_w.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from . import fileio

__all__ = [
    "NetworkConfig",
    "receptive_field",
    "layers_for_penumbra",
    "init_weights",
    "forward",
    "net_stats",
    "param_count",
    "save_network",
    "load_network",
]


@dataclass(frozen=True)
class NetworkConfig:
    layers: int = 5
    base_channels: int = 16
    in_channels: int = 4
    use_space_to_depth: bool = True
    channel_cap: int = 256

    def __post_init__(self):
        if self.layers < 2:
            raise ValueError("network needs layers >= 2")
        if self.base_channels < 4:
            raise ValueError("base_channels must be >= 4")
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")

    @property
    def level_channels(self) -> tuple[int, ...]:
        n = self.layers - 1 if self.use_space_to_depth else self.layers
        return tuple(min(self.base_channels * 2 ** j, self.channel_cap)
                     for j in range(n))

    @property
    def first_in_channels(self) -> int:
        return 4 * self.in_channels if self.use_space_to_depth else self.in_channels

    @property
    def out_channels(self) -> int:
        return 4 if self.use_space_to_depth else 1

    @property
    def downsample_factor(self) -> int:
        return 2 ** (self.layers - 1)


def receptive_field(layers: int) -> int:
    """Receptive field in pixels of an l-layer network: 3 * 2**l."""
    if layers < 1:
        raise ValueError("layers must be >= 1")
    return 3 * 2 ** layers


def layers_for_penumbra(p_w: float) -> int:
    """Smallest depth (>= 2) whose receptive field covers a penumbra width."""
    if p_w < 1:
        raise ValueError("penumbra width must be >= 1 pixel")
    l = max(2, math.ceil(math.log2(p_w / 3.0)))
    while receptive_field(l) < p_w:
        l += 1
    while l > 2 and receptive_field(l - 1) >= p_w:
        l -= 1
    return l


def _level_plan(cfg: NetworkConfig):
    """(in, out) channels of every conv, grouped per processing level.

    Returns a list of dicts: {enc3, enc1, dec3, dec1} (channel pairs) for the
    outer levels and {enc3, enc1} for the bottleneck, plus the head pair.
    """
    chans = cfg.level_channels
    n = len(chans)
    plan = []
    for j in range(n):
        cin = cfg.first_in_channels if j == 0 else chans[j - 1]
        cj = chans[j]
        if j == n - 1:  # bottleneck: the 1x1 maps back down to the level below
            cdown = chans[j - 1] if n > 1 else chans[0]
            plan.append({"enc3": (cin, cj), "enc1": (cj, cdown)})
        else:
            cout = chans[j - 1] if j > 0 else chans[0]
            plan.append({"enc3": (cin, cj), "enc1": (cj, cj),
                         "dec3": (cj, cj), "dec1": (cj, cout)})
    head = (chans[0], cfg.out_channels)
    return plan, head


def init_weights(cfg: NetworkConfig, rng: np.random.Generator,
                 dtype=np.float32) -> dict[str, Tensor]:
    """He-uniform conv weights, zero biases."""
    plan, head = _level_plan(cfg)

    def conv(cin, cout, k):
        bound = math.sqrt(6.0 / (cin * k * k))
        w = rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(dtype)
        b = np.zeros(cout, dtype=dtype)
        return Tensor(w, requires_grad=True), Tensor(b, requires_grad=True)

    weights: dict[str, Tensor] = {}
    for j, level in enumerate(plan):
        for tag, k in (("enc3", 3), ("enc1", 1), ("dec3", 3), ("dec1", 1)):
            if tag not in level:
                continue
            cin, cout = level[tag]
            w, b = conv(cin, cout, k)
            weights[f"l{j}.{tag}.w"] = w
            weights[f"l{j}.{tag}.b"] = b
    w, b = conv(head[0], head[1], 1)
    weights["head.w"] = w
    weights["head.b"] = b
    return weights


def param_count(cfg: NetworkConfig) -> int:
    plan, head = _level_plan(cfg)
    total = 0
    for level in plan:
        for tag, k in (("enc3", 3), ("enc1", 1), ("dec3", 3), ("dec1", 1)):
            if tag in level:
                cin, cout = level[tag]
                total += cin * cout * k * k + cout
    total += head[0] * head[1] + head[1]
    return total


def _const_conv(weight: np.ndarray, dtype) -> tuple[Tensor, Tensor]:
    w = Tensor(weight.astype(dtype))
    b = Tensor(np.zeros(weight.shape[0], dtype=dtype))
    return w, b


def forward(weights: dict[str, Tensor], cfg: NetworkConfig, x) -> Tensor:
    """Run the network on a (in_channels, H, W) input; output is (1, H, W)."""
    h = x if isinstance(x, Tensor) else Tensor(x)
    c, hh, ww = h.shape
    if c != cfg.in_channels:
        raise ValueError(f"input has {c} channels, config wants {cfg.in_channels}")
    f = cfg.downsample_factor
    if hh % f or ww % f:
        raise ValueError(f"spatial dims {hh}x{ww} must be divisible by {f}")
    chans = cfg.level_channels
    n = len(chans)
    dtype = h.dtype

    if cfg.use_space_to_depth:
        h = ad.space_to_depth(h)
    skips: list[Tensor | None] = []
    for j in range(n - 1):
        h = ad.relu(ad.conv2d(h, weights[f"l{j}.enc3.w"], weights[f"l{j}.enc3.b"]))
        h = ad.relu(ad.conv2d(h, weights[f"l{j}.enc1.w"], weights[f"l{j}.enc1.b"]))
        skips.append(h)
        h = ad.avg_pool2(h)
    j = n - 1
    h = ad.relu(ad.conv2d(h, weights[f"l{j}.enc3.w"], weights[f"l{j}.enc3.b"]))
    h = ad.relu(ad.conv2d(h, weights[f"l{j}.enc1.w"], weights[f"l{j}.enc1.b"]))
    for j in range(n - 2, -1, -1):
        h = ad.bilinear_upsample2(h)
        if j > 0:  # the outermost level keeps no skip
            h = ad.add(h, skips[j])
        h = ad.relu(ad.conv2d(h, weights[f"l{j}.dec3.w"], weights[f"l{j}.dec3.b"]))
        h = ad.relu(ad.conv2d(h, weights[f"l{j}.dec1.w"], weights[f"l{j}.dec1.b"]))
    y = ad.conv2d(h, weights["head.w"], weights["head.b"])

    if not cfg.use_space_to_depth:
        return ad.sigmoid(y)
    # Rebuild full resolution: bilinear ch0 everywhere, detail channels add
    # their residual at the three non-(0,0) block offsets.
    pick0_w, pick0_b = _const_conv(np.array([[[[1.0]]], [[[0.0]]],
                                             [[[0.0]]], [[[0.0]]]]).reshape(1, 4, 1, 1), dtype)
    base = ad.bilinear_upsample2(ad.conv2d(y, pick0_w, pick0_b))
    mask = np.zeros((4, 4, 1, 1))
    for k in (1, 2, 3):
        mask[k, k, 0, 0] = 1.0
    mask_w, mask_b = _const_conv(mask, dtype)
    detail = ad.depth_to_space(ad.conv2d(y, mask_w, mask_b))
    return ad.sigmoid(ad.add(base, detail))


def net_stats(cfg: NetworkConfig, resolution: tuple[int, int] = (128, 256)) -> list[dict]:
    """Analytic per-level cost: parameters, MAC flops per full-res pixel, and
    temporary-storage traffic (elements read + written) in pixels.

    The head and, in shuffle mode, the reconstruction ops are charged to the
    outermost level.
    """
    plan, head = _level_plan(cfg)
    h, w = resolution
    full = h * w
    stats = []
    shift = 1 if cfg.use_space_to_depth else 0
    for j, level in enumerate(plan):
        r = (h >> (j + shift)) * (w >> (j + shift))
        params = 0
        macs = 0
        io = 0.0
        for tag, k in (("enc3", 3), ("enc1", 1), ("dec3", 3), ("dec1", 1)):
            if tag not in level:
                continue
            cin, cout = level[tag]
            params += cin * cout * k * k + cout
            macs += cin * cout * k * k * r
            io += (cin + cout) * r
        cj = level["enc3"][1]
        if "dec3" in level:                      # pooling + upsample + skip
            io += cj * r + cj * r / 4            # pool read/write
            io += cj * r / 4 + cj * r            # upsample read/write
            if j > 0:
                io += 3 * cj * r                 # skip add: two reads, one write
        if j == 0:
            cin_h, cout_h = head
            params += cin_h * cout_h + cout_h
            macs += cin_h * cout_h * r
            io += (cin_h + cout_h) * r
            if cfg.use_space_to_depth:           # rebuild at full resolution
                io += r + full                   # bilinear ch0
                io += 3 * r + full               # detail shuffle + sum
        stats.append({
            "level": j,
            "resolution": (h >> (j + shift), w >> (j + shift)),
            "parameters": params,
            "flops_per_pixel": macs / full,
            "storage_io_pixels": io,
        })
    return stats


def save_network(path, weights: dict[str, Tensor], cfg: NetworkConfig) -> None:
    """Checkpoint plus a JSON config sidecar so the file is self-describing."""
    fileio.save_tensors(path, {k: v.data for k, v in weights.items()})
    sidecar = Path(str(path) + ".json")
    sidecar.write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")


def load_network(path) -> tuple[dict[str, Tensor], NetworkConfig]:
    arrays = fileio.load_tensors(path)
    sidecar = Path(str(path) + ".json")
    cfg = NetworkConfig(**json.loads(sidecar.read_text()))
    expected = {k for k, _ in _named_params(cfg)}
    if set(arrays) != expected:
        raise fileio.FormatError("checkpoint parameters do not match config")
    return {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}, cfg


def _named_params(cfg: NetworkConfig):
    plan, head = _level_plan(cfg)
    for j, level in enumerate(plan):
        for tag in ("enc3", "enc1", "dec3", "dec1"):
            if tag in level:
                yield f"l{j}.{tag}.w", level[tag]
                yield f"l{j}.{tag}.b", level[tag]
    yield "head.w", head
    yield "head.b", head
