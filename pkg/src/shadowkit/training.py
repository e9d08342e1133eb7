"""Loss functions, the perturbation training loop, and checkpoint selection.

The per-sample loss mixes a plain L1 term with a perceptual term computed by
a fixed, versioned bank of oriented derivative kernels at two scales (a
pluggable stand-in for a pretrained feature extractor: zero external assets,
same edge-sharpening role). The perturbation loss compares the output of the
unperturbed input against outputs of jittered inputs that are treated as
constants, so gradients flow through the unperturbed branch only:

    total = L(x0, target) + sum_i L(x0, xi)

Training shuffles the (frame, softness) pairs every epoch, evaluates the
held-out split with probability 0.01 per step (and always on the last step),
keeps the 3 best weight sets by held-out MSE, and finally returns whichever
of those scores best on the full training split.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import network as net
from .autodiff import Tensor

__all__ = [
    "LossConfig",
    "TrainingSample",
    "TrainingDiverged",
    "perceptual_features",
    "supervised_loss",
    "perturbation_loss",
    "train",
    "TrainResult",
    "EDGE_BANK_VERSION",
]

EDGE_BANK_VERSION = "oriented-edges-v1"

# Eight zero-mean 3x3 kernels: smoothed first derivatives in four
# orientations, both polarities. Zero mean makes the perceptual distance
# blind to constant offsets; ReLU keeps polarity channels separate.
_DX = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]) / 4.0
_DY = _DX.T
_D1 = np.array([[0.0, 1.0, 2.0], [-1.0, 0.0, 1.0], [-2.0, -1.0, 0.0]]) / 4.0
_D2 = np.array([[-2.0, -1.0, 0.0], [-1.0, 0.0, 1.0], [0.0, 1.0, 2.0]]) / 4.0
EDGE_BANK = np.stack([_DX, -_DX, _DY, -_DY, _D1, -_D1, _D2, -_D2])[:, None, :, :]


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.9
    perturbations: int = 3
    extractor: str = EDGE_BANK_VERSION
    scale_weights: tuple[float, float] = (0.5, 0.5)

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if self.perturbations < 0:
            raise ValueError("perturbation count must be >= 0")
        if self.extractor != EDGE_BANK_VERSION:
            raise ValueError(f"unknown perceptual extractor {self.extractor!r}")


@dataclass(frozen=True)
class TrainingSample:
    """Unperturbed stack first, then the jittered ones; one reference image."""

    stacks: tuple          # p+1 arrays (4, H, W) float32
    target: np.ndarray     # (H, W)
    size_index: float

    def __post_init__(self):
        if len(self.stacks) < 1:
            raise ValueError("sample needs at least the unperturbed stack")
        res = self.stacks[0].shape[1:]
        if any(s.shape[1:] != res for s in self.stacks) or self.target.shape != res:
            raise ValueError("stacks and target must share one resolution")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite."""


def perceptual_features(img: Tensor | np.ndarray,
                        cfg: LossConfig = LossConfig()) -> list[Tensor]:
    """Edge-bank responses at full and half scale for a (H, W) image."""
    x = img if isinstance(img, Tensor) else Tensor(img)
    if x.data.ndim == 2:
        x = _reshape_chw(x)
    bank_w = Tensor(EDGE_BANK.astype(x.dtype))
    bank_b = Tensor(np.zeros(EDGE_BANK.shape[0], dtype=x.dtype))
    maps = [ad.relu(ad.conv2d(x, bank_w, bank_b))]
    if x.shape[1] % 2 == 0 and x.shape[2] % 2 == 0:
        half = ad.avg_pool2(x)
        maps.append(ad.relu(ad.conv2d(half, bank_w, bank_b)))
    return maps


def _reshape_chw(x: Tensor) -> Tensor:
    out = Tensor(x.data.reshape((1,) + x.data.shape))

    def backward(grad):
        if x.requires_grad:
            x._accumulate(grad.reshape(x.data.shape))

    out.requires_grad = x.requires_grad and ad._grad_enabled
    if out.requires_grad:
        out._parents = (x,)
        out._backward = backward
    return out


def _supervised_parts(y: Tensor, t: Tensor, cfg: LossConfig):
    """(l1, perceptual, combined) scalar tensors for one image pair."""
    l1 = ad.mean_abs_diff(y, t)
    loss = ad.scale(l1, cfg.alpha)
    perc = None
    if cfg.alpha < 1.0:
        fy = perceptual_features(y, cfg)
        ft = perceptual_features(t, cfg)
        total_w = sum(cfg.scale_weights[: len(fy)])
        for wgt, a, b in zip(cfg.scale_weights, fy, ft):
            term = ad.scale(ad.mean_abs_diff(a, b), wgt / total_w)
            perc = term if perc is None else ad.add(perc, term)
        loss = ad.add(loss, ad.scale(perc, 1.0 - cfg.alpha))
    return l1, perc, loss


def supervised_loss(y: Tensor | np.ndarray, target: Tensor | np.ndarray,
                    cfg: LossConfig = LossConfig()) -> Tensor:
    """alpha * mean|y - t| + (1 - alpha) * mean feature distance."""
    yt = y if isinstance(y, Tensor) else Tensor(y)
    tt = target if isinstance(target, Tensor) else Tensor(target)
    if yt.shape != tt.shape:
        raise ValueError(f"loss shape mismatch: {yt.shape} vs {tt.shape}")
    return _supervised_parts(yt, tt, cfg)[2]


def perturbation_loss(outputs: list, target, cfg: LossConfig = LossConfig()) -> Tensor:
    """Supervised term plus agreement terms against detached jittered outputs."""
    if len(outputs) != cfg.perturbations + 1:
        raise ValueError(f"expected {cfg.perturbations + 1} outputs, got {len(outputs)}")
    x0 = outputs[0]
    loss = supervised_loss(x0, target, cfg)
    for xi in outputs[1:]:
        const = xi.detach() if isinstance(xi, Tensor) else Tensor(np.asarray(xi))
        loss = ad.add(loss, supervised_loss(x0, const, cfg))
    return loss


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    weights: dict
    config: net.NetworkConfig
    metrics: list[dict] = field(default_factory=list)
    heldout_mse: float = math.nan
    forward_passes: int = 0

    def write_metrics(self, path) -> None:
        cols = ["step", "loss", "l1", "perceptual", "heldout_mse", "wallclock_s"]
        with open(path, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=cols)
            wr.writeheader()
            for row in self.metrics:
                wr.writerow({k: row.get(k, "") for k in cols})


def _eval_mse(weights, cfg, samples: list[TrainingSample]) -> float:
    if not samples:
        return math.nan
    total = 0.0
    count = 0
    with ad.no_grad():
        for s in samples:
            y = net.forward(weights, cfg, s.stacks[0]).data[0]
            total += float(np.sum((y - s.target) ** 2))
            count += y.size
    return total / count


def train(train_samples: list[TrainingSample], net_cfg: net.NetworkConfig,
          loss_cfg: LossConfig, *, heldout: list[TrainingSample] | None = None,
          epochs: int = 10, steps: int | None = None, lr: float = 1e-3,
          seed: int = 0, deterministic: bool = False,
          keep_best: int = 3, eval_prob: float = 0.01,
          init_weights: dict | None = None) -> TrainResult:
    """Run the optimization loop; see the module docstring for the protocol.

    ``steps`` (if given) caps the total iteration count; otherwise the run is
    ``epochs`` full passes. ``init_weights`` lets two runs share one seed and
    starting point while differing in loss settings.
    """
    if not train_samples:
        raise ValueError("empty training set")
    heldout = heldout or []
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD0]))
    eval_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE7]))
    weights = init_weights if init_weights is not None else net.init_weights(
        net_cfg, np.random.default_rng(np.random.SeedSequence([seed, 0x11])))
    state = ad.adam_init(weights, lr=lr)
    score_set = heldout if heldout else train_samples

    total = steps if steps is not None else epochs * len(train_samples)
    order: list[int] = []
    best: list[tuple[float, dict]] = []
    result = TrainResult(weights=weights, config=net_cfg)
    t0 = time.perf_counter()
    for step in range(total):
        if not order:
            order = list(rng.permutation(len(train_samples)))
        sample = train_samples[order.pop()]

        outputs = [net.forward(weights, net_cfg, sample.stacks[0])]
        result.forward_passes += 1
        with ad.no_grad():
            for k in range(1, min(len(sample.stacks), loss_cfg.perturbations + 1)):
                outputs.append(net.forward(weights, net_cfg, sample.stacks[k]))
                result.forward_passes += 1
        if len(outputs) != loss_cfg.perturbations + 1:
            raise ValueError(
                f"sample provides {len(sample.stacks)} stacks but the loss "
                f"wants {loss_cfg.perturbations + 1}")
        y0 = _squeeze_image(outputs[0])
        target = Tensor(sample.target.astype(y0.dtype))
        l1, perc, loss = _supervised_parts(y0, target, loss_cfg)
        for o in outputs[1:]:
            loss = ad.add(loss, supervised_loss(y0, Tensor(o.data[0]), loss_cfg))
        if not np.isfinite(loss.data):
            raise TrainingDiverged(
                f"non-finite loss at step {step} (lr={lr}, seed={seed})")
        for p in weights.values():
            p.zero_grad()
        loss.backward()
        ad.adam_step(weights, {k: v.grad for k, v in weights.items()
                               if v.grad is not None}, state)

        row = {
            "step": step,
            "loss": float(loss.data),
            "l1": float(l1.data),
            "perceptual": 0.0 if perc is None else float(perc.data),
            "heldout_mse": "",
            "wallclock_s": 0.0 if deterministic else round(time.perf_counter() - t0, 6),
        }
        if eval_rng.random() < eval_prob or step == total - 1:
            mse = _eval_mse(weights, net_cfg, score_set)
            row["heldout_mse"] = mse
            best.append((mse, {k: v.data.copy() for k, v in weights.items()}))
            best.sort(key=lambda kv: kv[0])
            del best[keep_best:]
        result.metrics.append(row)

    # final pick: best of the kept checkpoints on the full training split
    final = min(best, key=lambda kv: _eval_mse(
        {k: Tensor(v) for k, v in kv[1].items()}, net_cfg, train_samples))
    for k, p in weights.items():
        p.data = final[1][k].copy()
    result.heldout_mse = _eval_mse(weights, net_cfg, score_set)
    return result


def _squeeze_image(out: Tensor) -> Tensor:
    """(1, H, W) network output viewed as (H, W) inside the graph."""
    res = Tensor(out.data[0])

    def backward(grad):
        if out.requires_grad:
            out._accumulate(grad[None])

    res.requires_grad = out.requires_grad and ad._grad_enabled
    if res.requires_grad:
        res._parents = (out,)
        res._backward = backward
    return res
