"""Command-line orchestration.

Subcommands: generate | train | infer | eval-temporal | sensitivity |
select-features | penumbra | sizing | net-stats | overfit-test. Every run
logs its resolved configuration (run_config.json in --out, or stderr for
output-less commands); with --deterministic, equal seeds give bitwise-equal
outputs. Errors exit nonzero with one machine-parsable line on stderr:

    error: code=<CODE> msg="<message>"
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np


def _limit_threads(deterministic: bool) -> None:
    cap = 1 if deterministic else None
    env = os.environ.get("NSM_THREADS")
    if env:
        cap = 1 if deterministic else max(1, int(env))
    if cap is not None:
        try:
            from threadpoolctl import threadpool_limits
            threadpool_limits(limits=cap)
        except Exception:
            pass


def _log_config(args: argparse.Namespace, out: str | None) -> None:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    text = json.dumps(cfg, sort_keys=True, indent=1, default=str) + "\n"
    if out:
        path = Path(out)
        path.mkdir(parents=True, exist_ok=True)
        (path / "run_config.json").write_text(text)
    else:
        sys.stderr.write("config: " + json.dumps(cfg, sort_keys=True, default=str) + "\n")


def _canonical_scene_text() -> str:
    """Built-in sphere-over-plane scene used by self-contained commands."""
    return """
[scene]
[[scene.objects]]
type = "plane"
point = [0.0, 0.0, 0.0]
normal = [0.0, 1.0, 0.0]
half_extent = [8.0, 8.0]

[[scene.objects]]
type = "sphere"
center = [0.0, 1.2, 0.0]
radius = 0.5

[emitter]
center = [0.0, 4.0, 0.0]
size_index = 2.0

[camera]
position = [0.0, 2.3, -2.7]
look_at = [0.0, 0.0, 0.3]
fov_deg = 45.0
resolution = [128, 256]

[perturbation]
count = 3
camera_scale = 0.01
emitter_scale = 0.1
"""


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    from . import dataset
    settings = dataset.GenerateSettings(
        frames=args.frames, spp=args.spp, msaa=args.msaa, sigma=args.sigma,
        sizes=tuple(args.sizes), shadow_res=(args.shadow_res, args.shadow_res),
        perturbations=args.p, seed=args.seed)
    _log_config(args, args.out)
    manifest = dataset.generate_dataset(args.scene, args.traj, args.out, settings)
    print(f"frames={len(manifest.frames)} out={args.out} "
          f"hash={manifest.manifest_hash[:16]}")
    return 0


def _split_samples(manifest, args):
    from . import dataset
    n = len(manifest.frames)
    held_n = min(args.heldout, max(n - 1, 0))
    train_frames = range(n - held_n)
    held_frames = range(n - held_n, n)
    sizes = tuple(args.sizes) if args.sizes else None
    train = dataset.load_samples(manifest, train_frames, sizes, args.p)
    held = dataset.load_samples(manifest, held_frames, sizes, 0)
    return train, held


def cmd_train(args) -> int:
    from . import dataset, network, training
    manifest = dataset.load_manifest(args.data)
    train_set, held = _split_samples(manifest, args)
    cfg = network.NetworkConfig(layers=args.layers, base_channels=args.base_channels,
                                use_space_to_depth=not args.plain)
    loss_cfg = training.LossConfig(alpha=args.alpha, perturbations=args.p)
    _log_config(args, args.out)
    result = training.train(
        train_set, cfg, loss_cfg, heldout=held, epochs=args.epochs,
        steps=args.steps, lr=args.lr, seed=args.seed,
        deterministic=args.deterministic)
    out = Path(args.out)
    network.save_network(out / "model.ckpt", result.weights, cfg)
    result.write_metrics(out / "metrics.csv")
    print(f"heldout_mse={result.heldout_mse:.6g} steps={len(result.metrics)} "
          f"forward_passes={result.forward_passes}")
    return 0


def cmd_infer(args) -> int:
    from . import dataset, fileio, network
    from . import autodiff as ad
    manifest = dataset.load_manifest(args.data)
    weights, cfg = network.load_network(args.ckpt)
    stack = dataset.load_feature_stack(manifest, args.frame, 0, args.size)
    with ad.no_grad():
        img = network.forward(weights, cfg, stack.data).data[0]
    _log_config(args, args.out)
    out = Path(args.out)
    fileio.save_floatmap(out / "shadow.pfm", img.astype(np.float32))
    fileio.save_gray_png(out / "shadow.png", img)
    print(f"wrote {out / 'shadow.pfm'} range=[{img.min():.4f}, {img.max():.4f}]")
    return 0


def _sequence_outputs(manifest, weights, cfg, size):
    from . import dataset, network
    from . import autodiff as ad
    frames = []
    for fi in range(len(manifest.frames)):
        stack = dataset.load_feature_stack(manifest, fi, 0, size)
        with ad.no_grad():
            frames.append(network.forward(weights, cfg, stack.data).data[0]
                          .astype(np.float64))
    return frames


def cmd_eval_temporal(args) -> int:
    from . import analysis, dataset, network, raster
    manifest = dataset.load_manifest(args.data)
    weights, cfg = network.load_network(args.ckpt)
    frames = _sequence_outputs(manifest, weights, cfg, args.size)
    gbuffers = [dataset.load_gbuffer(manifest, i) for i in range(len(frames))]
    motions = [raster.motion_vectors(gbuffers[t], gbuffers[t - 1].camera,
                                     gbuffers[t - 1])
               for t in range(1, len(frames))]
    report = analysis.temporal_instability(frames, motions, args.alpha_t)
    _log_config(args, args.out)
    if args.out:
        (Path(args.out) / "temporal.txt").write_text(report.as_text() + "\n")
    print(f"E={report.instability:.9g}")
    return 0


def cmd_sensitivity(args) -> int:
    from . import analysis, dataset, network
    from . import autodiff as ad
    manifest = dataset.load_manifest(args.data)
    weights, cfg = network.load_network(args.ckpt)
    stacks = [dataset.load_feature_stack(manifest, fi, 0, args.size).data
              for fi in range(len(manifest.frames))]

    def phi(stack):
        with ad.no_grad():
            return network.forward(weights, cfg, stack).data[0]

    rng = np.random.default_rng(args.seed)
    from .raster import FEATURE_CHANNELS
    report = analysis.sensitivity_report(phi, stacks, FEATURE_CHANNELS,
                                         repeats=args.repeats, rng=rng)
    _log_config(args, args.out)
    if args.out:
        report.write_csv(Path(args.out) / "sensitivity.csv")
        (Path(args.out) / "sensitivity.txt").write_text(report.as_text() + "\n")
    print(report.as_text())
    return 0


def cmd_select_features(args) -> int:
    """Self-contained tiered selection on a freshly rendered mini-dataset."""
    from . import experiments
    result = experiments.run_feature_selection(
        scene_path=args.scene, frames=args.frames, seed=args.seed,
        steps=args.steps, noise_channel=args.noise_channel,
        spp=args.spp, deterministic=args.deterministic)
    _log_config(args, args.out)
    if args.out:
        result.write_csv(Path(args.out) / "selection.csv")
        (Path(args.out) / "selection.txt").write_text(result.as_text() + "\n")
    print(result.as_text())
    return 0


def cmd_penumbra(args) -> int:
    from . import analysis, dataset, network
    manifest = dataset.load_manifest(args.data)
    from .scene import emitter_radius
    size = args.size if args.size is not None else max(manifest.sizes)
    frames = []
    for i, rec in enumerate(manifest.frames):
        g = dataset.load_gbuffer(manifest, i)
        frames.append(analysis.PenumbraFrame(
            z_min=rec.z_min, z_max=rec.z_max, r_e=emitter_radius(size),
            z_f=g.z_f, d=g.d, coverage=g.coverage, focal_px=g.camera.focal_px))
    stats = analysis.penumbra_histogram(frames)
    layers = network.layers_for_penumbra(max(stats.p95, 1.0))
    _log_config(args, args.out)
    if args.out:
        stats.write_csv(Path(args.out) / "penumbra_hist.csv")
    print(f"p95={stats.p95:.3f} pixels={stats.pixels} "
          f"layers={layers} rf={network.receptive_field(layers)}")
    return 0


def cmd_sizing(args) -> int:
    from . import network
    _log_config(args, None)
    layers = network.layers_for_penumbra(args.p95)
    print(f"layers={layers} rf={network.receptive_field(layers)}")
    return 0


def cmd_net_stats(args) -> int:
    from . import network
    cfg = network.NetworkConfig(layers=args.layers, base_channels=args.base_channels,
                                use_space_to_depth=not args.plain)
    _log_config(args, None)
    stats = network.net_stats(cfg, tuple(args.res))
    total_params = 0
    print(f"{'level':>5} {'resolution':>12} {'params':>10} "
          f"{'flops/px':>10} {'storage io (px)':>16}")
    for row in stats:
        res = f"{row['resolution'][0]}x{row['resolution'][1]}"
        print(f"{row['level']:>5} {res:>12} {row['parameters']:>10} "
              f"{row['flops_per_pixel']:>10.1f} {row['storage_io_pixels']:>16.0f}")
        total_params += row["parameters"]
    print(f"total parameters: {total_params}")
    return 0


def cmd_overfit_test(args) -> int:
    from . import experiments
    _log_config(args, args.out)
    results = experiments.run_overfit(
        layers=args.layers, steps=args.steps, seed=args.seed,
        deterministic=args.deterministic)
    ok = True
    for mode, mse_val in results.items():
        status = "pass" if mse_val < 0.02 else "FAIL"
        ok = ok and mse_val < 0.02
        print(f"{mode}: mse={mse_val:.6g} {status}")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="shadowkit", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--deterministic", action="store_true")
        p.add_argument("--out", required=out_required)

    g = sub.add_parser("generate", help="render a dataset")
    g.add_argument("--scene", required=True)
    g.add_argument("--traj", default=None)
    g.add_argument("--frames", type=int, default=8)
    g.add_argument("--spp", type=int, default=256)
    g.add_argument("--msaa", type=int, default=8)
    g.add_argument("--sigma", type=float, default=0.5)
    g.add_argument("--sizes", type=float, nargs="+", default=list(DEFAULT_SIZES_CLI))
    g.add_argument("--shadow-res", type=int, default=512)
    g.add_argument("--p", type=int, default=None, help="perturbations per frame")
    common(g)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train on a generated dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--layers", type=int, default=5)
    t.add_argument("--base-channels", type=int, default=16)
    t.add_argument("--plain", action="store_true", help="disable the 2x2 shuffle")
    t.add_argument("--alpha", type=float, default=0.9)
    t.add_argument("--p", type=int, default=3)
    t.add_argument("--epochs", type=int, default=10)
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--heldout", type=int, default=10)
    t.add_argument("--sizes", type=float, nargs="+", default=None)
    common(t)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="run a checkpoint on one frame")
    i.add_argument("--data", required=True)
    i.add_argument("--ckpt", required=True)
    i.add_argument("--frame", type=int, default=0)
    i.add_argument("--size", type=float, default=0.0)
    common(i)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval-temporal", help="temporal instability of a sequence")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--size", type=float, default=0.0)
    e.add_argument("--alpha-t", type=float, default=3.0)
    common(e, out_required=False)
    e.set_defaults(func=cmd_eval_temporal)

    s = sub.add_parser("sensitivity", help="input-channel sensitivity of a checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--size", type=float, default=0.0)
    s.add_argument("--repeats", type=int, default=8)
    common(s, out_required=False)
    s.set_defaults(func=cmd_sensitivity)

    f = sub.add_parser("select-features", help="tiered channel pruning experiment")
    f.add_argument("--scene", default=None)
    f.add_argument("--frames", type=int, default=6)
    f.add_argument("--steps", type=int, default=240)
    f.add_argument("--spp", type=int, default=64)
    f.add_argument("--noise-channel", action="store_true",
                   help="inject a white-noise channel that should be pruned")
    common(f, out_required=False)
    f.set_defaults(func=cmd_select_features)

    pn = sub.add_parser("penumbra", help="screen-space penumbra histogram and P95")
    pn.add_argument("--data", required=True)
    pn.add_argument("--size", type=float, default=None)
    common(pn, out_required=False)
    pn.set_defaults(func=cmd_penumbra)

    sz = sub.add_parser("sizing", help="network depth for a target penumbra width")
    sz.add_argument("--p95", type=float, required=True)
    sz.set_defaults(func=cmd_sizing)

    ns = sub.add_parser("net-stats", help="per-level analytic cost table")
    ns.add_argument("--layers", type=int, default=5)
    ns.add_argument("--base-channels", type=int, default=16)
    ns.add_argument("--plain", action="store_true")
    ns.add_argument("--res", type=int, nargs=2, default=[128, 256])
    ns.set_defaults(func=cmd_net_stats)

    ov = sub.add_parser("overfit-test", help="single-frame memorization check")
    ov.add_argument("--layers", type=int, default=3)
    ov.add_argument("--steps", type=int, default=500)
    common(ov, out_required=False)
    ov.set_defaults(func=cmd_overfit_test)
    return ap


DEFAULT_SIZES_CLI = (0.0, 1.0, 2.0, 3.0)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _limit_threads(getattr(args, "deterministic", False))
    try:
        return args.func(args)
    except BrokenPipeError:
        return 1
    except Exception as exc:  # one-line machine-parsable failure
        code = type(exc).__name__
        msg = str(exc).replace('"', "'").replace("\n", " ")
        sys.stderr.write(f'error: code={code} msg="{msg}"\n')
        return 1


if __name__ == "__main__":
    sys.exit(main())
