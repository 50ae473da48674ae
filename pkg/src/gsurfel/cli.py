"""Command-line entry points: synth, train, render, fuse, eval."""

import argparse
import json
import logging
import os
import sys
import time

import numpy as np
from PIL import Image

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .dataset import (DatasetError, encode_normal_map, import_sparse_points, load_image,
                      load_mask, load_scene, save_png, to_uint8)
from .ply import PlyError, read_point_cloud
from .rasterizer import RasterError, render
from .surface import CUT_MODES, DEFAULT_GRID_RES, DEFAULT_LAMBDA, FuseConfig, FusionError, chamfer_distance, extract_surface
from .synth import KINDS, SyntheticScene, synth
from .trainer import REFERENCE_ITERS, OptimizerState, TrainConfig, TrainingError, TrainState, train

log = logging.getLogger("gsurfel")

CHECKPOINT_NAME = "checkpoint.gsrf"
LOG_NAME = "train_log.jsonl"

# exit status per failure class
EXIT_CODES = {
    DatasetError: 3,
    PlyError: 4,
    CheckpointError: 5,
    FusionError: 6,
    TrainingError: 7,
    RasterError: 8,
    ValueError: 9,
    OSError: 10,
}


# --- depth PNG -------------------------------------------------------------------

def encode_depth(depth):
    """16-bit depth image and the scale that maps 65535 back to scene units."""
    depth = np.asarray(depth, dtype=float)
    dmax = float(depth.max()) if depth.size and depth.max() > 0 else 1.0
    q = np.clip(np.round(depth / dmax * 65535.0), 0, 65535).astype(np.uint16)
    return q, dmax


def decode_depth(q, depth_max):
    return np.asarray(q, dtype=float) / 65535.0 * depth_max


def save_depth_png(path, depth):
    q, dmax = encode_depth(depth)
    Image.fromarray(q).save(path)
    with open(os.path.splitext(path)[0] + ".json", "w") as f:
        json.dump({"depth_max": dmax, "encoding": "depth = value / 65535 * depth_max"}, f)
    return dmax


def load_depth_png(path):
    with open(os.path.splitext(path)[0] + ".json") as f:
        dmax = json.load(f)["depth_max"]
    with Image.open(path) as im:
        return decode_depth(np.array(im), dmax)


# --- metrics --------------------------------------------------------------------

def psnr(img, ref, mask=None):
    """PSNR over the mask interior; identical images give inf."""
    img = np.asarray(img, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if img.shape != ref.shape:
        raise ValueError(f"image shapes differ: {img.shape} vs {ref.shape}")
    if mask is None:
        mask = np.ones(img.shape[:2], dtype=bool)
    if not mask.any():
        raise ValueError("empty evaluation mask")
    mse = float(np.mean((img[mask] - ref[mask]) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


# --- helpers --------------------------------------------------------------------

def config_from_args(args):
    iters = args.iters
    overrides = dict(
        seed=args.seed,
        use_consistency=not args.no_consistency,
        use_prior=not args.no_prior,
        use_opacity_loss=not args.no_opacity_loss,
        use_mask_loss=not args.no_mask_loss,
    )
    if args.max_surfels is not None:
        overrides["max_surfels"] = args.max_surfels
    if args.init_count is not None:
        overrides["init_count"] = args.init_count
    if iters == REFERENCE_ITERS:
        return TrainConfig(total_iters=iters, **overrides)
    return TrainConfig.for_iterations(iters, **overrides)


def _load_surfels(path):
    if os.path.isdir(path):
        path = os.path.join(path, CHECKPOINT_NAME)
    return load_checkpoint(path)


def _view_ids(spec, n):
    if spec in (None, "all"):
        return list(range(n))
    ids = [int(s) for s in spec.split(",") if s.strip()]
    bad = [i for i in ids if not 0 <= i < n]
    if bad:
        raise ValueError(f"view indices out of range: {bad} (scene has {n} views)")
    return ids


# --- subcommands ----------------------------------------------------------------

def cmd_synth(args):
    scene = SyntheticScene(kind=args.kind, n_views=args.views, image_size=args.size,
                           cam_radius=args.cam_radius, seed=args.seed)
    ds = synth(scene, args.out)
    print(json.dumps({"scene": args.kind, "views": len(ds.views), "out": args.out}))
    return 0


def cmd_train(args):
    ds = load_scene(args.scene)
    os.makedirs(args.out, exist_ok=True)
    cfg = config_from_args(args)
    state = None
    init = None
    if args.resume:
        ck = load_checkpoint(args.resume)
        cfg = TrainConfig.from_dict(ck.config)
        state = TrainState(ck.surfels, OptimizerState.from_arrays(ck.optimizer), ck.iteration,
                           **{k: v for k, v in ck.extras.items()})
    elif args.init_ply:
        init = import_sparse_points(args.init_ply, seed=cfg.seed)
    t0 = time.time()
    with open(os.path.join(args.out, LOG_NAME), "a" if args.resume else "w") as lf:
        state, _ = train(ds, cfg, state=state, init_surfels=init, log_file=lf, stop_at=args.stop_at)
    ck = Checkpoint(cfg.to_dict(), state.surfels, state.optim.to_arrays(), state.iteration,
                    cfg.seed, state.extras())
    path = os.path.join(args.out, CHECKPOINT_NAME)
    save_checkpoint(path, ck)
    print(json.dumps({"checkpoint": path, "iterations": state.iteration,
                      "surfels": state.surfels.count, "seconds": round(time.time() - t0, 2)}))
    return 0


def cmd_render(args):
    ds = load_scene(args.scene)
    ck = _load_surfels(args.checkpoint)
    cfg = TrainConfig.from_dict(ck.config).render_config(ds.background)
    os.makedirs(args.out, exist_ok=True)
    for k in _view_ids(args.views, len(ds.views)):
        target, _ = render(ck.surfels, ds.views[k].camera, cfg)
        stem = os.path.join(args.out, f"{k:03d}")
        save_png(stem + "_color.png", to_uint8(target.color))
        save_depth_png(stem + "_depth.png", target.depth)
        n = target.normal
        norm = np.linalg.norm(n, axis=-1, keepdims=True)
        n = np.where(norm > 1e-12, n / np.maximum(norm, 1e-12), 0.0)
        save_png(stem + "_normal.png", encode_normal_map(n))
    return 0


def cmd_fuse(args):
    ds = load_scene(args.scene)
    ck = _load_surfels(args.checkpoint)
    mode = "none" if args.no_cut else args.cut_mode
    fcfg = FuseConfig(mode=mode, grid_res=args.grid_res, lam=args.lambda_cut)
    rcfg = TrainConfig.from_dict(ck.config).render_config(ds.background)
    cloud = extract_surface(ck.surfels, ds, fcfg, rcfg)
    cloud.save(args.out)
    print(json.dumps({"points": len(cloud), "mode": mode, "out": args.out}))
    return 0


def cmd_eval(args):
    report = {}
    if args.pred or args.ref:
        if not (args.pred and args.ref):
            raise ValueError("--pred and --ref must be given together")
        a, _, _ = read_point_cloud(args.pred)
        b, _, _ = read_point_cloud(args.ref)
        report["chamfer"] = chamfer_distance(a, b)
    if args.image or args.ref_image:
        if not (args.image and args.ref_image):
            raise ValueError("--image and --ref-image must be given together")
        mask = load_mask(args.mask) if args.mask else None
        report["psnr"] = psnr(load_image(args.image), load_image(args.ref_image), mask)
    if args.scene and args.checkpoint:
        ds = load_scene(args.scene)
        ck = _load_surfels(args.checkpoint)
        cfg = TrainConfig.from_dict(ck.config).render_config(ds.background)
        per_view = []
        for k in _view_ids(args.views, len(ds.views)):
            v = ds.views[k]
            target, _ = render(ck.surfels, v.camera, cfg)
            per_view.append(psnr(to_uint8(target.color) / 255.0, v.image, v.mask))
        report["psnr_views"] = per_view
        report["psnr_mean"] = float(np.mean(per_view))
    if not report:
        raise ValueError("eval needs --pred/--ref, --image/--ref-image or --scene/--checkpoint")
    text = json.dumps(report)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text + "\n")
    print(text)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="gsurfel", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write an analytic test scene")
    s.add_argument("kind", choices=KINDS)
    s.add_argument("--out", required=True)
    s.add_argument("--views", type=int, default=24)
    s.add_argument("--size", type=int, default=128)
    s.add_argument("--cam-radius", type=float, default=3.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="optimize surfels on a scene")
    t.add_argument("--scene", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--iters", type=int, default=REFERENCE_ITERS)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--no-consistency", action="store_true")
    t.add_argument("--no-prior", action="store_true")
    t.add_argument("--no-opacity-loss", action="store_true")
    t.add_argument("--no-mask-loss", action="store_true")
    t.add_argument("--max-surfels", type=int, default=None)
    t.add_argument("--init-count", type=int, default=None)
    t.add_argument("--init-ply", default=None, help="sparse points used as initialization")
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--stop-at", type=int, default=None, help="stop early at this iteration")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render color, depth and normal maps")
    r.add_argument("--scene", required=True)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--views", default="all", help="comma separated indices or 'all'")
    r.set_defaults(func=cmd_render)

    f = sub.add_parser("fuse", help="fuse rendered depth maps into an oriented point cloud")
    f.add_argument("--scene", required=True)
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--no-cut", action="store_true")
    f.add_argument("--cut-mode", choices=[m for m in CUT_MODES if m != "none"], default="grid")
    f.add_argument("--grid-res", type=int, default=DEFAULT_GRID_RES)
    f.add_argument("--lambda-cut", type=float, default=DEFAULT_LAMBDA)
    f.set_defaults(func=cmd_fuse)

    e = sub.add_parser("eval", help="Chamfer distance and masked PSNR")
    e.add_argument("--pred")
    e.add_argument("--ref")
    e.add_argument("--image")
    e.add_argument("--ref-image")
    e.add_argument("--mask")
    e.add_argument("--scene")
    e.add_argument("--checkpoint")
    e.add_argument("--views", default="all")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except tuple(EXIT_CODES) as e:
        for cls, code in EXIT_CODES.items():
            if isinstance(e, cls):
                print(f"error [{type(e).__name__}]: {e}", file=sys.stderr)
                return code
        raise


if __name__ == "__main__":
    sys.exit(main())
