"""Train the synthetic sphere, fuse it three ways and report Chamfer distances.

    python3 scripts/sphere_e2e.py --iters 3000 --out runs/sphere
    python3 scripts/sphere_e2e.py --lowpass 0 --out runs/sphere_nolp
    python3 scripts/sphere_e2e.py --set densify_grad_threshold=5e-5
"""

import argparse
import json
import pathlib
import time

import numpy as np

from gsurfel.checkpoint import Checkpoint, save_checkpoint
from gsurfel.surface import FuseConfig, chamfer_distance, extract_surface, nearest_distances
from gsurfel.synth import SyntheticScene, build_dataset
from gsurfel.trainer import TrainConfig, train


def run(iters=3000, seed=0, out=None, log_every=100, **overrides):
    if out is not None:
        out = pathlib.Path(out)
        out.mkdir(parents=True, exist_ok=True)
    scene = SyntheticScene("sphere", seed=seed)
    ds = build_dataset(scene)
    cfg = TrainConfig.for_iterations(iters, seed=seed, **overrides)
    t0 = time.perf_counter()

    def progress(state, br):
        if log_every and state.iteration % log_every == 0:
            print(f"iter {state.iteration:5d}  loss {br.total:.4f}  surfels {state.surfels.count}"
                  f"  {time.perf_counter() - t0:.0f}s", flush=True)

    state, _ = train(ds, cfg, callback=progress)
    train_s = time.perf_counter() - t0
    gt = scene.sample_surface()
    radius = np.linalg.norm(state.surfels.positions, axis=1)
    report = {"iters": iters, "overrides": overrides, "surfels": state.surfels.count,
              "train_seconds": train_s, "surfel_radius_median": float(np.median(radius))}
    rcfg = cfg.render_config(ds.background)
    for mode in ("grid", "none", "median"):
        pc = extract_surface(state.surfels, ds, FuseConfig(mode=mode), rcfg)
        r = np.linalg.norm(pc.positions, axis=1)
        report[mode] = {
            "points": len(pc),
            "chamfer": chamfer_distance(pc.positions, gt),
            "accuracy": float(nearest_distances(pc.positions, gt).mean()),
            "completeness": float(nearest_distances(gt, pc.positions).mean()),
            "radius_median": float(np.median(r)),
        }
        if out is not None and mode == "grid":
            pc.save(out / "fused.ply")
    if out is not None:
        save_checkpoint(out / "checkpoint.gsrf", Checkpoint(
            cfg.to_dict(), state.surfels, state.optim.to_arrays(), state.iteration, cfg.seed,
            state.extras()))
        (out / "report.json").write_text(json.dumps(report, indent=2))
    return report


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--iters", type=int, default=3000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--lowpass", type=float, default=0.3)
    ap.add_argument("--no-consistency", action="store_true")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="any other TrainConfig field, value parsed as JSON")
    ap.add_argument("--out", default=None)
    a = ap.parse_args()
    over = {}
    if a.lowpass != 0.3:
        over["lowpass"] = a.lowpass
    if a.no_consistency:
        over["use_consistency"] = False
    for item in a.set:
        key, value = item.split("=", 1)
        over[key] = json.loads(value)
    print(json.dumps(run(a.iters, a.seed, a.out, **over), indent=2))


if __name__ == "__main__":
    main()
