"""Volumetric cutting on the two-plane occluder scene.

Fuses a converged surfel tiling of both squares with no cutting, grid cutting and
the median-depth filter, and counts fused points farther than 3 sigma from the planes.

    python3 scripts/cutting_experiment.py
"""

import argparse

import numpy as np

from gsurfel.surface import FuseConfig, chamfer_distance, extract_surface
from gsurfel.synth import SyntheticScene, build_dataset, occluder_surfels


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--spacing", type=float, default=0.05)
    ap.add_argument("--grid-res", type=int, default=512)
    ap.add_argument("--out", default=None, help="directory for the fused clouds")
    a = ap.parse_args()
    scene = SyntheticScene("occluder")
    ds = build_dataset(scene)
    surfels = occluder_surfels(scene, spacing=a.spacing)
    gt = scene.sample_surface()
    print(f"{'mode':8s} {'points':>8s} {'chamfer':>9s} {'> 3 sigma':>10s}")
    for mode in ("none", "grid", "median"):
        pc = extract_surface(surfels, ds, FuseConfig(mode=mode, grid_res=a.grid_res))
        far = int((np.abs(scene.distance_to_surface(pc.positions)) > 3 * a.spacing).sum())
        print(f"{mode:8s} {len(pc):8d} {chamfer_distance(pc.positions, gt):9.5f} {far:10d}")
        if a.out:
            pc.save(f"{a.out}/occluder_{mode}.ply")


if __name__ == "__main__":
    main()
