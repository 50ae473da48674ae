"""How much the screen-space covariance floor inflates a sphere's silhouette.

Builds surfels tangent to the unit sphere (no optimization), renders the first
training view and compares the rendered coverage with the exact mask, for several
surfel counts and floor values. Also fuses the ideal surfels as a geometry baseline.

    python3 scripts/silhouette_bias.py
"""

import numpy as np

from gsurfel.rasterizer import RenderConfig, render
from gsurfel.sh import N_COEFFS
from gsurfel.surface import FuseConfig, chamfer_distance, extract_surface
from gsurfel.surfel import SurfelSet, logit
from gsurfel.synth import SyntheticScene, build_dataset


def tangent_sphere_surfels(n, opacity=0.95):
    """Fibonacci-sphere discs, normal along the radius, scale equal to the mean spacing."""
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5**0.5) * i
    p = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], 1)
    axis = np.cross([0.0, 0.0, 1.0], p)
    s = np.linalg.norm(axis, axis=1)
    ang = np.arctan2(s, p[:, 2])
    axis /= np.maximum(s, 1e-12)[:, None]
    q = np.concatenate([np.cos(ang / 2)[:, None], axis * np.sin(ang / 2)[:, None]], 1)
    spacing = np.sqrt(4 * np.pi / n)
    return SurfelSet(p, q, np.full((n, 2), np.log(spacing)), logit(np.full(n, opacity)),
                     np.zeros((n, N_COEFFS, 3)))


def main():
    scene = SyntheticScene("sphere")
    ds = build_dataset(scene)
    view = ds.views[0]
    area = view.mask.sum()
    print(f"{'surfels':>8s} {'floor':>6s} {'radius ratio':>13s}")
    for n in (5000, 20000, 80000):
        for lowpass in (0.3, 0.1, 0.0):
            t, _ = render(tangent_sphere_surfels(n), view.camera, RenderConfig(lowpass=lowpass))
            print(f"{n:8d} {lowpass:6.1f} {np.sqrt(t.alpha.sum() / area):13.4f}")
    pc = extract_surface(tangent_sphere_surfels(20000), ds, FuseConfig())
    print(f"ideal-surfel fusion Chamfer {chamfer_distance(pc.positions, scene.sample_surface()):.5f}")


if __name__ == "__main__":
    main()
