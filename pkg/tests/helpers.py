"""Shared scene builders and a brute-force compositor used as an oracle."""

import numpy as np

from gsurfel.projection import CameraView
from gsurfel.rasterizer import RenderConfig
from gsurfel.sh import N_COEFFS
from gsurfel.surfel import SurfelSet, logit, random_unit_quaternions

# thresholds off so finite differences never straddle a discontinuity
EXACT = dict(alpha_min=0.0, t_stop=0.0, normal_grad_scale=1.0)


def front_camera(size=32, f=None, dist=3.0):
    f = f if f is not None else 1.2 * size
    return CameraView.look_at(
        np.array([0.0, 0.0, -dist]), np.zeros(3), (0.0, -1.0, 0.0),
        f, f, (size - 1) / 2.0, (size - 1) / 2.0, size, size,
    )


def random_surfels(rng, n, spread=0.5, scale=(0.08, 0.3), opacity=(0.2, 0.9), sh_scale=0.2):
    pos = rng.uniform(-spread, spread, (n, 3))
    sh = rng.normal(0.0, sh_scale, (n, N_COEFFS, 3))
    sh[:, 0, :] += 0.5
    return SurfelSet(
        positions=pos,
        rotations=random_unit_quaternions(rng, n) * rng.uniform(0.5, 2.0, (n, 1)),
        log_scales=np.log(rng.uniform(*scale, (n, 2))),
        opacity_logits=logit(rng.uniform(*opacity, n)),
        sh_coeffs=sh,
    )


def exact_config(**kw):
    cfg = dict(EXACT)
    cfg.update(kw)
    return RenderConfig(**cfg)


def brute_force_blend(proj, opac, colors, cfg, width, height):
    """Per-pixel front-to-back compositing written directly from the definition.

    Returns the unnormalized color/depth/normal sums, the weights T_i * alpha_i
    per surfel, and the final transmittance.
    """
    order = np.lexsort((np.arange(len(proj)), proj.depth))
    order = [i for i in order if not proj.culled[i]]
    sum_c = np.zeros((height, width, 3))
    sum_d = np.zeros((height, width))
    sum_n = np.zeros((height, width, 3))
    weights = np.zeros((height, width, len(proj)))
    T_final = np.ones((height, width))
    for r in range(height):
        for c in range(width):
            T = 1.0
            for i in order:
                d = proj.means2d[i] - (c, r)
                a, b, cc = proj.conic[i]
                power = -0.5 * (a * d[0] ** 2 + cc * d[1] ** 2) - b * d[0] * d[1]
                if power > 0:
                    continue
                alpha = min(opac[i] * np.exp(power), cfg.alpha_max)
                if alpha < cfg.alpha_min:
                    continue
                if T * (1 - alpha) < cfg.t_stop:
                    break
                w = T * alpha
                weights[r, c, i] = w
                sum_c[r, c] += w * colors[i]
                sum_d[r, c] += w * proj.pixel_depth(i, (c, r))
                sum_n[r, c] += w * proj.cam_normal[i]
                T *= 1 - alpha
            T_final[r, c] = T
    return sum_c, sum_d, sum_n, weights, T_final
