"""Tile-based forward splatting of surfels and its exact reverse-mode adjoint.

Per pixel, surfels are alpha-blended front to back:

    w_i = T_i * alpha_i,   T_i = prod_{j<i} (1 - alpha_j)

Color receives a background composite; depth and normal are normalized by the
accumulated weight sum_i w_i (= 1 - T_final).
"""

import zlib
from dataclasses import dataclass, field
from typing import Optional

import numba
import numpy as np

# the bundled TBB is too old for numba; pick the OpenMP/workqueue layer up front
if numba.config.THREADING_LAYER == "default":
    numba.config.THREADING_LAYER = "omp"

from .projection import project_backward, project_surfels
from .sh import eval_colors, eval_colors_backward
from .surfel import sigmoid

N_GRAD_FIELDS = 15  # mean 2, conic 3, opacity 1, color 3, depth 1, slope 2, normal 3


class RasterError(RuntimeError):
    pass


@dataclass
class RenderConfig:
    tile_size: Optional[int] = 16  # None renders the whole image as a single tile
    alpha_min: float = 1.0 / 255.0
    alpha_max: float = 0.99
    t_stop: float = 1e-4
    eps_cov: float = 1e-4
    lowpass: float = 0.3
    normal_grad_scale: float = 10.0
    sh_degree: int = 3
    background: tuple = (0.0, 0.0, 0.0)


@dataclass
class RenderTarget:
    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W)
    normal: np.ndarray  # (H, W, 3), unnormalized blend
    alpha: np.ndarray  # (H, W)
    coverage_valid: np.ndarray  # (H, W) bool


@dataclass
class RenderContext:
    """Everything the backward pass needs from the matching forward pass."""

    permutation: np.ndarray  # surfel indices, front to back
    projection: object
    color_cache: tuple
    colors: np.ndarray
    opacities: np.ndarray
    point_list: np.ndarray
    tile_ranges: np.ndarray
    tile_size: int
    t_final: np.ndarray
    n_contrib: np.ndarray
    raw_sums: dict
    config: RenderConfig
    fingerprint: int
    count: int


@dataclass
class RenderGrads:
    """Upstream gradients of a scalar loss w.r.t. the rendered maps (None means zero)."""

    color: Optional[np.ndarray] = None
    depth: Optional[np.ndarray] = None
    normal: Optional[np.ndarray] = None
    alpha: Optional[np.ndarray] = None


@dataclass
class GradientBuffer:
    d_position: np.ndarray
    d_rotation: np.ndarray
    d_log_scale: np.ndarray
    d_opacity_logit: np.ndarray
    d_sh: np.ndarray
    screen_grad: np.ndarray = field(default=None)  # per-surfel |dL/d(projected center)|, pixel units
    touched: np.ndarray = field(default=None)

    @classmethod
    def zeros(cls, n):
        return cls(
            np.zeros((n, 3)),
            np.zeros((n, 4)),
            np.zeros((n, 2)),
            np.zeros(n),
            np.zeros((n, 16, 3)),
            np.zeros(n),
            np.zeros(n, dtype=bool),
        )

    def arrays(self):
        return {
            "positions": self.d_position,
            "rotations": self.d_rotation,
            "log_scales": self.d_log_scale,
            "opacity_logits": self.d_opacity_logit,
            "sh_coeffs": self.d_sh,
        }


def _fingerprint(surfels):
    h = zlib.crc32(np.ascontiguousarray(surfels.positions).tobytes())
    h = zlib.crc32(np.ascontiguousarray(surfels.rotations).tobytes(), h)
    return zlib.crc32(np.ascontiguousarray(surfels.log_scales).tobytes(), h)


def bin_tiles(means, radius, width, height, tile):
    """Sorted-order surfel lists per tile: (point_list, tile_ranges (n_tiles, 2))."""
    tx = (width + tile - 1) // tile
    ty = (height + tile - 1) // tile
    n_tiles = tx * ty
    if len(means) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros((n_tiles, 2), dtype=np.int64)
    x0 = np.clip(np.floor((means[:, 0] - radius + 0.5) / tile), 0, tx - 1).astype(np.int64)
    x1 = np.clip(np.floor((means[:, 0] + radius + 0.5) / tile), 0, tx - 1).astype(np.int64)
    y0 = np.clip(np.floor((means[:, 1] - radius + 0.5) / tile), 0, ty - 1).astype(np.int64)
    y1 = np.clip(np.floor((means[:, 1] + radius + 0.5) / tile), 0, ty - 1).astype(np.int64)
    nx = x1 - x0 + 1
    ny = y1 - y0 + 1
    counts = nx * ny
    owner = np.repeat(np.arange(len(means)), counts)
    start = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(len(owner)) - start
    tile_x = x0[owner] + local % nx[owner]
    tile_y = y0[owner] + local // nx[owner]
    tile_id = tile_y * tx + tile_x
    order = np.argsort(tile_id, kind="stable")
    point_list = owner[order]
    sorted_ids = tile_id[order]
    ranges = np.zeros((n_tiles, 2), dtype=np.int64)
    ranges[:, 0] = np.searchsorted(sorted_ids, np.arange(n_tiles), side="left")
    ranges[:, 1] = np.searchsorted(sorted_ids, np.arange(n_tiles), side="right")
    return point_list, ranges


@numba.njit(parallel=True, cache=True)
def _forward_kernel(
    means, conic, opac, colors, depth, slope, normal,
    point_list, ranges, tile, width, height, alpha_min, alpha_max, t_stop,
):
    tiles_x = (width + tile - 1) // tile
    n_tiles = ranges.shape[0]
    sum_c = np.zeros((height, width, 3))
    sum_d = np.zeros((height, width))
    sum_n = np.zeros((height, width, 3))
    sum_w = np.zeros((height, width))
    t_final = np.ones((height, width))
    n_contrib = np.zeros((height, width), dtype=np.int64)
    for t_id in numba.prange(n_tiles):
        ty = t_id // tiles_x
        tx = t_id - ty * tiles_x
        r0, r1 = ranges[t_id, 0], ranges[t_id, 1]
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                T = 1.0
                last = 0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                dd = 0.0
                n0 = 0.0
                n1 = 0.0
                n2 = 0.0
                ws = 0.0
                for k in range(r0, r1):
                    i = point_list[k]
                    dx = means[i, 0] - px
                    dy = means[i, 1] - py
                    power = -0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) - conic[i, 1] * dx * dy
                    if power > 0.0:
                        continue
                    a = opac[i] * np.exp(power)
                    if a > alpha_max:
                        a = alpha_max
                    if a < alpha_min:
                        continue
                    test_T = T * (1.0 - a)
                    if test_T < t_stop:
                        break
                    w = a * T
                    ws += w
                    c0 += w * colors[i, 0]
                    c1 += w * colors[i, 1]
                    c2 += w * colors[i, 2]
                    dd += w * (depth[i] - slope[i, 0] * dx - slope[i, 1] * dy)
                    n0 += w * normal[i, 0]
                    n1 += w * normal[i, 1]
                    n2 += w * normal[i, 2]
                    T = test_T
                    last = k - r0 + 1
                sum_c[py, px, 0] = c0
                sum_c[py, px, 1] = c1
                sum_c[py, px, 2] = c2
                sum_d[py, px] = dd
                sum_n[py, px, 0] = n0
                sum_n[py, px, 1] = n1
                sum_n[py, px, 2] = n2
                sum_w[py, px] = ws
                t_final[py, px] = T
                n_contrib[py, px] = last
    return sum_c, sum_d, sum_n, sum_w, t_final, n_contrib


@numba.njit(parallel=True, cache=True)
def _backward_kernel(
    means, conic, opac, colors, depth, slope, normal,
    point_list, ranges, tile, width, height, alpha_min, alpha_max,
    t_final, n_contrib, g_c, g_d, g_n, g_a,
):
    tiles_x = (width + tile - 1) // tile
    n_tiles = ranges.shape[0]
    buf = np.zeros((point_list.shape[0], 15))
    for t_id in numba.prange(n_tiles):
        ty = t_id // tiles_x
        tx = t_id - ty * tiles_x
        r0 = ranges[t_id, 0]
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                last = n_contrib[py, px]
                if last == 0:
                    continue
                T = t_final[py, px]
                gc0 = g_c[py, px, 0]
                gc1 = g_c[py, px, 1]
                gc2 = g_c[py, px, 2]
                gd = g_d[py, px]
                gn0 = g_n[py, px, 0]
                gn1 = g_n[py, px, 1]
                gn2 = g_n[py, px, 2]
                ga = g_a[py, px]
                acc = 0.0  # sum over later surfels of w_j (f_j . g)
                for k in range(r0 + last - 1, r0 - 1, -1):
                    i = point_list[k]
                    dx = means[i, 0] - px
                    dy = means[i, 1] - py
                    power = -0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) - conic[i, 1] * dx * dy
                    if power > 0.0:
                        continue
                    G = np.exp(power)
                    raw = opac[i] * G
                    a = raw
                    if a > alpha_max:
                        a = alpha_max
                    if a < alpha_min:
                        continue
                    T = T / (1.0 - a)
                    w = a * T
                    d_pix = depth[i] - slope[i, 0] * dx - slope[i, 1] * dy
                    fg = (colors[i, 0] * gc0 + colors[i, 1] * gc1 + colors[i, 2] * gc2
                          + d_pix * gd + normal[i, 0] * gn0 + normal[i, 1] * gn1
                          + normal[i, 2] * gn2 + ga)
                    d_alpha = T * fg - acc / (1.0 - a)
                    acc += w * fg
                    # features
                    buf[k, 6] += w * gc0
                    buf[k, 7] += w * gc1
                    buf[k, 8] += w * gc2
                    wd = w * gd
                    buf[k, 9] += wd
                    buf[k, 10] -= wd * dx
                    buf[k, 11] -= wd * dy
                    buf[k, 0] -= wd * slope[i, 0]
                    buf[k, 1] -= wd * slope[i, 1]
                    buf[k, 12] += w * gn0
                    buf[k, 13] += w * gn1
                    buf[k, 14] += w * gn2
                    if raw > alpha_max:
                        continue
                    buf[k, 5] += G * d_alpha
                    dp = opac[i] * G * d_alpha
                    buf[k, 2] -= 0.5 * dx * dx * dp
                    buf[k, 3] -= dx * dy * dp
                    buf[k, 4] -= 0.5 * dy * dy * dp
                    buf[k, 0] -= (conic[i, 0] * dx + conic[i, 1] * dy) * dp
                    buf[k, 1] -= (conic[i, 1] * dx + conic[i, 2] * dy) * dp
    return buf


@numba.njit(cache=True)
def _reduce(buf, point_list, n):
    out = np.zeros((n, buf.shape[1]))
    for k in range(point_list.shape[0]):
        i = point_list[k]
        for f in range(buf.shape[1]):
            out[i, f] += buf[k, f]
    return out


def support_radius(cov2d, opacity, alpha_min):
    """Pixel radius outside which a splat's alpha is below alpha_min.

    q = d^T cov^-1 d >= |d|^2 / lambda_max, and alpha = o exp(-q/2) < alpha_min
    once q > 2 ln(o / alpha_min); alpha_min = 0 is treated as the smallest normal float.
    """
    floor = max(alpha_min, np.finfo(float).tiny)
    q_cut = np.maximum(2.0 * np.log(opacity / floor), 0.0)
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    return np.sqrt(q_cut * lam_max)


def _visible(proj, n):
    idx = np.nonzero(~proj.culled)[0]
    # front to back, ties by surfel index
    order = np.lexsort((idx, proj.depth[idx]))
    return idx[order]


def render(surfels, camera, config=None):
    """Forward pass. Returns (RenderTarget, RenderContext)."""
    config = config or RenderConfig()
    H, W = camera.height, camera.width
    n = surfels.count
    proj = project_surfels(
        surfels.positions, surfels.rotations, surfels.log_scales, camera, config.lowpass
    )
    perm = _visible(proj, n)
    colors, ccache = eval_colors(
        surfels.sh_coeffs[perm], surfels.positions[perm], camera.center, config.sh_degree
    )
    opac = sigmoid(surfels.opacity_logits[perm])
    tile = config.tile_size or max(W, H)
    means = np.ascontiguousarray(proj.means2d[perm])
    radius = support_radius(proj.cov2d[perm], opac, config.alpha_min)
    point_list, ranges = bin_tiles(means, radius, W, H, tile)
    args = (
        means,
        np.ascontiguousarray(proj.conic[perm]),
        opac,
        np.ascontiguousarray(colors),
        np.ascontiguousarray(proj.depth[perm]),
        np.ascontiguousarray(proj.depth_slope[perm]),
        np.ascontiguousarray(proj.cam_normal[perm]),
        point_list,
        ranges,
        tile,
        W,
        H,
        config.alpha_min,
        config.alpha_max,
        config.t_stop,
    )
    sum_c, sum_d, sum_n, sum_w, t_final, n_contrib = _forward_kernel(*args)

    # equals 1 - t_final, but without the cancellation when coverage is faint
    alpha = sum_w
    valid = alpha > config.eps_cov
    safe = np.where(valid, alpha, 1.0)
    bg = np.asarray(config.background, dtype=float)
    target = RenderTarget(
        color=sum_c + t_final[..., None] * bg,
        depth=np.where(valid, sum_d / safe, 0.0),
        normal=np.where(valid[..., None], sum_n / safe[..., None], 0.0),
        alpha=alpha,
        coverage_valid=valid,
    )
    ctx = RenderContext(
        permutation=perm,
        projection=proj,
        color_cache=ccache,
        colors=colors,
        opacities=opac,
        point_list=point_list,
        tile_ranges=ranges,
        tile_size=tile,
        t_final=t_final,
        n_contrib=n_contrib,
        raw_sums={"color": sum_c, "depth": sum_d, "normal": sum_n},
        config=config,
        fingerprint=_fingerprint(surfels),
        count=n,
    )
    return target, ctx


def render_backward(surfels, camera, ctx, target, grads):
    """Exact adjoint of `render` w.r.t. every raw surfel parameter.

    The normal channel's contribution to R[:, 2] is multiplied by
    ctx.config.normal_grad_scale before it reaches the quaternion.
    """
    if surfels.count != ctx.count or _fingerprint(surfels) != ctx.fingerprint:
        raise RasterError("surfel set does not match the forward pass this context came from")
    cfg = ctx.config
    H, W = camera.height, camera.width
    n = surfels.count
    out = GradientBuffer.zeros(n)
    perm = ctx.permutation
    if len(perm) == 0:
        return out

    zero3 = np.zeros((H, W, 3))
    zero1 = np.zeros((H, W))
    gC = zero3 if grads.color is None else grads.color
    gD = zero1 if grads.depth is None else grads.depth
    gN = zero3 if grads.normal is None else grads.normal
    gA = zero1 if grads.alpha is None else grads.alpha

    valid = target.coverage_valid
    alpha = np.where(valid, target.alpha, 1.0)
    bg = np.asarray(cfg.background, dtype=float)
    g_d = np.where(valid, gD / alpha, 0.0)
    g_n = np.where(valid[..., None], gN / alpha[..., None], 0.0)
    g_a = gA - gC @ bg
    g_a = g_a - np.where(
        valid, (gD * target.depth + np.sum(gN * target.normal, axis=-1)) / alpha, 0.0
    )

    proj = ctx.projection
    buf = _backward_kernel(
        np.ascontiguousarray(proj.means2d[perm]),
        np.ascontiguousarray(proj.conic[perm]),
        ctx.opacities,
        np.ascontiguousarray(ctx.colors),
        np.ascontiguousarray(proj.depth[perm]),
        np.ascontiguousarray(proj.depth_slope[perm]),
        np.ascontiguousarray(proj.cam_normal[perm]),
        ctx.point_list,
        ctx.tile_ranges,
        ctx.tile_size,
        W,
        H,
        cfg.alpha_min,
        cfg.alpha_max,
        ctx.t_final,
        ctx.n_contrib,
        np.ascontiguousarray(gC, dtype=float),
        np.ascontiguousarray(g_d),
        np.ascontiguousarray(g_n),
        np.ascontiguousarray(g_a),
    )
    g = _reduce(buf, ctx.point_list, len(perm))

    m = len(perm)
    d_means = np.zeros((n, 2))
    d_conic = np.zeros((n, 3))
    d_depth = np.zeros(n)
    d_slope = np.zeros((n, 2))
    d_normal = np.zeros((n, 3))
    d_means[perm] = g[:, 0:2]
    d_conic[perm] = g[:, 2:5]
    d_depth[perm] = g[:, 9]
    d_slope[perm] = g[:, 10:12]
    d_normal[perm] = g[:, 12:15] * cfg.normal_grad_scale

    d_pos, d_rot, d_ls = project_backward(
        proj, camera, d_means, d_conic, d_depth, d_slope, d_normal, surfels.rotations
    )
    d_sh_v, d_pos_color = eval_colors_backward(g[:, 6:9], surfels.sh_coeffs[perm], ctx.color_cache)
    d_pos[perm] += d_pos_color
    out.d_position = d_pos
    out.d_rotation = d_rot
    out.d_log_scale = d_ls
    o = ctx.opacities
    out.d_opacity_logit[perm] = g[:, 5] * o * (1.0 - o)
    out.d_sh[perm] = d_sh_v

    # culled surfels never reach the kernels; keep their gradients exactly zero
    culled = np.ones(n, dtype=bool)
    culled[perm] = False
    for arr in out.arrays().values():
        arr[culled] = 0.0
    out.screen_grad[perm] = np.linalg.norm(g[:, 0:2], axis=1)  # pixel units
    touched = np.zeros(n, dtype=bool)
    touched[perm] = np.any(g != 0.0, axis=1)
    out.touched = touched
    return out


@numba.njit(cache=True)
def _median_kernel(
    means, conic, opac, depth, slope, point_list, ranges, tile, width, height,
    alpha_min, alpha_max, t_stop, band,
):
    """Per-pixel median surfel depth and the blend restricted to a band around it."""
    tiles_x = (width + tile - 1) // tile
    med = np.zeros((height, width))
    robust = np.zeros((height, width))
    for t_id in range(ranges.shape[0]):
        ty = t_id // tiles_x
        tx = t_id - ty * tiles_x
        r0, r1 = ranges[t_id, 0], ranges[t_id, 1]
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                T = 1.0
                m = 0.0
                found = False
                last_d = 0.0
                for k in range(r0, r1):
                    i = point_list[k]
                    dx = means[i, 0] - px
                    dy = means[i, 1] - py
                    power = -0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) - conic[i, 1] * dx * dy
                    if power > 0.0:
                        continue
                    a = min(opac[i] * np.exp(power), alpha_max)
                    if a < alpha_min:
                        continue
                    test_T = T * (1.0 - a)
                    if test_T < t_stop:
                        break
                    last_d = depth[i] - slope[i, 0] * dx - slope[i, 1] * dy
                    T = test_T
                    if T < 0.5 and not found:
                        m = last_d
                        found = True
                if not found:
                    m = last_d
                med[py, px] = m
                # second pass: blend only contributions near the median
                T = 1.0
                sw = 0.0
                sd = 0.0
                for k in range(r0, r1):
                    i = point_list[k]
                    dx = means[i, 0] - px
                    dy = means[i, 1] - py
                    power = -0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) - conic[i, 1] * dx * dy
                    if power > 0.0:
                        continue
                    a = min(opac[i] * np.exp(power), alpha_max)
                    if a < alpha_min:
                        continue
                    test_T = T * (1.0 - a)
                    if test_T < t_stop:
                        break
                    d = depth[i] - slope[i, 0] * dx - slope[i, 1] * dy
                    if abs(d - m) <= band:
                        sw += a * T
                        sd += a * T * d
                    T = test_T
                robust[py, px] = sd / sw if sw > 0.0 else m
    return med, robust


def render_median_depth(surfels, camera, ctx, band):
    """(median depth, band-filtered blended depth) maps for a finished forward pass."""
    proj = ctx.projection
    perm = ctx.permutation
    cfg = ctx.config
    return _median_kernel(
        np.ascontiguousarray(proj.means2d[perm]),
        np.ascontiguousarray(proj.conic[perm]),
        ctx.opacities,
        np.ascontiguousarray(proj.depth[perm]),
        np.ascontiguousarray(proj.depth_slope[perm]),
        ctx.point_list,
        ctx.tile_ranges,
        ctx.tile_size,
        camera.width,
        camera.height,
        cfg.alpha_min,
        cfg.alpha_max,
        cfg.t_stop,
        float(band),
    )
