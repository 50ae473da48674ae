"""Loss terms on rendered maps, each returning its value and the exact gradient.

Total loss = photometric + normal prior + w_o * opacity + w_c * consistency + w_m * mask.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
L1_WEIGHT = 0.8
DSSIM_WEIGHT = 0.2
PRIOR_WEIGHT = 0.04
SMOOTH_WEIGHT = 0.005
BCE_EPS = 1e-6


class LossError(ValueError):
    pass


def _check_same(a, b, what):
    if a.shape != b.shape:
        raise LossError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - size // 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _blur(img, w):
    # zero-padded 'same' filtering; self-adjoint because the window is symmetric
    out = correlate1d(img, w, axis=0, mode="constant")
    return correlate1d(out, w, axis=1, mode="constant")


def ssim(x, y, window=None):
    """Mean SSIM over pixels and channels for (H, W, C) images, plus d(mean SSIM)/dx."""
    w = gaussian_window() if window is None else window
    mx, my = _blur(x, w), _blur(y, w)
    mxx, myy, mxy = _blur(x * x, w), _blur(y * y, w), _blur(x * y, w)
    sx = mxx - mx * mx
    sy = myy - my * my
    sxy = mxy - mx * my
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * sxy + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = sx + sy + SSIM_C2
    smap = a1 * a2 / (b1 * b2)
    n = smap.size
    # partials of each pixel's SSIM w.r.t. the filtered moments of x
    d_mx = (2 * my * a2 - 2 * my * a1) / (b1 * b2) - smap * (2 * mx / b1 - 2 * mx / b2)
    d_mxx = -smap / b2
    d_mxy = 2 * a1 / (b1 * b2)
    grad = (_blur(d_mx, w) + 2 * x * _blur(d_mxx, w) + y * _blur(d_mxy, w)) / n
    return float(smap.mean()), grad


def photometric_loss(rendered, reference, mask=None):
    """0.8 * L1 + 0.2 * (1 - SSIM) / 2, with gradient w.r.t. `rendered`."""
    _check_same(rendered, reference, "photometric_loss")
    diff = rendered - reference
    if mask is None:
        l1 = float(np.abs(diff).mean())
        g_l1 = np.sign(diff) / diff.size
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=float)[..., None], diff.shape)
        denom = max(float(m.sum()), 1.0)
        l1 = float((np.abs(diff) * m).sum() / denom)
        g_l1 = np.sign(diff) * m / denom
    s, g_s = ssim(rendered, reference)
    dssim = (1.0 - s) / 2.0
    value = L1_WEIGHT * l1 + DSSIM_WEIGHT * dssim
    grad = L1_WEIGHT * g_l1 - DSSIM_WEIGHT * 0.5 * g_s
    return value, grad


def _normalize(v, eps=1e-12):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(n, eps), n[..., 0]


def _normalize_backward(v_hat, norm, g):
    return (g - v_hat * np.sum(v_hat * g, axis=-1, keepdims=True)) / np.maximum(norm, 1e-12)[..., None]


@dataclass
class DepthNormals:
    normal: np.ndarray  # (H, W, 3) unit, oriented toward the camera
    valid: np.ndarray  # (H, W)
    cache: tuple = field(repr=False, default=None)


def depth_to_normal(depth, camera, validity=None):
    """Normals from the cross product of central differences of back-projected points."""
    H, W = depth.shape
    rays = camera.pixel_rays()
    P = depth[..., None] * rays
    ok = np.ones((H, W), dtype=bool) if validity is None else validity.astype(bool)
    valid = np.zeros((H, W), dtype=bool)
    valid[1:-1, 1:-1] = (
        ok[1:-1, 1:-1] & ok[1:-1, 2:] & ok[1:-1, :-2] & ok[2:, 1:-1] & ok[:-2, 1:-1]
    )
    a = np.zeros((H, W, 3))
    b = np.zeros((H, W, 3))
    a[1:-1, 1:-1] = P[1:-1, 2:] - P[1:-1, :-2]
    b[1:-1, 1:-1] = P[2:, 1:-1] - P[:-2, 1:-1]
    m = np.cross(a, b)
    mhat, mnorm = _normalize(m)
    valid &= mnorm >= 1e-12
    sign = np.where(np.sum(mhat * P, axis=-1) > 0, -1.0, 1.0)
    n = np.where(valid[..., None], mhat * sign[..., None], 0.0)
    return DepthNormals(n, valid, (rays, a, b, mhat, mnorm, sign))


def depth_to_normal_backward(dn, g_normal):
    """Gradient w.r.t. depth (H, W) from a gradient on the depth-derived normals."""
    rays, a, b, mhat, mnorm, sign = dn.cache
    g = np.where(dn.valid[..., None], g_normal, 0.0) * sign[..., None]
    g_m = _normalize_backward(mhat, mnorm, g)
    g_a = np.cross(b, g_m)
    g_b = np.cross(g_m, a)
    H, W = dn.valid.shape
    g_P = np.zeros((H, W, 3))
    g_P[1:-1, 2:] += g_a[1:-1, 1:-1]
    g_P[1:-1, :-2] -= g_a[1:-1, 1:-1]
    g_P[2:, 1:-1] += g_b[1:-1, 1:-1]
    g_P[:-2, 1:-1] -= g_b[1:-1, 1:-1]
    return np.sum(g_P * rays, axis=-1)


def consistency_loss(normal, depth, camera, validity):
    """mean(1 - n_rendered . n_from_depth) over valid pixels; gradients for normal and depth."""
    dn = depth_to_normal(depth, camera, validity)
    nhat, nnorm = _normalize(normal)
    valid = dn.valid & (nnorm > 0)
    count = int(valid.sum())
    if count == 0:
        return 0.0, np.zeros_like(normal), np.zeros_like(depth)
    dots = np.sum(nhat * dn.normal, axis=-1)
    value = float(np.sum(np.where(valid, 1.0 - dots, 0.0)) / count)
    vm = valid[..., None] / count
    g_nhat = -dn.normal * vm
    g_dn = -nhat * vm
    g_normal = _normalize_backward(nhat, nnorm, g_nhat) * valid[..., None]
    g_depth = depth_to_normal_backward(dn, g_dn)
    return value, g_normal, g_depth


def normal_prior_loss(normal, prior, validity):
    """0.04 * mean(1 - n . prior) + 0.005 * L1 of forward differences of the normal map."""
    H, W, _ = normal.shape
    valid = validity.astype(bool)
    g = np.zeros_like(normal)
    value = 0.0
    nhat, nnorm = _normalize(normal)
    if prior is not None:
        _check_same(normal, prior, "normal_prior_loss")
        pv = valid & (nnorm > 0)
        count = int(pv.sum())
        if count:
            dots = np.sum(nhat * prior, axis=-1)
            value += PRIOR_WEIGHT * float(np.sum(np.where(pv, 1.0 - dots, 0.0)) / count)
            g_nhat = -prior * (pv[..., None] * (PRIOR_WEIGHT / count))
            g += _normalize_backward(nhat, nnorm, g_nhat) * pv[..., None]
    count = int(valid.sum())
    if count:
        denom = 3.0 * count
        # forward differences; the replicated border contributes zero
        dx = normal[:, 1:] - normal[:, :-1]
        dy = normal[1:] - normal[:-1]
        mx = (valid[:, 1:] & valid[:, :-1])[..., None]
        my = (valid[1:] & valid[:-1])[..., None]
        value += SMOOTH_WEIGHT * float((np.abs(dx) * mx).sum() + (np.abs(dy) * my).sum()) / denom
        sx = np.sign(dx) * mx * (SMOOTH_WEIGHT / denom)
        sy = np.sign(dy) * my * (SMOOTH_WEIGHT / denom)
        g[:, 1:] += sx
        g[:, :-1] -= sx
        g[1:] += sy
        g[:-1] -= sy
    return value, g


def opacity_loss(opacities):
    """mean exp(-(o - 0.5)^2 / 0.05) and its gradient w.r.t. each opacity."""
    o = np.asarray(opacities, dtype=float)
    if o.size == 0:
        return 0.0, np.zeros(0)
    e = np.exp(-((o - 0.5) ** 2) / 0.05)
    grad = e * (-2.0 * (o - 0.5) / 0.05) / o.size
    return float(e.mean()), grad


def mask_loss(alpha, mask):
    """Mean binary cross-entropy between accumulated alpha and a binary mask."""
    _check_same(alpha, mask, "mask_loss")
    m = np.asarray(mask, dtype=float)
    a = np.clip(alpha, BCE_EPS, 1.0 - BCE_EPS)
    value = float(-(m * np.log(a) + (1 - m) * np.log(1 - a)).mean())
    inside = (alpha > BCE_EPS) & (alpha < 1.0 - BCE_EPS)
    grad = np.where(inside, (-m / a + (1 - m) / (1 - a)) / alpha.size, 0.0)
    return value, grad


@dataclass
class LossWeights:
    lambda_o: float = 0.01
    lambda_c: float = 0.1
    lambda_m: float = 1.0
    use_photometric: bool = True
    use_prior: bool = True

    def __post_init__(self):
        if min(self.lambda_o, self.lambda_c, self.lambda_m) < 0:
            raise LossError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    total: float
    photometric: float
    consistency: float
    normal_prior: float
    opacity: float
    mask: float
    grad_color: np.ndarray
    grad_depth: np.ndarray
    grad_normal: np.ndarray
    grad_alpha: np.ndarray
    grad_opacity: np.ndarray  # per surfel, w.r.t. activated opacity

    def terms(self):
        return {
            "photometric": self.photometric,
            "consistency": self.consistency,
            "normal_prior": self.normal_prior,
            "opacity": self.opacity,
            "mask": self.mask,
        }


def assemble(weights, target, camera, reference, opacities, mask=None, prior=None):
    """Evaluate every enabled term on one render and combine values and gradients."""
    H, W = target.alpha.shape
    g_color = np.zeros((H, W, 3))
    g_depth = np.zeros((H, W))
    g_normal = np.zeros((H, W, 3))
    g_alpha = np.zeros((H, W))

    lp = 0.0
    if weights.use_photometric:
        lp, gp = photometric_loss(target.color, reference)
        g_color += gp

    ln = 0.0
    if weights.use_prior:
        ln, gn = normal_prior_loss(target.normal, prior, target.coverage_valid)
        g_normal += gn

    # evaluated even at zero weight so ablation runs still log it
    lc, gcn, gcd = consistency_loss(target.normal, target.depth, camera, target.coverage_valid)
    g_normal += weights.lambda_c * gcn
    g_depth += weights.lambda_c * gcd

    lo, go = 0.0, np.zeros(len(opacities))
    if weights.lambda_o > 0:
        lo, go = opacity_loss(opacities)
        go = go * weights.lambda_o

    lm = 0.0
    if weights.lambda_m > 0 and mask is not None:
        lm, gm = mask_loss(target.alpha, mask)
        g_alpha += weights.lambda_m * gm

    total = lp + ln + weights.lambda_o * lo + weights.lambda_c * lc + weights.lambda_m * lm
    return LossBreakdown(
        total=total,
        photometric=lp,
        consistency=lc,
        normal_prior=ln,
        opacity=lo,
        mask=lm,
        grad_color=g_color,
        grad_depth=g_depth,
        grad_normal=g_normal,
        grad_alpha=g_alpha,
        grad_opacity=go,
    )
