"""Real spherical harmonics up to degree 3, with the Jacobian w.r.t. direction."""

import numpy as np

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

N_COEFFS = 16


def sh_basis(dirs, degree=3):
    """Basis values (N, 16) for unit directions (N, 3); bands above `degree` are zero."""
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    out = np.zeros((dirs.shape[0], N_COEFFS), dtype=dirs.dtype)
    out[:, 0] = SH_C0
    if degree < 1:
        return out
    out[:, 1] = -SH_C1 * y
    out[:, 2] = SH_C1 * z
    out[:, 3] = -SH_C1 * x
    if degree < 2:
        return out
    xx, yy, zz = x * x, y * y, z * z
    out[:, 4] = SH_C2[0] * x * y
    out[:, 5] = SH_C2[1] * y * z
    out[:, 6] = SH_C2[2] * (2 * zz - xx - yy)
    out[:, 7] = SH_C2[3] * x * z
    out[:, 8] = SH_C2[4] * (xx - yy)
    if degree < 3:
        return out
    out[:, 9] = SH_C3[0] * y * (3 * xx - yy)
    out[:, 10] = SH_C3[1] * x * y * z
    out[:, 11] = SH_C3[2] * y * (4 * zz - xx - yy)
    out[:, 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
    out[:, 13] = SH_C3[4] * x * (4 * zz - xx - yy)
    out[:, 14] = SH_C3[5] * z * (xx - yy)
    out[:, 15] = SH_C3[6] * x * (xx - 3 * yy)
    return out


def sh_basis_jacobian(dirs, degree=3):
    """d(basis)/d(dir) as an (N, 16, 3) array, treating the direction components as free."""
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    jac = np.zeros((dirs.shape[0], N_COEFFS, 3), dtype=dirs.dtype)
    if degree < 1:
        return jac
    jac[:, 1, 1] = -SH_C1
    jac[:, 2, 2] = SH_C1
    jac[:, 3, 0] = -SH_C1
    if degree < 2:
        return jac
    xx, yy, zz = x * x, y * y, z * z
    jac[:, 4, 0] = SH_C2[0] * y
    jac[:, 4, 1] = SH_C2[0] * x
    jac[:, 5, 1] = SH_C2[1] * z
    jac[:, 5, 2] = SH_C2[1] * y
    jac[:, 6, 0] = -2 * SH_C2[2] * x
    jac[:, 6, 1] = -2 * SH_C2[2] * y
    jac[:, 6, 2] = 4 * SH_C2[2] * z
    jac[:, 7, 0] = SH_C2[3] * z
    jac[:, 7, 2] = SH_C2[3] * x
    jac[:, 8, 0] = 2 * SH_C2[4] * x
    jac[:, 8, 1] = -2 * SH_C2[4] * y
    if degree < 3:
        return jac
    jac[:, 9, 0] = SH_C3[0] * 6 * x * y
    jac[:, 9, 1] = SH_C3[0] * (3 * xx - 3 * yy)
    jac[:, 10, 0] = SH_C3[1] * y * z
    jac[:, 10, 1] = SH_C3[1] * x * z
    jac[:, 10, 2] = SH_C3[1] * x * y
    jac[:, 11, 0] = SH_C3[2] * (-2 * x * y)
    jac[:, 11, 1] = SH_C3[2] * (4 * zz - xx - 3 * yy)
    jac[:, 11, 2] = SH_C3[2] * 8 * y * z
    jac[:, 12, 0] = SH_C3[3] * (-6 * x * z)
    jac[:, 12, 1] = SH_C3[3] * (-6 * y * z)
    jac[:, 12, 2] = SH_C3[3] * (6 * zz - 3 * xx - 3 * yy)
    jac[:, 13, 0] = SH_C3[4] * (4 * zz - 3 * xx - yy)
    jac[:, 13, 1] = SH_C3[4] * (-2 * x * y)
    jac[:, 13, 2] = SH_C3[4] * 8 * x * z
    jac[:, 14, 0] = SH_C3[5] * 2 * x * z
    jac[:, 14, 1] = SH_C3[5] * (-2 * y * z)
    jac[:, 14, 2] = SH_C3[5] * (xx - yy)
    jac[:, 15, 0] = SH_C3[6] * (3 * xx - 3 * yy)
    jac[:, 15, 1] = SH_C3[6] * (-6 * x * y)
    return jac


def rgb_to_dc(rgb):
    """DC coefficient that decodes to `rgb` under color = SH + 0.5."""
    return (np.asarray(rgb) - 0.5) / SH_C0


def eval_colors(sh_coeffs, positions, cam_center, degree=3):
    """View-dependent colors max(0, SH(dir) + 0.5) and the intermediates needed for backward.

    `sh_coeffs` has shape (N, 16, 3). Returns (colors, cache).
    """
    offset = positions - cam_center[None, :]
    dist = np.linalg.norm(offset, axis=1)
    dirs = offset / dist[:, None]
    basis = sh_basis(dirs, degree)
    raw = np.einsum("nk,nkc->nc", basis, sh_coeffs) + 0.5
    colors = np.maximum(raw, 0.0)
    cache = (dirs, dist, basis, raw > 0.0, degree)
    return colors, cache


def eval_colors_backward(grad_colors, sh_coeffs, cache):
    """Map dL/dcolor (N, 3) to (dL/dsh (N, 16, 3), dL/dposition (N, 3))."""
    dirs, dist, basis, positive, degree = cache
    g = grad_colors * positive
    d_sh = basis[:, :, None] * g[:, None, :]
    # dL/ddir = sum_k (g . sh_k) dB_k/ddir
    gk = np.einsum("nc,nkc->nk", g, sh_coeffs)
    d_dir = np.einsum("nk,nkj->nj", gk, sh_basis_jacobian(dirs, degree))
    # normalization: dir = offset / |offset|
    d_offset = (d_dir - dirs * np.sum(d_dir * dirs, axis=1, keepdims=True)) / dist[:, None]
    return d_sh, d_offset
