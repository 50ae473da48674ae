"""Ray-space projection of surfels: screen centers, 2D covariances and per-pixel depth planes.

Pixel (row r, column c) sits at image coordinate (u, v) = (c, r). Camera space follows the
usual pinhole convention: x right, y down, z forward.
"""

from dataclasses import dataclass

import numpy as np

from .surfel import (
    normalize_quaternions,
    normalize_quaternions_backward,
    quat_to_rotmat,
    rotmat_to_quat_grad,
)

LOWPASS = 0.3
CULL_SIGMA = 3.0
MAX_TANGENT_COND = 1e5


class CameraError(ValueError):
    pass


@dataclass
class CameraView:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # world -> camera
    translation: np.ndarray
    width: int
    height: int
    near_clip: float = 0.01

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise CameraError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if self.width < 1 or self.height < 1:
            raise CameraError(f"bad image size {self.width}x{self.height}")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-9:
            raise CameraError(f"world_to_camera rotation not orthonormal (err {err:.2e})")

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, cx, cy, width, height, near_clip=0.01):
        eye = np.asarray(eye, dtype=float)
        fwd = np.asarray(target, dtype=float) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=float))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        return cls(fx, fy, cx, cy, R, -R @ eye, width, height, near_clip)

    @property
    def center(self):
        return -self.rotation.T @ self.translation

    def world_to_camera_12(self):
        return np.concatenate([self.rotation, self.translation[:, None]], axis=1).reshape(-1)

    def scaled(self, factor):
        """Camera for an image downsampled by an integer factor (k x k block average)."""
        if factor == 1:
            return self
        off = (factor - 1) / 2.0
        return CameraView(
            self.fx / factor,
            self.fy / factor,
            (self.cx - off) / factor,
            (self.cy - off) / factor,
            self.rotation,
            self.translation,
            max(1, self.width // factor),
            max(1, self.height // factor),
            self.near_clip,
        )

    def to_camera(self, points):
        return points @ self.rotation.T + self.translation

    def project(self, points):
        """World points (N, 3) to pixel coordinates (N, 2) and camera depth (N,)."""
        t = self.to_camera(points)
        u = self.fx * t[:, 0] / t[:, 2] + self.cx
        v = self.fy * t[:, 1] / t[:, 2] + self.cy
        return np.stack([u, v], axis=1), t[:, 2]

    def pixel_rays(self):
        """Camera-space rays (H, W, 3) with unit z, so that P = depth * ray."""
        v, u = np.mgrid[0 : self.height, 0 : self.width].astype(float)
        return np.stack(
            [(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1
        )

    def backproject(self, pixels, depth):
        """Pixels (N, 2) with camera-z depth (N,) to world points (N, 3)."""
        x = (pixels[:, 0] - self.cx) / self.fx * depth
        y = (pixels[:, 1] - self.cy) / self.fy * depth
        cam = np.stack([x, y, depth], axis=1)
        return (cam - self.translation) @ self.rotation


def affine_jacobian(camera, cam_point):
    """d(u, v)/d(x, y, z) of the pinhole map at a camera-space point, shape (2, 3)."""
    x, y, z = (float(c) for c in cam_point)
    if z <= 0:
        raise CameraError(f"affine Jacobian needs z > 0, got {z}")
    return np.array(
        [
            [camera.fx / z, 0.0, -camera.fx * x / (z * z)],
            [0.0, camera.fy / z, -camera.fy * y / (z * z)],
        ]
    )


def _jacobians(camera, t):
    n = len(t)
    z = t[:, 2]
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = camera.fx / z
    J[:, 0, 2] = -camera.fx * t[:, 0] / (z * z)
    J[:, 1, 1] = camera.fy / z
    J[:, 1, 2] = -camera.fy * t[:, 1] / (z * z)
    return J


def _inv2(A):
    det = A[:, 0, 0] * A[:, 1, 1] - A[:, 0, 1] * A[:, 1, 0]
    inv = np.empty_like(A)
    inv[:, 0, 0] = A[:, 1, 1]
    inv[:, 1, 1] = A[:, 0, 0]
    inv[:, 0, 1] = -A[:, 0, 1]
    inv[:, 1, 0] = -A[:, 1, 0]
    return inv / det[:, None, None], det


def _cond2(A):
    # singular values of a 2x2 matrix in closed form
    fro2 = np.sum(A * A, axis=(1, 2))
    det = np.abs(A[:, 0, 0] * A[:, 1, 1] - A[:, 0, 1] * A[:, 1, 0])
    disc = np.sqrt(np.maximum(fro2 * fro2 - 4 * det * det, 0.0))
    smax = np.sqrt((fro2 + disc) / 2)
    # det / smax is the stable route to the small singular value
    smin = np.where(smax > 0, det / np.where(smax > 0, smax, 1.0), 0.0)
    with np.errstate(divide="ignore"):
        return np.where(smin > 0, smax / np.where(smin > 0, smin, 1.0), np.inf)


@dataclass
class ProjectedSurfels:
    """Per-view projection of every surfel (batched form of a ProjectedSurfel)."""

    means2d: np.ndarray  # (N, 2) pixels
    cov2d: np.ndarray  # (N, 2, 2) pixels^2, low-pass floor included
    conic: np.ndarray  # (N, 3) entries (a, b, c) of the inverse covariance
    depth: np.ndarray  # (N,) camera z of the center
    depth_slope: np.ndarray  # (N, 2) depth change per pixel
    cam_normal: np.ndarray  # (N, 3) camera-space normal, oriented toward the camera
    radius: np.ndarray  # (N,) cull radius in pixels
    culled: np.ndarray  # (N,) bool
    cache: dict

    def __len__(self):
        return len(self.depth)

    def pixel_depth(self, index, pixel):
        """Per-pixel surfel depth d(u) = d(u_i) + slope . (u - u_i)."""
        if self.culled[index]:
            raise ValueError(f"surfel {index} is culled in this view")
        off = np.asarray(pixel, dtype=float) - self.means2d[index]
        return float(self.depth[index] + self.depth_slope[index] @ off)


def project_surfels(positions, rotations, log_scales, camera, lowpass=LOWPASS):
    """Project all surfels into `camera`. Rotations are raw (unnormalized) quaternions."""
    n = len(positions)
    qn = normalize_quaternions(rotations) if n else rotations.copy()
    R = quat_to_rotmat(qn)
    s = np.exp(log_scales)
    t = camera.to_camera(positions)
    z = t[:, 2]
    in_front = z > camera.near_clip
    zsafe = np.where(in_front, z, 1.0)
    tsafe = np.where(in_front[:, None], t, np.array([0.0, 0.0, 1.0]))

    Rc = camera.rotation[None] @ R
    T = Rc[:, :, :2]  # camera-space tangent axes, (N, 3, 2)
    J = _jacobians(camera, tsafe)
    A = J @ T  # tangent coords -> pixels
    M = A * s[:, None, :]
    cov = M @ np.swapaxes(M, 1, 2)
    cov[:, 0, 0] += lowpass
    cov[:, 1, 1] += lowpass
    conic_m, det = _inv2(cov)
    conic = np.stack([conic_m[:, 0, 0], conic_m[:, 0, 1], conic_m[:, 1, 1]], axis=1)

    cond = _cond2(A)
    well_posed = cond <= MAX_TANGENT_COND
    Asafe = np.where(well_posed[:, None, None], A, np.eye(2))
    Ainv, _ = _inv2(Asafe)
    e = T[:, 2, :]  # depth change per unit tangent offset
    slope = np.einsum("nk,nkj->nj", e, Ainv)

    means = np.stack(
        [camera.fx * tsafe[:, 0] / zsafe + camera.cx, camera.fy * tsafe[:, 1] / zsafe + camera.cy],
        axis=1,
    )
    mid = 0.5 * (cov[:, 0, 0] + cov[:, 1, 1])
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = CULL_SIGMA * np.sqrt(lam_max)
    off_image = (
        (means[:, 0] + radius < -0.5)
        | (means[:, 0] - radius > camera.width - 0.5)
        | (means[:, 1] + radius < -0.5)
        | (means[:, 1] - radius > camera.height - 0.5)
    )
    culled = ~in_front | ~well_posed | off_image

    nc = Rc[:, :, 2]
    sign = np.where(np.sum(nc * tsafe, axis=1) > 0, -1.0, 1.0)
    cam_normal = nc * sign[:, None]

    cache = dict(qn=qn, R=R, s=s, t=tsafe, J=J, T=T, A=A, M=M, Ainv=Ainv, e=e, sign=sign,
                 conic_m=conic_m)
    return ProjectedSurfels(
        means2d=means,
        cov2d=cov,
        conic=conic,
        depth=tsafe[:, 2],
        depth_slope=slope,
        cam_normal=cam_normal,
        radius=radius,
        culled=culled,
        cache=cache,
    )


def project_surfel(position, rotation, scale, camera, lowpass=LOWPASS):
    """Single-surfel convenience wrapper; `scale` is the activated 2-vector."""
    proj = project_surfels(
        np.asarray(position, dtype=float)[None],
        np.asarray(rotation, dtype=float)[None],
        np.log(np.asarray(scale, dtype=float))[None],
        camera,
        lowpass,
    )
    return proj


def pixel_depth(projected, pixel, index=0):
    return projected.pixel_depth(index, pixel)


def project_backward(proj, camera, d_means, d_conic, d_depth, d_slope, d_normal, rotations):
    """Chain per-surfel screen-space gradients back to positions, raw quaternions and log scales.

    d_conic holds dL/d(a, b, c) for the quadratic form a dx^2 + 2 b dx dy + c dy^2.
    """
    c = proj.cache
    t, J, T, A, M, Ainv, e = c["t"], c["J"], c["T"], c["A"], c["M"], c["Ainv"], c["e"]
    s, conic_m = c["s"], c["conic_m"]
    z = t[:, 2]

    # conic -> covariance: dCov = -C dC C, with dC symmetric
    gC = np.empty((len(t), 2, 2))
    gC[:, 0, 0] = d_conic[:, 0]
    gC[:, 1, 1] = d_conic[:, 2]
    gC[:, 0, 1] = gC[:, 1, 0] = 0.5 * d_conic[:, 1]
    g_cov = -conic_m @ gC @ conic_m
    g_M = 2.0 * g_cov @ M
    g_A = g_M * s[:, None, :]
    d_s = np.sum(A * g_M, axis=1)
    d_log_scales = d_s * s

    # slope = e A^-1
    g_e = np.einsum("nj,nkj->nk", d_slope, Ainv)
    g_Ainv = e[:, :, None] * d_slope[:, None, :]
    g_A -= np.swapaxes(Ainv, 1, 2) @ g_Ainv @ np.swapaxes(Ainv, 1, 2)

    # A = J T
    g_J = g_A @ np.swapaxes(T, 1, 2)
    g_T = np.swapaxes(J, 1, 2) @ g_A
    g_T[:, 2, :] += g_e

    # camera-space center
    g_t = np.einsum("nij,ni->nj", J, d_means)
    g_t[:, 2] += d_depth
    fx, fy = camera.fx, camera.fy
    z2, z3 = z * z, z * z * z
    g_t[:, 0] += g_J[:, 0, 2] * (-fx / z2)
    g_t[:, 1] += g_J[:, 1, 2] * (-fy / z2)
    g_t[:, 2] += (
        g_J[:, 0, 0] * (-fx / z2)
        + g_J[:, 0, 2] * (2 * fx * t[:, 0] / z3)
        + g_J[:, 1, 1] * (-fy / z2)
        + g_J[:, 1, 2] * (2 * fy * t[:, 1] / z3)
    )

    g_Rc = np.zeros((len(t), 3, 3))
    g_Rc[:, :, :2] = g_T
    g_Rc[:, :, 2] = d_normal * c["sign"][:, None]
    g_R = camera.rotation.T[None] @ g_Rc
    d_qn = rotmat_to_quat_grad(c["qn"], g_R)
    d_rot = normalize_quaternions_backward(rotations, d_qn)
    d_pos = g_t @ camera.rotation
    return d_pos, d_rot, d_log_scales
