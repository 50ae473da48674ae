"""Gaussian surfel storage and the closed-form geometry derived from raw parameters."""

from dataclasses import dataclass, field

import numpy as np

from .sh import N_COEFFS, rgb_to_dc

INIT_OPACITY = 0.1
INIT_SCALE_FRACTION = 0.5
DEFAULT_INIT_COUNT = 10_000


class SurfelError(ValueError):
    """Invalid surfel parameters (non-finite storage, bad shapes)."""


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    return np.log(p / (1.0 - p))


@dataclass
class SurfelSet:
    """Structure-of-arrays store for all learnable surfel parameters.

    positions (N, 3), rotations (N, 4) as (w, x, y, z), log_scales (N, 2),
    opacity_logits (N,), sh_coeffs (N, 16, 3).
    """

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray

    def __post_init__(self):
        n = len(self.positions)
        shapes = {
            "positions": (n, 3),
            "rotations": (n, 4),
            "log_scales": (n, 2),
            "opacity_logits": (n,),
            "sh_coeffs": (n, N_COEFFS, 3),
        }
        for name, shape in shapes.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise SurfelError(f"{name} has shape {arr.shape}, expected {shape}")

    @property
    def count(self):
        return len(self.positions)

    def __len__(self):
        return self.count

    @classmethod
    def empty(cls):
        return cls(
            np.zeros((0, 3)),
            np.zeros((0, 4)),
            np.zeros((0, 2)),
            np.zeros(0),
            np.zeros((0, N_COEFFS, 3)),
        )

    def arrays(self):
        return {
            "positions": self.positions,
            "rotations": self.rotations,
            "log_scales": self.log_scales,
            "opacity_logits": self.opacity_logits,
            "sh_coeffs": self.sh_coeffs,
        }

    def copy(self):
        return SurfelSet(**{k: v.copy() for k, v in self.arrays().items()})

    def subset(self, idx):
        return SurfelSet(**{k: v[idx].copy() for k, v in self.arrays().items()})

    def concat(self, other):
        return SurfelSet(
            **{k: np.concatenate([v, getattr(other, k)]) for k, v in self.arrays().items()}
        )

    def check_finite(self):
        for name, arr in self.arrays().items():
            if not np.all(np.isfinite(arr)):
                bad = np.unique(np.nonzero(~np.isfinite(arr))[0])
                raise SurfelError(f"non-finite {name} for surfels {bad[:10].tolist()}")

    # activated views
    def scales(self):
        return np.exp(self.log_scales)

    def opacities(self):
        return sigmoid(self.opacity_logits)

    def unit_rotations(self):
        return normalize_quaternions(self.rotations)


@dataclass
class SurfelGeometry:
    rotation_matrix: np.ndarray
    covariance: np.ndarray
    scale: np.ndarray
    normal: np.ndarray = field(init=False)

    def __post_init__(self):
        self.normal = self.rotation_matrix[..., :, 2]


def normalize_quaternions(q):
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rotmat(q):
    """Rotation matrices (..., 3, 3) from unit quaternions (..., 4) in (w, x, y, z) order."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=q.dtype)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_to_quat_grad(q, dR):
    """Backprop dL/dR (..., 3, 3) to dL/dq for a unit quaternion q (..., 4)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    g = dR
    dw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    dx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2 * x * g[..., 1, 1]
              - w * g[..., 1, 2] + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    dy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0]
              + z * g[..., 1, 2] - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    dz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0]
              - 2 * z * g[..., 1, 1] + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1])
    return np.stack([dw, dx, dy, dz], axis=-1)


def normalize_quaternions_backward(q_raw, d_unit):
    norm = np.linalg.norm(q_raw, axis=-1, keepdims=True)
    qn = q_raw / norm
    return (d_unit - qn * np.sum(qn * d_unit, axis=-1, keepdims=True)) / norm


def activate(surfels, index):
    """(position, unit quaternion, scale, opacity) of surfel `index`."""
    if not 0 <= index < surfels.count:
        raise IndexError(f"surfel index {index} out of range for {surfels.count} surfels")
    row = [
        surfels.positions[index],
        surfels.rotations[index],
        surfels.log_scales[index],
        surfels.opacity_logits[index],
    ]
    for arr in row:
        if not np.all(np.isfinite(arr)):
            raise SurfelError(f"non-finite parameters stored for surfel {index}")
    q = row[1] / np.linalg.norm(row[1])
    return row[0].copy(), q, np.exp(row[2]), float(sigmoid(row[3]))


def build_geometry(rotation, scale):
    """Rotation matrix, rank-2 covariance R diag(sx^2, sy^2, 0) R^T, and normal R[:, 2]."""
    rotation = np.asarray(rotation, dtype=float)
    scale = np.asarray(scale, dtype=float)
    if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(scale))):
        raise SurfelError("non-finite rotation or scale")
    if np.any(scale <= 0):
        raise SurfelError("scales must be strictly positive")
    R = quat_to_rotmat(normalize_quaternions(rotation))
    s2 = np.zeros(scale.shape[:-1] + (3,))
    s2[..., :2] = scale**2
    cov = (R * s2[..., None, :]) @ np.swapaxes(R, -1, -2)
    return SurfelGeometry(rotation_matrix=R, covariance=cov, scale=scale)


def evaluate_kernel(geometry, center, query):
    """Gaussian weight of `query` under a surfel with the given geometry and scales.

    Off-plane queries are projected onto the tangent plane: the degenerate normal
    axis carries no falloff.
    """
    d = np.asarray(query, dtype=float) - np.asarray(center, dtype=float)
    local = d @ geometry.rotation_matrix
    xh = local[..., 0] / geometry.scale[..., 0]
    yh = local[..., 1] / geometry.scale[..., 1]
    return np.exp(-0.5 * (xh * xh + yh * yh))


def random_unit_quaternions(rng, n):
    # normalized 4D Gaussians are uniform on S^3
    q = rng.standard_normal((n, 4))
    return normalize_quaternions(q)


def init_scale_for(bbox_min, bbox_max, n):
    diag = float(np.linalg.norm(np.asarray(bbox_max) - np.asarray(bbox_min)))
    return INIT_SCALE_FRACTION * diag / n ** (1.0 / 3.0)


def random_init(bbox_min, bbox_max, n=DEFAULT_INIT_COUNT, seed=0):
    """Uniform random surfels inside an axis-aligned box; deterministic for a given seed."""
    if n < 1:
        raise SurfelError("random_init needs at least one surfel")
    lo = np.asarray(bbox_min, dtype=float)
    hi = np.asarray(bbox_max, dtype=float)
    if np.any(hi <= lo):
        raise SurfelError(f"degenerate bounding box {lo} .. {hi}")
    rng = np.random.default_rng(seed)
    positions = lo + rng.random((n, 3)) * (hi - lo)
    rotations = random_unit_quaternions(rng, n)
    scale = init_scale_for(lo, hi, n)
    sh = np.zeros((n, N_COEFFS, 3))
    sh[:, 0, :] = rgb_to_dc(0.5)
    return SurfelSet(
        positions=positions,
        rotations=rotations,
        log_scales=np.full((n, 2), np.log(scale)),
        opacity_logits=np.full(n, logit(INIT_OPACITY)),
        sh_coeffs=sh,
    )
