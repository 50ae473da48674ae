"""Volumetric cutting, multi-view depth fusion and Chamfer evaluation."""

from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np
from scipy.spatial import cKDTree

from .ply import write_point_cloud
from .rasterizer import RenderConfig, render, render_median_depth
from .surfel import normalize_quaternions, quat_to_rotmat, sigmoid

DEFAULT_GRID_RES = 512
DEFAULT_LAMBDA = 1.0
VISIT_SIGMAS = 3.0
CUT_MODES = ("grid", "median", "none")


class FusionError(RuntimeError):
    pass


@dataclass
class OccupancyGrid:
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    resolution: int
    values: np.ndarray  # (res, res, res) float32, indexed [ix, iy, iz]

    def __post_init__(self):
        if self.resolution < 8:
            raise ValueError("grid resolution must be >= 8")

    @property
    def voxel_size(self):
        return (self.bbox_max - self.bbox_min) / self.resolution

    def centers(self, idx):
        return self.bbox_min + (np.asarray(idx) + 0.5) * self.voxel_size

    def voxel_index(self, points):
        """Integer voxel index per point and a flag for points inside the box."""
        p = np.asarray(points, dtype=float)
        inside = np.all((p >= self.bbox_min) & (p <= self.bbox_max), axis=1)
        idx = np.floor((p - self.bbox_min) / self.voxel_size).astype(np.int64)
        idx = np.clip(idx, 0, self.resolution - 1)
        return idx, inside

    def lookup(self, points):
        idx, inside = self.voxel_index(points)
        v = self.values[idx[:, 0], idx[:, 1], idx[:, 2]].astype(np.float64)
        return np.where(inside, v, 0.0), inside


@dataclass
class OrientedPointCloud:
    positions: np.ndarray
    normals: np.ndarray
    colors: Optional[np.ndarray] = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)
        if len(self.normals) != len(self.positions):
            raise ValueError("positions and normals differ in length")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=float).reshape(-1, 3)
            if len(self.colors) != len(self.positions):
                raise ValueError("positions and colors differ in length")

    def __len__(self):
        return len(self.positions)

    def subset(self, keep):
        return OrientedPointCloud(
            self.positions[keep], self.normals[keep],
            None if self.colors is None else self.colors[keep],
        )

    @classmethod
    def concat(cls, clouds):
        with_color = all(c.colors is not None for c in clouds)
        return cls(
            np.concatenate([c.positions for c in clouds]) if clouds else np.zeros((0, 3)),
            np.concatenate([c.normals for c in clouds]) if clouds else np.zeros((0, 3)),
            np.concatenate([c.colors for c in clouds]) if clouds and with_color else None,
        )

    def save(self, path):
        write_point_cloud(path, self.positions, self.normals, self.colors)


# --- occupancy grid -----------------------------------------------------------

@numba.njit(cache=True)
def _accumulate(values, lo, vs, pos, rot, scale, opac, sigmas, slab):
    res = values.shape[0]
    for i in range(pos.shape[0]):
        R = rot[i]
        sx = scale[i, 0]
        sy = scale[i, 1]
        rx = sigmas * sx
        ry = sigmas * sy
        imin = np.empty(3, np.int64)
        imax = np.empty(3, np.int64)
        for j in range(3):
            ext = np.sqrt((rx * R[j, 0]) ** 2 + (ry * R[j, 1]) ** 2) + slab * abs(R[j, 2])
            a = int(np.floor((pos[i, j] - ext - lo[j]) / vs[j] - 0.5))
            b = int(np.ceil((pos[i, j] + ext - lo[j]) / vs[j] - 0.5))
            imin[j] = max(a, 0)
            imax[j] = min(b, res - 1)
        for ix in range(imin[0], imax[0] + 1):
            cx = lo[0] + (ix + 0.5) * vs[0] - pos[i, 0]
            for iy in range(imin[1], imax[1] + 1):
                cy = lo[1] + (iy + 0.5) * vs[1] - pos[i, 1]
                for iz in range(imin[2], imax[2] + 1):
                    cz = lo[2] + (iz + 0.5) * vs[2] - pos[i, 2]
                    lz = cx * R[0, 2] + cy * R[1, 2] + cz * R[2, 2]
                    if abs(lz) > slab:
                        continue
                    u = (cx * R[0, 0] + cy * R[1, 0] + cz * R[2, 0]) / sx
                    v = (cx * R[0, 1] + cy * R[1, 1] + cz * R[2, 1]) / sy
                    q = u * u + v * v
                    if q > sigmas * sigmas:
                        continue
                    values[ix, iy, iz] += np.float32(np.exp(-0.5 * q) * opac[i])


def canonical_order(surfels):
    """Surfel order that depends only on the parameter values, not their storage order."""
    keys = [surfels.sh_coeffs.reshape(len(surfels), -1).T, surfels.opacity_logits[None],
            surfels.log_scales.T, surfels.rotations.T, surfels.positions.T]
    return np.lexsort(np.concatenate(keys, axis=0))


def accumulate_grid(surfels, bbox_min, bbox_max, resolution=DEFAULT_GRID_RES):
    """Sum of o_i * G_i(voxel center) over every surfel whose 3-sigma slab contains the voxel.

    The box is grown to contain every surfel center. Surfels are visited in a
    canonical order so the float32 sums do not depend on the input permutation.
    """
    lo = np.asarray(bbox_min, dtype=float).copy()
    hi = np.asarray(bbox_max, dtype=float).copy()
    if len(surfels):
        lo = np.minimum(lo, surfels.positions.min(axis=0))
        hi = np.maximum(hi, surfels.positions.max(axis=0))
    grid = OccupancyGrid(lo, hi, int(resolution),
                         np.zeros((resolution,) * 3, dtype=np.float32))
    if not len(surfels):
        return grid
    order = canonical_order(surfels)
    vs = grid.voxel_size
    slab = 0.5 * float(np.linalg.norm(vs)) + float(vs.max())
    R = quat_to_rotmat(normalize_quaternions(surfels.rotations[order]))
    _accumulate(
        grid.values, lo, vs,
        np.ascontiguousarray(surfels.positions[order]),
        np.ascontiguousarray(R),
        np.ascontiguousarray(np.exp(surfels.log_scales[order])),
        np.ascontiguousarray(sigmoid(surfels.opacity_logits[order])),
        VISIT_SIGMAS, slab,
    )
    return grid


def cut_points(points, grid, lam=DEFAULT_LAMBDA):
    """Keep points whose voxel accumulated at least `lam`; points outside the box are dropped."""
    v, inside = grid.lookup(points.positions)
    return points.subset(inside & (v >= lam))


# --- fusion ---------------------------------------------------------------------

def view_points(target, camera, mask=None, depth=None, keep=None):
    """Back-project the valid pixels of one rendered view to world points and normals."""
    valid = target.coverage_valid.copy()
    if mask is not None:
        valid &= mask
    d = target.depth if depth is None else depth
    valid &= d > camera.near_clip
    if keep is not None:
        valid &= keep
    rows, cols = np.nonzero(valid)
    pix = np.stack([cols, rows], axis=1).astype(float)
    pts = camera.backproject(pix, d[rows, cols])
    n = target.normal[rows, cols]
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    good = norm[:, 0] > 1e-12
    n = n[good] / norm[good]
    return OrientedPointCloud(pts[good], n @ camera.rotation, target.color[rows, cols][good])


def fuse_views(targets, cameras, masks=None, grid=None, lam=DEFAULT_LAMBDA, depths=None, keeps=None):
    """Concatenate back-projected views, then cut against the occupancy grid if one is given."""
    clouds = []
    for k, (t, cam) in enumerate(zip(targets, cameras)):
        clouds.append(view_points(
            t, cam,
            None if masks is None else masks[k],
            None if depths is None else depths[k],
            None if keeps is None else keeps[k],
        ))
    cloud = OrientedPointCloud.concat(clouds)
    if grid is not None:
        cloud = cut_points(cloud, grid, lam)
    if len(cloud) == 0:
        raise FusionError("fusion produced no points (everything masked, invalid or cut)")
    return cloud


@dataclass
class FuseConfig:
    mode: str = "grid"  # grid | median | none
    grid_res: int = DEFAULT_GRID_RES
    lam: float = DEFAULT_LAMBDA
    median_band: float = None  # scene units; None uses 1% of the box diagonal
    use_masks: bool = True

    def __post_init__(self):
        if self.mode not in CUT_MODES:
            raise ValueError(f"cut mode must be one of {CUT_MODES}")


def extract_surface(surfels, dataset, cfg=None, render_config=None):
    """Render every training view at full resolution and fuse the depth maps into a cloud."""
    cfg = cfg or FuseConfig()
    rcfg = render_config or RenderConfig(background=tuple(dataset.background))
    targets, cams, masks, depths, keeps = [], [], [], [], []
    band = cfg.median_band
    if band is None:
        band = 0.01 * dataset.bbox_diagonal
    for v in dataset.views:
        target, ctx = render(surfels, v.camera, rcfg)
        targets.append(target)
        cams.append(v.camera)
        masks.append(v.mask if cfg.use_masks else None)
        if cfg.mode == "median":
            med, _ = render_median_depth(surfels, v.camera, ctx, band)
            keeps.append(np.abs(target.depth - med) <= band)
        else:
            keeps.append(None)
        depths.append(None)
    grid = None
    if cfg.mode == "grid":
        grid = accumulate_grid(surfels, dataset.bbox_min, dataset.bbox_max, cfg.grid_res)
    return fuse_views(targets, cams, masks, grid, cfg.lam, depths, keeps)


# --- evaluation -----------------------------------------------------------------

def nearest_distances(a, b):
    return cKDTree(b).query(a, k=1)[0]


def chamfer_distance(a, b):
    """0.5 * (mean NN distance a->b + mean NN distance b->a)."""
    a = np.asarray(a, dtype=float).reshape(-1, 3)
    b = np.asarray(b, dtype=float).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance needs two non-empty point sets")
    return 0.5 * (nearest_distances(a, b).mean() + nearest_distances(b, a).mean())
