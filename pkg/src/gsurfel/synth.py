"""Analytic test scenes: closed-form ray casting for color, depth, normal and mask."""

import os
from dataclasses import dataclass

import numpy as np

from .dataset import SceneDataset, View, save_scene
from .ply import write_point_cloud
from .projection import CameraView
from .sh import N_COEFFS, rgb_to_dc
from .surfel import SurfelSet

KINDS = ("sphere", "plane", "cube", "occluder")
GT_SAMPLES = 100_000


@dataclass
class SyntheticScene:
    kind: str = "sphere"
    size: float = 1.0  # sphere radius, plane/cube half-extent
    n_views: int = 24
    cam_radius: float = 3.0
    elevations: tuple = (30.0, -30.0)  # degrees, cycled over the views
    image_size: int = 128
    focal: float = None  # pixels; None fits the object into the frame
    light_dir: tuple = (0.4, -0.5, 0.75)
    texture_freq: float = 6.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scene kind {self.kind!r}; choose from {KINDS}")
        if self.kind in ("plane", "occluder") and self.elevations == (30.0, -30.0):
            self.elevations = (60.0, 45.0)

    # geometry ---------------------------------------------------------------
    def squares(self):
        """(center z, half extent) of the axis-aligned squares of planar scenes, normal +z."""
        if self.kind == "plane":
            return [(0.0, self.size)]
        if self.kind == "occluder":
            return [(0.0, self.size), (0.5 * self.size, 0.4 * self.size)]
        return []

    def bounding_radius(self):
        if self.kind == "sphere":
            return self.size
        if self.kind == "cube":
            return self.size * np.sqrt(3)
        return self.size * np.sqrt(2)

    def bbox(self):
        m = 1.1 * self.size
        if self.kind in ("plane", "occluder"):
            return np.array([-m, -m, -0.1 * self.size]), np.array([m, m, 0.6 * self.size])
        return np.full(3, -m), np.full(3, m)

    def intersect(self, origin, dirs):
        """Nearest hit parameter t (inf on miss) and unit outward normals for rays o + t d."""
        n = len(dirs)
        t = np.full(n, np.inf)
        nrm = np.zeros((n, 3))
        if self.kind == "sphere":
            b = dirs @ origin
            a = np.sum(dirs * dirs, axis=1)
            c = origin @ origin - self.size**2
            disc = b * b - a * c
            hit = disc >= 0
            th = (-b - np.sqrt(np.where(hit, disc, 0.0))) / a
            hit &= th > 0
            t[hit] = th[hit]
            p = origin + t[hit, None] * dirs[hit]
            nrm[hit] = p / self.size
        elif self.kind == "cube":
            h = self.size
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = (-h - origin) / dirs
                t2 = (h - origin) / dirs
            tmin = np.minimum(t1, t2)
            tmax = np.maximum(t1, t2)
            near = tmin.max(axis=1)
            far = tmax.min(axis=1)
            hit = (near <= far) & (near > 0)
            t[hit] = near[hit]
            axis = np.argmax(tmin, axis=1)
            sgn = -np.sign(dirs[np.arange(n), axis])
            nrm[hit, axis[hit]] = sgn[hit]
        else:
            for z0, half in self.squares():
                with np.errstate(divide="ignore", invalid="ignore"):
                    th = (z0 - origin[2]) / dirs[:, 2]
                p = origin + th[:, None] * dirs
                inside = (th > 0) & (np.abs(p[:, 0]) <= half) & (np.abs(p[:, 1]) <= half)
                better = inside & (th < t)
                t[better] = th[better]
                nrm[better] = (0.0, 0.0, 1.0)
        return t, nrm

    def albedo(self, p):
        f = self.texture_freq / self.size
        s = np.sin(f * p[:, 0]) * np.sin(f * p[:, 1] + 0.5) * np.sin(f * p[:, 2] + 1.0)
        base = 0.5 + 0.35 * s
        c = np.stack([base, 0.6 * base + 0.2, 0.8 - 0.5 * base], axis=1)
        return np.clip(c, 0.0, 1.0)

    def shade(self, p, n):
        light = np.asarray(self.light_dir, dtype=float)
        light /= np.linalg.norm(light)
        lam = np.clip(n @ light, 0.0, 1.0)
        return np.clip(self.albedo(p) * (0.4 + 0.6 * lam)[:, None], 0.0, 1.0)

    # cameras ---------------------------------------------------------------
    def cameras(self):
        W = self.image_size
        f = self.focal
        if f is None:
            half = np.arcsin(min(self.bounding_radius() / self.cam_radius, 0.95))
            f = 0.5 * W / np.tan(1.15 * half)
        cams = []
        golden = np.pi * (3 - np.sqrt(5))
        for k in range(self.n_views):
            az = k * 2 * np.pi / self.n_views + (golden * k if self.kind == "cube" else 0.0)
            el = np.deg2rad(self.elevations[k % len(self.elevations)])
            eye = self.cam_radius * np.array(
                [np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)]
            )
            cams.append(
                CameraView.look_at(eye, np.zeros(3), (0.0, 0.0, 1.0), f, f,
                                   (W - 1) / 2.0, (W - 1) / 2.0, W, W)
            )
        return cams

    # rendering -------------------------------------------------------------
    def render_view(self, cam):
        """Ground-truth (color, depth, camera-space normal, mask) for one camera."""
        rays = cam.pixel_rays().reshape(-1, 3)
        dirs = rays @ cam.rotation  # camera -> world, z-component of rays is 1
        t, nrm = self.intersect(cam.center, dirs)
        hit = np.isfinite(t)
        H, W = cam.height, cam.width
        color = np.zeros((H * W, 3))
        depth = np.zeros(H * W)
        normal = np.zeros((H * W, 3))
        p = cam.center + t[hit, None] * dirs[hit]
        color[hit] = self.shade(p, nrm[hit])
        depth[hit] = t[hit]
        nc = nrm[hit] @ cam.rotation.T
        flip = np.sum(nc * rays[hit], axis=1) > 0
        nc[flip] *= -1
        normal[hit] = nc
        return (color.reshape(H, W, 3), depth.reshape(H, W), normal.reshape(H, W, 3),
                hit.reshape(H, W))

    def sample_surface(self, n=GT_SAMPLES, seed=None):
        rng = np.random.default_rng(self.seed if seed is None else seed)
        if self.kind == "sphere":
            v = rng.standard_normal((n, 3))
            return self.size * v / np.linalg.norm(v, axis=1, keepdims=True)
        if self.kind == "cube":
            face = rng.integers(0, 6, n)
            uv = rng.uniform(-self.size, self.size, (n, 2))
            p = np.zeros((n, 3))
            axis = face // 2
            sign = np.where(face % 2 == 0, 1.0, -1.0)
            others = np.array([[1, 2], [0, 2], [0, 1]])[axis]
            p[np.arange(n), axis] = sign * self.size
            p[np.arange(n), others[:, 0]] = uv[:, 0]
            p[np.arange(n), others[:, 1]] = uv[:, 1]
            return p
        sq = self.squares()
        areas = np.array([h * h for _, h in sq])
        which = rng.choice(len(sq), size=n, p=areas / areas.sum())
        p = np.zeros((n, 3))
        for k, (z0, h) in enumerate(sq):
            sel = which == k
            p[sel, :2] = rng.uniform(-h, h, (int(sel.sum()), 2))
            p[sel, 2] = z0
        return p

    def distance_to_surface(self, pts):
        if self.kind == "sphere":
            return np.abs(np.linalg.norm(pts, axis=1) - self.size)
        if self.kind == "cube":
            q = np.abs(pts) - self.size
            outside = np.linalg.norm(np.maximum(q, 0), axis=1)
            inside = np.minimum(q.max(axis=1), 0)
            return np.abs(outside + inside)
        d = np.full(len(pts), np.inf)
        for z0, h in self.squares():
            dx = np.maximum(np.abs(pts[:, :2]) - h, 0.0)
            d = np.minimum(d, np.sqrt(np.sum(dx * dx, axis=1) + (pts[:, 2] - z0) ** 2))
        return d


def build_dataset(scene):
    views = []
    for cam in scene.cameras():
        color, _, normal, mask = scene.render_view(cam)
        views.append(View(cam, color, mask, normal))
    lo, hi = scene.bbox()
    return SceneDataset(views, lo, hi, np.zeros(3))


def synth(scene, out_dir):
    """Write the dataset (cameras.json, images, masks, prior normals) and gt_points.ply."""
    os.makedirs(out_dir, exist_ok=True)
    ds = build_dataset(scene)
    save_scene(out_dir, ds)
    pts = scene.sample_surface()
    write_point_cloud(os.path.join(out_dir, "gt_points.ply"), pts)
    return ds


def occluder_surfels(scene, spacing=0.05, opacity=0.95, overlap=1.0):
    """Surfels tiling every square of a planar scene, as a converged optimizer would leave them.

    Each square is covered by a regular grid of fronto-parallel discs with scale
    `overlap * spacing`, so discs on the square's rim spill past its edge.
    """
    parts = []
    for z0, h in scene.squares():
        ticks = np.arange(-h + spacing / 2, h, spacing)
        gx, gy = np.meshgrid(ticks, ticks, indexing="ij")
        pos = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, z0)], axis=1)
        parts.append(pos)
    pos = np.concatenate(parts)
    n = len(pos)
    sh = np.zeros((n, N_COEFFS, 3))
    sh[:, 0, :] = rgb_to_dc(scene.shade(pos, np.tile([0.0, 0.0, 1.0], (n, 1))))
    logit = np.log(opacity / (1 - opacity))
    return SurfelSet(
        positions=pos,
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        log_scales=np.full((n, 2), np.log(overlap * spacing)),
        opacity_logits=np.full(n, logit),
        sh_coeffs=sh,
    )
