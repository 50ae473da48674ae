"""Scene loading (cameras.json + PNGs), sparse-point import, and image helpers."""

import json
import os
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from PIL import Image
from scipy.spatial import cKDTree

from .ply import read_point_cloud
from .projection import CameraError, CameraView
from .sh import N_COEFFS, rgb_to_dc
from .surfel import INIT_OPACITY, SurfelSet, logit, random_unit_quaternions


class DatasetError(ValueError):
    """Base class for scene loading failures; messages carry the offending path."""


class MissingFileError(DatasetError):
    pass


class MalformedSceneError(DatasetError):
    pass


class DimensionMismatchError(DatasetError):
    pass


@dataclass
class View:
    camera: CameraView
    image: np.ndarray  # (H, W, 3) in [0, 1]
    mask: Optional[np.ndarray] = None  # (H, W) bool
    prior_normal: Optional[np.ndarray] = None  # (H, W, 3) camera space
    name: str = ""


@dataclass
class SceneDataset:
    views: List[View]
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def scale_hint(self):
        """Scene radius: half the bounding-box diagonal."""
        return 0.5 * float(np.linalg.norm(self.bbox_max - self.bbox_min))

    @property
    def bbox_diagonal(self):
        return float(np.linalg.norm(self.bbox_max - self.bbox_min))


def _read_png(path):
    if not os.path.exists(path):
        raise MissingFileError(f"missing file: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            return np.array(im)
    except (OSError, ValueError) as e:
        raise MalformedSceneError(f"cannot decode image {path}: {e}") from e


def load_image(path):
    arr = _read_png(path)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    arr = arr[..., :3]
    scale = 65535.0 if arr.dtype == np.uint16 else 255.0
    return arr.astype(np.float64) / scale


def load_mask(path):
    arr = _read_png(path).astype(np.float64)
    if arr.ndim == 3:
        arr = arr[..., 0]
    return arr / 255.0 >= 0.5


def decode_normal_map(rgb):
    n = 2.0 * rgb - 1.0
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    return np.where(norm > 1e-6, n / np.maximum(norm, 1e-12), 0.0)


def encode_normal_map(n):
    return np.clip(np.round((np.asarray(n) + 1.0) * 0.5 * 255.0), 0, 255).astype(np.uint8)


def save_png(path, arr):
    Image.fromarray(arr).save(path)


def to_uint8(img):
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def _get(d, key, path, kind=None):
    if key not in d:
        raise MalformedSceneError(f"{path}: missing key '{key}'")
    v = d[key]
    if kind is not None and not isinstance(v, kind):
        raise MalformedSceneError(f"{path}: key '{key}' has wrong type")
    return v


def load_scene(path):
    """Load a scene directory containing cameras.json and the images it references."""
    cam_path = os.path.join(path, "cameras.json")
    if not os.path.exists(cam_path):
        raise MissingFileError(f"missing file: {cam_path}")
    try:
        with open(cam_path) as f:
            meta = json.load(f)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise MalformedSceneError(f"{cam_path}: malformed JSON ({e})") from e
    if not isinstance(meta, dict):
        raise MalformedSceneError(f"{cam_path}: top level must be an object")
    entries = _get(meta, "views", cam_path, list)
    if not entries:
        raise MalformedSceneError(f"{cam_path}: no views")
    views = []
    for k, e in enumerate(entries):
        where = f"{cam_path} view {k}"
        if not isinstance(e, dict):
            raise MalformedSceneError(f"{where}: not an object")
        try:
            w2c = np.asarray(_get(e, "world_to_camera", where), dtype=float)
            if w2c.shape != (12,):
                raise MalformedSceneError(f"{where}: world_to_camera needs 12 floats")
            w2c = w2c.reshape(3, 4)
            cam = CameraView(
                float(_get(e, "fx", where)),
                float(_get(e, "fy", where)),
                float(_get(e, "cx", where)),
                float(_get(e, "cy", where)),
                w2c[:, :3],
                w2c[:, 3],
                int(_get(e, "width", where)),
                int(_get(e, "height", where)),
                float(e.get("near_clip", 0.01)),
            )
        except (TypeError, ValueError) as err:
            if isinstance(err, DatasetError):
                raise
            raise MalformedSceneError(f"{where}: {err}") from err
        img_path = os.path.join(path, str(_get(e, "image", where)))
        img = load_image(img_path)
        if img.shape[:2] != (cam.height, cam.width):
            raise DimensionMismatchError(
                f"{img_path}: image is {img.shape[1]}x{img.shape[0]}, camera says {cam.width}x{cam.height}"
            )
        mask = None
        if e.get("mask"):
            mpath = os.path.join(path, e["mask"])
            mask = load_mask(mpath)
            if mask.shape != (cam.height, cam.width):
                raise DimensionMismatchError(f"{mpath}: mask size does not match camera")
        else:
            mask = np.ones((cam.height, cam.width), dtype=bool)
        prior = None
        if e.get("normal"):
            npath = os.path.join(path, e["normal"])
            prior = decode_normal_map(load_image(npath))
            if prior.shape[:2] != (cam.height, cam.width):
                raise DimensionMismatchError(f"{npath}: normal map size does not match camera")
            space = e.get("normal_space", "camera")
            if space == "world":
                prior = prior @ cam.rotation.T
            elif space != "camera":
                raise MalformedSceneError(f"{where}: normal_space must be 'camera' or 'world'")
        views.append(View(cam, img, mask, prior, name=str(e["image"])))

    bbox = meta.get("bbox")
    if bbox is None:
        raise MalformedSceneError(f"{cam_path}: missing key 'bbox'")
    try:
        lo = np.asarray(bbox["min"], dtype=float).reshape(3)
        hi = np.asarray(bbox["max"], dtype=float).reshape(3)
        bg = np.asarray(meta.get("background", [0, 0, 0]), dtype=float).reshape(3)
    except (KeyError, TypeError, ValueError) as err:
        raise MalformedSceneError(f"{cam_path}: bad bbox/background ({err})") from err
    return SceneDataset(views, lo, hi, bg)


def save_scene(path, dataset, prior_space="camera"):
    """Write a dataset in the cameras.json layout (8-bit PNG images, masks and normal maps)."""
    os.makedirs(os.path.join(path, "images"), exist_ok=True)
    entries = []
    for k, v in enumerate(dataset.views):
        cam = v.camera
        entry = {
            "image": f"images/{k:03d}.png",
            "width": cam.width,
            "height": cam.height,
            "fx": cam.fx,
            "fy": cam.fy,
            "cx": cam.cx,
            "cy": cam.cy,
            "world_to_camera": cam.world_to_camera_12().tolist(),
        }
        save_png(os.path.join(path, entry["image"]), to_uint8(v.image))
        if v.mask is not None:
            entry["mask"] = f"images/{k:03d}_mask.png"
            save_png(os.path.join(path, entry["mask"]), (v.mask.astype(np.uint8) * 255))
        if v.prior_normal is not None:
            entry["normal"] = f"images/{k:03d}_normal.png"
            n = v.prior_normal if prior_space == "camera" else v.prior_normal @ cam.rotation
            save_png(os.path.join(path, entry["normal"]), encode_normal_map(n))
            entry["normal_space"] = prior_space
        entries.append(entry)
    meta = {
        "views": entries,
        "bbox": {"min": dataset.bbox_min.tolist(), "max": dataset.bbox_max.tolist()},
        "background": np.asarray(dataset.background, dtype=float).tolist(),
    }
    with open(os.path.join(path, "cameras.json"), "w") as f:
        json.dump(meta, f, indent=1)


def downsample(arr, factor):
    """k x k block average (trailing rows/columns that do not fill a block are dropped)."""
    if factor == 1:
        return arr
    H, W = arr.shape[:2]
    h, w = max(1, H // factor), max(1, W // factor)
    a = arr[: h * factor, : w * factor].astype(np.float64)
    a = a.reshape((h, factor, w, factor) + arr.shape[2:])
    return a.mean(axis=(1, 3))


def nn_spacing(points, k=3):
    """Mean distance to the k nearest neighbours of every point."""
    if len(points) < 2:
        return np.full(len(points), 0.01)
    kk = min(k, len(points) - 1)
    d, _ = cKDTree(points).query(points, k=kk + 1)
    return np.maximum(d[:, 1:].mean(axis=1), 1e-7)


def import_sparse_points(path, seed=0):
    """One surfel per PLY vertex: random rotation, scale from neighbour spacing, opacity 0.1."""
    pos, _, col = read_point_cloud(path)
    n = len(pos)
    if n == 0:
        raise MalformedSceneError(f"{path}: no vertices")
    if not np.all(np.isfinite(pos)):
        raise MalformedSceneError(f"{path}: non-finite vertex positions")
    rng = np.random.default_rng(seed)
    sh = np.zeros((n, N_COEFFS, 3))
    sh[:, 0, :] = rgb_to_dc(col if col is not None else np.full((n, 3), 0.5))
    spacing = nn_spacing(pos)
    return SurfelSet(
        positions=pos.astype(np.float64),
        rotations=random_unit_quaternions(rng, n),
        log_scales=np.repeat(np.log(spacing)[:, None], 2, axis=1),
        opacity_logits=np.full(n, logit(INIT_OPACITY)),
        sh_coeffs=sh,
    )


__all__ = [
    "CameraError",
    "DatasetError",
    "DimensionMismatchError",
    "MalformedSceneError",
    "MissingFileError",
    "SceneDataset",
    "View",
    "downsample",
    "import_sparse_points",
    "load_scene",
    "save_scene",
]
