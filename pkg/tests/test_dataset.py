import json
import os

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from PIL import Image

from gsurfel.checkpoint import (
    Checkpoint,
    CheckpointChecksumError,
    CheckpointError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    load_checkpoint,
    save_checkpoint,
)
from gsurfel.dataset import (
    DimensionMismatchError,
    MalformedSceneError,
    MissingFileError,
    DatasetError,
    decode_normal_map,
    import_sparse_points,
    load_scene,
    save_scene,
)
from gsurfel.ply import PlyError, read_point_cloud, write_point_cloud
from gsurfel.sh import SH_C0
from gsurfel.synth import SyntheticScene, build_dataset
from gsurfel.trainer import OptimizerState

from helpers import random_surfels


def write_minimal_scene(root, n=2, size=(6, 4)):
    os.makedirs(root / "img", exist_ok=True)
    views = []
    for k in range(n):
        Image.fromarray(np.full((size[1], size[0], 3), 40 * k, np.uint8)).save(root / "img" / f"{k}.png")
        views.append(dict(image=f"img/{k}.png", width=size[0], height=size[1], fx=5.0, fy=5.0,
                          cx=2.5, cy=1.5, world_to_camera=[1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 2]))
    meta = dict(views=views, bbox=dict(min=[-1, -1, -1], max=[1, 1, 1]), background=[0, 0, 0])
    (root / "cameras.json").write_text(json.dumps(meta))
    return meta


def test_minimal_scene_defaults(tmp_path):
    write_minimal_scene(tmp_path)
    ds = load_scene(tmp_path)
    assert len(ds.views) == 2
    assert ds.views[0].mask.all() and ds.views[0].prior_normal is None
    assert ds.views[1].image[0, 0, 0] == pytest.approx(40 / 255)


def test_missing_file_malformed_json_and_dimension_mismatch(tmp_path):
    with pytest.raises(MissingFileError, match="cameras.json"):
        load_scene(tmp_path)
    meta = write_minimal_scene(tmp_path)
    os.remove(tmp_path / "img" / "1.png")
    with pytest.raises(MissingFileError, match="1.png"):
        load_scene(tmp_path)
    (tmp_path / "cameras.json").write_text("{not json")
    with pytest.raises(MalformedSceneError):
        load_scene(tmp_path)
    meta["views"] = meta["views"][:1]
    meta["views"][0]["width"] = 7
    (tmp_path / "cameras.json").write_text(json.dumps(meta))
    with pytest.raises(DimensionMismatchError, match="0.png"):
        load_scene(tmp_path)


def test_mask_and_normal_decoding(tmp_path):
    meta = write_minimal_scene(tmp_path, n=1)
    Image.fromarray(np.full((4, 6), 255, np.uint8)).save(tmp_path / "m.png")
    Image.fromarray(np.tile(np.array([128, 128, 255], np.uint8), (4, 6, 1))).save(tmp_path / "n.png")
    meta["views"][0].update(mask="m.png", normal="n.png", normal_space="camera")
    (tmp_path / "cameras.json").write_text(json.dumps(meta))
    v = load_scene(tmp_path).views[0]
    assert v.mask.all()
    np.testing.assert_allclose(v.prior_normal[0, 0], [0, 0, 1], atol=1e-2)
    np.testing.assert_allclose(np.linalg.norm(v.prior_normal, axis=-1), 1.0, atol=1e-12)
    assert decode_normal_map(np.array([128, 128, 255]) / 255.0)[2] == pytest.approx(1.0, abs=2e-5)


def test_synthetic_scene_round_trip(tmp_path):
    sc = SyntheticScene("sphere", n_views=3, image_size=24)
    ds = build_dataset(sc)
    save_scene(tmp_path, ds, prior_space="world")
    back = load_scene(tmp_path)
    for a, b in zip(ds.views, back.views):
        np.testing.assert_allclose(b.camera.rotation, a.camera.rotation, atol=1e-9)
        np.testing.assert_allclose(b.camera.translation, a.camera.translation, atol=1e-9)
        assert np.array_equal(np.round(a.image * 255), np.round(b.image * 255))
        assert np.array_equal(a.mask, b.mask)
        m = a.mask
        np.testing.assert_allclose(b.prior_normal[m], a.prior_normal[m], atol=2e-2)


def test_sparse_point_import(tmp_path):
    pts = np.array([[0, 0, 0], [1, 0, 0], [0, 2, 0.0]])
    col = np.array([[1.0, 0, 0], [0, 1, 0], [0.5, 0.5, 0.5]])
    write_point_cloud(tmp_path / "p.ply", pts, colors=col)
    s = import_sparse_points(tmp_path / "p.ply")
    assert s.count == 3
    np.testing.assert_allclose(s.positions, pts, atol=1e-7)
    np.testing.assert_allclose(s.sh_coeffs[:, 0], (np.round(col * 255) / 255 - 0.5) / SH_C0)
    np.testing.assert_allclose(s.opacities(), 0.1)
    # ascii without colors or normals
    (tmp_path / "a.ply").write_text(
        "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\n"
        "property float z\nend_header\n0 0 0\n1 1 1\n")
    s = import_sparse_points(tmp_path / "a.ply")
    np.testing.assert_allclose(s.sh_coeffs[:, 0], 0.0)


def test_malformed_ply_is_a_typed_error(tmp_path):
    (tmp_path / "bad.ply").write_bytes(b"ply\nformat binary_little_endian 1.0\nelement vertex 10\n"
                                       b"property float x\nproperty float y\nproperty float z\nend_header\n\x00\x01")
    with pytest.raises(PlyError, match="truncated"):
        read_point_cloud(tmp_path / "bad.ply")


def make_checkpoint(n=100, seed=0):
    rng = np.random.default_rng(seed)
    s = random_surfels(rng, n)
    opt = OptimizerState.for_surfels(s)
    opt.exp_avg["positions"] += rng.normal(size=(n, 3))
    opt.step = 17
    return Checkpoint({"total_iters": 3000, "seed": seed}, s, opt.to_arrays(), 17, seed,
                      {"last_touched": np.arange(n, dtype=np.int64)})


def test_checkpoint_round_trip_is_bitwise(tmp_path):
    ck = make_checkpoint()
    save_checkpoint(tmp_path / "c.gsrf", ck)
    back = load_checkpoint(tmp_path / "c.gsrf")
    assert back.config == ck.config and back.iteration == 17 and back.seed == 0
    for k, v in ck.surfels.arrays().items():
        assert np.array_equal(v, back.surfels.arrays()[k]) and v.dtype == back.surfels.arrays()[k].dtype
    for k, v in ck.optimizer.items():
        assert np.array_equal(v, back.optimizer[k])
    assert np.array_equal(back.extras["last_touched"], np.arange(100))
    save_checkpoint(tmp_path / "d.gsrf", back)
    assert (tmp_path / "c.gsrf").read_bytes() == (tmp_path / "d.gsrf").read_bytes()


def test_checkpoint_corruptions(tmp_path):
    save_checkpoint(tmp_path / "c.gsrf", make_checkpoint(5))
    blob = (tmp_path / "c.gsrf").read_bytes()
    (tmp_path / "magic.gsrf").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(tmp_path / "magic.gsrf")
    (tmp_path / "ver.gsrf").write_bytes(blob[:4] + (2).to_bytes(4, "little") + blob[8:])
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(tmp_path / "ver.gsrf")
    (tmp_path / "short.gsrf").write_bytes(blob[:10])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(tmp_path / "short.gsrf")
    flipped = bytearray(blob)
    flipped[len(blob) // 2] ^= 0xFF
    (tmp_path / "flip.gsrf").write_bytes(bytes(flipped))
    with pytest.raises(CheckpointChecksumError):
        load_checkpoint(tmp_path / "flip.gsrf")
    (tmp_path / "cut.gsrf").write_bytes(blob[:-40])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "cut.gsrf")


fuzz = settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])


@fuzz
@given(st.binary(max_size=400))
def test_checkpoint_loader_is_total(tmp_path, data):
    p = tmp_path / "f.gsrf"
    p.write_bytes(b"GSRF" + data if data[:1] == b"\x00" else data)
    try:
        load_checkpoint(p)
    except CheckpointError:
        pass


@fuzz
@given(st.binary(max_size=400))
def test_ply_loader_is_total(tmp_path, data):
    p = tmp_path / "f.ply"
    header = b"ply\nformat binary_little_endian 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n"
    p.write_bytes(header + data if data[:1] == b"\x00" else b"ply\n" + data)
    try:
        read_point_cloud(p)
    except PlyError:
        pass


@fuzz
@given(st.recursive(st.none() | st.booleans() | st.integers() | st.floats() | st.text(max_size=5),
                    lambda c: st.lists(c, max_size=4) | st.dictionaries(
                        st.sampled_from(["views", "bbox", "min", "max", "image", "width", "fx",
                                         "world_to_camera", "height", "fy", "cx", "cy"]), c, max_size=6),
                    max_leaves=20))
def test_scene_loader_is_total(tmp_path, doc):
    (tmp_path / "cameras.json").write_text(json.dumps(doc))
    try:
        load_scene(tmp_path)
    except DatasetError:
        pass
