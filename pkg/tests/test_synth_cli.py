import json
import os

import numpy as np
import pytest

from gsurfel import cli
from gsurfel.dataset import load_scene
from gsurfel.ply import read_point_cloud, write_point_cloud
from gsurfel.projection import CameraView
from gsurfel.synth import SyntheticScene


def on_axis_camera(size=65, f=80.0):
    c = (size - 1) / 2.0
    return CameraView.look_at(np.array([0, 0, -3.0]), np.zeros(3), (0, -1.0, 0), f, f, c, c, size, size)


def test_sphere_center_depth_is_two():
    sc = SyntheticScene("sphere", size=1.0)
    _, depth, normal, mask = sc.render_view(on_axis_camera())
    assert depth[32, 32] == pytest.approx(2.0, abs=1e-12)
    np.testing.assert_allclose(normal[32, 32], [0, 0, -1], atol=1e-12)
    assert mask[32, 32] and not mask[0, 0]


def test_sphere_depth_matches_closed_form_everywhere():
    sc = SyntheticScene("sphere", size=1.0)
    cam = on_axis_camera()
    _, depth, normal, mask = sc.render_view(cam)
    rays = cam.pixel_rays()
    pts = depth[..., None] * rays
    world = (pts - cam.translation) @ cam.rotation
    np.testing.assert_allclose(np.linalg.norm(world[mask], axis=-1), 1.0, atol=1e-12)
    # normals face the camera
    assert np.all(np.sum(normal[mask] * rays[mask], axis=-1) < 0)


def test_plane_normals_constant():
    sc = SyntheticScene("plane", n_views=3, image_size=32)
    for cam in sc.cameras():
        _, _, normal, mask = sc.render_view(cam)
        world = normal[mask] @ cam.rotation
        np.testing.assert_allclose(world, np.broadcast_to([0, 0, 1.0], world.shape), atol=1e-12)


def test_occluder_depth_has_a_step():
    sc = SyntheticScene("occluder", n_views=1, image_size=64)
    cam = sc.cameras()[0]
    _, depth, _, mask = sc.render_view(cam)
    jumps = np.abs(np.diff(depth, axis=1))[mask[:, 1:] & mask[:, :-1]]
    smooth = np.median(jumps)
    assert jumps.max() > 0.2 and smooth < 0.05


def test_surface_samples_lie_on_geometry():
    for kind in ("sphere", "plane", "cube", "occluder"):
        sc = SyntheticScene(kind)
        p = sc.sample_surface(2000)
        assert np.abs(sc.distance_to_surface(p)).max() < 1e-12


def test_synth_writes_dataset_and_gt(tmp_path):
    out = tmp_path / "s"
    assert cli.main(["synth", "sphere", "--out", str(out), "--views", "3", "--size", "24"]) == 0
    ds = load_scene(out)
    assert len(ds.views) == 3 and ds.views[0].prior_normal is not None
    pts, _, _ = read_point_cloud(out / "gt_points.ply")
    assert len(pts) >= 100_000
    out2 = tmp_path / "t"
    cli.main(["synth", "sphere", "--out", str(out2), "--views", "3", "--size", "24"])
    for name in ("cameras.json", "gt_points.ply", "images/001.png"):
        assert (out / name).read_bytes() == (out2 / name).read_bytes()


def test_depth_png_round_trip(tmp_path):
    d = np.random.default_rng(0).uniform(0, 4.0, (10, 12))
    dmax = cli.save_depth_png(str(tmp_path / "d.png"), d)
    back = cli.load_depth_png(str(tmp_path / "d.png"))
    assert np.abs(back - d).max() <= 0.5 * dmax / 65535 + 1e-12


def test_eval_identical_clouds_and_images(tmp_path, capsys):
    pts = np.random.default_rng(1).random((50, 3))
    write_point_cloud(tmp_path / "a.ply", pts)
    from gsurfel.dataset import save_png
    img = (np.random.default_rng(2).random((8, 8, 3)) * 255).astype(np.uint8)
    save_png(tmp_path / "i.png", img)
    rc = cli.main(["eval", "--pred", str(tmp_path / "a.ply"), "--ref", str(tmp_path / "a.ply"),
                   "--image", str(tmp_path / "i.png"), "--ref-image", str(tmp_path / "i.png")])
    assert rc == 0
    report = json.loads(capsys.readouterr().out)
    assert report["chamfer"] == 0.0
    assert report["psnr"] == float("inf")


def test_psnr_masked():
    a = np.zeros((4, 4, 3))
    b = np.zeros((4, 4, 3))
    b[0, 0] = 1.0
    m = np.ones((4, 4), dtype=bool)
    m[0, 0] = False
    assert cli.psnr(a, b, m) == float("inf")
    assert cli.psnr(a, b) == pytest.approx(10 * np.log10(16.0))


def test_failures_exit_nonzero_with_typed_message(tmp_path, capsys):
    rc = cli.main(["train", "--scene", str(tmp_path / "nope"), "--out", str(tmp_path / "o")])
    assert rc == 3
    assert "MissingFileError" in capsys.readouterr().err
    (tmp_path / "bad.ply").write_text("not a ply")
    rc = cli.main(["eval", "--pred", str(tmp_path / "bad.ply"), "--ref", str(tmp_path / "bad.ply")])
    assert rc == 4
    (tmp_path / "c.gsrf").write_bytes(b"GSRF\x09\x00\x00\x00")
    rc = cli.main(["fuse", "--scene", str(tmp_path), "--checkpoint", str(tmp_path / "c.gsrf"),
                   "--out", str(tmp_path / "x.ply")])
    assert rc == 3  # the scene is checked first
    with pytest.raises(SystemExit):
        cli.main(["fuse", "--cut-mode", "bogus"])


def test_pipeline_end_to_end_small(tmp_path, capsys):
    scene = tmp_path / "scene"
    cli.main(["synth", "plane", "--out", str(scene), "--views", "4", "--size", "24"])
    run = tmp_path / "run"
    assert cli.main(["train", "--scene", str(scene), "--out", str(run), "--iters", "20",
                     "--init-count", "300"]) == 0
    assert (run / "checkpoint.gsrf").exists() and (run / "train_log.jsonl").exists()
    assert cli.main(["render", "--scene", str(scene), "--checkpoint", str(run), "--out",
                     str(tmp_path / "r"), "--views", "0,2"]) == 0
    assert sorted(os.listdir(tmp_path / "r")) == [
        "000_color.png", "000_depth.json", "000_depth.png", "000_normal.png",
        "002_color.png", "002_depth.json", "002_depth.png", "002_normal.png"]
    assert cli.main(["fuse", "--scene", str(scene), "--checkpoint", str(run), "--out",
                     str(tmp_path / "f.ply"), "--no-cut"]) == 0
    capsys.readouterr()
    assert cli.main(["eval", "--pred", str(tmp_path / "f.ply"), "--ref", str(scene / "gt_points.ply"),
                     "--scene", str(scene), "--checkpoint", str(run)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert np.isfinite(report["chamfer"]) and len(report["psnr_views"]) == 4
