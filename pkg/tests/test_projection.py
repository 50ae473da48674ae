import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gsurfel.projection import CameraError, CameraView, affine_jacobian, project_backward, project_surfel, project_surfels
from gsurfel.surfel import random_unit_quaternions

from helpers import front_camera


def axis_camera(size=64, f=100.0):
    """Camera at the origin looking down +z (identity pose)."""
    c = (size - 1) / 2.0
    return CameraView(f, f, c, c, np.eye(3), np.zeros(3), size, size)


def ray_plane_depth(cam, pixel, center, normal):
    """Camera-z of the exact intersection of the pixel ray with the surfel plane."""
    ray = np.array([(pixel[0] - cam.cx) / cam.fx, (pixel[1] - cam.cy) / cam.fy, 1.0])
    c = cam.to_camera(center[None])[0]
    n = cam.rotation @ normal
    return (n @ c) / (n @ ray)


def test_camera_rejects_non_orthonormal_rotation():
    with pytest.raises(CameraError):
        CameraView(1, 1, 0, 0, np.diag([1.0, 1.0, 1.1]), np.zeros(3), 4, 4)


def test_center_projects_to_principal_point():
    cam = axis_camera()
    p = project_surfel([0, 0, 5.0], [1, 0, 0, 0], [0.1, 0.1], cam)
    np.testing.assert_allclose(p.means2d[0], [cam.cx, cam.cy])
    assert p.depth[0] == 5.0
    assert not p.culled[0]


def test_fronto_parallel_covariance_is_scaled_isotropic_plus_floor():
    cam = axis_camera()
    p = project_surfel([0, 0, 5.0], [1, 0, 0, 0], [0.1, 0.1], cam)
    s_px = 100.0 * 0.1 / 5.0
    np.testing.assert_allclose(p.cov2d[0], np.eye(2) * (s_px**2 + 0.3), atol=1e-12)
    np.testing.assert_allclose(p.depth_slope[0], 0.0, atol=1e-15)
    np.testing.assert_allclose(p.cam_normal[0], [0, 0, -1])


def test_culling_rules():
    cam = axis_camera()
    behind = project_surfel([0, 0, -1.0], [1, 0, 0, 0], [0.1, 0.1], cam)
    assert behind.culled[0]
    # edge-on: normal perpendicular to the viewing ray makes the tangent map singular
    c = np.cos(np.pi / 4)
    edge_on = project_surfel([0, 0, 5.0], [c, 0, c, 0], [0.1, 0.1], cam)
    assert edge_on.culled[0]
    outside = project_surfel([100.0, 0, 5.0], [1, 0, 0, 0], [0.01, 0.01], cam)
    assert outside.culled[0]


def test_affine_jacobian_matches_fd_of_perspective_projection():
    cam = axis_camera()
    t = np.array([0.3, -0.2, 4.0])
    J = affine_jacobian(cam, t)

    def proj(x):
        return np.array([cam.fx * x[0] / x[2], cam.fy * x[1] / x[2]])

    fd = np.stack([(proj(t + e) - proj(t - e)) / 2e-6 for e in np.eye(3) * 1e-6], axis=1)
    np.testing.assert_allclose(J, fd, atol=1e-6)
    with pytest.raises(CameraError):
        affine_jacobian(cam, np.array([0, 0, -1.0]))


def test_tilted_surfel_depth_at_center_and_plane_consistency():
    cam = axis_camera()
    c = np.cos(np.pi / 8)
    s = np.sin(np.pi / 8)
    center = np.array([0.1, 0.05, 5.0])
    q = np.array([c, s, 0, 0])  # 45 degrees about x
    p = project_surfel(center, q, [0.5, 0.5], cam)
    normal = np.array([0.0, -np.sin(np.pi / 4), np.cos(np.pi / 4)])
    mean = p.means2d[0]
    assert p.pixel_depth(0, mean) == pytest.approx(center[2], abs=1e-12)
    for off in (0.5, 1.0, 2.0):
        exact = ray_plane_depth(cam, mean + [0, off], center, normal)
        approx = p.pixel_depth(0, mean + [0, off])
        assert abs(approx - exact) < 5e-3 * off**2 + 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_backproject_inverts_projection(seed):
    rng = np.random.default_rng(seed)
    cam = front_camera(32)
    pts = rng.uniform(-1, 1, (10, 3))
    uv, z = cam.project(pts)
    np.testing.assert_allclose(cam.backproject(uv, z), pts, atol=1e-10)


def test_scaled_camera_keeps_pixel_centers_consistent():
    cam = front_camera(32)
    half = cam.scaled(2)
    assert (half.width, half.height) == (16, 16)
    pt = np.array([[0.2, -0.1, 0.3]])
    uv, _ = cam.project(pt)
    uv2, _ = half.project(pt)
    # pixel k of the half image averages full-res pixels 2k, 2k+1
    np.testing.assert_allclose(uv2, (uv - 0.5) / 2.0, atol=1e-12)


def test_project_backward_matches_finite_differences():
    rng = np.random.default_rng(3)
    cam = front_camera(32)
    n = 5
    pos = rng.uniform(-0.4, 0.4, (n, 3))
    rot = random_unit_quaternions(rng, n) * 1.7
    ls = np.log(rng.uniform(0.1, 0.3, (n, 2)))
    w = {k: rng.normal(size=s) for k, s in
         dict(means=(n, 2), conic=(n, 3), depth=(n,), slope=(n, 2), normal=(n, 3)).items()}

    def scalar(p, r, l):
        pr = project_surfels(p, r, l, cam)
        return (np.sum(w["means"] * pr.means2d) + np.sum(w["conic"] * pr.conic)
                + np.sum(w["depth"] * pr.depth) + np.sum(w["slope"] * pr.depth_slope)
                + np.sum(w["normal"] * pr.cam_normal))

    pr = project_surfels(pos, rot, ls, cam)
    assert not pr.culled.any()
    d_pos, d_rot, d_ls = project_backward(pr, cam, w["means"], w["conic"], w["depth"],
                                          w["slope"], w["normal"], rot)
    h = 1e-6
    for arr, grad, which in ((pos, d_pos, 0), (rot, d_rot, 1), (ls, d_ls, 2)):
        fd = np.zeros_like(arr)
        for i in np.ndindex(arr.shape):
            args_p = [pos.copy(), rot.copy(), ls.copy()]
            args_m = [pos.copy(), rot.copy(), ls.copy()]
            args_p[which][i] += h
            args_m[which][i] -= h
            fd[i] = (scalar(*args_p) - scalar(*args_m)) / (2 * h)
        np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-6 * np.abs(fd).max())
