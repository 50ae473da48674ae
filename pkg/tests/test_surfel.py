import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gsurfel.sh import N_COEFFS, SH_C0, eval_colors, eval_colors_backward, rgb_to_dc, sh_basis, sh_basis_jacobian
from gsurfel.surfel import (
    SurfelError,
    SurfelSet,
    activate,
    build_geometry,
    evaluate_kernel,
    normalize_quaternions,
    normalize_quaternions_backward,
    quat_to_rotmat,
    random_init,
    rotmat_to_quat_grad,
)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
quats = arrays(np.float64, 4, elements=finite).filter(lambda q: np.linalg.norm(q) > 1e-3)
scales = arrays(np.float64, 2, elements=st.floats(1e-3, 10))


def one_surfel(**kw):
    base = dict(
        positions=np.zeros((1, 3)),
        rotations=np.array([[1.0, 0, 0, 0]]),
        log_scales=np.zeros((1, 2)),
        opacity_logits=np.zeros(1),
        sh_coeffs=np.zeros((1, N_COEFFS, 3)),
    )
    base.update(kw)
    return SurfelSet(**base)


def test_identity_quaternion_geometry():
    g = build_geometry([1, 0, 0, 0], [2, 3])
    np.testing.assert_allclose(g.covariance, np.diag([4.0, 9.0, 0.0]), atol=1e-15)
    np.testing.assert_allclose(g.normal, [0, 0, 1])


def test_quarter_turn_about_x_moves_normal_to_minus_y():
    c = np.cos(np.pi / 4)
    g = build_geometry([c, c, 0, 0], [1, 1])
    np.testing.assert_allclose(g.normal, [0, -1, 0], atol=1e-12)


def test_unnormalized_quaternion_is_normalized_before_use():
    a = build_geometry([2, 0, 0, 0], [1, 1])
    b = build_geometry([1, 0, 0, 0], [1, 1])
    np.testing.assert_allclose(a.rotation_matrix, b.rotation_matrix)


@given(quats, scales)
def test_covariance_is_rank_two_psd_with_normal_in_kernel(q, s):
    g = build_geometry(q, s)
    R = g.rotation_matrix
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(g.covariance @ g.normal, 0.0, atol=1e-9 * max(1.0, s.max() ** 2))
    ev = np.linalg.eigvalsh(g.covariance)
    tol = 1e-9 * max(1.0, s.max() ** 2)
    assert ev.min() > -tol
    np.testing.assert_allclose(np.sort(ev)[1:], np.sort(s**2), rtol=1e-9, atol=tol)


def test_kernel_is_one_at_center_and_ignores_normal_offset():
    g = build_geometry([1, 0, 0, 0], [0.5, 0.5])
    assert evaluate_kernel(g, np.zeros(3), np.zeros(3)) == 1.0
    assert evaluate_kernel(g, np.zeros(3), [0, 0, 7.0]) == 1.0
    # one sigma along the first tangent axis
    assert evaluate_kernel(g, np.zeros(3), [0.5, 0, 0]) == pytest.approx(np.exp(-0.5), abs=1e-15)


@given(quats, scales, arrays(np.float64, 3, elements=finite))
def test_kernel_matches_pseudo_inverse_quadratic_form(q, s, x):
    # brute force: Mahalanobis distance through the pseudo-inverse of the rank-2 covariance
    g = build_geometry(q, s)
    pinv = g.rotation_matrix @ np.diag([1 / s[0] ** 2, 1 / s[1] ** 2, 0.0]) @ g.rotation_matrix.T
    expected = np.exp(-0.5 * x @ pinv @ x)
    assert evaluate_kernel(g, np.zeros(3), x) == pytest.approx(expected, rel=1e-9, abs=1e-300)


def test_activate_rejects_bad_index_and_nonfinite():
    s = one_surfel()
    with pytest.raises(IndexError):
        activate(s, 3)
    bad = one_surfel(positions=np.array([[np.nan, 0, 0]]))
    with pytest.raises(SurfelError):
        activate(bad, 0)


def test_activate_values():
    s = one_surfel(log_scales=np.log([[2.0, 3.0]]), rotations=np.array([[0.0, 0, 0, 5.0]]))
    pos, q, sc, o = activate(s, 0)
    np.testing.assert_allclose(q, [0, 0, 0, 1])
    np.testing.assert_allclose(sc, [2, 3])
    assert o == 0.5


def test_build_geometry_rejects_nonpositive_scale():
    with pytest.raises(SurfelError):
        build_geometry([1, 0, 0, 0], [0.0, 1.0])
    with pytest.raises(SurfelError):
        build_geometry([np.inf, 0, 0, 0], [1.0, 1.0])


def test_surfelset_shape_validation():
    with pytest.raises(SurfelError):
        one_surfel(log_scales=np.zeros((1, 3)))
    with pytest.raises(SurfelError):
        one_surfel(opacity_logits=np.zeros(2))


def test_random_init_deterministic_and_inside_box():
    a = random_init([-1, -1, -1], [1, 2, 3], 500, seed=4)
    b = random_init([-1, -1, -1], [1, 2, 3], 500, seed=4)
    for k, v in a.arrays().items():
        assert np.array_equal(v, b.arrays()[k])
    assert np.all(a.positions >= [-1, -1, -1]) and np.all(a.positions <= [1, 2, 3])
    np.testing.assert_allclose(a.opacities(), 0.1)
    colors, _ = eval_colors(a.sh_coeffs, a.positions, np.array([0, 0, -10.0]))
    np.testing.assert_allclose(colors, 0.5)


def _fd(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def test_rotation_matrix_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(5):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        W = rng.normal(size=(3, 3))
        analytic = rotmat_to_quat_grad(q[None], W[None])[0]
        fd = _fd(lambda x: np.sum(W * quat_to_rotmat(x[None])[0]), q)
        np.testing.assert_allclose(analytic, fd, atol=1e-8)


def test_normalization_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    q = rng.normal(size=4) * 3
    w = rng.normal(size=4)
    analytic = normalize_quaternions_backward(q[None], w[None])[0]
    fd = _fd(lambda x: w @ normalize_quaternions(x[None])[0], q)
    np.testing.assert_allclose(analytic, fd, atol=1e-9)


def test_sh_dc_decodes_color_and_gradients_match_fd():
    assert rgb_to_dc(0.5) == 0.0
    assert rgb_to_dc(0.5 + SH_C0) == pytest.approx(1.0)
    rng = np.random.default_rng(2)
    n = 4
    sh = rng.normal(0, 0.3, (n, N_COEFFS, 3))
    sh[:, 0] += 1.0
    pos = rng.normal(size=(n, 3))
    cam = np.array([0.1, -0.2, -4.0])
    w = rng.normal(size=(n, 3))
    colors, cache = eval_colors(sh, pos, cam)
    d_sh, d_pos = eval_colors_backward(w, sh, cache)
    np.testing.assert_allclose(d_sh, _fd(lambda x: np.sum(w * eval_colors(x, pos, cam)[0]), sh), atol=1e-8)
    np.testing.assert_allclose(d_pos, _fd(lambda x: np.sum(w * eval_colors(sh, x, cam)[0]), pos), atol=1e-8)


def test_sh_basis_jacobian_matches_fd():
    d = np.array([[0.3, -0.5, 0.8]])
    jac = sh_basis_jacobian(d)[0]
    for j in range(3):
        e = np.zeros((1, 3))
        e[0, j] = 1e-6
        fd = (sh_basis(d + e) - sh_basis(d - e))[0] / 2e-6
        np.testing.assert_allclose(jac[:, j], fd, atol=1e-8)
