import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from solar import autodiff as ad
from solar.render import (COV_EPS, Camera, GaussianPrimitive, Gaussians, RasterSettings, eval_gaussian_2d,
                          project, quat_to_rotmat, render, render_backward)
from solar.selftest import gradcheck


def ident_cam(w=64, h=64, f=100.0, c=32.0):
    return Camera(f, f, c, c, np.eye(3), np.zeros(3), w, h)


def rand_quat(rng):
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def rotmat(q):
    return quat_to_rotmat(ad.as_tensor(np.asarray(q, float)[None])).value[0]


def test_pinhole_center():
    mu2d, _, depth = project(GaussianPrimitive(np.array([0, 0, 1.0]), np.ones(3) * 0.1,
                                               np.array([1.0, 0, 0, 0]), np.ones(3), 1.0), ident_cam())
    np.testing.assert_allclose(mu2d, [32, 32])
    assert depth == 1.0


def test_axial_isotropic_covariance():
    d, s = 2.5, 0.07
    _, cov, _ = project(GaussianPrimitive(np.array([0, 0, d]), np.full(3, s), np.array([1.0, 0, 0, 0]),
                                          np.ones(3), 1.0), ident_cam())
    np.testing.assert_allclose(cov, ((100 * s / d) ** 2 + COV_EPS) * np.eye(2), atol=1e-12)


def test_behind_camera_is_culled():
    assert project(GaussianPrimitive(np.array([0, 0, -1.0]), np.ones(3), np.array([1.0, 0, 0, 0]),
                                     np.ones(3), 1.0), ident_cam()) is None


@pytest.mark.parametrize("seed", range(3))
def test_projected_covariance_monte_carlo(seed):
    rng = np.random.default_rng(seed)
    cam = Camera.look_at(rng.normal(size=3) * 0.3 + [0, -4, 1], [0, 0, 0], [0, 0, 1], 80, 90, 64, 64)
    g = GaussianPrimitive(rng.uniform(-0.3, 0.3, 3), rng.uniform(0.05, 0.2, 3), rand_quat(rng), np.ones(3), 1.0)
    mu2d, cov, _ = project(g, cam)
    R = rotmat(g.r)
    sigma = R @ np.diag(g.s ** 2) @ R.T
    pts = rng.multivariate_normal(g.mu, sigma, 100_000)
    pc = pts @ cam.R.T + cam.t
    uv = np.stack([cam.fx * pc[:, 0] / pc[:, 2] + cam.cx, cam.fy * pc[:, 1] / pc[:, 2] + cam.cy], 1)
    mc = np.cov(uv.T) + COV_EPS * np.eye(2)
    assert np.linalg.norm(mc - cov) / np.linalg.norm(mc) < 0.03
    np.testing.assert_allclose(mu2d, uv.mean(0), atol=0.05)


def test_eval_gaussian_closed_forms():
    assert eval_gaussian_2d([3, 4], np.eye(2), [3, 4]) == 1.0
    assert abs(eval_gaussian_2d([0, 0], np.eye(2), [1, 1]) - np.exp(-1)) < 1e-15


def test_eval_gaussian_matches_inverse(rng):
    for _ in range(20):
        a = rng.normal(size=(2, 2))
        cov = a @ a.T + 0.1 * np.eye(2)
        mu, p = rng.normal(size=2), rng.normal(size=2)
        d = p - mu
        ref = np.exp(-0.5 * d @ np.linalg.inv(cov) @ d)
        assert abs(eval_gaussian_2d(mu, cov, p) - ref) < 1e-12


def test_empty_scene_is_background():
    bg = np.array([0.1, 0.2, 0.3])
    img = render([], ident_cam(8, 6), RasterSettings(background=bg))
    assert img.shape == (6, 8, 3)
    assert np.all(img == bg)


def test_single_opaque_gaussian_pixel():
    g = GaussianPrimitive(np.array([0, 0, 1.0]), np.full(3, 0.05), np.array([1.0, 0, 0, 0]),
                          np.array([1.0, 0, 0]), 1.0)
    img = render([g], ident_cam())
    np.testing.assert_array_equal(img[32, 32], [1.0, 0.0, 0.0])


def brute_force(prims, cam, bg, w_min=1.0 / 255.0, support=3.0):
    """Term-by-term compositing, independent of the kernel's bookkeeping."""
    proj = []
    for i, g in enumerate(prims):
        p = project(g, cam)
        if p is not None:
            proj.append((p[2], i, p[0], p[1], g))
    proj.sort(key=lambda t: (t[0], t[1]))
    img = np.zeros((cam.height, cam.width, 3))
    for y in range(cam.height):
        for x in range(cam.width):
            terms = []
            for _, _, mu, cov, g in proj:
                if abs(x - mu[0]) > support * np.sqrt(cov[0, 0]) or abs(y - mu[1]) > support * np.sqrt(cov[1, 1]):
                    continue
                w = g.alpha * eval_gaussian_2d(mu, cov, [x, y])
                if w >= w_min:
                    terms.append((w, np.asarray(g.c)))
            c = np.zeros(3)
            for i, (w, col) in enumerate(terms):
                c += col * w * np.prod([1 - terms[j][0] for j in range(i)])
            img[y, x] = c + bg * np.prod([1 - w for w, _ in terms])
    return img


def random_scene(rng, n):
    return [GaussianPrimitive(rng.uniform(-0.5, 0.5, 3) + [0, 0, 3], rng.uniform(0.05, 0.4, 3), rand_quat(rng),
                              rng.uniform(0, 1, 3), float(rng.uniform(0.2, 1.0))) for _ in range(n)]


@pytest.mark.parametrize("seed", range(4))
def test_compositing_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    cam = ident_cam(20, 16, 30.0, 9.0)
    bg = rng.uniform(size=3)
    prims = random_scene(rng, 3 + seed)
    out = render(prims, cam, RasterSettings(background=bg))
    assert np.max(np.abs(out - brute_force(prims, cam, bg))) < 1e-12


def test_all_transparent_is_background(rng):
    prims = random_scene(rng, 5)
    for p in prims:
        p.alpha = 0.0
    bg = np.array([0.3, 0.6, 0.9])
    assert np.all(render(prims, ident_cam(16, 16, 30, 8), RasterSettings(background=bg)) == bg)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    prims = random_scene(rng, 5)
    cam = ident_cam(12, 12, 20, 6)
    perm = rng.permutation(5)
    a = render(prims, cam)
    b = render([prims[i] for i in perm], cam)
    np.testing.assert_allclose(a, b, atol=1e-14)


def test_transmittance_monotone_in_layers(rng):
    # adding an extra front layer can only darken what shows through behind it
    prims = random_scene(rng, 4)
    cam = ident_cam(12, 12, 20, 6)
    bg = np.ones(3)
    base = render(prims, cam, RasterSettings(background=bg))
    black_front = GaussianPrimitive(np.array([0, 0, 1.0]), np.full(3, 0.3), np.array([1.0, 0, 0, 0]),
                                    np.zeros(3), 0.8)
    front = render(prims + [black_front], cam, RasterSettings(background=bg))
    assert np.all(front <= base + 1e-15)
    assert np.all((base >= 0) & (base <= 1))


def test_render_deterministic(rng):
    prims = random_scene(rng, 6)
    cam = ident_cam(16, 16, 25, 8)
    assert render(prims, cam).tobytes() == render(prims, cam).tobytes()


def test_backward_zero_upstream(rng):
    prims = random_scene(rng, 3)
    grads = render_backward(prims, ident_cam(12, 12, 20, 6), np.zeros((12, 12, 3)))
    assert all(np.all(g == 0) for g in grads.values())


def test_color_gradient_is_weight():
    g = GaussianPrimitive(np.array([0, 0, 2.0]), np.full(3, 0.1), np.array([1.0, 0, 0, 0]),
                          np.array([0.2, 0.4, 0.6]), 0.7)
    cam = ident_cam(9, 9, 30, 4)
    up = np.zeros((9, 9, 3))
    up[4, 4, 1] = 1.0
    grads = render_backward([g], cam, up)
    np.testing.assert_allclose(grads["color"][0], [0, 0.7, 0], atol=1e-12)


def test_skipped_contributions_get_no_gradient():
    g = GaussianPrimitive(np.array([0, 0, 2.0]), np.full(3, 0.1), np.array([1.0, 0, 0, 0]),
                          np.ones(3), 0.003)  # below w_min everywhere
    grads = render_backward([g], ident_cam(9, 9, 30, 4), np.ones((9, 9, 3)))
    assert all(np.all(v == 0) for v in grads.values())


@pytest.mark.parametrize("seed", range(3))
def test_render_gradcheck(seed):
    rng = np.random.default_rng(seed)
    cam = Camera.look_at([0.2, -3, 0.5], [0, 0, 0], [0, 0, 1], 20.0, 20.0, 10, 10)
    n = 4
    params = [ad.Param(rng.uniform(-0.4, 0.4, (n, 3)), "mu"), ad.Param(rng.uniform(0.15, 0.3, (n, 3)), "scale"),
              ad.Param(rng.normal(size=(n, 4)), "rot"), ad.Param(rng.uniform(0.1, 0.9, (n, 3)), "color"),
              ad.Param(rng.uniform(0.3, 0.9, n), "alpha")]
    target = rng.uniform(size=(10, 10, 3))
    st_ = RasterSettings(w_min=0.0, support_sigma=50.0, background=rng.uniform(size=3))

    def loss():
        from solar.render import render_tensor
        mu, s, r, c, a = params
        img = render_tensor(Gaussians(mu, s, ad.normalize(r), c, a), cam, st_)
        return ((img - target) ** 2).sum()

    gradcheck(loss, params)


def test_camera_validation():
    with pytest.raises(ValueError):
        Camera(-1, 1, 0, 0, np.eye(3), np.zeros(3), 4, 4)
    with pytest.raises(ValueError):
        Camera(1, 1, 0, 0, np.ones((3, 3)), np.zeros(3), 4, 4)
    cam = Camera.look_at([0, -3, 0], [0, 0, 0], [0, 0, 1], 10, 10, 8, 8)
    np.testing.assert_allclose(cam.view_dir([0, 0, 0]), [0, -1, 0], atol=1e-12)
    back = Camera.from_dict(cam.to_dict())
    np.testing.assert_allclose(back.R, cam.R)
    np.testing.assert_allclose(back.t, cam.t)
