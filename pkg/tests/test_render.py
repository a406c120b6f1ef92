import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import naive_render, pinhole, random_scene, screen_cov, world_cov
from scipy.special import sph_harm_y

from gsface.avatar import ComposedGaussians
from gsface.render import (
    Camera,
    covariance,
    eval_sh,
    load_png,
    load_raw,
    project,
    psnr,
    rasterize,
    render_reference,
    save_png,
    save_raw,
    sh_basis,
    ssim,
)

BG = (0.2, 0.3, 0.4)


def unit_quats(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def test_covariance_examples():
    ident = np.array([1.0, 0, 0, 0])
    assert np.array_equal(covariance(ident, np.ones(3)), np.eye(3))
    assert np.array_equal(covariance(ident, np.array([2.0, 1, 1])), np.diag([4.0, 1, 1]))


def test_covariance_eigenvalues_match_scales(rng):
    q = unit_quats(rng, 200)
    s = rng.uniform(0.1, 3.0, (200, 3))
    cov = covariance(q, s)
    for i in range(200):
        ev = np.sort(np.linalg.eigvalsh(cov[i]))
        want = np.sort(s[i] ** 2)
        assert np.abs(ev - want).max() <= 1e-9 * want.max()
        assert abs(np.linalg.det(cov[i]) - np.prod(s[i]) ** 2) <= 1e-9 * np.prod(s[i]) ** 2
        np.testing.assert_allclose(cov[i], world_cov(q[i], s[i]), rtol=0, atol=1e-12 * want.max())


def test_covariance_rejects_bad_inputs():
    with pytest.raises(ValueError, match="unit"):
        covariance(np.array([1.0, 0.1, 0, 0]), np.ones(3))
    with pytest.raises(ValueError, match="positive"):
        covariance(np.array([1.0, 0, 0, 0]), np.array([1.0, 0, 1]))


def test_project_on_axis():
    cam = Camera(np.eye(3), np.zeros(3), 1.0, 1.0, 7.5, 9.0, 16, 16)
    m2, _, depth = project(np.array([0.0, 0, 1]), 1e-6 * np.eye(3), cam)
    assert np.array_equal(m2, [7.5, 9.0]) and depth == 1.0


def test_project_behind_camera_is_culled():
    assert project(np.array([0.0, 0, -1]), np.eye(3), pinhole(8)) is None


def test_project_rigid_invariance(rng):
    for _ in range(10):
        rot = np.linalg.qr(rng.normal(size=(3, 3)))[0]
        rot *= np.sign(np.linalg.det(rot))
        cam = pinhole(32, rotation=rot, translation=rng.normal(size=3) + [0, 0, 10])
        mu = rng.normal(size=3)
        cov = world_cov(unit_quats(rng, 1)[0], rng.uniform(0.1, 1, 3))
        shift = rng.normal(size=3)
        moved = pinhole(32, rotation=rot, translation=cam.translation - rot @ shift)
        a, b = project(mu, cov, cam), project(mu + shift, cov, moved)
        np.testing.assert_allclose(a[0], b[0], atol=1e-9)
        np.testing.assert_allclose(a[1], b[1], rtol=1e-9, atol=1e-12)


def test_project_matches_finite_difference(rng):
    for _ in range(20):
        rot = np.linalg.qr(rng.normal(size=(3, 3)))[0]
        rot *= np.sign(np.linalg.det(rot))
        cam = pinhole(64, f=80.0, rotation=rot, translation=[0, 0, 8])
        mu = rng.normal(size=3)
        cov = world_cov(unit_quats(rng, 1)[0], rng.uniform(0.1, 1, 3))
        _, c2, _ = project(mu, cov, cam)
        want = screen_cov(mu, cov, cam)
        assert np.abs(c2 - want).max() <= 1e-4 * max(1.0, np.abs(want).max())


def empty_set():
    z = np.zeros((0, 3))
    return ComposedGaussians(z, np.zeros((0, 4)), z, np.zeros(0), z, np.zeros((0, 9)))


def test_empty_scene_is_background():
    out = rasterize(empty_set(), pinhole(16), BG)
    assert np.array_equal(out.image, np.broadcast_to(BG, (16, 16, 3)))
    assert np.all(out.transmittance == 1.0)


def test_single_screen_filling_gaussian():
    color = np.array([0.9, 0.2, 0.6])
    g = ComposedGaussians(
        means=np.array([[0.0, 0, 5]]),
        quats=np.array([[1.0, 0, 0, 0]]),
        scales=np.full((1, 3), 50.0),
        alpha=np.array([1.0 - 1e-12]),
        h_base=(color / 0.28209479177387814)[None],
        h_rest=np.zeros((1, 9)),
    )
    out = rasterize(g, pinhole(32), (0.0, 0.0, 0.0))
    centre = out.image[16, 16]
    assert np.all(np.abs(centre - color) <= 0.02 * color)


def test_two_overlapping_gaussians_match_oracle():
    g = ComposedGaussians(
        means=np.array([[0.0, 0, 4], [0.3, 0.1, 5]]),
        quats=np.array([[1.0, 0, 0, 0], [0.9, 0.1, 0.3, 0.2]]) / np.array([[1.0], [np.sqrt(0.95)]]),
        scales=np.array([[0.6, 0.5, 0.5], [0.8, 0.4, 0.6]]),
        alpha=np.array([1.0, 0.7]),
        h_base=np.array([[2.0, 0.5, 1.0], [0.3, 2.5, 1.2]]),
        h_rest=np.zeros((2, 9)),
    )
    cam = pinhole(32)
    got = rasterize(g, cam, BG).image
    assert np.abs(got - naive_render(g, cam, BG)).max() <= 1e-6


@given(st.integers(0, 2**31 - 1), st.integers(1, 60))
def test_random_scenes_match_oracle(seed, n):
    g, cam = random_scene(np.random.default_rng(seed), n, 32)
    assert np.abs(rasterize(g, cam, BG).image - naive_render(g, cam, BG)).max() <= 1e-4


def test_rasterizer_equals_reference_bitwise(rng):
    for n in (1, 40, 100):
        g, cam = random_scene(rng, n)
        a, b = rasterize(g, cam, BG), render_reference(g, cam, BG)
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.transmittance, b.transmittance)


def test_batch_budget_does_not_change_output(rng):
    g, cam = random_scene(rng, 80)
    a = rasterize(g, cam, BG)
    b = rasterize(g, cam, BG, max_fragments=50)
    assert np.array_equal(a.image, b.image)


def test_input_permutation_invariance(rng):
    g, cam = random_scene(rng, 50)
    perm = rng.permutation(50)
    h = ComposedGaussians(g.means[perm], g.quats[perm], g.scales[perm], g.alpha[perm], g.h_base[perm],
                          g.h_rest[perm])
    assert np.array_equal(rasterize(g, cam, BG).image, rasterize(h, cam, BG).image)


def test_weight_plus_transmittance_is_one(rng):
    for _ in range(5):
        g, cam = random_scene(rng, 100)
        out = rasterize(g, cam, BG)
        assert np.abs(out.foreground_weight + out.transmittance - 1.0).max() <= 1e-12


def test_ill_conditioned_gaussian_skipped():
    g = ComposedGaussians(
        means=np.array([[0.0, 0, 5], [0.0, 0, -5]]),
        quats=np.array([[1.0, 0, 0, 0]] * 2),
        scales=np.array([[1.0, 1e-9, 1.0], [1, 1, 1]]),
        alpha=np.array([0.9, 0.9]),
        h_base=np.ones((2, 3)),
        h_rest=np.zeros((2, 9)),
    )
    out = rasterize(g, pinhole(16), BG)
    assert out.n_skipped == 1 and out.n_culled == 1
    assert np.array_equal(out.image, np.broadcast_to(BG, (16, 16, 3)))


def test_sh_zero_rest_is_view_independent(rng):
    h_base = rng.uniform(0, 3, (10, 3))
    dirs = unit_quats(rng, 10)[:, :3]
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    a = eval_sh(h_base, np.zeros((10, 9)), dirs)
    b = eval_sh(h_base, np.zeros((10, 9)), -dirs)
    assert np.array_equal(a, b)
    np.testing.assert_allclose(a, np.clip(0.28209479177387814 * h_base, 0, 1), rtol=1e-15)


def test_sh_degree_one_is_odd(rng):
    dirs = rng.normal(size=(10, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    b = sh_basis(dirs, 1)[:, 1:]
    assert np.array_equal(sh_basis(-dirs, 1)[:, 1:], -b)


def real_sh_oracle(dirs, degree):
    polar = np.arccos(np.clip(dirs[:, 2], -1, 1))
    azimuth = np.arctan2(dirs[:, 1], dirs[:, 0])
    cols = []
    for n in range(degree + 1):
        for m in range(-n, n + 1):
            y = sph_harm_y(n, abs(m), polar, azimuth)
            if m < 0:
                cols.append(np.sqrt(2) * y.imag)
            elif m == 0:
                cols.append(y.real)
            else:
                cols.append(np.sqrt(2) * y.real)
    return np.stack(cols, axis=1)


def test_sh_basis_matches_tabulated_oracle(rng):
    dirs = rng.normal(size=(100, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    for degree in range(4):
        np.testing.assert_allclose(sh_basis(dirs, degree), real_sh_oracle(dirs, degree), rtol=0, atol=1e-9)


def test_psnr_values(rng):
    a = rng.uniform(0.1, 0.9, (8, 8, 3))
    assert psnr(a, a) == 99.0
    assert psnr(a, a + 1 / 255) == pytest.approx(20 * np.log10(255), abs=1e-9)
    assert psnr(a, a + 1 / 255) == pytest.approx(48.13, abs=0.005)
    b = rng.uniform(0, 1, (8, 8, 3))
    assert psnr(a, b) == psnr(b, a)
    with pytest.raises(ValueError):
        psnr(a, a[:4])


def test_ssim_values(rng):
    a = rng.uniform(0, 1, (32, 32, 3))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert ssim(np.full((32, 32, 3), 0.5) + 0 * a, 1 - a) < 1
    assert ssim(a, 1 - a) < 1
    with pytest.raises(ValueError):
        ssim(a[:10, :10], a[:10, :10])


def test_ssim_constant_images_closed_form():
    mu_a, mu_b = 0.4, 0.5
    c1 = 0.01**2
    want = (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
    got = ssim(np.full((20, 20, 3), mu_a), np.full((20, 20, 3), mu_b))
    assert got == pytest.approx(want, abs=1e-9)


def test_image_io(tmp_path, rng):
    img = rng.uniform(0, 1, (9, 13, 3))
    save_raw(img, tmp_path / "a.raw")
    assert np.array_equal(load_raw(tmp_path / "a.raw"), img.astype(np.float32).astype(float))
    save_png(img, tmp_path / "a.png")
    back = load_png(tmp_path / "a.png")
    assert back.shape == img.shape and np.abs(back - img).max() <= 0.5 / 255 + 1e-12
