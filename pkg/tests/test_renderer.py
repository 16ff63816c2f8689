import math

import numpy as np
import pytest

from sdftrack import autodiff as ad
from sdftrack.encoding import HashGridConfig
from sdftrack.fields import DeformationField, RadianceField, SdfField
from sdftrack.renderer import (Camera, RenderSettings, Rays, SdfToAlpha, alpha_from_sdf, composite,
                               generate_rays, intersect_unit_cube, render_image, render_pixel,
                               render_rays, sample_along_ray, transmittance)

TINY = HashGridConfig(levels=4, base_resolution=4, max_resolution=16, features_per_level=2,
                      log2_table_size=10)


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def axis_camera(size=9, z=2.0):
    pose = np.eye(4)
    pose[:3, 3] = [0.5, 0.5, z]
    return Camera(size, size, size / 2, size / 2, size, size, pose)


def test_center_pixel_looks_down_minus_z():
    cam = axis_camera()
    rays = generate_rays(cam, [4 * 9 + 4])
    np.testing.assert_allclose(rays.directions[0], [0.0, 0.0, -1.0], atol=1e-15)
    assert rays.valid[0]
    assert rays.t_near[0] == pytest.approx(1.0) and rays.t_far[0] == pytest.approx(2.0)


def test_directions_are_unit_and_jitter_stays_in_pixel():
    cam = Camera.look_at([1.7, 1.2, 1.4], [0.5, 0.5, 0.5], [0, 1, 0], 32, 24, 30.0)
    rng = np.random.default_rng(0)
    pix = rng.integers(0, cam.num_pixels, 500)
    rays = generate_rays(cam, pix, rng)
    np.testing.assert_allclose(np.linalg.norm(rays.directions, axis=1), 1.0, atol=1e-12)
    # project back into the image: the ray must land in the pixel it was drawn for
    d_cam = rays.directions @ cam.pose[:3, :3]
    u = cam.cx + cam.fx * d_cam[:, 0] / -d_cam[:, 2]
    v = cam.cy - cam.fy * d_cam[:, 1] / -d_cam[:, 2]
    np.testing.assert_array_equal(np.floor(u).astype(int), pix % cam.width)
    np.testing.assert_array_equal(np.floor(v).astype(int), pix // cam.width)


def test_camera_looking_away_is_degenerate():
    pose = np.diag([1.0, 1.0, -1.0, 1.0])
    pose[:3, 1] *= -1  # keep it a proper rotation
    pose[:3, 3] = [0.5, 0.5, 2.0]
    cam = Camera(9, 9, 4.5, 4.5, 9, 9, pose)
    rays = generate_rays(cam, np.arange(81))
    assert not rays.valid.any()


def test_pixel_out_of_range_and_bad_pose():
    with pytest.raises(IndexError):
        generate_rays(axis_camera(), [81])
    bad = np.eye(4)
    bad[0, 0] = 1.1
    with pytest.raises(ValueError):
        Camera(1, 1, 0, 0, 2, 2, bad)


def test_slab_intersection_against_brute_force_marching():
    rng = np.random.default_rng(1)
    o = rng.uniform(-1, 2, (300, 3))
    d = rng.normal(size=(300, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    tn, tf, hit = intersect_unit_cube(o, d)
    ts = np.linspace(0, 6, 60001)
    for i in range(300):
        p = o[i] + ts[:, None] * d[i]
        inside = np.all((p >= 0) & (p <= 1), axis=1)
        assert inside.any() == hit[i] or abs(tf[i] - tn[i]) < 1e-3
        if hit[i] and inside.any():
            assert ts[inside][0] == pytest.approx(tn[i], abs=2e-4)
            assert ts[inside][-1] == pytest.approx(tf[i], abs=2e-4)


def test_midpoint_samples_are_bin_centres():
    rays = generate_rays(axis_camera(), [40])
    t, pos, width = sample_along_ray(rays, 80)
    assert t.shape == (1, 80)
    np.testing.assert_allclose(np.diff(t[0]), 1.0 / 80, atol=1e-14)
    assert t[0, 0] == pytest.approx(1.0 + 0.5 / 80)
    assert width[0] == pytest.approx(1.0 / 80)


def test_stratified_samples_bounded_and_sorted():
    cam = Camera.look_at([1.8, 0.4, 1.1], [0.5, 0.5, 0.5], [0, 1, 0], 16, 16, 14.0)
    rng = np.random.default_rng(2)
    rays = generate_rays(cam, np.arange(256), rng)
    rays = rays.subset(np.flatnonzero(rays.valid))
    t, _, width = sample_along_ray(rays, 80, rng)
    assert np.all(t >= rays.t_near[:, None]) and np.all(t <= rays.t_far[:, None])
    assert np.all(np.diff(t, axis=1) > 0)
    bins = np.floor((t - rays.t_near[:, None]) / width[:, None]).astype(int)
    np.testing.assert_array_equal(bins, np.broadcast_to(np.arange(80), bins.shape))


def test_alpha_examples():
    assert alpha_from_sdf(np.array([0.3]), np.array([0.3]), 7.0).data[0] == 0.0
    expected = (sigmoid(1.0) - sigmoid(-1.0)) / sigmoid(1.0)
    got = alpha_from_sdf(np.array([1.0]), np.array([-1.0]), 1.0).data[0]
    assert got == pytest.approx(expected, abs=1e-12)
    assert got == pytest.approx(0.63212, abs=1e-5)
    assert alpha_from_sdf(np.array([-1.0]), np.array([1.0]), 1.0).data[0] == 0.0


def test_alpha_is_a_probability():
    rng = np.random.default_rng(3)
    s, s2 = rng.normal(0, 2, 10000), rng.normal(0, 2, 10000)
    a = alpha_from_sdf(s, s2, 40.0).data
    assert np.all((a >= 0) & (a <= 1))


def test_composite_examples():
    c, w, _ = composite(np.zeros((1, 4)), np.random.default_rng(0).uniform(size=(1, 4, 3)))
    assert np.all(c.data == 0) and w.data[0] == 0
    colors = np.array([[[0.2, 0.4, 0.6], [0.9, 0.9, 0.9]]])
    c, w, _ = composite(np.array([[1.0, 0.7]]), colors)
    np.testing.assert_allclose(c.data[0], [0.2, 0.4, 0.6])
    assert w.data[0] == 1.0
    _, w, weights = composite(np.array([[0.5, 0.5]]), np.zeros((1, 2, 3)))
    np.testing.assert_allclose(weights.data[0], [0.5, 0.25])
    assert w.data[0] == 0.75


def test_weight_bound_and_monotone_transmittance():
    rng = np.random.default_rng(4)
    a = rng.uniform(0, 1, (2000, 80)) ** 3
    _, w, weights = composite(a, np.zeros((2000, 80, 3)))
    assert np.all(w.data >= 0) and np.all(w.data <= 1 + 1e-6)
    trans = transmittance(a)
    assert np.all(trans[:, 0] == 1.0)
    assert np.all(np.diff(trans, axis=1) <= 0)
    np.testing.assert_allclose(trans[:, 1:], trans[:, :-1] * (1 - a[:, :-1]), rtol=1e-12)
    np.testing.assert_allclose(weights.data, trans * a, rtol=1e-12)


def test_composite_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    params = ad.ParameterSet()
    params.register("a", ad.Tensor(rng.uniform(0.05, 0.95, (3, 6))))
    params.register("c", ad.Tensor(rng.uniform(0, 1, (3, 6, 3))))
    target = rng.uniform(0, 1, (3, 3))

    def f(p):
        c, w, _ = composite(p["a"], p["c"])
        return ad.add(ad.sum(ad.square(ad.sub(c, target))), ad.sum(w))

    assert ad.finite_diff_check(f, params) < 1e-6


def test_kappa_initialisation_matches_requested_spread():
    params = ad.ParameterSet()
    to_alpha = SdfToAlpha(params, init_std=0.3, dtype=np.float64)
    # logistic with scale 1/kappa has std pi / (kappa sqrt 3)
    assert math.pi / (to_alpha.value * math.sqrt(3)) == pytest.approx(0.3, rel=1e-12)
    assert to_alpha.kappa().data[0] > 0


class AnalyticSdf(SdfField):
    """A real field whose distance output is replaced by a closed-form SDF."""

    def __init__(self, params, fn, feature_dim=15):
        super().__init__(params, TINY, np.random.default_rng(0), np.float64, feature_dim=feature_dim)
        self.fn = fn

    def raw(self, x_hat, active_levels=None):
        x = ad.as_tensor(x_hat).data
        feats = np.zeros((len(x), self.feature_dim))
        return ad.Tensor(np.column_stack([self.fn(x), feats]))


def _model(fn, kappa):
    params = ad.ParameterSet()
    sdf = AnalyticSdf(params, fn)
    rgb = RadianceField(params, 15, np.random.default_rng(1), np.float64)
    to_alpha = SdfToAlpha(params, dtype=np.float64)
    to_alpha.log_kappa.data[0] = math.log(kappa)
    return params, sdf, rgb, to_alpha


def sphere(x):
    return np.linalg.norm(x - 0.5, axis=1) - 0.25


def test_empty_scene_has_no_weight():
    _, sdf, rgb, to_alpha = _model(lambda x: np.full(len(x), 0.5), 50.0)
    cam = Camera.look_at([1.6, 1.3, 1.2], [0.5, 0.5, 0.5], [0, 1, 0], 12, 12, 10.0)
    rays = generate_rays(cam, np.arange(144), np.random.default_rng(0))
    out = render_rays(sdf, rgb, to_alpha, None, rays, RenderSettings(), np.random.default_rng(1))
    assert np.max(out.weight_sum.data) < 1e-3


def test_degenerate_ray_renders_black_with_zero_weight():
    _, sdf, rgb, to_alpha = _model(sphere, 100.0)
    cam = axis_camera()
    rays = generate_rays(cam, [40, 40])
    rays.valid[1] = False
    out = render_rays(sdf, rgb, to_alpha, None, rays, RenderSettings())
    assert np.all(out.color.data[1] == 0) and out.weight_sum.data[1] == 0
    assert out.weight_sum.data[0] > 0.99
    away = Rays(np.array([[0.5, 0.5, 2.0]]), np.array([[0.0, 0.0, 1.0]]), np.zeros(1), np.zeros(1),
                np.array([False]))
    c, w = render_pixel(sdf, rgb, to_alpha, None, away, RenderSettings())
    assert np.all(c == 0) and w == 0.0


def test_last_sample_is_transparent():
    _, sdf, rgb, to_alpha = _model(lambda x: 0.9 - x[:, 2], 100.0)
    out = render_rays(sdf, rgb, to_alpha, None, generate_rays(axis_camera(), [40]), RenderSettings())
    assert out.alphas[0, -1] == 0.0


def test_identity_deformation_matches_template_rendering():
    params, sdf, rgb, to_alpha = _model(sphere, 60.0)
    field = DeformationField(params, TINY, np.random.default_rng(2), np.float64)
    cam = Camera.look_at([1.5, 1.1, 1.3], [0.5, 0.5, 0.5], [0, 1, 0], 10, 10, 9.0)
    rays = generate_rays(cam, np.arange(100))
    a = render_rays(sdf, rgb, to_alpha, None, rays, RenderSettings(n_samples=32))
    b = render_rays(sdf, rgb, to_alpha, field, rays, RenderSettings(n_samples=32))
    np.testing.assert_array_equal(a.color.data, b.color.data)
    np.testing.assert_array_equal(a.weight_sum.data, b.weight_sum.data)


def test_weight_peaks_at_first_surface_crossing():
    _, sdf, rgb, to_alpha = _model(sphere, 400.0)
    cam = Camera.look_at([1.6, 1.0, 1.4], [0.5, 0.5, 0.5], [0, 1, 0], 24, 24, 30.0)
    rays = generate_rays(cam, np.arange(576), np.random.default_rng(3))
    out = render_rays(sdf, rgb, to_alpha, None, rays, RenderSettings(), np.random.default_rng(4))
    checked = 0
    for s, w in zip(out.sdf, out.weights):
        cross = np.flatnonzero((s[:-1] > 0) & (s[1:] <= 0))
        if len(cross) == 0:
            continue
        checked += 1
        assert abs(int(np.argmax(w)) - int(cross[0])) <= 2
    assert checked > 50


def test_rendering_is_deterministic():
    _, sdf, rgb, to_alpha = _model(sphere, 60.0)
    cam = Camera.look_at([1.5, 1.1, 1.3], [0.5, 0.5, 0.5], [0, 1, 0], 8, 8, 7.0)

    def run():
        rng = np.random.default_rng(7)
        rays = generate_rays(cam, np.arange(64), rng)
        return render_rays(sdf, rgb, to_alpha, None, rays, RenderSettings(), rng).color.data.tobytes()

    assert run() == run()


def test_render_image_matches_batched_rays():
    _, sdf, rgb, to_alpha = _model(sphere, 60.0)
    cam = Camera.look_at([1.5, 1.1, 1.3], [0.5, 0.5, 0.5], [0, 1, 0], 8, 6, 7.0)
    img, wsum = render_image(sdf, rgb, to_alpha, None, cam, RenderSettings(n_samples=40), chunk=7)
    out = render_rays(sdf, rgb, to_alpha, None, generate_rays(cam, np.arange(48)),
                      RenderSettings(n_samples=40))
    np.testing.assert_allclose(img.reshape(-1, 3), out.color.data, atol=1e-12)
    np.testing.assert_allclose(wsum.reshape(-1), out.weight_sum.data, atol=1e-12)
