import math

import numpy as np
import pytest
from scipy.linalg import expm

from sdftrack import autodiff as ad
from sdftrack.encoding import HashGridConfig
from sdftrack.fields import (DeformationField, FieldError, RadianceField, SdfField, deform,
                             normal_to_observation, rotation_matrix, sdf_eval, sdf_normal,
                             sdf_with_normal, sh_encode, so3_exp)
from sdftrack.training import TrainConfig, adamw_step

TINY = HashGridConfig(levels=4, base_resolution=4, max_resolution=16, features_per_level=2,
                      log2_table_size=10)


def skew(w):
    return np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])


def test_exp_zero_is_identity():
    np.testing.assert_array_equal(rotation_matrix([0.0, 0.0, 0.0]), np.eye(3))


def test_quarter_turn_about_z():
    r = rotation_matrix([0.0, 0.0, math.pi / 2])
    np.testing.assert_allclose(r @ [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], atol=1e-12)


def test_opposite_rotations_compose_to_identity():
    for theta in (1e-8, 0.3, 2.0, 3.1):
        r = rotation_matrix([theta, 0, 0]) @ rotation_matrix([-theta, 0, 0])
        np.testing.assert_allclose(r, np.eye(3), atol=1e-14)


def test_matches_matrix_exponential_including_small_angles():
    rng = np.random.default_rng(0)
    scales = [1e-9, 1e-7, 1e-5, 1e-3, 0.1, 1.0, 3.0]
    for s in scales:
        for _ in range(20):
            w = rng.normal(size=3)
            w *= s / np.linalg.norm(w)
            np.testing.assert_allclose(rotation_matrix(w), expm(skew(w)), atol=1e-12)


def test_so3_exp_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    for scale in (1e-4, 1e-2, 1.0, 2.5):
        params = ad.ParameterSet()
        w = rng.normal(size=(6, 3))
        w *= scale / np.linalg.norm(w, axis=1, keepdims=True)
        params.register("w", ad.Tensor(w))
        weights = rng.normal(size=(6, 3, 3))
        err = ad.finite_diff_check(lambda p: ad.sum(ad.mul(so3_exp(p["w"]), weights)), params, h=1e-6)
        assert err < 1e-6, scale


def test_normal_transport():
    quarter = ad.Tensor(rotation_matrix([0, 0, math.pi / 2])[None])
    n = ad.Tensor(np.array([[0.0, 1.0, 0.0]]))
    np.testing.assert_allclose(normal_to_observation(quarter, n).data, [[1.0, 0.0, 0.0]], atol=1e-12)
    np.testing.assert_allclose(normal_to_observation(quarter, n, "forward").data, [[-1.0, 0.0, 0.0]],
                               atol=1e-12)
    eye = ad.Tensor(np.eye(3)[None])
    np.testing.assert_array_equal(normal_to_observation(eye, n).data, n.data)
    rng = np.random.default_rng(2)
    rs = so3_exp(ad.Tensor(rng.normal(size=(50, 3))))
    v = rng.normal(size=(50, 3))
    out = normal_to_observation(rs, ad.Tensor(v)).data
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), np.linalg.norm(v, axis=1), rtol=1e-12)
    with pytest.raises(ValueError):
        normal_to_observation(eye, n, "sideways")


def _deform_field(seed=0):
    params = ad.ParameterSet()
    return params, DeformationField(params, TINY, np.random.default_rng(seed), np.float64)


def test_fresh_deformation_is_exact_identity():
    _, field = _deform_field()
    x = np.random.default_rng(3).uniform(0, 1, (1000, 3))
    w = deform(field, ad.Tensor(x))
    assert np.max(np.abs(w.x_hat.data - x)) == 0.0
    assert np.all(w.rotation.data == np.eye(3))


def test_translation_bias():
    _, field = _deform_field()
    field.mlp.biases[-1].data[:] = [0, 0, 0, 0.1, 0, 0]
    x = np.random.default_rng(4).uniform(0, 1, (20, 3))
    np.testing.assert_allclose(deform(field, ad.Tensor(x)).x_hat.data, x + [0.1, 0, 0], atol=1e-15)


def test_rotation_bias():
    _, field = _deform_field()
    field.mlp.biases[-1].data[:] = [0, 0, math.pi / 2, 0, 0, 0]
    w = deform(field, ad.Tensor(np.array([[0.2, 0.0, 0.0]])))
    np.testing.assert_allclose(w.x_hat.data, [[0.0, 0.2, 0.0]], atol=1e-12)


def test_non_finite_twist_names_frame_and_point():
    _, field = _deform_field()
    field.frame = 3
    field.mlp.biases[-1].data[0] = np.nan
    with pytest.raises(FieldError, match="frame 3"):
        deform(field, ad.Tensor(np.array([[0.5, 0.5, 0.5]])))


def test_identity_deformation_when_field_missing():
    x = np.random.default_rng(5).uniform(0, 1, (10, 3))
    w = deform(None, ad.Tensor(x))
    np.testing.assert_array_equal(w.x_hat.data, x)


def _sdf_field(seed=0, radius=0.5):
    params = ad.ParameterSet()
    return params, SdfField(params, TINY, np.random.default_rng(seed), np.float64, init_radius=radius)


def test_geometric_init_approximates_centered_sphere():
    _, field = _sdf_field()
    rng = np.random.default_rng(6)
    x = rng.uniform(0, 1, (500, 3))
    s, d = sdf_eval(field, ad.Tensor(x))
    expected = np.linalg.norm(x - 0.5, axis=1) - 0.5
    assert d.shape == (500, 15)
    # a rough sphere: right sign well away from the surface, small mean error
    far = np.abs(expected) > 0.15
    assert np.all(np.sign(s.data[far]) == np.sign(expected[far]))
    assert np.mean(np.abs(s.data - expected)) < 0.1


def test_sdf_is_deterministic():
    _, field = _sdf_field()
    x = ad.Tensor(np.random.default_rng(7).uniform(0, 1, (64, 3)))
    a, b = sdf_eval(field, x)[0].data, sdf_eval(field, x)[0].data
    assert a.tobytes() == b.tobytes()


class PlaneField:
    """Stand-in with the raw() contract: s(x) = a.x + b, no features."""

    def __init__(self, a, b):
        self.a, self.b = np.asarray(a, float), b

    def raw(self, x, active_levels=None):
        s = x.data @ self.a + self.b
        return ad.Tensor(np.column_stack([s, np.zeros((len(s), 2))]))


class SphereField(PlaneField):
    def __init__(self, center, radius):
        self.c, self.r = np.asarray(center, float), radius

    def raw(self, x, active_levels=None):
        s = np.linalg.norm(x.data - self.c, axis=1) - self.r
        return ad.Tensor(np.column_stack([s, np.zeros((len(s), 2))]))


def test_plane_normals_are_exact():
    a = np.array([0.48, -0.6, 0.64])
    n = sdf_normal(PlaneField(a, 0.1), np.random.default_rng(8).uniform(0, 1, (30, 3)), 1e-3).data
    np.testing.assert_allclose(n, np.broadcast_to(a, n.shape), atol=1e-12)


def test_sphere_normals_converge_second_order():
    field = SphereField([0.5, 0.5, 0.5], 0.3)
    p = np.random.default_rng(9).uniform(0.2, 0.8, (40, 3))
    exact = (p - 0.5) / np.linalg.norm(p - 0.5, axis=1, keepdims=True)
    errs = [np.max(np.abs(sdf_normal(field, p, eps).data - exact)) for eps in (2e-2, 1e-2)]
    assert errs[1] < 0.01
    assert 3.5 < errs[0] / errs[1] < 4.5


def test_normals_are_differentiable():
    params, field = _sdf_field(seed=2)
    x = ad.Tensor(np.random.default_rng(10).uniform(0.1, 0.9, (8, 3)))

    def f(p):
        _, _, n = sdf_with_normal(field, x, 0.01)
        return ad.mean(ad.square(ad.sub(ad.norm(n, axis=1), 1.0)))

    assert ad.finite_diff_check(f, params, h=1e-6, max_entries=40) < 1e-4


def test_radiance_output_in_unit_cube_and_deterministic():
    params = ad.ParameterSet()
    rgb = RadianceField(params, 15, np.random.default_rng(0), np.float64)
    rng = np.random.default_rng(11)
    v = rng.normal(size=(100, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    args = (ad.Tensor(rng.uniform(0, 1, (100, 3))), v, ad.Tensor(rng.normal(size=(100, 3))),
            ad.Tensor(rng.normal(size=(100, 15)) * 5))
    c = rgb(*args).data
    assert np.all((c > 0) & (c < 1))
    assert c.tobytes() == rgb(*args).data.tobytes()


def test_spherical_harmonics_are_orthonormal_on_sphere():
    rng = np.random.default_rng(12)
    v = rng.normal(size=(200_000, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    y = sh_encode(v)
    gram = 4 * math.pi * (y.T @ y) / len(v)
    assert y.shape[1] == 16
    np.testing.assert_allclose(gram, np.eye(16), atol=0.03)


def test_sdf_field_fits_a_sphere():
    params, field = _sdf_field(seed=3)
    cfg = TrainConfig(learning_rate=1e-2, weight_decay=0.0)
    rng = np.random.default_rng(13)
    for _ in range(1500):
        x = rng.uniform(0.05, 0.95, (512, 3))
        target = np.linalg.norm(x - 0.5, axis=1) - 0.3
        params.zero_grad()
        with ad.Graph() as g:
            s, _ = field(ad.Tensor(x))
            ad.backward(ad.mean(ad.square(ad.sub(s, ad.Tensor(target)))), g)
        adamw_step(params, cfg)
    d = rng.normal(size=(500, 3))
    on_surface = 0.5 + 0.3 * d / np.linalg.norm(d, axis=1, keepdims=True)
    s, _ = field(ad.Tensor(on_surface))
    assert np.max(np.abs(s.data)) <= 0.01
