import zlib

import numpy as np
import pytest

from sdftrack import autodiff as ad


def leaf(values, name="p"):
    return ad.Tensor(np.asarray(values, dtype=np.float64), requires_grad=True, name=name)


def grad_of(fn, *tensors):
    with ad.Graph() as g:
        loss = fn(*tensors)
        ad.backward(loss, g)
    return [t.grad for t in tensors]


def test_mul_square_gradient():
    x = leaf([3.0])
    (gx,) = grad_of(lambda a: ad.sum(ad.mul(a, a)), x)
    assert gx[0] == 6.0


def test_sigmoid_value_and_gradient_at_zero():
    x = leaf([0.0])
    with ad.Graph() as g:
        y = ad.sigmoid(x)
        assert y.data[0] == 0.5
        ad.backward(ad.sum(y), g)
    assert x.grad[0] == 0.25


def test_gather_gradient_touches_only_selected_row():
    table = leaf(np.arange(12.0).reshape(4, 3))
    (gt,) = grad_of(lambda t: ad.sum(ad.gather(t, np.array([2]))), table)
    expected = np.zeros((4, 3))
    expected[2] = 1.0
    np.testing.assert_array_equal(gt, expected)


def test_sum_of_params_has_unit_gradients():
    a, b = leaf(np.random.default_rng(0).normal(size=(3, 4))), leaf([1.5, -2.0])
    ga, gb = grad_of(lambda x, y: ad.add(ad.sum(x), ad.sum(y)), a, b)
    assert np.all(ga == 1.0) and np.all(gb == 1.0)


def test_backward_twice_accumulates():
    x = leaf([2.0, -1.0])
    for _ in range(2):
        with ad.Graph() as g:
            ad.backward(ad.sum(ad.mul(x, 3.0)), g)
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])


def test_backward_requires_scalar():
    x = leaf([1.0, 2.0])
    with ad.Graph() as g:
        with pytest.raises(ValueError):
            ad.backward(ad.mul(x, 2.0), g)


def test_shape_error_names_op_and_shapes():
    with pytest.raises(ad.ShapeError) as info:
        ad.add(leaf(np.ones((2, 3))), leaf(np.ones((3, 2))))
    assert "add" in str(info.value) and "(2, 3)" in str(info.value)


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with ad.Graph() as g:
        with ad.no_grad():
            y = ad.mul(x, x)
        assert len(g) == 0
        assert not y.requires_grad


def test_graph_clear_keeps_parameter_values():
    params = ad.ParameterSet()
    w = params.register("w", ad.Tensor(np.random.default_rng(1).normal(size=(4, 2))))
    before = params.fingerprint()
    with ad.Graph() as g:
        ad.backward(ad.sum(ad.square(w)), g)
        g.clear()
    assert params.fingerprint() == before
    assert len(g) == 0


def test_parameter_set_rejects_duplicates():
    params = ad.ParameterSet()
    t = ad.Tensor(np.zeros(2))
    params.register("a", t)
    with pytest.raises(KeyError):
        params.register("a", ad.Tensor(np.zeros(2)))
    with pytest.raises(ValueError):
        params.register("b", t)


def _mlp_params(rng, dims=(3, 8, 2)):
    params = ad.ParameterSet()
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        params.register(f"w{i}", ad.Tensor(rng.normal(0, 0.7, (a, b))), decay=True)
        params.register(f"b{i}", ad.Tensor(rng.normal(0, 0.1, b)))
    return params


def test_two_layer_mlp_matches_finite_differences():
    rng = np.random.default_rng(3)
    params = _mlp_params(rng)
    x = ad.Tensor(rng.normal(size=(16, 3)))

    def f(p):
        h = ad.softplus(ad.affine(x, p["w0"], p["b0"]), beta=2.0)
        return ad.mean(ad.square(ad.affine(h, p["w1"], p["b1"])))

    assert ad.finite_diff_check(f, params, h=1e-5) < 1e-4


def test_finite_diff_constant_function_is_zero():
    params = _mlp_params(np.random.default_rng(0))
    assert ad.finite_diff_check(lambda p: ad.Tensor(np.array(2.5)), params) == 0.0


def test_finite_diff_quadratic_form():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(5, 5))
    a = a @ a.T
    params = ad.ParameterSet()
    params.register("x", ad.Tensor(rng.normal(size=(1, 5))))

    def f(p):
        return ad.sum(ad.mul(ad.matmul(p["x"], ad.Tensor(a)), p["x"]))

    assert ad.finite_diff_check(f, params, h=1e-4) < 1e-6


def test_finite_diff_rejects_non_finite():
    params = _mlp_params(np.random.default_rng(0))
    with pytest.raises(FloatingPointError):
        ad.finite_diff_check(lambda p: ad.Tensor(np.array(np.nan)), params)


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ValueError):
        ad.finite_diff_check(lambda p: ad.Tensor(np.array(0.0)), ad.ParameterSet(), h=0.0)


OPS = [
    ("add", lambda a, b: ad.add(a, b)),
    ("sub", lambda a, b: ad.sub(a, b)),
    ("mul", lambda a, b: ad.mul(a, b)),
    ("div", lambda a, b: ad.div(a, ad.add(ad.square(b), 0.5))),
    ("softplus", lambda a, b: ad.softplus(ad.mul(a, b), beta=3.0)),
    ("sigmoid", lambda a, b: ad.sigmoid(ad.sub(a, b))),
    ("relu", lambda a, b: ad.relu(ad.add(a, 0.05 * np.sign(a.data)))),
    ("clamp", lambda a, b: ad.clamp(ad.mul(a, b), -0.3, 0.4)),
    ("exp_log", lambda a, b: ad.log(ad.add(ad.exp(a), ad.square(b)))),
    ("norm", lambda a, b: ad.norm(ad.concat([a, b], axis=1), axis=1)),
    ("where", lambda a, b: ad.where(a.data > 0, a, ad.mul(b, 2.0))),
    ("cumprod", lambda a, b: ad.cumprod_exclusive(ad.sigmoid(ad.add(a, b)))),
]


@pytest.mark.parametrize("name,op", OPS, ids=[o[0] for o in OPS])
def test_elementwise_ops_randomized_gradients(name, op):
    # 100 randomized trials per op
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(100):
        params = ad.ParameterSet()
        params.register("a", ad.Tensor(rng.normal(size=(4, 3))))
        params.register("b", ad.Tensor(rng.normal(size=(4, 3))))
        weights = rng.normal(size=op(params["a"], params["b"]).shape)

        def f(p):
            return ad.sum(ad.mul(op(p["a"], p["b"]), weights))

        worst = max(worst, ad.finite_diff_check(f, params, h=1e-6))
    assert worst < 1e-4


def test_indexing_and_scatter_gradients():
    rng = np.random.default_rng(11)
    params = ad.ParameterSet()
    params.register("a", ad.Tensor(rng.normal(size=(6, 3))))
    rows = np.array([0, 3, 3, 5])
    target = rng.normal(size=(8, 3))

    def f(p):
        picked = p["a"][rows]
        spread = ad.scatter_rows(picked[:, :2], np.array([1, 2, 4, 7]), 8)
        return ad.sum(ad.square(ad.sub(ad.concat([spread, ad.Tensor(np.zeros((8, 1)))], axis=1),
                                       target)))

    assert ad.finite_diff_check(f, params) < 1e-6


def test_reduction_and_matvec_gradients():
    rng = np.random.default_rng(12)
    params = ad.ParameterSet()
    params.register("m", ad.Tensor(rng.normal(size=(5, 3, 3))))
    params.register("v", ad.Tensor(rng.normal(size=(5, 3))))

    def f(p):
        y = ad.add(ad.matvec(p["m"], p["v"]), ad.matvec(p["m"], p["v"], transpose=True))
        return ad.add(ad.mean(ad.square(y)), ad.sum(ad.reshape(y, (15,))))

    assert ad.finite_diff_check(f, params) < 1e-6


def test_cumprod_exclusive_handles_zero_factor():
    a = leaf([[0.5, 0.0, 2.0, 3.0]])
    with ad.Graph() as g:
        out = ad.cumprod_exclusive(a)
        np.testing.assert_allclose(out.data, [[1.0, 0.5, 0.0, 0.0]])
        ad.backward(ad.sum(out), g)
    # d/d a1 of (1 + a0 + a0 a1 + a0 a1 a2) = a0 + a0 a2
    np.testing.assert_allclose(a.grad, [[1.0 + 0.0 + 0.0, 0.5 + 1.0, 0.0, 0.0]])


def test_determinism_of_forward_and_gradients():
    def run():
        rng = np.random.default_rng(9)
        params = _mlp_params(rng)
        x = ad.Tensor(rng.normal(size=(32, 3)))
        with ad.Graph() as g:
            h = ad.softplus(ad.affine(x, params["w0"], params["b0"]), beta=10.0)
            loss = ad.mean(ad.square(ad.affine(h, params["w1"], params["b1"])))
            ad.backward(loss, g)
        return loss.data.tobytes() + b"".join(t.grad.tobytes() for t in params.tensors())

    assert run() == run()


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    params = ad.ParameterSet()
    params.register("w", ad.Tensor(rng.normal(size=(3, 4)).astype(np.float32)), decay=True)
    params.register("k", ad.Tensor(np.array([1.25])))
    params.state["w"] = ad.ParamState(np.ones((3, 4), np.float32), np.full((3, 4), 2.0, np.float32), 7)
    params.skipped_updates = 2
    path = tmp_path / "p.ckpt"
    ad.save_checkpoint(path, params, {"stage": "test"})

    other = ad.ParameterSet()
    other.register("w", ad.Tensor(np.zeros((3, 4), np.float32)))
    other.register("k", ad.Tensor(np.zeros(1)))
    meta = ad.load_checkpoint(path, other)
    assert meta["stage"] == "test"
    assert other.fingerprint() == params.fingerprint()
    assert other["w"].dtype == np.float32 and other["k"].dtype == np.float64
    assert other.state["w"].step == 7 and np.all(other.state["w"].v == 2.0)
    assert "k" not in other.state
    assert other.skipped_updates == 2


def test_checkpoint_rejects_garbage_and_truncation(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(ad.CheckpointError):
        ad.read_checkpoint(bad)
    params = ad.ParameterSet()
    params.register("w", ad.Tensor(np.ones(10)))
    good = tmp_path / "good.ckpt"
    ad.save_checkpoint(good, params)
    (tmp_path / "cut.ckpt").write_bytes(good.read_bytes()[:-5])
    with pytest.raises(ad.CheckpointError):
        ad.read_checkpoint(tmp_path / "cut.ckpt")
