import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nsde_bmm import autodiff as ad
from nsde_bmm.layers import GaussianState
from nsde_bmm.network import mlp
from nsde_bmm.solver import NsdeModel, bmm_step, cubature_scheme, cubature_step


def test_square_value_and_gradient():
    v, tape = ad.record(lambda p: p["x"] * p["x"], {"x": np.array(3.0)})
    assert v == 9.0
    assert ad.gradient(tape)["x"] == 6.0


def test_normal_cdf_value_and_gradient():
    v, tape = ad.record(lambda p: ad.ncdf(p["x"]), {"x": np.array(0.0)})
    assert v == 0.5
    assert abs(ad.gradient(tape)["x"] - 0.3989422804014327) < 1e-15


def test_plain_arrays_pass_through():
    x = np.array([1.0, 2.0])
    out = ad.exp(x)
    assert type(out) is np.ndarray
    np.testing.assert_array_equal(out, np.exp(x))


def test_record_rejects_vector_output():
    with pytest.raises(ValueError):
        ad.record(lambda p: p["x"] * 2.0, {"x": np.ones(2)})


def test_unused_leaf_has_zero_gradient():
    _, tape = ad.record(lambda p: ad.sum_(p["x"]), {"x": np.ones(3), "y": np.ones(2)})
    np.testing.assert_array_equal(ad.gradient(tape)["y"], np.zeros(2))


def test_mixed_tapes_rejected():
    _, t1 = ad.record(lambda p: ad.sum_(p["x"]), {"x": np.ones(2)})
    _, t2 = ad.record(lambda p: ad.sum_(p["x"]), {"x": np.ones(2)})
    with pytest.raises(ValueError):
        ad.add(t1.leaves["x"], t2.leaves["x"])


def test_unbroadcast():
    g = np.ones((4, 2, 3))
    np.testing.assert_array_equal(ad.unbroadcast(g, (3,)), np.full(3, 8.0))
    np.testing.assert_array_equal(ad.unbroadcast(g, (2, 1)), np.full((2, 1), 12.0))


# Per-primitive finite-difference checks.  Each case maps a parameter dict
# to a vector or matrix; a fixed random projection reduces it to a scalar.


def _spd(x):
    A = ad.reshape(x, (3, 3))
    return ad.matmul(A, ad.swap_last(A)) + 3.0 * np.eye(3)


CASES = {
    "add": (lambda p: ad.add(p["a"], p["b"]), {"a": (4,), "b": (4,)}),
    "add_broadcast": (lambda p: ad.add(p["a"], p["c"]), {"a": (3, 4), "c": (4,)}),
    "sub": (lambda p: ad.sub(p["a"], p["b"]), {"a": (4,), "b": (1,)}),
    "mul": (lambda p: ad.mul(p["a"], p["b"]), {"a": (3, 4), "b": (4,)}),
    "div": (lambda p: ad.div(p["a"], 2.0 + p["b"] * p["b"]), {"a": (4,), "b": (4,)}),
    "neg": (lambda p: ad.neg(p["a"]), {"a": (4,)}),
    "power": (lambda p: ad.power(1.5 + p["a"] * p["a"], 1.7), {"a": (4,)}),
    "matmul": (lambda p: ad.matmul(p["A"], p["B"]), {"A": (3, 4), "B": (4, 2)}),
    "matmul_batched": (lambda p: ad.matmul(p["A"], p["v"]), {"A": (2, 3, 4), "v": (4,)}),
    "exp": (lambda p: ad.exp(p["a"]), {"a": (4,)}),
    "log": (lambda p: ad.log(1.0 + p["a"] * p["a"]), {"a": (4,)}),
    "sqrt": (lambda p: ad.sqrt(1.0 + p["a"] * p["a"]), {"a": (4,)}),
    "arcsin": (lambda p: ad.arcsin(0.5 * ad.tanh(p["a"])), {"a": (4,)}),
    "tanh": (lambda p: ad.tanh(p["a"]), {"a": (4,)}),
    "ncdf": (lambda p: ad.ncdf(p["a"]), {"a": (4,)}),
    "npdf": (lambda p: ad.npdf(p["a"]), {"a": (4,)}),
    "softplus": (lambda p: ad.softplus(p["a"]), {"a": (4,)}),
    "maximum": (lambda p: ad.maximum(p["a"], 0.05), {"a": (6,)}),
    "relu": (lambda p: ad.relu(p["a"]), {"a": (6,)}),
    "clip": (lambda p: ad.clip(p["a"], -0.5, 0.5), {"a": (6,)}),
    "where": (lambda p: ad.where(np.array([True, False, True, False]), p["a"], p["b"]), {"a": (4,), "b": (4,)}),
    "sum_axis": (lambda p: ad.sum_(p["A"], axis=0), {"A": (3, 4)}),
    "sum_keepdims": (lambda p: ad.sum_(p["A"], axis=-1, keepdims=True) * p["A"], {"A": (3, 4)}),
    "reshape": (lambda p: ad.reshape(p["A"], (2, 6)), {"A": (3, 4)}),
    "unsqueeze": (lambda p: ad.unsqueeze(p["a"], -2) * p["B"], {"a": (4,), "B": (3, 4)}),
    "swap_last": (lambda p: ad.swap_last(p["A"]), {"A": (3, 4)}),
    "broadcast_to": (lambda p: ad.broadcast_to(p["a"], (3, 4)), {"a": (4,)}),
    "getitem_slice": (lambda p: p["A"][1:, :2], {"A": (3, 4)}),
    "getitem_fancy": (lambda p: p["a"][np.array([0, 2, 2, 1])], {"a": (3,)}),
    "diagonal": (lambda p: ad.diagonal(p["A"]), {"A": (4, 4)}),
    "diag_embed": (lambda p: ad.diag_embed(p["a"]), {"a": (2, 3)}),
    "concatenate": (lambda p: ad.concatenate([p["a"], p["b"]], axis=-1), {"a": (2, 3), "b": (2, 1)}),
    "stack": (lambda p: ad.stack([p["a"], p["b"]], axis=0), {"a": (3,), "b": (3,)}),
    "cholesky": (lambda p: ad.cholesky(_spd(p["a"])), {"a": (9,)}),
}


def _scalarize(fn, proj_seed):
    def f(p):
        out = fn(p)
        w = np.random.default_rng(proj_seed).standard_normal(np.shape(ad.value_of(out)))
        return ad.sum_(out * w)

    return f


@pytest.mark.parametrize("name", sorted(CASES))
def test_primitive_matches_finite_differences(name):
    fn, shapes = CASES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    f = _scalarize(fn, 99)
    for _ in range(10):
        params = {k: rng.standard_normal(s) for k, s in shapes.items()}
        if name in ("maximum", "relu", "clip"):
            # keep points away from the kinks
            params = {k: v + np.sign(v) * 0.1 for k, v in params.items()}
        assert ad.finite_difference_check(f, params, step=1e-6) < 1e-6, name


def test_layer_primitives_match_finite_differences():
    from nsde_bmm.layers import relu_moments

    rng = np.random.default_rng(3)
    for _ in range(10):
        G = rng.standard_normal((3, 3))

        def f(p):
            s = relu_moments(GaussianState(p["m"], ad.matmul(p["G"], ad.swap_last(p["G"])) + 0.1 * np.eye(3)))
            return ad.sum_(s.mean * np.array([1.0, -2.0, 0.5])) + ad.sum_(s.cov * np.arange(9.0).reshape(3, 3))

        assert ad.finite_difference_check(f, {"m": rng.standard_normal(3), "G": G}, step=1e-6) < 1e-6


def test_fd_check_quadratic_and_modes():
    f = lambda p: ad.sum_(p["x"] * p["x"]) + 3.0 * ad.sum_(p["x"])
    x = {"x": np.array([0.5, -1.0, 2.0])}
    assert ad.finite_difference_check(f, x) < 1e-9
    assert ad.finite_difference_check(f, x, mode="coordinate") < 1e-9
    with pytest.raises(ValueError):
        ad.finite_difference_check(f, x, step=0)
    with pytest.raises(ValueError):
        ad.finite_difference_check(f, x, mode="other")


def _step_model():
    rng = np.random.default_rng(0)
    return NsdeModel(mlp(2, [8], 2, rng), mlp(2, [8], 2, rng, final_activation="relu"), 2)


def _step_objective(step_fn):
    model = _step_model()
    y = np.array([0.3, -0.1])

    def f(p):
        out = step_fn(model.with_params(p), GaussianState(np.array([0.2, 0.4]), np.array([[0.3, 0.1], [0.1, 0.2]])))
        r = y - out.mean
        return -ad.sum_(r * r) - ad.sum_(ad.diagonal(out.cov))

    return f, model.params()


def test_bmm_step_gradient():
    f, params = _step_objective(lambda m, s: bmm_step(m, s, None, 0.1))
    assert ad.finite_difference_check(f, params) < 1e-5


def test_cubature_step_gradient():
    f, params = _step_objective(lambda m, s: cubature_step(m, s, None, 0.1, cubature_scheme(2)))
    assert ad.finite_difference_check(f, params) < 1e-5


def test_recording_is_transparent():
    f, params = _step_objective(lambda m, s: bmm_step(m, s, None, 0.1))
    v, _ = ad.record(f, params)
    assert v == float(f(params))


@settings(max_examples=25)
@given(st.integers(0, 2**31 - 1))
def test_gradient_is_linear(seed):
    rng = np.random.default_rng(seed)
    x = {"x": rng.standard_normal(4)}
    f1 = lambda p: ad.sum_(ad.tanh(p["x"]) * p["x"])
    f2 = lambda p: ad.sum_(ad.exp(0.3 * p["x"])) * ad.sum_(ad.ncdf(p["x"]))
    a, b = rng.standard_normal(2)
    g1 = ad.gradient(ad.record(f1, x)[1])["x"]
    g2 = ad.gradient(ad.record(f2, x)[1])["x"]
    g = ad.gradient(ad.record(lambda p: a * f1(p) + b * f2(p), x)[1])["x"]
    np.testing.assert_allclose(g, a * g1 + b * g2, rtol=1e-12, atol=1e-12)


@settings(max_examples=25)
@given(st.integers(0, 2**31 - 1))
def test_tape_replay_matches_direct(seed):
    rng = np.random.default_rng(seed)
    f, params = _step_objective(lambda m, s: bmm_step(m, s, None, 0.1))
    _, tape = ad.record(f, params)
    new = {k: v + 0.05 * rng.standard_normal(np.shape(v)) for k, v in params.items()}
    assert float(tape.replay(new)) == float(f(new))


def test_custom_primitive():
    cube = ad.primitive("cube", lambda a: a**3, lambda g, o, a: 3 * g * a * a)
    _, tape = ad.record(lambda p: ad.sum_(cube(p["x"])), {"x": np.array([1.0, 2.0])})
    np.testing.assert_array_equal(ad.gradient(tape)["x"], [3.0, 12.0])


def test_non_finite_gradient_raises():
    with np.errstate(divide="ignore", invalid="ignore"):
        _, tape = ad.record(lambda p: ad.sum_(ad.log(p["x"] * 0.0 + 0.0)) * 0.0 + ad.sum_(ad.sqrt(p["x"] * 0.0)),
                            {"x": np.ones(2)})
        with pytest.raises(FloatingPointError):
            ad.gradient(tape)
