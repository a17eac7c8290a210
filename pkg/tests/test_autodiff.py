import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from interlab import autodiff as ad
from interlab.autodiff import Tensor


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def check_op(fn, inputs, eps=1e-5, tol=1e-6):
    """Compare reverse-mode gradients of sum(fn(*inputs) * w) against central differences."""
    rng = np.random.default_rng(0)
    w = None

    def f(vals):
        nonlocal w
        out = fn(*[Tensor(vals[f"x{i}"]) for i in range(len(inputs))])
        if w is None:
            w = rng.standard_normal(out.shape)
        return float(np.sum(out.data * w))

    vals = {f"x{i}": np.array(x, dtype=np.float64) for i, x in enumerate(inputs)}
    f(vals)
    ts = ad.parameters(vals)
    out = fn(*[ts[f"x{i}"] for i in range(len(inputs))])
    loss = ad.sum_(ad.mul(out, Tensor(w)))
    g = ad.gradients(loss, ts)
    fd = ad.finite_difference_grad(f, vals, eps)
    for k in vals:
        assert rel_err(g[k], fd[k]) < tol, k


# ---------------------------------------------------------------- evaluate


def test_identity_matmul():
    a = np.random.default_rng(1).standard_normal((3, 3))
    np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)


def test_softmax_symmetric():
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


@pytest.mark.parametrize("V", [2, 7, 1000])
def test_uniform_cross_entropy_is_log_v(V):
    loss = ad.cross_entropy(Tensor(np.zeros((5, V))), np.arange(5) % V)
    assert loss.item() == pytest.approx(math.log(V), abs=1e-12)


def test_shape_mismatch_raises():
    with pytest.raises(ad.ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ad.ShapeError):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_non_finite_is_an_error():
    with pytest.raises(ad.NumericError):
        ad.log(Tensor([0.0]))
    with pytest.raises(ad.NumericError):
        ad.exp(Tensor([1000.0]))


# ---------------------------------------------------------------- gradients


def test_square_gradient():
    x = Tensor(3.0, requires_grad=True)
    (g,) = ad.gradients(ad.mul(x, x), [x])
    assert g == pytest.approx(6.0)


@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-20, 20)))
@settings(max_examples=50, deadline=None)
def test_sum_of_softmax_has_zero_gradient(v):
    x = Tensor(v, requires_grad=True)
    (g,) = ad.gradients(ad.sum_(ad.softmax(x)), [x])
    np.testing.assert_allclose(g, 0.0, atol=1e-12)


def test_unused_parameter_raises_unless_allowed():
    x, y = Tensor(1.0, requires_grad=True), Tensor(2.0, requires_grad=True)
    loss = ad.mul(x, x)
    with pytest.raises(KeyError):
        ad.gradients(loss, {"x": x, "y": y})
    g = ad.gradients(loss, {"x": x, "y": y}, allow_unused=True)
    assert g["y"] == 0.0


def test_diamond_graph_visits_each_node_once():
    x = Tensor(2.0, requires_grad=True)
    h = ad.mul(x, x)
    loss = ad.add(h, h)
    tape = ad.Tape.from_output(loss)
    assert len({id(n) for n in tape.nodes}) == len(tape.nodes)
    assert ad.gradients(loss, [x])[0] == pytest.approx(8.0)


def _mlp_loss(vals, wrap=Tensor):
    t = {k: wrap(v) if not isinstance(v, Tensor) else v for k, v in vals.items()}
    x = Tensor(np.random.default_rng(3).standard_normal((5, 4)))
    h = ad.tanh(x @ t["w1"] + t["b1"])
    return ad.cross_entropy(h @ t["w2"] + t["b2"], np.array([0, 1, 2, 1, 0]))


def _mlp_params():
    rng = np.random.default_rng(7)
    return {"w1": rng.standard_normal((4, 6)), "b1": rng.standard_normal(6),
            "w2": rng.standard_normal((6, 3)), "b2": rng.standard_normal(3)}


def test_mlp_gradients_match_finite_differences():
    vals = _mlp_params()
    ts = ad.parameters(vals)
    g = ad.gradients(_mlp_loss(ts), ts)
    fd = ad.finite_difference_grad(lambda v: _mlp_loss(v).item(), vals, 1e-5)
    for k in vals:
        assert rel_err(g[k], fd[k]) < 1e-6


# ---------------------------------------------------------------- finite differences


def test_fd_cubic():
    g = ad.finite_difference_grad(lambda v: float(v["x"][0] ** 3), {"x": np.array([2.0])}, 1e-4)
    assert g["x"][0] == pytest.approx(12.00000001, abs=1e-6)


def test_fd_constant_is_zero():
    g = ad.finite_difference_grad(lambda v: 4.0, {"a": np.ones((2, 2)), "b": np.ones(3)})
    assert all(np.all(x == 0) for x in g.values())


def test_fd_rejects_bad_eps_and_nondeterminism():
    with pytest.raises(ValueError):
        ad.finite_difference_grad(lambda v: 0.0, {"x": np.zeros(1)}, 0.5)
    rng = np.random.default_rng(0)
    with pytest.raises(ad.OracleInvalidError):
        ad.finite_difference_grad(lambda v: float(rng.random()), {"x": np.zeros(1)})


# ---------------------------------------------------------------- every primitive


R = np.random.default_rng(11)
PRIMITIVES = {
    "add": (ad.add, [R.standard_normal((3, 4)), R.standard_normal(4)]),
    "sub": (ad.sub, [R.standard_normal((3, 4)), R.standard_normal((3, 4))]),
    "mul": (ad.mul, [R.standard_normal((2, 3)), R.standard_normal(3)]),
    "scale": (lambda a: ad.scale(a, -1.7), [R.standard_normal(5)]),
    "relu": (ad.relu, [R.standard_normal(6) + np.sign(R.standard_normal(6)) * 0.1]),
    "gelu": (ad.gelu, [R.standard_normal(6)]),
    "tanh": (ad.tanh, [R.standard_normal(6)]),
    "sigmoid": (ad.sigmoid, [R.standard_normal(6)]),
    "exp": (ad.exp, [R.standard_normal(6)]),
    "log": (ad.log, [R.random(6) + 0.5]),
    "clip": (lambda a: ad.clip(a, -0.5, 0.5), [np.array([-1.0, -0.2, 0.1, 0.3, 2.0])]),
    "matmul": (ad.matmul, [R.standard_normal((2, 3, 4)), R.standard_normal((4, 5))]),
    "bmatmul": (ad.matmul, [R.standard_normal((2, 3, 4)), R.standard_normal((2, 4, 2))]),
    "softmax": (lambda a: ad.softmax(a, axis=-1), [R.standard_normal((3, 5))]),
    "layer_norm": (ad.layer_norm, [R.standard_normal((3, 6)), R.standard_normal(6), R.standard_normal(6)]),
    "embedding": (lambda w: ad.embedding(w, np.array([[0, 2], [2, 1]])), [R.standard_normal((4, 3))]),
    "cross_entropy": (lambda a: ad.cross_entropy(a, np.array([1, -1, 3])), [R.standard_normal((3, 4))]),
    "reshape": (lambda a: ad.reshape(a, (3, 4)), [R.standard_normal((2, 6))]),
    "transpose": (lambda a: ad.transpose(a, (1, 0, 2)), [R.standard_normal((2, 3, 4))]),
    "sum_axis": (lambda a: ad.sum_(a, axis=1), [R.standard_normal((3, 4))]),
    "mean": (ad.mean, [R.standard_normal((3, 4))]),
    "take_rows": (lambda a: ad.take_rows(a, np.array([2, 0, 2])), [R.standard_normal((4, 3))]),
    "gather": (lambda a: ad.gather(a, np.array([[0, 3], [2, 0]])), [R.standard_normal(4)]),
    "concat": (lambda a, b: ad.concat([a, b], axis=0), [R.standard_normal((2, 3)), R.standard_normal((1, 3))]),
    "dropout": (lambda a: ad.dropout(a, 0.3, ad.DropoutStream((1, 2))), [R.standard_normal((4, 4))]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    fn, inputs = PRIMITIVES[name]
    check_op(fn, inputs, tol=1e-5)


# ---------------------------------------------------------------- serialization


def test_named_tensor_round_trip():
    t = {"b": np.arange(6.0).reshape(2, 3), "a": np.array(3.5), "c": np.zeros((0, 2))}
    blob = ad.dump_named_tensors(t)
    back = ad.load_named_tensors(blob)
    assert set(back) == set(t)
    for k in t:
        np.testing.assert_array_equal(back[k], t[k])
    assert ad.dump_named_tensors(back) == blob


def test_named_tensor_truncation_detected():
    blob = ad.dump_named_tensors({"a": np.ones(10)})
    with pytest.raises(ValueError):
        ad.load_named_tensors(blob[:-3])
