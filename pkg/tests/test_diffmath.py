import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dynflow import diffmath as dm
from dynflow.diffmath import ParamSet, Tensor


def _mlp(sizes, acts, seed=0):
    return dm.init_mlp(sizes, acts, np.random.default_rng(seed))


def test_identity_layer_passes_input_through():
    p = ParamSet({"W0": np.eye(3), "b0": np.zeros((1, 3))}, (3, 3), ("identity",))
    x = np.array([[1.0, -2.0, 3.5]])
    np.testing.assert_array_equal(dm.mlp_forward(p, x), x)


def test_sigmoid_zero_weight_gives_half():
    p = ParamSet({"W0": np.zeros((4, 1)), "b0": np.zeros((1, 1))}, (4, 1), ("sigmoid",))
    out = dm.mlp_forward(p, np.random.default_rng(0).normal(size=(5, 4)))
    np.testing.assert_array_equal(out, 0.5)


def test_two_layer_matches_straight_line_reevaluation():
    p = _mlp((3, 5, 2), ("elu", "leaky_relu"), seed=3)
    x = np.random.default_rng(1).normal(size=(7, 3))
    h = x @ p["W0"] + p["b0"]
    h = np.where(h > 0, h, np.expm1(np.minimum(h, 0)))
    o = h @ p["W1"] + p["b1"]
    o = np.where(o > 0, o, 0.01 * o)
    np.testing.assert_allclose(dm.mlp_forward(p, x), o, rtol=1e-12, atol=0)


def test_forward_shape_and_finite_errors():
    p = _mlp((3, 2), ("identity",))
    with pytest.raises(dm.ShapeError):
        dm.mlp_forward(p, np.zeros((2, 4)))
    with pytest.raises(dm.NumericError):
        dm.mlp_forward(p, np.array([[np.nan, 0, 0]]))


def test_unknown_activation_rejected():
    with pytest.raises(ValueError):
        ParamSet({"W0": np.zeros((1, 1)), "b0": np.zeros((1, 1))}, (1, 1), ("tanh",))


def test_linear_derivative():
    p = ParamSet({"W0": np.array([[2.0]]), "b0": np.zeros((1, 1))}, (1, 1), ("identity",))
    out, rec = dm.mlp_forward(p, np.array([[3.0]]), record=True)
    grads = dm.backward(rec, dm.tsum(out))
    assert grads["W0"][0, 0] == pytest.approx(3.0)
    assert grads["b0"][0, 0] == pytest.approx(1.0)


def test_sigmoid_mse_hand_chain_rule():
    p = ParamSet({"W0": np.array([[0.0]]), "b0": np.zeros((1, 1))}, (1, 1), ("sigmoid",))
    out, rec = dm.mlp_forward(p, np.array([[1.0]]), record=True)
    loss = dm.tmean((out - 1.0) ** 2)
    assert dm.backward(rec, loss)["W0"][0, 0] == pytest.approx(-0.25, abs=1e-15)


def test_backward_unreachable_loss():
    p = _mlp((2, 2), ("identity",))
    _, rec = dm.mlp_forward(p, np.ones((1, 2)), record=True)
    with pytest.raises(dm.GraphError):
        dm.backward(rec, dm.tsum(Tensor(np.ones(3))))


def _fd_check(p, x, acts_loss=lambda o: dm.tsum(o * o)):
    out, rec = dm.mlp_forward(p, x, record=True)
    grads = dm.backward(rec, acts_loss(out))

    def f():
        return float(acts_loss(Tensor(dm.mlp_forward(p, x))).data)

    names = p.names()
    num = dm.numeric_grad(f, [p.params[n] for n in names])
    worst = 0.0
    for n, g_num in zip(names, num):
        err = np.abs(grads[n] - g_num) / np.maximum(np.abs(g_num) + np.abs(grads[n]), 1e-8)
        worst = max(worst, float(err.max()))
    return worst


def test_random_three_layer_finite_differences():
    p = _mlp((4, 6, 5, 3), ("elu", "sigmoid", "identity"), seed=7)
    x = np.random.default_rng(2).normal(size=(5, 4))
    assert _fd_check(p, x) < 1e-4


def test_softmax_rows_sum_to_one_and_grad():
    p = _mlp((3, 4), ("softmax",), seed=1)
    x = np.random.default_rng(0).normal(size=(6, 3))
    out = dm.mlp_forward(p, x)
    np.testing.assert_allclose(out.sum(1), 1.0, atol=1e-12)
    assert _fd_check(p, x, lambda o: dm.tsum(o * np.arange(4.0))) < 1e-4


def test_solve_and_masked_log_softmax_grads():
    rng = np.random.default_rng(4)
    A0 = rng.normal(size=(2, 3, 3)) + 3 * np.eye(3)
    b0 = rng.normal(size=(2, 3))
    mask = np.array([True, False, True, True])
    z0 = rng.normal(size=(2, 4))

    def loss_of(A, b, z):
        x = dm.solve(A, b)
        lp = dm.log_softmax(z, mask=mask)
        return dm.tsum(x * x) + dm.tsum(dm.where(mask, lp, 0.0) * np.arange(4.0))

    A, b, z = Tensor(A0.copy(), name="A"), Tensor(b0.copy(), name="b"), Tensor(z0.copy(), name="z")
    rec = dm.GradRecord(leaves={"A": A, "b": b, "z": z})
    grads = dm.backward(rec, loss_of(A, b, z))
    arrs = [A0, b0, z0]
    num = dm.numeric_grad(lambda: float(loss_of(*[Tensor(a) for a in arrs]).data), arrs)
    for key, g in zip("Abz", num):
        np.testing.assert_allclose(grads[key], g, rtol=1e-5, atol=1e-8)


def test_adam_zero_gradient_keeps_params():
    p = ParamSet({"w": np.array([[1.5, -2.0]])})
    new, st_ = dm.adam_step(p, {"w": np.zeros((1, 2))}, 0.1, dm.AdamState())
    np.testing.assert_array_equal(new["w"], p["w"])
    assert st_.step == 1


def test_adam_descends_square():
    p = ParamSet({"w": np.array([[1.0]])})
    new, _ = dm.adam_step(p, {"w": 2 * p["w"]}, 0.1, dm.AdamState())
    assert abs(new["w"][0, 0]) < 1


def test_adam_converges_on_quadratic():
    target = np.array([[0.3, -1.2, 2.0]])
    p, st_ = ParamSet({"w": np.zeros((1, 3))}), dm.AdamState()
    for _ in range(200):
        p, st_ = dm.adam_step(p, {"w": 2 * (p["w"] - target)}, 0.05, st_)
    assert float(np.sum((p["w"] - target) ** 2)) < 1e-4


def test_adam_reports_offending_parameter():
    p = ParamSet({"good": np.zeros((1, 1)), "bad": np.zeros((1, 1))})
    with pytest.raises(dm.NumericError, match="bad"):
        dm.adam_step(p, {"good": np.zeros((1, 1)), "bad": np.array([[np.inf]])}, 0.1, dm.AdamState())


def test_ridge_examples():
    np.testing.assert_allclose(dm.ridge_solve_dense(np.eye(2), np.array([1.0, 2.0]), 1e-12)[:, 0],
                               [1, 2], atol=1e-10)
    np.testing.assert_array_equal(dm.ridge_solve_dense(np.zeros((5, 3)), np.ones(5), 0.1), 0.0)
    rng = np.random.default_rng(0)
    X = rng.normal(size=(50, 4))
    beta = rng.normal(size=4)
    theta = dm.ridge_solve_dense(X, X @ beta, 1e-8)[:, 0]
    assert np.max(np.abs(theta - beta)) < 1e-6


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 30), k=st.integers(1, 6), lam=st.floats(1e-6, 10.0), seed=st.integers(0, 10**6))
def test_ridge_residual_property(n, k, lam, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, k))
    y = rng.normal(size=(n, 1))
    th = dm.ridge_solve_dense(X, y, lam)
    r = (X.T @ X + lam * np.eye(k)) @ th - X.T @ y
    assert np.max(np.abs(r)) < 1e-8 * (1 + np.max(np.abs(X.T @ y)))


def test_checkpoint_round_trip_bit_exact(tmp_path):
    p = _mlp((3, 4, 2), ("elu", "identity"), seed=9)
    _, st_ = dm.adam_step(p, {k: np.ones_like(v) for k, v in p.params.items()}, 0.01, dm.AdamState())
    path = tmp_path / "ck.json"
    dm.save_checkpoint(path, {"net": p}, {"net": st_}, {"note": 1})
    psets, opts, extra = dm.load_checkpoint(path)
    for k, v in p.params.items():
        assert psets["net"][k].tobytes() == v.tobytes()
    for k, v in st_.m.items():
        assert opts["net"].m[k].tobytes() == v.tobytes()
    assert extra == {"note": 1}


def test_training_is_deterministic():
    def run():
        p = _mlp((2, 3, 1), ("elu", "identity"), seed=5)
        st_ = dm.AdamState()
        x = np.random.default_rng(1).normal(size=(8, 2))
        for _ in range(10):
            out, rec = dm.mlp_forward(p, x, record=True)
            p, st_ = dm.adam_step(p, dm.backward(rec, dm.tmean(out ** 2)), 0.01, st_)
        return p
    a, b = run(), run()
    for k in a.params:
        assert a[k].tobytes() == b[k].tobytes()
