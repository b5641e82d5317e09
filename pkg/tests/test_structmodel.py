import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dynflow import diffmath as dm
from dynflow.structmodel import (HyperNet, HyperReward, RidgeReward, RidgeStats, StructParams,
                                 hyper_theta, likelihood_term, mask_inputs, n_theta,
                                 per_node_mse, predict_dx, reward, ridge_theta, unpack_blocks)
from dynflow.synthdata import sample_system, simulate_pairs


@pytest.fixture
def linear_data():
    spec = sample_system(5, 0.6, seed=1)
    return spec, simulate_pairs(spec, 200)


def test_mask_inputs():
    x = np.array([1.0, 2.0, 3.0])
    G = np.array([[1, 0, 0], [1, 0, 1], [1, 0, 0]])
    np.testing.assert_array_equal(mask_inputs(x, G, 0), x)
    np.testing.assert_array_equal(mask_inputs(x, G, 1), 0)
    np.testing.assert_array_equal(mask_inputs(x, G, 2), [0, 2, 0])


def test_ridge_examples(linear_data):
    spec, ds = linear_data
    assert not ridge_theta(ds.X, ds.dX, np.zeros((5, 5))).theta.any()
    th = ridge_theta(ds.X, ds.dX, spec.graph(), 1e-8).theta
    assert np.max(np.abs(th - spec.A.T)) < 1e-6
    assert not th[spec.graph() == 0].any()
    with pytest.raises(ValueError):
        ridge_theta(ds.X, ds.dX, spec.graph(), 0.0)


def test_ridge_stats_matches_direct_fit(linear_data):
    spec, ds = linear_data
    rng = np.random.default_rng(0)
    masks = rng.integers(0, 2, size=(12, 5))
    nodes = rng.integers(0, 5, size=12)
    theta, mse = RidgeStats(ds.X, ds.dX, 0.01).fit(nodes, masks)
    for k in range(12):
        G = np.zeros((5, 5), dtype=int)
        G[:, nodes[k]] = masks[k]
        ref = ridge_theta(ds.X, ds.dX, G, 0.01)
        np.testing.assert_allclose(theta[k], ref.theta[:, nodes[k]], atol=1e-12)
        resid = ds.dX[:, nodes[k]] - ds.X @ ref.theta[:, nodes[k]]
        assert mse[k] == pytest.approx(np.mean(resid ** 2), abs=1e-12)


def test_ridge_mse_tensor_agrees_on_hard_graphs(linear_data):
    _, ds = linear_data
    stats = RidgeStats(ds.X, ds.dX)
    G = np.random.default_rng(2).integers(0, 2, size=(3, 5, 5)).astype(float)
    got = stats.mse_tensor(dm.Tensor(G)).data
    for s in range(3):
        _, mse = stats.fit(np.arange(5), G[s].T)
        np.testing.assert_allclose(got[s], mse, atol=1e-12)


def test_ridge_is_optimal_against_gradient_training(linear_data):
    spec, ds = linear_data
    G = spec.graph()
    ridge_mse = per_node_mse(ds.dX, predict_dx(ds.X, G, ridge_theta(ds.X, ds.dX, G, 1e-10))).sum()
    p = dm.ParamSet({"theta": np.zeros((5, 5))})
    st_ = dm.AdamState()
    for _ in range(400):
        rec = dm.GradRecord()
        w = rec.watch(p)
        pred = dm.matmul(ds.X, w["theta"] * G)
        loss = dm.tsum(dm.tmean((pred - ds.dX) ** 2, axis=0))
        p, st_ = dm.adam_step(p, dm.backward(rec, loss), 0.05, st_)
    trained = per_node_mse(ds.dX, predict_dx(ds.X, G, StructParams("linear", theta=p["theta"]))).sum()
    assert trained >= ridge_mse - 1e-9


def test_predict_examples(linear_data):
    spec, ds = linear_data
    assert not predict_dx(ds.X, np.ones((5, 5)), StructParams("linear", theta=np.zeros((5, 5)))).any()
    full = predict_dx(ds.X, np.ones((5, 5)), StructParams("linear", theta=spec.A.T))
    np.testing.assert_allclose(full, ds.X @ spec.A.T, atol=1e-14)
    h = HyperNet.init(5, "mlp", np.random.default_rng(0))
    params = hyper_theta(h, np.zeros((5, 5)))
    out = predict_dx(ds.X, np.zeros((5, 5)), params)
    np.testing.assert_allclose(out, np.broadcast_to(out[0], out.shape), atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(form=st.sampled_from(["linear", "mlp"]), seed=st.integers(0, 1000))
def test_masking_soundness(form, seed):
    rng = np.random.default_rng(seed)
    D = 4
    G = rng.integers(0, 2, size=(D, D))
    h = HyperNet.init(D, form, rng, layers=(8,), hidden=6)
    params = hyper_theta(h, G)
    X = rng.normal(size=(6, D))
    base = predict_dx(X, G, params)
    for j in range(D):
        Xp = X.copy()
        Xp[:, j] += rng.normal(size=6) * 10
        moved = predict_dx(Xp, G, params)
        for i in range(D):
            if G[j, i] == 0:
                np.testing.assert_array_equal(moved[:, i], base[:, i])


def test_hyper_theta_determinism_and_shape():
    h = HyperNet.init(4, "mlp", np.random.default_rng(1), hidden=5)
    G = np.eye(4, dtype=int)
    a, b = hyper_theta(h, G), hyper_theta(h, G.copy())
    assert a.W1.tobytes() == b.W1.tobytes() and a.b2.tobytes() == b.b2.tobytes()
    assert h.n_out == n_theta(4, "mlp", 5) == 4 * 5 + 2 * 5 + 1
    assert h.blocks(np.arange(4), G.T).shape == (4, h.n_out)
    with pytest.raises(dm.ShapeError):
        hyper_theta(h, np.eye(3))
    with pytest.raises(ValueError):
        HyperNet.init(4, "rbf", np.random.default_rng(0))


def test_hypernet_trains_close_to_ridge(linear_data):
    spec, ds = linear_data
    G = spec.graph()
    ridge_mse = per_node_mse(ds.dX, predict_dx(ds.X, G, ridge_theta(ds.X, ds.dX, G))).sum()
    h = HyperNet.init(5, "linear", np.random.default_rng(0))
    hr = HyperReward(h, ds.X, ds.dX, 0.0, 1.0)
    nodes, masks = np.arange(5), G.T
    st_ = dm.AdamState()
    for _ in range(1500):
        rec = dm.GradRecord()
        w = rec.watch(h.params)
        loss = dm.tsum(hr.mse(nodes, masks, w))
        h.params, st_ = dm.adam_step(h.params, dm.backward(rec, loss), 3e-3, st_)
    trained = per_node_mse(ds.dX, predict_dx(ds.X, G, hyper_theta(h, G))).sum()
    assert trained <= ridge_mse * 1.1 + 1e-6


def test_reward_examples():
    dx = np.random.default_rng(0).normal(size=(10, 3))
    per, total = reward(dx, dx, np.zeros((3, 3)), 100.0, 1.0)
    assert total == 0.0 and np.exp(total) == 1.0
    G = np.zeros((3, 3))
    G[0, 1] = 1
    per, total = reward(dx, dx, G, 100.0, 1.0)
    assert total == -100.0 and per[1] == -100.0
    r = np.full((10, 3), 0.3)
    assert likelihood_term(dx, dx + r, 2.0) == pytest.approx(likelihood_term(dx, dx + r, 1.0) / 4)
    with pytest.raises(ValueError):
        reward(dx, dx, G, 1.0, 0.0)


def test_reward_factorizes_over_nodes(linear_data):
    spec, ds = linear_data
    G = spec.graph()
    dx_hat = predict_dx(ds.X, G, ridge_theta(ds.X, ds.dX, G))
    per, total = reward(ds.dX, dx_hat, G, 2.0, 0.1)
    full = -np.sum((ds.dX - dx_hat) ** 2) / ds.n / 0.01 - 2.0 * G.sum()
    assert total == pytest.approx(full, rel=1e-12)
    rr = RidgeReward(ds.X, ds.dX, 2.0, 0.1)(np.arange(5), G.T)
    np.testing.assert_allclose(rr, per, rtol=1e-10)


def test_hyper_reward_matches_predict(linear_data):
    _, ds = linear_data
    h = HyperNet.init(5, "mlp", np.random.default_rng(3), hidden=4)
    G = np.random.default_rng(4).integers(0, 2, size=(5, 5))
    per, _ = reward(ds.dX, predict_dx(ds.X, G, hyper_theta(h, G)), G, 1.5, 0.5)
    got = HyperReward(h, ds.X, ds.dX, 1.5, 0.5)(np.arange(5), G.T)
    np.testing.assert_allclose(got, per, rtol=1e-10)


def test_theta_export_keys_by_node(tmp_path):
    # rows of the block output are nodes
    out = np.arange(9.0).reshape(3, 3)
    params = unpack_blocks(out, "linear", 3, 4)
    doc = params.to_json(["a", "b", "c"])
    assert doc["form"] == "linear"
    assert doc["nodes"]["b"]["theta"] == [3.0, 4.0, 5.0]
