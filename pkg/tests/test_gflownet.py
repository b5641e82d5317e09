import itertools
import math

import numpy as np
import pytest
from scipy.special import logsumexp

from dynflow import diffmath as dm
from dynflow.gflownet import (CheckpointError, DynGFN, GFNConfig, IntractableError, PolicyNet,
                              TemperSchedule, TrainingError, Trajectories, action_mask, db_loss,
                              exact_model_prob, exact_node_log_probs, sample_trajectories,
                              state_log_rewards, warm_start)
from dynflow.synthdata import sample_system, simulate_pairs


def flat_policy(D, hidden=8, stop_logit=0.0, seed=0):
    """Policy whose logits ignore the state: uniform over valid actions."""
    p = PolicyNet.init(D, np.random.default_rng(seed), hidden)
    p.params.params["H1"][:] = 0.0
    p.params.params["c1"][:] = 0.0
    p.params.params["c1"][:, D] = stop_logit
    return p


def random_policy(D, seed, hidden=8, scale=3.0):
    p = PolicyNet.init(D, np.random.default_rng(seed), hidden)
    p.params.params["H1"] *= scale / 0.1
    return p


def enumerate_node_process(logp_fn, D, node):
    """Exact parent-set distribution by walking every action sequence."""
    out = {}

    def walk(mask, lp):
        logp = logp_fn(node, mask)
        stop = lp + logp[D]
        key = tuple(mask)
        out[key] = np.logaddexp(out.get(key, -np.inf), stop)
        for j in range(D):
            if not mask[j]:
                nxt = list(mask)
                nxt[j] = 1
                walk(nxt, lp + logp[j])

    walk([0] * D, 0.0)
    return out


def policy_fn(policy):
    def f(node, mask):
        masks = np.zeros((policy.D, 1, policy.D), dtype=np.int8)
        masks[node, 0] = mask
        return policy.log_probs(masks).data[node, 0]
    return f


def test_log_probs_are_normalised_and_masked():
    p = random_policy(4, 1)
    masks = np.random.default_rng(0).integers(0, 2, size=(4, 7, 4)).astype(np.int8)
    lp = p.log_probs(masks).data
    probs = np.exp(lp)
    np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-9)
    assert np.all(probs[..., :4][masks == 1] == 0.0)


def test_forced_stop_gives_empty_graph():
    p = flat_policy(3, stop_logit=1e4)
    g = sample_trajectories(p, 50, np.random.default_rng(0)).graphs()
    assert not g.any()


def test_high_temper_is_uniform():
    p = random_policy(3, 2)
    masks = np.zeros((3, 1, 3), dtype=np.int8)
    masks[:, 0, 0] = 1
    lp = p.log_probs(masks, temper=1e12).data
    np.testing.assert_allclose(np.exp(lp[..., 1:]), 1 / 3, atol=1e-9)
    assert np.all(np.exp(lp[..., 0]) == 0)


def test_uniform_policy_matches_enumeration():
    D, B = 3, 1024
    p = flat_policy(D)
    graphs = sample_trajectories(p, B, np.random.default_rng(5)).graphs()
    for node in range(D):
        exact = enumerate_node_process(policy_fn(p), D, node)
        cols = graphs[:, :, node]
        for mask, lq in exact.items():
            q = math.exp(lq)
            freq = np.mean(np.all(cols == np.array(mask), axis=1))
            sigma = math.sqrt(q * (1 - q) / B)
            assert abs(freq - q) <= 3 * sigma + 1e-12, (node, mask, freq, q)


def test_trajectories_are_monotone():
    p = random_policy(4, 3)
    traj = sample_trajectories(p, 64, np.random.default_rng(1), temper=3.0)
    diffs = np.diff(traj.states.astype(int), axis=2)
    assert diffs.min() >= 0
    assert np.all(traj.states.sum(-1)[..., -1] == traj.lengths)


def test_two_state_closed_form_flow():
    r0, r1 = 2.0, 5.0
    p = flat_policy(1)
    p.params.params["c1"][0] = [math.log(r1 / r0), 0.0]

    def table(nodes, masks):
        return np.where(masks[:, 0] == 1, math.log(r1), math.log(r0))

    traj = sample_trajectories(p, 32, np.random.default_rng(0))
    loss, resid = db_loss(p, traj, state_log_rewards(traj, table))
    assert float(loss.data) < 1e-20
    assert exact_model_prob(p, np.zeros((1, 1))) == pytest.approx(math.log(r0 / (r0 + r1)))
    # wrong ratio gives a positive loss
    p.params.params["c1"][0] = [0.0, 0.0]
    loss2, _ = db_loss(p, traj, state_log_rewards(traj, table))
    assert float(loss2.data) > 0.1


def test_symmetric_state_has_zero_loss():
    p = flat_policy(1)
    traj = sample_trajectories(p, 16, np.random.default_rng(0))
    loss, _ = db_loss(p, traj, state_log_rewards(traj, lambda n, m: np.zeros(len(n))))
    assert float(loss.data) == pytest.approx(0.0, abs=1e-24)


def test_db_loss_is_pure():
    p = random_policy(3, 4)
    traj = sample_trajectories(p, 32, np.random.default_rng(2))
    lr = np.random.default_rng(3).normal(size=traj.states.shape[:3])
    a, ra = db_loss(p, traj, lr)
    b, rb = db_loss(p, traj, lr)
    assert float(a.data) == float(b.data)
    np.testing.assert_array_equal(ra, rb)


def test_zero_probability_transition_raises():
    p = flat_policy(2)
    states = np.zeros((2, 1, 2, 2), dtype=np.int8)
    states[0, 0, 1] = [1, 0]
    states[1, 0, 1] = [0, 1]
    actions = np.array([[[0, 2]], [[1, 2]]])
    traj = Trajectories(states, actions, np.array([[1], [1]]))
    db_loss(p, traj, np.zeros((2, 1, 2)))           # valid
    bad = Trajectories(states.copy(), actions, np.array([[1], [1]]))
    bad.states[0, 0, 0] = [1, 0]                     # parent already present before adding it
    with pytest.raises(TrainingError):
        db_loss(p, bad, np.zeros((2, 1, 2)))


def test_exact_prob_simple_cases():
    p = random_policy(4, 6)
    f = policy_fn(p)
    G = np.zeros((4, 4), dtype=np.int8)
    lq = exact_node_log_probs(p, G)[0]
    for i in range(4):
        assert lq[i] == pytest.approx(f(i, [0] * 4)[4], abs=1e-12)
    G[2, 1] = 1
    single = f(1, [0] * 4)[2] + f(1, [0, 0, 1, 0])[4]
    assert exact_node_log_probs(p, G)[0, 1] == pytest.approx(single, abs=1e-12)


@pytest.mark.parametrize("k", [2, 3])
def test_dp_equals_permutation_sum(k):
    D = 5
    p = random_policy(D, 7 + k)
    f = policy_fn(p)
    parents = list(range(k))
    terms = []
    for perm in itertools.permutations(parents):
        mask, lp = [0] * D, 0.0
        for j in perm:
            lp += f(0, mask)[j]
            mask[j] = 1
        terms.append(lp + f(0, mask)[D])
    G = np.zeros((D, D), dtype=np.int8)
    G[parents, 0] = 1
    assert abs(exact_node_log_probs(p, G)[0, 0] - logsumexp(terms)) < 1e-12


def test_exact_prob_enumeration_sums_to_one():
    D = 3
    p = random_policy(D, 11)
    masks = np.array(list(itertools.product([0, 1], repeat=D)), dtype=np.int8)
    for node in range(D):
        graphs = np.zeros((len(masks), D, D), dtype=np.int8)
        graphs[:, :, node] = masks
        lq = exact_node_log_probs(p, graphs)[:, node]
        assert math.exp(logsumexp(lq)) == pytest.approx(1.0, abs=1e-10)


def test_exact_prob_parent_bound():
    p = flat_policy(13, hidden=4)
    G = np.zeros((13, 13), dtype=np.int8)
    G[:, 0] = 1
    with pytest.raises(IntractableError):
        exact_model_prob(p, G)


def test_temper_schedule():
    s = TemperSchedule(1.0, 1000.0, 5)
    vals = [s(e) for e in range(20)]
    assert vals[0] == 1.0 and all(1.0 <= v <= 1000.0 for v in vals)
    assert vals[:5] == vals[5:10]
    assert max(vals) > 500
    assert TemperSchedule(1.0, 1.0, 5)(3) == 1.0


def _tiny_data(seed=0):
    spec = sample_system(3, 0.5, seed=seed)
    return spec, simulate_pairs(spec, 100)


def test_huge_lambda_gives_empty_graph():
    _, ds = _tiny_data()
    cfg = GFNConfig(lambda0=1e4, T=1.0, lr=1e-2, batch_size=64, epochs=40, hidden=16, seed=0)
    model = DynGFN.init(3, cfg).fit(ds.X, ds.dX)
    g = model.sample(500, np.random.default_rng(0))
    assert np.mean(~g.reshape(500, -1).any(1)) > 0.95


def test_fit_with_fixed_reward_table_runs():
    cfg = GFNConfig(lr=1e-2, batch_size=32, epochs=3, hidden=8)
    model = DynGFN.init(2, cfg)
    model.fit(None, None, reward_fn=lambda n, m: -m.sum(1).astype(float))
    assert model.epoch == 3 and len(model.history) == 3
    with pytest.raises(ValueError):
        model.fit(None, None)


def test_save_load_same_sampling(tmp_path):
    _, ds = _tiny_data()
    cfg = GFNConfig(lr=1e-3, lambda0=1.0, T=0.5, batch_size=16, epochs=2, hidden=8)
    model = DynGFN.init(3, cfg).fit(ds.X, ds.dX)
    model.save(tmp_path / "m.json")
    back = DynGFN.load(tmp_path / "m.json")
    a = model.sample(200, np.random.default_rng(9))
    b = back.sample(200, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)
    # continuing training is identical too
    model.fit(ds.X, ds.dX, epochs=2)
    back.fit(ds.X, ds.dX, epochs=2)
    for k, v in model.policy.params.params.items():
        assert v.tobytes() == back.policy.params.params[k].tobytes()


def test_warm_start(tmp_path):
    _, ds = _tiny_data()
    cfg = GFNConfig(lr=1e-3, lambda0=1.0, T=0.5, batch_size=16, epochs=1, hidden=8)
    src = DynGFN.init(3, cfg).fit(ds.X, ds.dX)
    src.save(tmp_path / "l.json")
    hcfg = GFNConfig(solver="hyper", lr=1e-3, lambda0=1.0, T=0.5, batch_size=16, epochs=1, hidden=8)
    h = warm_start(tmp_path / "l.json", hcfg, 3)
    assert h.hyper is not None
    rng = np.random.default_rng(4)
    np.testing.assert_array_equal(h.sample(300, np.random.default_rng(4)), src.sample(300, rng))
    h.fit(ds.X, ds.dX)
    assert "hyper_mse" in h.history[-1]
    with pytest.raises(CheckpointError):
        warm_start(tmp_path / "l.json", hcfg, 4)
    dm.save_checkpoint(tmp_path / "other.json", {"x": dm.ParamSet({"a": np.zeros((1, 1))})},
                       extra={"model": "dynbcd"})
    with pytest.raises(CheckpointError):
        DynGFN.load(tmp_path / "other.json")


def test_action_mask():
    m = action_mask(np.array([[1, 0, 1]]))
    np.testing.assert_array_equal(m, [[False, True, False, True]])
