"""Per-node GFlowNet over parent sets, trained with detailed balance.

Each node ``i`` runs its own chain over parent sets ``S``: start at the empty
set, repeatedly add a parent ``j`` not yet in ``S`` or STOP. Every state is a
valid graph, so the detailed-balance residual for ``S -> S + {j}`` is

    log R(S') + log P_B(S | S') + log P_F(stop | S)
      - log R(S) - log P_F(S' | S) - log P_F(stop | S')

with a uniform backward policy ``P_B(S | S') = 1 / |S'|``. The policy head
of node i is fed only node i's own parent bits plus a node one-hot, so the
graph distribution factorises exactly over nodes.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from . import diffmath as dm
from .diffmath import AdamState, ParamSet, Tensor
from .structmodel import HyperNet, HyperReward, RidgeReward, DEFAULT_RIDGE_LAMBDA

log = logging.getLogger(__name__)

TRUNK_HIDDEN = 128
MAX_DP_PARENTS = 12


class TrainingError(RuntimeError):
    pass


class IntractableError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


# --- policy -------------------------------------------------------------------


@dataclass
class PolicyNet:
    """Shared 3-layer trunk plus one 2-layer head per node.

    Head weights are stored stacked: ``H0`` is ``(D*hidden, hidden)`` and
    ``H1`` is ``(D*hidden, D+1)``; the last action index is STOP.
    """

    params: ParamSet
    D: int
    hidden: int = TRUNK_HIDDEN

    @classmethod
    def init(cls, D: int, rng: np.random.Generator, hidden: int = TRUNK_HIDDEN) -> "PolicyNet":
        sizes = (2 * D, hidden, hidden, hidden)
        trunk = dm.init_mlp(sizes, ("leaky_relu",) * 3, rng)
        lim0 = math.sqrt(6.0 / (2 * hidden))
        lim1 = math.sqrt(6.0 / (hidden + D + 1)) * 0.1
        p = dict(trunk.params)
        p["H0"] = rng.uniform(-lim0, lim0, size=(D * hidden, hidden))
        p["c0"] = np.zeros((D, hidden))
        p["H1"] = rng.uniform(-lim1, lim1, size=(D * hidden, D + 1))
        p["c1"] = np.zeros((D, D + 1))
        return cls(ParamSet(p, sizes, ("leaky_relu",) * 3), D, hidden)

    def arch(self) -> dict:
        return {"D": self.D, "hidden": self.hidden}

    def features(self, masks: np.ndarray) -> np.ndarray:
        """``masks``: (D_nodes, N, D) parent bits -> (D_nodes, N, 2D) inputs."""
        D = self.D
        onehot = np.broadcast_to(np.eye(D)[:, None, :], masks.shape)
        return np.concatenate([masks.astype(np.float64), onehot], axis=-1)

    def logits(self, masks: np.ndarray, weights=None) -> Tensor:
        """Raw action logits (D_nodes, N, D+1) for per-node parent masks."""
        if weights is None:
            weights = {k: Tensor(v) for k, v in self.params.params.items()}
        D, h = self.D, self.hidden
        lead = masks.shape[:-1]
        x = self.features(masks.reshape(D, -1, D))
        z = dm.mlp_apply(weights, self.params.sizes, self.params.activations, x)
        H0 = weights["H0"].reshape(D, h, h)
        H1 = weights["H1"].reshape(D, h, D + 1)
        z = dm.leaky_relu(dm.matmul(z, H0) + weights["c0"].reshape(D, 1, h))
        out = dm.matmul(z, H1) + weights["c1"].reshape(D, 1, D + 1)
        return out.reshape(lead + (D + 1,))

    def log_probs(self, masks: np.ndarray, temper: float = 1.0, weights=None) -> Tensor:
        """Masked log-policy for node-major masks ``(D, ..., D)``.

        Repeated (node, mask) states are evaluated once and scattered back.
        """
        D = self.D
        lead = masks.shape[:-1]
        flat = masks.reshape(D, -1, D)
        M = flat.shape[1]
        node_of, uniq, inv = _unique_states(flat)
        counts = np.bincount(node_of, minlength=D)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        rank = np.arange(len(node_of)) - starts[node_of]
        N = max(int(counts.max()), 1)
        padded = np.zeros((D, N, D), dtype=np.int8)
        padded[node_of, rank] = uniq
        logits = self.logits(padded, weights)
        if temper != 1.0:
            logits = logits * (1.0 / temper)
        logp = dm.log_softmax(logits, axis=-1, mask=action_mask(padded))
        rows_node = node_of[inv]
        rows_rank = rank[inv]
        out = logp[rows_node, rows_rank]
        return out.reshape(lead + (D + 1,))


def _unique_states(flat: np.ndarray):
    """Unique (node, mask) pairs of node-major ``flat`` (D, M, D), sorted by node."""
    D, M, _ = flat.shape
    nodes = np.repeat(np.arange(D), M)
    rows = flat.reshape(-1, D)
    if D <= 56:
        code = (nodes.astype(np.int64) << D) | (rows.astype(np.int64) << np.arange(D)).sum(axis=1)
        _, first, inv = np.unique(code, return_index=True, return_inverse=True)
    else:
        key = np.concatenate([nodes[:, None].astype(np.int16), rows.astype(np.int16)], axis=1)
        _, first, inv = np.unique(key, axis=0, return_index=True, return_inverse=True)
    return nodes[first], rows[first], inv.reshape(-1)


def action_mask(masks: np.ndarray) -> np.ndarray:
    """Valid actions: parents not yet present, and STOP."""
    stop = np.ones(masks.shape[:-1] + (1,), dtype=bool)
    return np.concatenate([masks == 0, stop], axis=-1)


# --- sampling ---------------------------------------------------------------


@dataclass
class Trajectories:
    """Per-node chains for a batch of B graphs.

    ``states``: (D, B, S, D) parent masks with ``states[i, b, t]`` the state
    after t additions (padded with the terminal state); ``actions``: (D, B, S)
    with the added parent at step t, ``D`` for STOP and -1 after stopping;
    ``lengths``: (D, B) number of additions.
    """

    states: np.ndarray
    actions: np.ndarray
    lengths: np.ndarray

    @property
    def D(self) -> int:
        return self.states.shape[0]

    @property
    def B(self) -> int:
        return self.states.shape[1]

    def graphs(self) -> np.ndarray:
        """Terminal graphs (B, D, D) in parent convention."""
        D, B = self.D, self.B
        term = self.states[np.arange(D)[:, None], np.arange(B)[None, :], self.lengths]  # (D, B, D)
        return np.ascontiguousarray(np.transpose(term, (1, 2, 0)))


def _categorical(logp: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw; zero-probability actions are never selected."""
    cdf = np.cumsum(np.exp(logp), axis=-1)
    cdf[..., -1] = np.inf
    return (cdf <= u[..., None]).sum(axis=-1)


def sample_trajectories(policy: PolicyNet, B: int, rng: np.random.Generator,
                        temper: float = 1.0) -> Trajectories:
    if B < 1 or temper < 1.0:
        raise ValueError("need B >= 1 and temper >= 1")
    D = policy.D
    state = np.zeros((D, B, D), dtype=np.int8)
    done = np.zeros((D, B), dtype=bool)
    lengths = np.zeros((D, B), dtype=np.int64)
    states = [state.copy()]
    actions = []
    while not done.all():
        logp = policy.log_probs(state, temper).data
        a = _categorical(logp, rng.random((D, B)))
        a = np.minimum(a, D)
        a = np.where(done, -1, a)
        stop = a == D
        add = (~done) & (~stop)
        ii, bb = np.nonzero(add)
        state = state.copy()
        state[ii, bb, a[ii, bb]] = 1
        lengths += add
        done = done | stop
        actions.append(a)
        states.append(state.copy())
    return Trajectories(np.stack(states, axis=2)[:, :, :-1], np.stack(actions, axis=2), lengths)


# --- detailed balance ---------------------------------------------------------


RewardFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def state_log_rewards(traj: Trajectories, reward_fn: RewardFn) -> np.ndarray:
    """log R at every (node, batch, step) state, (D, B, S); padded steps repeat the terminal."""
    D, B, S, _ = traj.states.shape
    nodes = np.broadcast_to(np.arange(D)[:, None, None], (D, B, S)).reshape(-1)
    masks = traj.states.reshape(-1, D)
    return reward_fn(nodes, masks).reshape(D, B, S)


def db_loss(policy: PolicyNet, traj: Trajectories, log_r: np.ndarray, weights=None):
    """Mean over the batch of the per-node, per-transition squared DB residuals.

    Returns ``(loss_tensor, residuals)``; residuals is (D, B, S-1) with zeros
    at non-transitions.
    """
    D, B, S, _ = traj.states.shape
    if S < 2:
        zero = dm.tsum(policy.logits(traj.states, weights)) * 0.0
        return zero, np.zeros((D, B, 0))
    logp = policy.log_probs(traj.states, weights=weights)         # (D, B, S, D+1)
    t = np.arange(S - 1)
    valid = t[None, None, :] < traj.lengths[:, :, None]           # (D, B, S-1)
    acts = np.where(valid, traj.actions[:, :, :S - 1], 0)
    lp_act = dm.take_along_axis(logp[:, :, :S - 1, :], acts[..., None], axis=-1).reshape(D, B, S - 1)
    lp_stop = logp[:, :, :, D]                                    # (D, B, S)
    bad = valid & ~np.isfinite(lp_act.data)
    if bad.any():
        raise TrainingError("recorded transition has zero forward probability (masking bug)")
    log_pb = -np.log(t + 1.0)
    const = log_r[:, :, 1:] - log_r[:, :, :-1] + log_pb
    resid = dm.add(const, lp_stop[:, :, :-1] - lp_act - lp_stop[:, :, 1:])
    resid = dm.where(valid, resid, 0.0)
    loss = dm.tsum(resid * resid) * (1.0 / B)
    return loss, resid.data


# --- exact probabilities ----------------------------------------------------------


def _node_log_q(policy: PolicyNet, node: int, parents: np.ndarray) -> float:
    k = len(parents)
    if k > MAX_DP_PARENTS:
        raise IntractableError(f"node {node} has {k} parents; exact probability needs <= {MAX_DP_PARENTS}")
    D = policy.D
    n_sub = 1 << k
    bits = ((np.arange(n_sub)[:, None] >> np.arange(k)[None, :]) & 1).astype(np.int8)
    masks = np.zeros((D, n_sub, D), dtype=np.int8)
    if k:
        masks[node][:, parents] = bits
    logp = policy.log_probs(masks).data[node]                     # (n_sub, D+1)
    f = np.full(n_sub, -np.inf)
    f[0] = 0.0
    for sub in sorted(range(1, n_sub), key=lambda s: bin(s).count("1")):
        terms = [f[sub ^ (1 << b)] + logp[sub ^ (1 << b), parents[b]]
                 for b in range(k) if sub >> b & 1]
        f[sub] = logsumexp(terms)
    return float(f[n_sub - 1] + logp[n_sub - 1, D])


def exact_node_log_probs(policy: PolicyNet, graphs: np.ndarray,
                         cache: dict | None = None) -> np.ndarray:
    """log Q_i(G[:, i]) for each graph and node, (M, D)."""
    graphs = np.asarray(graphs, dtype=np.int8)
    if graphs.ndim == 2:
        graphs = graphs[None]
    if graphs.shape[1:] != (policy.D, policy.D):
        raise dm.ShapeError(f"graph shape {graphs.shape[1:]} does not match policy D={policy.D}")
    cache = {} if cache is None else cache
    out = np.empty(graphs.shape[0:1] + (policy.D,))
    for g_idx, g in enumerate(graphs):
        for i in range(policy.D):
            key = (i, g[:, i].tobytes())
            if key not in cache:
                cache[key] = _node_log_q(policy, i, np.flatnonzero(g[:, i]))
            out[g_idx, i] = cache[key]
    return out


def exact_model_prob(policy: PolicyNet, G) -> float:
    """log Q(G) via subset dynamic programming over each node's parent orderings."""
    return float(exact_node_log_probs(policy, G).sum())


# --- tempering ------------------------------------------------------------------


@dataclass
class TemperSchedule:
    c_min: float = 1.0
    c_max: float = 1000.0
    period: int = 5

    def __call__(self, epoch: int) -> float:
        if self.period <= 0 or self.c_max <= self.c_min:
            return self.c_min
        phase = 2.0 * math.pi * (epoch % self.period) / self.period
        return self.c_min + (self.c_max - self.c_min) * 0.5 * (1.0 - math.cos(phase))


# --- training ---------------------------------------------------------------------


@dataclass
class GFNConfig:
    solver: str = "ridge"            # ridge | hyper
    form: str = "linear"             # structural model form for the hyper solver
    epochs: int = 1000
    lr: float = 1e-4
    hyper_lr: float | None = None
    lambda0: float = 100.0
    T: float = 0.01
    batch_size: int = 1024           # trajectories per step
    data_batch: int | None = None    # rows per step; None = whole training split
    period: int = 5
    c_max: float = 1000.0
    hidden: int = TRUNK_HIDDEN
    ridge_lambda: float = DEFAULT_RIDGE_LAMBDA
    seed: int = 0

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class DynGFN:
    policy: PolicyNet
    config: GFNConfig
    hyper: HyperNet | None = None
    opt_policy: AdamState = field(default_factory=AdamState)
    opt_hyper: AdamState = field(default_factory=AdamState)
    rng: np.random.Generator | None = None
    epoch: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def init(cls, D: int, config: GFNConfig) -> "DynGFN":
        rng = np.random.default_rng(config.seed)
        policy = PolicyNet.init(D, rng, config.hidden)
        hyper = HyperNet.init(D, config.form, rng) if config.solver == "hyper" else None
        return cls(policy, config, hyper, rng=rng)

    @property
    def D(self) -> int:
        return self.policy.D

    def sample(self, M: int, rng: np.random.Generator | None = None) -> np.ndarray:
        """Posterior graph samples at c = 1."""
        rng = rng or np.random.default_rng(0)
        return sample_trajectories(self.policy, M, rng, 1.0).graphs()

    def log_prob(self, graphs) -> np.ndarray:
        return exact_node_log_probs(self.policy, graphs).sum(axis=1)

    def reward_fn(self, X, dX) -> RewardFn:
        c = self.config
        if c.solver == "ridge":
            return RidgeReward(X, dX, c.lambda0, c.T, c.ridge_lambda)
        return HyperReward(self.hyper, X, dX, c.lambda0, c.T)

    def train_step(self, X, dX, temper: float, reward_fn: RewardFn | None = None) -> dict:
        """One psi update (plus one phi update in hyper mode).

        ``reward_fn`` overrides the data-driven reward, e.g. a fixed table.
        """
        c = self.config
        traj = sample_trajectories(self.policy, c.batch_size, self.rng, temper)
        reward_fn = reward_fn or self.reward_fn(X, dX)
        log_r = state_log_rewards(traj, reward_fn)
        rec = dm.GradRecord()
        w = rec.watch(self.policy.params, "psi.")
        loss, _ = db_loss(self.policy, traj, log_r, w)
        if not np.isfinite(loss.data):
            raise dm.NumericError(f"non-finite DB loss at epoch {self.epoch}")
        grads = dm.backward(rec, loss)
        self.policy.params, self.opt_policy = dm.adam_step(
            self.policy.params, grads, c.lr, self.opt_policy, prefix="psi.")
        out = {"db_loss": float(loss.data)}
        graphs = traj.graphs()
        D = self.D
        term_lr = log_r[np.arange(D)[:, None], np.arange(c.batch_size)[None, :], traj.lengths]
        out["log_reward"] = float(term_lr.sum(axis=0).mean())
        if c.solver == "hyper" and X is not None:
            out["hyper_mse"] = self._hyper_step(graphs, X, dX)
        return out

    def _hyper_step(self, graphs, X, dX) -> float:
        """Ascend the batch-mean log-reward of the sampled terminal graphs in phi."""
        c = self.config
        D, B = self.D, graphs.shape[0]
        nodes = np.broadcast_to(np.arange(D)[None, :], (B, D)).reshape(-1)
        masks = np.transpose(graphs, (0, 2, 1)).reshape(-1, D)
        key = np.concatenate([nodes[:, None].astype(np.int8), masks], axis=1)
        uniq, counts = np.unique(key, axis=0, return_counts=True)
        rec = dm.GradRecord()
        w = rec.watch(self.hyper.params, "phi.")
        hr = HyperReward(self.hyper, X, dX, c.lambda0, c.T)
        mse = hr.mse(uniq[:, 0].astype(np.int64), uniq[:, 1:], w)
        # negative log-reward; the L0 term does not depend on phi
        loss = dm.tsum(mse * (counts / (B * c.T * c.T)))
        grads = dm.backward(rec, loss)
        self.hyper.params, self.opt_hyper = dm.adam_step(
            self.hyper.params, grads, c.hyper_lr or c.lr, self.opt_hyper, prefix="phi.")
        return float(np.sum(mse.data * counts) / (B * D))

    def fit(self, X, dX, epochs: int | None = None, callback=None,
            reward_fn: RewardFn | None = None) -> "DynGFN":
        """Algorithm-1 style training over ``epochs`` passes of the rows.

        With ``reward_fn`` given, ``X``/``dX`` may be None and each epoch is one step.
        """
        c = self.config
        epochs = c.epochs if epochs is None else epochs
        schedule = TemperSchedule(1.0, c.c_max, c.period)
        if X is None:
            if reward_fn is None:
                raise ValueError("need data or a reward function")
            X = dX = np.zeros((1, self.D))
        X = np.asarray(X, dtype=np.float64)
        dX = np.asarray(dX, dtype=np.float64)
        n = X.shape[0]
        bs = n if not c.data_batch else min(c.data_batch, n)
        for _ in range(epochs):
            temper = schedule(self.epoch)
            order = self.rng.permutation(n) if bs < n else np.arange(n)
            stats = []
            for start in range(0, n - bs + 1, bs):
                idx = order[start:start + bs]
                stats.append(self.train_step(X[idx], dX[idx], temper, reward_fn))
            summary = {"epoch": self.epoch, "temper": temper,
                       **{k: float(np.mean([s[k] for s in stats])) for k in stats[0]}}
            self.history.append(summary)
            self.epoch += 1
            if callback is not None:
                callback(self, summary)
        return self

    # --- persistence ---------------------------------------------------------

    def checkpoint(self) -> tuple[dict, dict, dict]:
        psets = {"psi": self.policy.params}
        opts = {"psi": self.opt_policy}
        if self.hyper is not None:
            psets["phi"] = self.hyper.params
            opts["phi"] = self.opt_hyper
        extra = {"model": "dyngfn", "arch": self.policy.arch(), "config": self.config.to_json(),
                 "epoch": self.epoch, "rng": self.rng.bit_generator.state if self.rng else None,
                 "hyper": None if self.hyper is None else
                 {"D": self.hyper.D, "form": self.hyper.form, "hidden": self.hyper.hidden}}
        return psets, opts, extra

    def save(self, path) -> None:
        psets, opts, extra = self.checkpoint()
        dm.save_checkpoint(path, psets, opts, extra)

    @classmethod
    def load(cls, path) -> "DynGFN":
        psets, opts, extra = dm.load_checkpoint(path)
        if extra.get("model") != "dyngfn":
            raise CheckpointError(f"{path} is not a DynGFN checkpoint")
        config = GFNConfig(**extra["config"])
        arch = extra["arch"]
        policy = PolicyNet(psets["psi"], arch["D"], arch["hidden"])
        hyper = None
        if extra.get("hyper"):
            h = extra["hyper"]
            hyper = HyperNet(psets["phi"], h["D"], h["form"], h["hidden"])
        rng = np.random.default_rng(config.seed)
        if extra.get("rng"):
            rng.bit_generator.state = extra["rng"]
        shapes = {**{"psi." + k: v.shape for k, v in policy.params.params.items()},
                  **({"phi." + k: v.shape for k, v in hyper.params.params.items()} if hyper else {})}
        for st in opts.values():
            for d in (st.m, st.v):
                for k in d:
                    d[k] = d[k].reshape(shapes[k])
        return cls(policy, config, hyper, opts.get("psi", AdamState()),
                   opts.get("phi", AdamState()), rng, int(extra["epoch"]))


def warm_start(path, config: GFNConfig, D: int) -> DynGFN:
    """Fresh hyper-solver model whose forward policy is loaded from ``path``."""
    src = DynGFN.load(path)
    if src.policy.D != D or src.policy.hidden != config.hidden:
        raise CheckpointError(f"checkpoint policy has D={src.policy.D}, hidden={src.policy.hidden}; "
                              f"run needs D={D}, hidden={config.hidden}")
    model = DynGFN.init(D, config)
    model.policy = PolicyNet(src.policy.params.copy(), D, config.hidden)
    return model
