"""Masked structural equation models, the per-node ridge solver and HyperNetwork.

A node's parameters only ever see ``G[:, i] * x``. Linear blocks are stored
as a D x D matrix ``theta`` with ``theta[:, i]`` the coefficients of node i,
so ``dx_hat = X @ theta`` on the full graph.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffmath as dm
from .diffmath import ParamSet, Tensor

DEFAULT_RIDGE_LAMBDA = 0.01
NODE_HIDDEN = 32
HYPER_HIDDEN = (64, 64, 64)
FORMS = ("linear", "mlp")


def mask_inputs(x, G, i: int) -> np.ndarray:
    G = np.asarray(G)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != G.shape[0]:
        raise ValueError("state dimension does not match graph")
    return x * G[:, i]


@dataclass
class StructParams:
    form: str
    theta: np.ndarray | None = None  # linear: (D, D)
    W1: np.ndarray | None = None     # mlp: (D, D, H) node, input, hidden
    b1: np.ndarray | None = None     # (D, H)
    w2: np.ndarray | None = None     # (D, H)
    b2: np.ndarray | None = None     # (D,)

    @property
    def D(self) -> int:
        return (self.theta if self.form == "linear" else self.b2).shape[0]

    def to_json(self, names: list[str] | None = None) -> dict:
        names = names or [f"x{i}" for i in range(self.D)]
        blocks = {}
        for i, nm in enumerate(names):
            if self.form == "linear":
                blocks[nm] = {"theta": self.theta[:, i].tolist()}
            else:
                blocks[nm] = {"W1": self.W1[i].tolist(), "b1": self.b1[i].tolist(),
                              "w2": self.w2[i].tolist(), "b2": float(self.b2[i])}
        return {"form": self.form, "nodes": blocks}


def n_theta(D: int, form: str, hidden: int = NODE_HIDDEN) -> int:
    """Parameter count of one node block."""
    return D if form == "linear" else D * hidden + 2 * hidden + 1


def predict_dx(X, G, params: StructParams) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    if params.form == "linear":
        return X @ (G * params.theta)
    xt = X[None, :, :] * G.T[:, None, :]  # (D, n, D)
    h = dm.elu(Tensor(xt @ params.W1 + params.b1[:, None, :])).data
    return (np.einsum("inh,ih->ni", h, params.w2) + params.b2[None, :])


# --- ridge -----------------------------------------------------------------


def ridge_theta(X, dX, G, lam: float = DEFAULT_RIDGE_LAMBDA) -> StructParams:
    """Closed-form per-node ridge on masked designs; masked entries are exactly 0."""
    if lam <= 0:
        raise ValueError("lam must be positive")
    X = np.asarray(X, dtype=np.float64)
    dX = np.asarray(dX, dtype=np.float64)
    G = np.asarray(G)
    D = X.shape[1]
    theta = np.zeros((D, D))
    for i in range(D):
        par = np.flatnonzero(G[:, i])
        if par.size:
            theta[par, i] = dm.ridge_solve_dense(X[:, par], dX[:, i], lam)[:, 0]
    return StructParams("linear", theta=theta)


class RidgeStats:
    """Sufficient statistics of one data batch for fast masked ridge fits."""

    def __init__(self, X, dX, lam: float = DEFAULT_RIDGE_LAMBDA):
        X = np.asarray(X, dtype=np.float64)
        dX = np.asarray(dX, dtype=np.float64)
        self.n = X.shape[0]
        self.D = X.shape[1]
        self.C = X.T @ X
        self.B = X.T @ dX          # column i: X^T dx_i
        self.yy = np.einsum("ni,ni->i", dX, dX)
        self.lam = lam

    def fit(self, nodes: np.ndarray, masks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-node ridge coefficients and MSE for K (node, mask) pairs."""
        g = np.asarray(masks, dtype=np.float64)
        K = g.shape[0]
        if K == 0:
            return np.zeros((0, self.D)), np.zeros(0)
        Cm = g[:, :, None] * self.C[None] * g[:, None, :]
        A = Cm + self.lam * np.eye(self.D)[None]
        rhs = g * self.B[:, nodes].T
        theta = np.linalg.solve(A, rhs[..., None])[..., 0]
        sse = (self.yy[nodes] - 2.0 * np.einsum("kd,kd->k", theta, rhs)
               + np.einsum("kd,kde,ke->k", theta, Cm, theta))
        return theta, np.maximum(sse, 0.0) / self.n

    def mse_tensor(self, G: Tensor) -> Tensor:
        """Differentiable per-node ridge MSE for soft/relaxed graphs ``(S, D, D)`` -> ``(S, D)``."""
        g = dm.swapaxes(G, -1, -2)                        # (S, D_node, D_in)
        Cm = dm.mul(dm.mul(g.reshape(g.shape + (1,)), self.C),
                    g.reshape(g.shape[:-1] + (1, g.shape[-1])))
        A = Cm + self.lam * np.eye(self.D)
        rhs = g * self.B.T                               # (S, D, D)
        theta = dm.solve(A, rhs)
        quad = dm.matmul(Cm, theta.reshape(theta.shape + (1,))).reshape(theta.shape)
        sse = self.yy - 2.0 * (theta * rhs).sum(-1) + (theta * quad).sum(-1)
        return sse * (1.0 / self.n)


# --- hypernetwork ------------------------------------------------------------


@dataclass
class HyperNet:
    """theta_i = h_phi([G[:, i], onehot(i)]) with weights shared across nodes."""

    params: ParamSet
    D: int
    form: str = "linear"
    hidden: int = NODE_HIDDEN

    @classmethod
    def init(cls, D: int, form: str, rng: np.random.Generator,
             layers=HYPER_HIDDEN, hidden: int = NODE_HIDDEN) -> "HyperNet":
        if form not in FORMS:
            raise ValueError(f"form must be one of {FORMS}")
        sizes = (2 * D, *layers, n_theta(D, form, hidden))
        acts = ("elu",) * len(layers) + ("identity",)
        return cls(dm.init_mlp(sizes, acts, rng, out_scale=0.1), D, form, hidden)

    @property
    def n_out(self) -> int:
        return n_theta(self.D, self.form, self.hidden)

    def inputs(self, nodes, masks) -> np.ndarray:
        masks = np.asarray(masks, dtype=np.float64)
        if masks.shape[-1] != self.D:
            raise dm.ShapeError(f"mask length {masks.shape[-1]} != hypernet D {self.D}")
        onehot = np.eye(self.D)[np.asarray(nodes)]
        return np.concatenate([masks, np.broadcast_to(onehot, masks.shape)], axis=-1)

    def blocks(self, nodes, masks, weights=None) -> Tensor:
        """Theta blocks ``(..., n_out)``; pass watched ``weights`` to differentiate."""
        x = self.inputs(nodes, masks)
        if weights is None:
            weights = {k: Tensor(v) for k, v in self.params.params.items()}
        return dm.mlp_apply(weights, self.params.sizes, self.params.activations, x)


def hyper_theta(h: HyperNet, G) -> StructParams:
    G = np.asarray(G)
    if G.shape != (h.D, h.D):
        raise dm.ShapeError(f"graph shape {G.shape} does not match hypernet D={h.D}")
    nodes = np.arange(h.D)
    out = h.blocks(nodes, G.T).data
    return unpack_blocks(out, h.form, h.D, h.hidden, G)


def unpack_blocks(out: np.ndarray, form: str, D: int, hidden: int, G=None) -> StructParams:
    if form == "linear":
        theta = out.T.copy()
        if G is not None:
            theta = theta * np.asarray(G)
        return StructParams("linear", theta=theta)
    H = hidden
    W1 = out[:, :D * H].reshape(D, D, H)
    b1 = out[:, D * H:D * H + H]
    w2 = out[:, D * H + H:D * H + 2 * H]
    b2 = out[:, -1]
    return StructParams("mlp", W1=W1, b1=b1, w2=w2, b2=b2)


def node_predictions(blocks: Tensor, masks, X, form: str, hidden: int = NODE_HIDDEN) -> Tensor:
    """Predicted velocity of each block's node on rows ``X``.

    ``blocks``: (..., P) theta blocks; ``masks``: (..., D) matching parent masks
    (array or Tensor). Returns (..., n).
    """
    X = np.asarray(X, dtype=np.float64)
    masks_t = dm.as_tensor(masks)
    D = X.shape[1]
    if form == "linear":
        w = blocks * masks_t                                      # (..., D)
        return dm.matmul(w, X.T)
    H = hidden
    lead = blocks.shape[:-1]
    W1 = blocks[..., :D * H].reshape(lead + (D, H))
    b1 = blocks[..., D * H:D * H + H].reshape(lead + (1, H))
    w2 = blocks[..., D * H + H:D * H + 2 * H].reshape(lead + (H, 1))
    b2 = blocks[..., -1:].reshape(lead + (1, 1))
    xt = dm.mul(masks_t.reshape(lead + (1, D)), X)                # (..., n, D)
    h = dm.elu(dm.matmul(xt, W1) + b1)
    return (dm.matmul(h, w2) + b2).reshape(lead + (X.shape[0],))


# --- reward ------------------------------------------------------------------


def per_node_mse(dx, dx_hat) -> np.ndarray:
    dx = np.asarray(dx, dtype=np.float64)
    dx_hat = np.asarray(dx_hat, dtype=np.float64)
    return np.mean((dx - dx_hat) ** 2, axis=0)


def log_reward_from_mse(mse, n_parents, lambda0: float, T: float):
    """log R = -MSE / T^2 - lambda0 * |Pa|, elementwise."""
    if T <= 0 or lambda0 < 0:
        raise ValueError("need T > 0 and lambda0 >= 0")
    return -np.asarray(mse) / (T * T) - lambda0 * np.asarray(n_parents, dtype=np.float64)


def reward(dx, dx_hat, G, lambda0: float, T: float) -> tuple[np.ndarray, float]:
    """Per-node log-rewards and their sum (the graph log-reward)."""
    G = np.asarray(G)
    per_node = log_reward_from_mse(per_node_mse(dx, dx_hat), G.sum(axis=0), lambda0, T)
    return per_node, float(per_node.sum())


def likelihood_term(dx, dx_hat, T: float) -> np.ndarray:
    """The data-fit part of each node's log-reward."""
    return -per_node_mse(dx, dx_hat) / (T * T)


class RidgeReward:
    """Per-node log-rewards with analytic ridge parameters on one data batch."""

    def __init__(self, X, dX, lambda0: float, T: float, lam: float = DEFAULT_RIDGE_LAMBDA):
        self.stats = RidgeStats(X, dX, lam)
        self.lambda0 = lambda0
        self.T = T

    def __call__(self, nodes: np.ndarray, masks: np.ndarray) -> np.ndarray:
        nodes = np.asarray(nodes)
        masks = np.asarray(masks, dtype=np.int8)
        if len(nodes) == 0:
            return np.zeros(0)
        key = np.concatenate([nodes[:, None].astype(np.int8), masks], axis=1)
        uniq, inv = np.unique(key, axis=0, return_inverse=True)
        _, mse = self.stats.fit(uniq[:, 0].astype(np.int64), uniq[:, 1:])
        lr = log_reward_from_mse(mse, uniq[:, 1:].sum(axis=1), self.lambda0, self.T)
        return lr[inv.reshape(-1)]


class HyperReward:
    """Per-node log-rewards with a HyperNetwork parameter solver."""

    def __init__(self, hyper: HyperNet, X, dX, lambda0: float, T: float):
        self.hyper = hyper
        self.X = np.asarray(X, dtype=np.float64)
        self.dX = np.asarray(dX, dtype=np.float64)
        self.lambda0 = lambda0
        self.T = T

    def mse(self, nodes, masks, weights=None) -> Tensor:
        blocks = self.hyper.blocks(nodes, masks, weights)
        pred = node_predictions(blocks, np.asarray(masks, dtype=np.float64), self.X,
                                self.hyper.form, self.hyper.hidden)
        target = self.dX[:, np.asarray(nodes)].T                   # (K, n)
        return ((pred - target) ** 2).mean(axis=-1)

    def __call__(self, nodes, masks) -> np.ndarray:
        nodes = np.asarray(nodes)
        masks = np.asarray(masks, dtype=np.int8)
        if len(nodes) == 0:
            return np.zeros(0)
        key = np.concatenate([nodes[:, None].astype(np.int8), masks], axis=1)
        uniq, inv = np.unique(key, axis=0, return_inverse=True)
        mse = self.mse(uniq[:, 0].astype(np.int64), uniq[:, 1:]).data
        lr = log_reward_from_mse(mse, uniq[:, 1:].sum(axis=1), self.lambda0, self.T)
        return lr[inv.reshape(-1)]


def save_theta(path, params: StructParams, names=None) -> None:
    Path(path).write_text(json.dumps(params.to_json(names)))
