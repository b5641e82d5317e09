"""Continuous-relaxation baselines over a low-rank edge score ``Z = U^T V``.

Two variants share the same scoring path:

* ``dynbcd``: a mean-field Gaussian over (U, V), trained by the
  reparameterisation trick.
* ``dyndibs``: an ensemble of (U, V) particles transported by SVGD.

Edge probabilities are ``sigmoid(alpha_t * Z)`` with ``alpha_t = alpha * sqrt(t)``.
Graphs are drawn with a relaxed Bernoulli (logistic noise) and passed
straight-through as hard 0/1 masks to the structural model.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import diffmath as dm
from .diffmath import AdamState, ParamSet, Tensor
from .structmodel import DEFAULT_RIDGE_LAMBDA, HyperNet, RidgeStats, node_predictions

log = logging.getLogger(__name__)

ALPHA_EVAL = 1e8
MODELS = ("dynbcd", "dyndibs")
COLLAPSE_DIST = 1e-12
Q_MC_SAMPLES = 1000


class BaselineError(RuntimeError):
    pass


def alpha_at(alpha: float, t: int) -> float:
    """Annealed sharpness ``alpha * sqrt(t)``; iterations count from 1."""
    return alpha * math.sqrt(max(int(t), 1))


def edge_probs(U, V, alpha_t: float) -> np.ndarray:
    if alpha_t <= 0:
        raise ValueError("alpha_t must be positive")
    Z = np.swapaxes(np.asarray(U), -1, -2) @ np.asarray(V)
    return dm.sigmoid_np(alpha_t * Z)


@dataclass
class BaselineConfig:
    model: str = "dynbcd"
    solver: str = "ridge"
    form: str = "linear"
    epochs: int = 1000
    lr: float = 1e-4
    hyper_lr: float | None = None
    lambda0: float = 1e-3
    T: float = 0.01
    alpha: float = 0.1
    gamma: float = 3000.0
    particles: int = 10
    k: int | None = None             # latent rank; defaults to D
    n_samples: int = 5000            # relaxed graph samples per step
    relax_temp: float = 0.5
    data_batch: int | None = None
    ridge_lambda: float = DEFAULT_RIDGE_LAMBDA
    seed: int = 0

    @classmethod
    def defaults(cls, model: str, **overrides) -> "BaselineConfig":
        if model == "dyndibs":
            base = dict(model=model, lr=0.0025, lambda0=500.0, T=0.01, alpha=1e-4, gamma=3000.0)
        elif model == "dynbcd":
            base = dict(model=model)
        else:
            raise ValueError(f"model must be one of {MODELS}")
        return cls(**{**base, **overrides})

    def to_json(self) -> dict:
        return asdict(self)


# --- graph scoring --------------------------------------------------------------


def relaxed_graphs(logits: Tensor, noise: np.ndarray, temp: float, straight: bool = True) -> Tensor:
    """Concrete relaxation of Bernoulli(sigmoid(logits)) with logistic ``noise``."""
    soft = dm.sigmoid((logits + noise) * (1.0 / temp))
    if not straight:
        return soft
    return dm.straight_through(soft.data > 0.5, soft)


def logistic_noise(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.uniform(1e-12, 1.0 - 1e-12, size=shape)
    return np.log(u) - np.log1p(-u)


class GraphScorer:
    """Per-node MSE of batches of (relaxed) graphs ``(S, D, D)`` -> ``(S, D)``."""

    def __init__(self, X, dX, solver: str, hyper: HyperNet | None = None,
                 ridge_lambda: float = DEFAULT_RIDGE_LAMBDA):
        self.X = np.asarray(X, dtype=np.float64)
        self.dX = np.asarray(dX, dtype=np.float64)
        self.solver = solver
        self.hyper = hyper
        if solver == "ridge":
            self.stats = RidgeStats(self.X, self.dX, ridge_lambda)
        elif hyper is None:
            raise BaselineError("hyper solver needs a HyperNet")

    def __call__(self, G: Tensor, hyper_weights=None) -> Tensor:
        if self.solver == "ridge":
            return self.stats.mse_tensor(G)
        S, D = G.shape[0], G.shape[-1]
        masks = dm.swapaxes(G, -1, -2)                          # (S, node, D)
        nodes = np.broadcast_to(np.arange(D), (S, D))
        blocks = self.hyper.blocks(nodes, masks.data, hyper_weights)
        pred = node_predictions(blocks, masks, self.X, self.hyper.form, self.hyper.hidden)
        return ((pred - self.dX.T) ** 2).mean(axis=-1)


def gaussian_kl(mu: Tensor, log_sigma: Tensor) -> Tensor:
    """KL(N(mu, sigma^2) || N(0, 1)) summed over entries."""
    s2 = dm.exp(log_sigma * 2.0)
    return dm.tsum((s2 + mu * mu - 1.0) * 0.5 - log_sigma)


def bcd_objective(w: dict, noise: dict, scorer: GraphScorer, alpha_t: float, cfg: BaselineConfig,
                  hyper_weights=None, straight: bool = True) -> Tensor:
    """Negative expected log-reward plus expected sparsity penalty plus KL."""
    U = w["mu_u"] + dm.exp(w["log_sigma_u"]) * noise["eps_u"]     # (S, k, D)
    V = w["mu_v"] + dm.exp(w["log_sigma_v"]) * noise["eps_v"]
    logits = dm.matmul(dm.swapaxes(U, -1, -2), V) * alpha_t        # (S, D, D)
    G = relaxed_graphs(logits, noise["logistic"], cfg.relax_temp, straight)
    mse = scorer(G, hyper_weights)
    S = logits.shape[0]
    fit = dm.tsum(mse) * (1.0 / (S * cfg.T * cfg.T))
    l0 = dm.tsum(dm.sigmoid(logits)) * (cfg.lambda0 / S)
    kl = (gaussian_kl(w["mu_u"], w["log_sigma_u"]) + gaussian_kl(w["mu_v"], w["log_sigma_v"]))
    return fit + l0 + kl


def dibs_neg_log_target(w: dict, noise: np.ndarray, scorer: GraphScorer, alpha_t: float,
                        cfg: BaselineConfig, P: int, k: int, D: int,
                        hyper_weights=None, straight: bool = True) -> Tensor:
    """Sum over particles of each particle's negative log target density.

    The logistic noise is shared by every particle.
    """
    U = w["U"].reshape((P, k, D))
    V = w["V"].reshape((P, k, D))
    Z = dm.matmul(dm.swapaxes(U, -1, -2), V)                          # (P, D, D)
    logits = (Z * alpha_t).reshape((P, 1, D, D))
    S = noise.shape[0]
    G = relaxed_graphs(logits, noise[None], cfg.relax_temp, straight)   # (P, S, D, D)
    mse = scorer(G.reshape((P * S, D, D)), hyper_weights)
    fit = dm.tsum(mse) * (1.0 / (S * cfg.T * cfg.T))
    l0 = dm.tsum(dm.sigmoid(logits)) * cfg.lambda0
    prior = (dm.tsum(w["U"] * w["U"]) + dm.tsum(w["V"] * w["V"])) * 0.5
    return fit + l0 + prior


def rbf_kernel(x: np.ndarray):
    """Kernel matrix and d k(x_j, x_i) / d x_j for flattened particles ``(P, n)``.

    Bandwidth is the median heuristic ``med^2 / log(P + 1)``.
    """
    P = x.shape[0]
    diff = x[:, None, :] - x[None, :, :]                   # diff[j, i] = x_j - x_i
    sq = np.sum(diff * diff, axis=-1)
    med = np.median(np.sqrt(sq[np.triu_indices(P, 1)])) if P > 1 else 0.0
    h = med * med / math.log(P + 1) if P > 1 and med > 0 else 1.0
    K = np.exp(-sq / h)
    grad_K = -2.0 / h * diff * K[..., None]                 # (j, i, n)
    return K, grad_K, h


def svgd_direction(x: np.ndarray, grad_logp: np.ndarray, gamma: float) -> np.ndarray:
    """phi(x_i) = mean_j [k(x_j, x_i) grad log p(x_j) + gamma grad_{x_j} k(x_j, x_i)]."""
    K, grad_K, _ = rbf_kernel(x)
    P = x.shape[0]
    drive = K.T @ grad_logp
    repulse = grad_K.sum(axis=0)
    return (drive + gamma * repulse) / P


# --- model --------------------------------------------------------------------------


@dataclass
class FactorModel:
    config: BaselineConfig
    D: int
    params: ParamSet
    hyper: HyperNet | None = None
    opt: AdamState = field(default_factory=AdamState)
    opt_hyper: AdamState = field(default_factory=AdamState)
    rng: np.random.Generator | None = None
    step: int = 0
    epoch: int = 0
    history: list = field(default_factory=list)

    @property
    def kind(self) -> str:
        return self.config.model

    @property
    def k(self) -> int:
        return self.config.k or self.D

    @property
    def P(self) -> int:
        return self.config.particles if self.kind == "dyndibs" else 1

    @classmethod
    def init(cls, D: int, config: BaselineConfig) -> "FactorModel":
        if config.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}")
        if config.model == "dyndibs" and config.particles < 1:
            raise ValueError("need at least one particle")
        rng = np.random.default_rng(config.seed)
        k = config.k or D
        if config.model == "dynbcd":
            p = {"mu_u": rng.normal(0, 1, (k, D)), "mu_v": rng.normal(0, 1, (k, D)),
                 "log_sigma_u": np.full((k, D), math.log(0.1)),
                 "log_sigma_v": np.full((k, D), math.log(0.1))}
        else:
            P = config.particles
            p = {"U": rng.normal(0, 1, (P * k, D)), "V": rng.normal(0, 1, (P * k, D))}
        hyper = HyperNet.init(D, config.form, rng) if config.solver == "hyper" else None
        return cls(config, D, ParamSet(p), hyper, rng=rng)

    # ---- scores

    def particle_z(self) -> np.ndarray:
        """Edge scores of the means (BCD) or of every particle (DiBS), ``(P, D, D)``."""
        k, D = self.k, self.D
        if self.kind == "dynbcd":
            U, V = self.params["mu_u"][None], self.params["mu_v"][None]
        else:
            U = self.params["U"].reshape(self.P, k, D)
            V = self.params["V"].reshape(self.P, k, D)
        return np.swapaxes(U, -1, -2) @ V

    def alpha_t(self) -> float:
        return alpha_at(self.config.alpha, self.step)

    def _draw_uv(self, M: int, rng) -> tuple[np.ndarray, np.ndarray]:
        k, D = self.k, self.D
        if self.kind == "dynbcd":
            su = np.exp(self.params["log_sigma_u"])
            sv = np.exp(self.params["log_sigma_v"])
            U = self.params["mu_u"] + su * rng.standard_normal((M, k, D))
            V = self.params["mu_v"] + sv * rng.standard_normal((M, k, D))
            return U, V
        idx = rng.integers(0, self.P, size=M)
        U = self.params["U"].reshape(self.P, k, D)[idx]
        V = self.params["V"].reshape(self.P, k, D)[idx]
        return U, V

    def sample(self, M: int, rng=None, hard: bool = True) -> np.ndarray:
        return posterior_samples(self, M, hard, rng)

    def log_prob(self, graphs, alpha_t: float = ALPHA_EVAL) -> np.ndarray:
        """log Q(G): factorised Bernoulli mixed over particles or posterior draws."""
        graphs = np.asarray(graphs, dtype=np.float64)
        if graphs.ndim == 2:
            graphs = graphs[None]
        if self.kind == "dynbcd":
            U, V = self._draw_uv(Q_MC_SAMPLES, np.random.default_rng(self.config.seed + 7919))
            Z = np.swapaxes(U, -1, -2) @ V
        else:
            Z = self.particle_z()
        a = alpha_t * Z                                                        # (L, D, D)
        lp1, lp0 = dm.log_sigmoid_np(a), dm.log_sigmoid_np(-a)
        per = (np.einsum("mij,lij->ml", graphs, lp1)
               + np.einsum("mij,lij->ml", 1.0 - graphs, lp0))                 # (M, L)
        return logsumexp(per, axis=1) - math.log(Z.shape[0])

    # ---- training

    def scorer(self, X, dX) -> GraphScorer:
        return GraphScorer(X, dX, self.config.solver, self.hyper, self.config.ridge_lambda)

    def train_step(self, X, dX) -> dict:
        c = self.config
        self.step += 1
        at = self.alpha_t()
        scorer = self.scorer(X, dX)
        rec = dm.GradRecord()
        w = rec.watch(self.params, "z.")
        hw = rec.watch(self.hyper.params, "phi.") if self.hyper is not None else None
        S, k, D = c.n_samples, self.k, self.D
        if self.kind == "dynbcd":
            noise = {"eps_u": self.rng.standard_normal((S, k, D)),
                     "eps_v": self.rng.standard_normal((S, k, D)),
                     "logistic": logistic_noise(self.rng, (S, D, D))}
            loss = bcd_objective(w, noise, scorer, at, c, hw)
        else:
            noise = logistic_noise(self.rng, (S, D, D))
            loss = dibs_neg_log_target(w, noise, scorer, at, c, self.P, k, D, hw)
        if not np.isfinite(loss.data):
            raise dm.NumericError(f"non-finite baseline loss at step {self.step}")
        grads = dm.backward(rec, loss)
        if self.kind == "dyndibs":
            grads = self._svgd_grads(grads)
        self.params, self.opt = dm.adam_step(self.params, grads, c.lr, self.opt, prefix="z.")
        if self.hyper is not None:
            self.hyper.params, self.opt_hyper = dm.adam_step(
                self.hyper.params, grads, c.hyper_lr or c.lr, self.opt_hyper, prefix="phi.")
        return {"loss": float(loss.data), "alpha_t": at}

    def _svgd_grads(self, grads: dict) -> dict:
        """Replace particle gradients by the negated SVGD direction."""
        c = self.config
        P, k, D = self.P, self.k, self.D
        x = np.concatenate([self.params["U"].reshape(P, -1), self.params["V"].reshape(P, -1)], axis=1)
        g = -np.concatenate([grads["z.U"].reshape(P, -1), grads["z.V"].reshape(P, -1)], axis=1)
        if P > 1 and c.gamma > 0:
            sq = np.sum((x[:, None] - x[None]) ** 2, axis=-1)
            close = sq[np.triu_indices(P, 1)] < COLLAPSE_DIST ** 2
            if close.any():
                log.warning("%d particle pairs collapsed; jittering", int(close.sum()))
                x = x + 1e-6 * self.rng.standard_normal(x.shape)
                n = k * D
                self.params = ParamSet({"U": x[:, :n].reshape(P * k, D), "V": x[:, n:].reshape(P * k, D)})
        phi = svgd_direction(x, g, c.gamma)
        n = k * D
        out = dict(grads)
        out["z.U"] = -phi[:, :n].reshape(P * k, D)
        out["z.V"] = -phi[:, n:].reshape(P * k, D)
        return out

    def fit(self, X, dX, epochs: int | None = None, callback=None) -> "FactorModel":
        c = self.config
        epochs = c.epochs if epochs is None else epochs
        X = np.asarray(X, dtype=np.float64)
        dX = np.asarray(dX, dtype=np.float64)
        n = X.shape[0]
        bs = n if not c.data_batch else min(c.data_batch, n)
        for _ in range(epochs):
            order = self.rng.permutation(n) if bs < n else np.arange(n)
            stats = [self.train_step(X[order[s:s + bs]], dX[order[s:s + bs]])
                     for s in range(0, n - bs + 1, bs)]
            summary = {"epoch": self.epoch,
                       **{key: float(np.mean([s[key] for s in stats])) for key in stats[0]}}
            self.history.append(summary)
            self.epoch += 1
            if callback is not None:
                callback(self, summary)
        return self

    # ---- persistence

    def checkpoint(self):
        psets = {"factors": self.params}
        opts = {"factors": self.opt}
        if self.hyper is not None:
            psets["phi"] = self.hyper.params
            opts["phi"] = self.opt_hyper
        extra = {"model": self.kind, "D": self.D, "config": self.config.to_json(),
                 "step": self.step, "epoch": self.epoch,
                 "rng": self.rng.bit_generator.state if self.rng else None,
                 "hyper": None if self.hyper is None else
                 {"D": self.hyper.D, "form": self.hyper.form, "hidden": self.hyper.hidden}}
        return psets, opts, extra

    def save(self, path) -> None:
        dm.save_checkpoint(path, *self.checkpoint())

    @classmethod
    def load(cls, path) -> "FactorModel":
        psets, opts, extra = dm.load_checkpoint(path)
        if extra.get("model") not in MODELS:
            raise BaselineError(f"{path} is not a baseline checkpoint")
        config = BaselineConfig(**extra["config"])
        hyper = None
        if extra.get("hyper"):
            h = extra["hyper"]
            hyper = HyperNet(psets["phi"], h["D"], h["form"], h["hidden"])
        rng = np.random.default_rng(config.seed)
        if extra.get("rng"):
            rng.bit_generator.state = extra["rng"]
        shapes = {**{"z." + k: v.shape for k, v in psets["factors"].params.items()},
                  **({"phi." + k: v.shape for k, v in hyper.params.params.items()} if hyper else {})}
        for st in opts.values():
            for d in (st.m, st.v):
                for key in d:
                    d[key] = d[key].reshape(shapes[key])
        return cls(config, int(extra["D"]), psets["factors"], hyper, opts.get("factors", AdamState()),
                   opts.get("phi", AdamState()), rng, int(extra["step"]), int(extra["epoch"]))


def posterior_samples(model: FactorModel, M: int, hard: bool = True, rng=None) -> np.ndarray:
    """M graphs: draw (U, V) (BCD) or a particle (DiBS), then edges.

    Hard mode thresholds the edge probability at 0.5; soft mode draws
    Bernoulli edges at the model's current ``alpha_t``.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    rng = rng or np.random.default_rng(0)
    U, V = model._draw_uv(M, rng)
    Z = np.swapaxes(U, -1, -2) @ V
    if hard:
        return (Z > 0).astype(np.int8)
    p = dm.sigmoid_np(model.alpha_t() * Z)
    return (rng.random(p.shape) < p).astype(np.int8)


def bcd_train(X, dX, config: BaselineConfig, epochs: int | None = None, callback=None) -> FactorModel:
    config = BaselineConfig(**{**config.to_json(), "model": "dynbcd"})
    return FactorModel.init(np.asarray(X).shape[1], config).fit(X, dX, epochs, callback)


def dibs_train(X, dX, config: BaselineConfig, epochs: int | None = None, callback=None) -> FactorModel:
    config = BaselineConfig(**{**config.to_json(), "model": "dyndibs"})
    return FactorModel.init(np.asarray(X).shape[1], config).fit(X, dX, epochs, callback)
