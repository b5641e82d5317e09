"""Synthetic linear / sigmoid dynamical systems and (x, dx) datasets."""

from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .diffmath import sigmoid_np
from .graphs import AdmissibleSet, Multiplicities, count_admissible, enumerate_admissible

log = logging.getLogger(__name__)

EULER_STEP = 1e-3
DRIFT_FORMS = ("linear", "sigmoid")
SPLITS = ("train", "val", "test")


class ConfigError(ValueError):
    pass


@dataclass
class SystemSpec:
    A: np.ndarray
    drift_form: str = "linear"
    sparsity: float = 0.9
    dt: float = 0.0
    noise_std: float = 0.0
    seed: int = 0

    @property
    def d(self) -> int:
        return self.A.shape[0]

    def graph(self) -> np.ndarray:
        """Parent-convention support: G[j, i] = 1 iff A[i, j] != 0."""
        return (self.A != 0).T.astype(np.int8)

    def drift(self, x: np.ndarray) -> np.ndarray:
        a = x @ self.A.T
        return a if self.drift_form == "linear" else sigmoid_np(a)

    def to_json(self) -> dict:
        return {"A": self.A.tolist(), "drift_form": self.drift_form, "sparsity": self.sparsity,
                "dt": self.dt, "noise_std": self.noise_std, "seed": self.seed}

    @classmethod
    def from_json(cls, doc: dict) -> "SystemSpec":
        return cls(np.asarray(doc["A"], dtype=np.float64), doc["drift_form"], doc["sparsity"],
                   doc["dt"], doc["noise_std"], doc["seed"])


@dataclass
class DynDataset:
    X: np.ndarray
    dX: np.ndarray
    names: list[str]
    split: np.ndarray | None = None  # per-row tag

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.dX = np.asarray(self.dX, dtype=np.float64)
        if self.X.shape != self.dX.shape:
            raise ValueError(f"X {self.X.shape} and dX {self.dX.shape} must match")
        if len(self.names) != self.X.shape[1]:
            raise ValueError("one name per column required")
        if not (np.isfinite(self.X).all() and np.isfinite(self.dX).all()):
            raise ValueError("dataset contains non-finite entries")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def D(self) -> int:
        return self.X.shape[1]

    def rows(self, tag: str) -> "DynDataset":
        if self.split is None:
            raise ConfigError("dataset has no split tags")
        sel = self.split == tag
        return DynDataset(self.X[sel], self.dX[sel], list(self.names), self.split[sel])


def sample_system(d: int, sparsity: float, drift_form: str = "linear", seed: int = 0,
                  dt: float = 0.0, noise_std: float = 0.0) -> SystemSpec:
    """Random drift matrix with exactly round((1 - sparsity) d^2) nonzeros.

    Magnitudes are uniform on [0.25, 1] with a random sign; self-loops allowed.
    """
    if not 0.0 <= sparsity <= 1.0:
        raise ConfigError("sparsity must lie in [0, 1]")
    if drift_form not in DRIFT_FORMS:
        raise ConfigError(f"drift_form must be one of {DRIFT_FORMS}")
    rng = np.random.default_rng(seed)
    n_edges = int(round((1.0 - sparsity) * d * d))
    A = np.zeros(d * d)
    pos = rng.choice(d * d, size=n_edges, replace=False)
    A[pos] = rng.uniform(0.25, 1.0, size=n_edges) * rng.choice([-1.0, 1.0], size=n_edges)
    return SystemSpec(A.reshape(d, d), drift_form, sparsity, dt, noise_std, seed)


def simulate_pairs(spec: SystemSpec, n: int, seed: int | None = None) -> DynDataset:
    """Standard-normal states; velocities by finite difference over an Euler rollout."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    if spec.dt < 0:
        raise ConfigError("dt must be >= 0")
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    X = rng.standard_normal((n, spec.d))
    if spec.dt == 0:
        dX = spec.drift(X)
    else:
        steps = max(1, math.ceil(spec.dt / EULER_STEP - 1e-9))
        h = spec.dt / steps
        x = X.copy()
        for _ in range(steps):
            x = x + h * spec.drift(x)
        dX = (x - X) / spec.dt
    if spec.noise_std > 0:
        dX = dX + spec.noise_std * rng.standard_normal(dX.shape)
    return DynDataset(X, dX, [f"x{i}" for i in range(spec.d)])


def duplicate_variables(ds: DynDataset, g_star, m: Multiplicities,
                        cap: int | None = None) -> tuple[DynDataset, AdmissibleSet]:
    """Append exact copies of variables; returns the L0-minimal admissible set."""
    if m.d != ds.D:
        raise ConfigError("multiplicities length must equal dataset dimension")
    src = m.source()
    names = list(ds.names)
    for v, grp in enumerate(m.groups()):
        for k, _ in enumerate(grp[1:], start=1):
            names.append(f"{ds.names[v]}_copy{k}")
    out = DynDataset(ds.X[:, src], ds.dX[:, src], names, ds.split)
    kwargs = {} if cap is None else {"cap": cap}
    adm = enumerate_admissible(g_star, m, l0_minimal=True, names=names, **kwargs)
    return out, adm


def choose_multiplicities(g_star, target: int, rng: np.random.Generator | None = None,
                          max_m: int = 3) -> Multiplicities:
    """Pick copy counts so the L0-minimal admissible count equals ``target``.

    Duplicated nodes are restricted to nodes with children, no self-loop, and
    no parent/child relation among themselves, so the enumerated set is the
    complete set of equally-fitting minimal graphs.
    """
    g = np.asarray(g_star)
    d = g.shape[0]
    if target == 1:
        return Multiplicities.ones(d)
    c = g.sum(axis=1)
    rng = rng or np.random.default_rng(0)
    order = [int(i) for i in rng.permutation(d) if c[i] > 0 and g[i, i] == 0]

    def search(idx, remaining, chosen):
        if remaining == 1:
            return chosen
        for pos in range(idx, len(order)):
            v = order[pos]
            if any(g[v, u] or g[u, v] for u in chosen):
                continue
            for mv in range(2, max_m + 1):
                f = mv ** int(c[v])
                if remaining % f == 0:
                    res = search(pos + 1, remaining // f, {**chosen, v: mv})
                    if res is not None:
                        return res
        return None

    found = search(0, target, {})
    if found is None:
        raise ConfigError(f"no duplication pattern reaches {target} admissible graphs")
    m = Multiplicities(tuple(found.get(i, 1) for i in range(d)))
    assert count_admissible(g, m, True) == target
    return m


def split(ds: DynDataset, fractions: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0) -> DynDataset:
    """Random row partition; counts are floored and the remainder goes to train."""
    fr = np.asarray(fractions, dtype=np.float64)
    if len(fr) != 3 or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ConfigError("fractions must be three non-negative numbers summing to 1")
    n = ds.n
    counts = np.floor(fr * n + 1e-9).astype(int)
    counts[0] += n - counts.sum()
    for tag, frac, cnt in zip(SPLITS, fr, counts):
        if frac > 0 and cnt == 0:
            raise ConfigError(f"split {tag!r} would be empty")
    perm = np.random.default_rng(seed).permutation(n)
    tags = np.empty(n, dtype=object)
    start = 0
    for tag, cnt in zip(SPLITS, counts):
        tags[perm[start:start + cnt]] = tag
        start += cnt
    return DynDataset(ds.X, ds.dX, list(ds.names), tags.astype(str))


# --- CSV -------------------------------------------------------------------


def write_csv(ds: DynDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(ds.names) + [f"d_{n}" for n in ds.names])
        for x, dx in zip(ds.X, ds.dX):
            w.writerow([repr(float(v)) for v in itertools.chain(x, dx)])


def read_csv(path, allow_nan_rows: bool = False) -> tuple[DynDataset, int]:
    """Read a paired ``name,...,d_name,...`` CSV. Returns the dataset and #rejected rows."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ConfigError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if len(header) % 2:
        raise ConfigError(f"{path}: odd number of columns cannot pair x with dx")
    D = len(header) // 2
    names, dnames = header[:D], header[D:]
    if dnames != [f"d_{n}" for n in names]:
        raise ConfigError(f"{path}: velocity columns must be d_<name> in the same order as states")
    data = []
    for r in rows[1:]:
        if not r:
            continue
        if len(r) != 2 * D:
            raise ConfigError(f"{path}: row has {len(r)} cells, expected {2 * D}")
        data.append([float(v) if v.strip() not in ("", "nan", "NaN") else math.nan for v in r])
    arr = np.asarray(data, dtype=np.float64).reshape(-1, 2 * D)
    bad = ~np.isfinite(arr).all(axis=1)
    rejected = int(bad.sum())
    if rejected and not allow_nan_rows:
        log.warning("rejected %d rows with missing or non-finite cells", rejected)
    arr = arr[~bad]
    return DynDataset(arr[:, :D], arr[:, D:], names), rejected


def normalize(ds: DynDataset) -> tuple[DynDataset, np.ndarray, np.ndarray]:
    """Standardise states per column; scale velocities by the same std (no centring)."""
    mu = ds.X.mean(axis=0)
    sd = ds.X.std(axis=0)
    const = sd < 1e-12
    if const.any():
        log.warning("constant columns %s; using std 1.0", [ds.names[i] for i in np.flatnonzero(const)])
        sd = np.where(const, 1.0, sd)
    return DynDataset((ds.X - mu) / sd, ds.dX / sd, list(ds.names), ds.split), mu, sd
