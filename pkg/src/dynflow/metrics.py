"""Posterior evaluation: Bayes-SHD, edge-marginal AUC, restricted KL, NLL."""

from __future__ import annotations

import csv
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from filelock import FileLock
from scipy.stats import rankdata

from .graphs import AdmissibleSet, closest_distances

LEDGER_COLUMNS = ("run_id", "model", "dataset", "seed", "bayes_shd", "auc", "kl", "nll")


@dataclass
class EvalReport:
    bayes_shd: float
    auc: float | None
    kl: float | None = None
    nll: float | None = None
    n_samples: int = 0
    seed: int = 0
    config_digest: str = ""
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.bayes_shd < 0:
            raise ValueError("bayes_shd must be >= 0")
        if self.auc is not None and not 0.0 <= self.auc <= 1.0:
            raise ValueError("auc must lie in [0, 1]")
        if self.kl is not None and self.kl < -1e-9:
            raise ValueError(f"kl must be >= 0, got {self.kl}")

    def to_json(self) -> dict:
        # JSON has no infinity literal; keep it readable and round-trippable
        return _finite_json(asdict(self))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2)


def _finite_json(obj):
    if isinstance(obj, dict):
        return {k: _finite_json(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite_json(v) for v in obj]
    if isinstance(obj, float) and math.isinf(obj):
        return "inf" if obj > 0 else "-inf"
    return obj


def bayes_shd(samples, S: AdmissibleSet) -> float:
    samples = np.asarray(samples)
    if samples.ndim == 2:
        samples = samples[None]
    if len(samples) == 0:
        raise ValueError("need at least one sample")
    return float(closest_distances(samples, S).mean())


def edge_marginals(samples) -> np.ndarray:
    return np.asarray(samples, dtype=np.float64).mean(axis=0)


def auc(marginals, S: AdmissibleSet) -> float | None:
    """Mann-Whitney ROC-AUC of edge scores against the union of ``S``.

    Returns None when the labels are all one class.
    """
    scores = np.asarray(marginals, dtype=np.float64).ravel()
    labels = S.union().ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError(f"marginals have {scores.size} entries, admissible graphs {labels.size}")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class KLResult:
    value: float
    per_graph: list            # log Q(G) for each member, in S order

    @property
    def finite(self) -> bool:
        return math.isfinite(self.value)


def kl_restricted(log_q, S: AdmissibleSet) -> KLResult:
    """KL(uniform over S || Q) using only Q's mass on members of S.

    ``log_q`` is either a callable mapping a (K, D, D) stack to log-probs or
    an array of log Q values aligned with ``S``.
    """
    lq = np.asarray(log_q(S.stack()) if callable(log_q) else log_q, dtype=np.float64).ravel()
    if lq.size != len(S):
        raise ValueError(f"got {lq.size} log-probabilities for {len(S)} admissible graphs")
    k = len(S)
    if np.any(np.isneginf(lq)):
        return KLResult(math.inf, lq.tolist())
    return KLResult(float(np.mean(-math.log(k) - lq)), lq.tolist())


def nll(dx, dx_hat) -> float:
    dx, dx_hat = np.asarray(dx), np.asarray(dx_hat)
    if dx.shape != dx_hat.shape:
        raise ValueError(f"shape mismatch {dx.shape} vs {dx_hat.shape}")
    return float(np.mean((dx - dx_hat) ** 2))


def mode_counts(samples) -> list[tuple[np.ndarray, int]]:
    """Distinct sampled graphs with their counts, most frequent first (ties by bits)."""
    samples = np.asarray(samples, dtype=np.int8)
    flat = samples.reshape(len(samples), -1)
    keys, counts = np.unique(flat, axis=0, return_counts=True)
    order = np.lexsort((np.arange(len(keys)), -counts))
    D = samples.shape[1]
    return [(keys[i].reshape(D, D), int(counts[i])) for i in order]


# --- persistence ----------------------------------------------------------------


def _fmt(v):
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def append_ledger(path, row: dict) -> None:
    """Append one result row; concurrent writers serialise on a lock file and
    the new file replaces the old one atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with FileLock(str(path) + ".lock"):
        old = path.read_text() if path.exists() else ",".join(LEDGER_COLUMNS) + "\n"
        line = ",".join(_fmt(row.get(c)) for c in LEDGER_COLUMNS) + "\n"
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
        with os.fdopen(fd, "w") as fh:
            fh.write(old + line)
        os.replace(tmp, path)


def read_ledger(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_marginals_csv(path, marginals, names: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parent"] + list(names))
        for name, row in zip(names, np.asarray(marginals)):
            w.writerow([name] + [repr(float(v)) for v in row])


def write_mode_counts_csv(path, modes, S: AdmissibleSet | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "count", "admissible", "edges"])
        for r, (g, cnt) in enumerate(modes):
            adm = "" if S is None else int(g in S)
            w.writerow([r, cnt, adm, "".join(map(str, g.ravel()))])


def samples_json(modes) -> list[dict]:
    return [{"graph": g.tolist(), "count": cnt} for g, cnt in modes]
