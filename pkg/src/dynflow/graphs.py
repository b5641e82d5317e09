"""Adjacency graphs, duplicated-variable admissible sets and graph distances.

Convention throughout: ``G[j, i] == 1`` means variable ``j`` is a parent of
variable ``i``. Column ``i`` is therefore node ``i``'s parent set.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

ENUMERATION_CAP = 10**6


class EnumerationTooLarge(RuntimeError):
    def __init__(self, count: int, cap: int):
        super().__init__(f"admissible set has {count} graphs, above the cap of {cap}")
        self.count = count
        self.cap = cap


def as_graph(g) -> np.ndarray:
    g = np.asarray(g)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise ValueError(f"graph must be square, got shape {g.shape}")
    if not np.isin(g, (0, 1)).all():
        raise ValueError("graph entries must be 0/1")
    return g.astype(np.int8)


def l0(g) -> int:
    return int(np.count_nonzero(g))


def children_counts(g) -> np.ndarray:
    """Number of children of each node (row sums)."""
    return as_graph(g).sum(axis=1).astype(np.int64)


@dataclass(frozen=True)
class Multiplicities:
    m: tuple[int, ...]

    def __post_init__(self):
        if any(int(v) < 1 for v in self.m):
            raise ValueError("multiplicities must be >= 1")
        object.__setattr__(self, "m", tuple(int(v) for v in self.m))

    @classmethod
    def ones(cls, d: int) -> "Multiplicities":
        return cls((1,) * d)

    @property
    def d(self) -> int:
        return len(self.m)

    @property
    def D(self) -> int:
        return sum(self.m)

    def groups(self) -> list[list[int]]:
        """Augmented indices of each original variable's copy group.

        Originals keep 0..d-1; copies are appended in variable order.
        """
        groups = [[i] for i in range(self.d)]
        nxt = self.d
        for i, mi in enumerate(self.m):
            for _ in range(mi - 1):
                groups[i].append(nxt)
                nxt += 1
        return groups

    def source(self) -> np.ndarray:
        """Map each augmented index back to its original variable."""
        src = np.empty(self.D, dtype=np.int64)
        for i, grp in enumerate(self.groups()):
            src[grp] = i
        return src


@dataclass
class AdmissibleSet:
    graphs: list[np.ndarray]
    names: list[str] | None = None
    source: str = "enumerated"
    m: Multiplicities | None = None
    base_graph: np.ndarray | None = None
    _keys: set = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if not self.graphs:
            raise ValueError("admissible set is empty")
        self.graphs = [as_graph(g) for g in self.graphs]
        D = self.graphs[0].shape[0]
        if any(g.shape != (D, D) for g in self.graphs):
            raise ValueError("admissible graphs must share one dimension")
        self._keys = {g.tobytes() for g in self.graphs}
        if len(self._keys) != len(self.graphs):
            raise ValueError("admissible graphs must be distinct")

    def __len__(self):
        return len(self.graphs)

    def __iter__(self):
        return iter(self.graphs)

    def __contains__(self, g) -> bool:
        return np.asarray(g, dtype=np.int8).tobytes() in self._keys

    @property
    def D(self) -> int:
        return self.graphs[0].shape[0]

    def stack(self) -> np.ndarray:
        return np.stack(self.graphs)

    def union(self) -> np.ndarray:
        return self.stack().max(axis=0)

    def to_json(self) -> dict:
        doc = {"d": self.D, "names": self.names or [f"x{i}" for i in range(self.D)],
               "graphs": [g.ravel().tolist() for g in self.graphs]}
        if self.m is not None:
            doc["m"] = list(self.m.m)
        if self.base_graph is not None:
            doc["base_graph"] = self.base_graph.ravel().tolist()
        return doc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def from_json(cls, doc: dict) -> "AdmissibleSet":
        d = int(doc["d"])
        graphs = [np.asarray(g, dtype=np.int8).reshape(d, d) for g in doc["graphs"]]
        m = Multiplicities(tuple(doc["m"])) if "m" in doc else None
        base = doc.get("base_graph")
        if base is not None:
            base = np.asarray(base, dtype=np.int8)
            k = math.isqrt(base.size)
            base = base.reshape(k, k)
        return cls(graphs, list(doc.get("names") or []) or None, "file", m, base)

    @classmethod
    def load(cls, path) -> "AdmissibleSet":
        return cls.from_json(json.loads(Path(path).read_text()))


def count_admissible(g_star, m: Multiplicities, l0_minimal: bool = True) -> int:
    """Closed-form size of the duplicated-variable admissible family (exact int)."""
    c = children_counts(g_star)
    if len(c) != m.d:
        raise ValueError("multiplicities length must match graph dimension")
    total = 1
    for mi, ci in zip(m.m, c):
        base = mi if l0_minimal else 2**mi - 1
        total *= base ** int(ci)
    return total


def _nonempty_subsets(items: Sequence[int]):
    for r in range(1, len(items) + 1):
        yield from itertools.combinations(items, r)


def enumerate_admissible(g_star, m: Multiplicities, l0_minimal: bool = True,
                         cap: int = ENUMERATION_CAP, names: list[str] | None = None) -> AdmissibleSet:
    """Explicit admissible family for ``g_star`` duplicated by ``m``.

    Copies inherit their source's original parent set verbatim. Each original
    child of a duplicated node picks its parent(s) from the copy group: exactly
    one member under ``l0_minimal``, any non-empty subset otherwise.
    """
    g_star = as_graph(g_star)
    count = count_admissible(g_star, m, l0_minimal)
    if count > cap:
        raise EnumerationTooLarge(count, cap)
    d, D = m.d, m.D
    groups = m.groups()
    base = np.zeros((D, D), dtype=np.int8)
    for v in range(d):
        for copy in groups[v][1:]:
            base[:d, copy] = g_star[:, v]

    # one slot per (parent p, child i) edge of g_star; each slot lists the
    # alternative parent sets drawn from p's copy group
    slots = []
    for i in range(d):
        for p in np.flatnonzero(g_star[:, i]):
            grp = groups[p]
            options = [(q,) for q in grp] if l0_minimal else list(_nonempty_subsets(grp))
            slots.append((i, options))

    graphs = []
    for choice in itertools.product(*[opts for _, opts in slots]):
        g = base.copy()
        for (i, _), parents in zip(slots, choice):
            g[list(parents), i] = 1
        graphs.append(g)
    return AdmissibleSet(graphs, names, "enumerated", m, g_star)


def embed(g_star, m: Multiplicities) -> np.ndarray:
    """``g_star`` in the augmented index space with every child using the original."""
    g_star = as_graph(g_star)
    out = np.zeros((m.D, m.D), dtype=np.int8)
    out[:m.d, :m.d] = g_star
    for v, grp in enumerate(m.groups()):
        for copy in grp[1:]:
            out[:m.d, copy] = g_star[:, v]
    return out


def hamming(ga, gb) -> int:
    ga, gb = np.asarray(ga), np.asarray(gb)
    if ga.shape != gb.shape:
        raise ValueError(f"dimension mismatch {ga.shape} vs {gb.shape}")
    return int(np.count_nonzero(ga != gb))


def closest_distance(g, s: AdmissibleSet) -> int:
    g = np.asarray(g)
    if g.shape != (s.D, s.D):
        raise ValueError(f"dimension mismatch {g.shape} vs admissible D={s.D}")
    return int(np.min(np.count_nonzero(s.stack() != g[None], axis=(1, 2))))


def closest_distances(samples: np.ndarray, s: AdmissibleSet) -> np.ndarray:
    """Vectorised :func:`closest_distance` for a stack of graphs."""
    samples = np.asarray(samples, dtype=np.int8)
    if samples.shape[1:] != (s.D, s.D):
        raise ValueError(f"dimension mismatch {samples.shape[1:]} vs admissible D={s.D}")
    A = s.stack().reshape(len(s), -1).astype(np.int32)
    X = samples.reshape(len(samples), -1).astype(np.int32)
    # |x - a| for bits = x + a - 2 x.a
    dist = X.sum(1)[:, None] + A.sum(1)[None, :] - 2 * (X @ A.T)
    return dist.min(axis=1)


def search_space_size(d: int, per_node: bool = False) -> float:
    """log2 of the number of candidate graphs on ``d`` variables."""
    if d < 1:
        raise ValueError("d must be >= 1")
    if per_node:
        return math.log2(d) + d
    return float(d * d)
