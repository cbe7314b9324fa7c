"""Graph statistics and Gaussian-EMD-kernel MMD between graph sets."""

from __future__ import annotations

import itertools
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .graphs import Graph, GraphDataset

log = logging.getLogger(__name__)

# 4-node orbit ids (ORCA numbering 4..14)
ORBITS = tuple(range(4, 15))
CLUSTERING_BINS = 100


class EmptyGraph(ValueError):
    pass


class EmptySet(ValueError):
    pass


@dataclass
class StatHistogram:
    """Histogram on uniform bins; ``edges`` has one more entry than ``weights``."""

    edges: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        if len(self.edges) != len(self.weights) + 1:
            raise ValueError("edges must have len(weights) + 1 entries")
        if np.any(self.weights < 0):
            raise ValueError("negative histogram weight")
        total = self.weights.sum()
        if total <= 0:
            raise ValueError("histogram has no mass")
        self.weights = self.weights / total

    @property
    def width(self) -> float:
        return float(self.edges[1] - self.edges[0])

    @classmethod
    def integer(cls, values: np.ndarray, max_value: int | None = None) -> "StatHistogram":
        values = np.asarray(values, dtype=int)
        top = int(values.max(initial=0)) if max_value is None else int(max_value)
        counts = np.bincount(values, minlength=top + 1)[: top + 1]
        return cls(np.arange(top + 2, dtype=float), counts)


def _active(G: Graph) -> np.ndarray:
    if G.n == 0:
        raise EmptyGraph("graph has no active nodes")
    return (G.active_adjacency() > 0).astype(int)


def node_degrees(G: Graph) -> np.ndarray:
    return _active(G).sum(axis=1)


def local_clustering(G: Graph) -> np.ndarray:
    A = _active(G)
    d = A.sum(axis=1)
    tri = np.einsum("ij,jk,ki->i", A, A, A) / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        c = np.where(d >= 2, 2.0 * tri / (d * (d - 1.0)), 0.0)
    return c


def degree_stat(G: Graph, max_degree: int | None = None) -> StatHistogram:
    return StatHistogram.integer(node_degrees(G), max_degree)


def clustering_stat(G: Graph, bins: int = CLUSTERING_BINS) -> StatHistogram:
    counts, edges = np.histogram(local_clustering(G), bins=bins, range=(0.0, 1.0))
    return StatHistogram(edges, counts)


# ---------------------------------------------------------------- orbits


def _neighbor_sets(A: np.ndarray) -> list[set[int]]:
    return [set(np.flatnonzero(row).tolist()) for row in A]


def connected_4_subsets(A: np.ndarray):
    """Yield every connected induced 4-node subgraph once (ESU enumeration)."""
    nbrs = _neighbor_sets(A)
    n = len(nbrs)

    def extend(sub: list[int], sub_nbhd: set[int], ext: set[int], root: int):
        if len(sub) == 4:
            yield tuple(sub)
            return
        ext = set(ext)
        while ext:
            w = ext.pop()
            excl = {u for u in nbrs[w] if u > root and u not in sub_nbhd and u not in sub}
            yield from extend(sub + [w], sub_nbhd | nbrs[w], ext | excl, root)

    for v in range(n):
        yield from extend([v], set(nbrs[v]), {u for u in nbrs[v] if u > v}, v)


def _classify(A: np.ndarray, quad: Sequence[int]) -> list[int]:
    """Orbit id of each node of a connected 4-node induced subgraph."""
    sub = A[np.ix_(quad, quad)]
    d = sub.sum(axis=1)
    m = int(d.sum()) // 2
    if m == 3:
        if d.max() == 3:
            return [7 if k == 3 else 6 for k in d]
        return [4 if k == 1 else 5 for k in d]
    if m == 4:
        if d.max() == 2:
            return [8] * 4
        return [{1: 9, 2: 10, 3: 11}[int(k)] for k in d]
    if m == 5:
        return [12 if k == 2 else 13 for k in d]
    return [14] * 4


def orbit_counts(G: Graph) -> np.ndarray:
    """Per-node counts of the 11 four-node orbits, shape ``(n, 11)``."""
    A = _active(G)
    out = np.zeros((A.shape[0], len(ORBITS)), dtype=int)
    for quad in connected_4_subsets(A):
        for node, orb in zip(quad, _classify(A, quad)):
            out[node, orb - 4] += 1
    return out


def _connected(sub: np.ndarray) -> bool:
    seen = {0}
    stack = [0]
    while stack:
        i = stack.pop()
        for j in np.flatnonzero(sub[i]):
            if j not in seen:
                seen.add(int(j))
                stack.append(int(j))
    return len(seen) == len(sub)


def orbit_counts_naive(G: Graph) -> np.ndarray:
    """Reference counter: tests every 4-subset for connectivity."""
    A = _active(G)
    out = np.zeros((A.shape[0], len(ORBITS)), dtype=int)
    for quad in itertools.combinations(range(A.shape[0]), 4):
        if _connected(A[np.ix_(quad, quad)]):
            for node, orb in zip(quad, _classify(A, quad)):
                out[node, orb - 4] += 1
    return out


def orbit_stat(G: Graph, max_count: int | None = None) -> StatHistogram:
    return StatHistogram.integer(orbit_counts(G).sum(axis=1), max_count)


# ---------------------------------------------------------------- distances


def _union_grid(h1: StatHistogram, h2: StatHistogram):
    w = h1.width
    if not math.isclose(w, h2.width, rel_tol=1e-9):
        raise ValueError("histograms need equal bin widths")
    off = (h2.edges[0] - h1.edges[0]) / w
    if not math.isclose(off, round(off), abs_tol=1e-6):
        raise ValueError("histogram bins are not aligned")
    lo = min(h1.edges[0], h2.edges[0])
    hi = max(h1.edges[-1], h2.edges[-1])
    K = int(round((hi - lo) / w))

    def place(h):
        out = np.zeros(K)
        s = int(round((h.edges[0] - lo) / w))
        out[s:s + len(h.weights)] = h.weights
        return out

    return place(h1), place(h2), w


def emd_1d(h1: StatHistogram, h2: StatHistogram) -> float:
    """First Wasserstein distance between two aligned histograms."""
    a, b, w = _union_grid(h1, h2)
    return float(np.sum(np.abs(np.cumsum(a) - np.cumsum(b))) * w)


def _kernel_mean(xs, ys, sigma: float) -> float:
    total = 0.0
    for x in xs:
        for y in ys:
            d = emd_1d(x, y)
            total += math.exp(-d * d / (2.0 * sigma * sigma))
    return total / (len(xs) * len(ys))


def mmd_squared(set1: Sequence[StatHistogram], set2: Sequence[StatHistogram], sigma: float = 1.0) -> float:
    if not set1 or not set2:
        raise EmptySet("MMD needs two nonempty sets")
    return _kernel_mean(set1, set1, sigma) + _kernel_mean(set2, set2, sigma) - 2.0 * _kernel_mean(set1, set2, sigma)


def mmd_gaussian_emd(set1: Sequence[StatHistogram], set2: Sequence[StatHistogram], sigma: float = 1.0) -> float:
    """Biased MMD estimate with kernel ``exp(-emd^2 / (2 sigma^2))``."""
    return math.sqrt(max(0.0, mmd_squared(set1, set2, sigma)))


# ---------------------------------------------------------------- report


@dataclass
class MmdReport:
    degree: float
    clustering: float
    orbit: float
    notes: list[str] = field(default_factory=list)

    @property
    def average(self) -> float:
        return (self.degree + self.clustering + self.orbit) / 3.0

    def as_dict(self) -> dict[str, float]:
        return {"degree": self.degree, "clustering": self.clustering, "orbit": self.orbit, "average": self.average}

    def to_text(self) -> str:
        lines = [f"# {n}" for n in self.notes]
        lines += [f"{k}={v:.10g}" for k, v in self.as_dict().items()]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def parse(cls, text: str) -> "MmdReport":
        vals = {}
        notes = []
        for line in text.splitlines():
            if line.startswith("#"):
                notes.append(line[1:].strip())
            elif line.strip():
                k, v = line.split("=", 1)
                vals[k.strip()] = float(v)
        return cls(vals["degree"], vals["clustering"], vals["orbit"], notes)


def _nonempty(graphs: Sequence[Graph]) -> list[Graph]:
    return [g for g in graphs if g.n > 0]


def evaluate(generated: GraphDataset | Sequence[Graph], test: GraphDataset | Sequence[Graph], *,
             sigma: float = 1.0, rng: np.random.Generator | None = None) -> MmdReport:
    """Degree, clustering and orbit MMDs between two graph sets."""
    gen = _nonempty(list(generated))
    ref = _nonempty(list(test))
    if not gen or not ref:
        raise EmptySet("evaluate needs nonempty graph sets")
    notes = []
    if len(gen) != len(ref):
        rng = rng if rng is not None else np.random.default_rng(0)
        k = min(len(gen), len(ref))
        msg = f"set sizes differ ({len(gen)} vs {len(ref)}); larger set subsampled to {k}"
        warnings.warn(msg, stacklevel=2)
        notes.append(msg)
        if len(gen) > k:
            gen = [gen[i] for i in np.sort(rng.choice(len(gen), k, replace=False))]
        else:
            ref = [ref[i] for i in np.sort(rng.choice(len(ref), k, replace=False))]
    both = gen + ref
    max_deg = max(int(node_degrees(g).max(initial=0)) for g in both)
    orbit_totals = [orbit_counts(g).sum(axis=1) for g in both]
    max_orb = max(int(t.max(initial=0)) for t in orbit_totals)
    deg = [degree_stat(g, max_deg) for g in both]
    clus = [clustering_stat(g) for g in both]
    orb = [StatHistogram.integer(t, max_orb) for t in orbit_totals]
    k = len(gen)
    return MmdReport(
        mmd_gaussian_emd(deg[:k], deg[k:], sigma),
        mmd_gaussian_emd(clus[:k], clus[k:], sigma),
        mmd_gaussian_emd(orb[:k], orb[k:], sigma),
        notes,
    )


def orbit_table(graphs: Sequence[Graph]) -> str:
    """Tab-separated per-node orbit breakdown: graph, node, then orbits 4..14."""
    rows = ["graph\tnode\t" + "\t".join(f"o{o}" for o in ORBITS)]
    for gi, g in enumerate(graphs):
        if g.n == 0:
            continue
        for ni, row in enumerate(orbit_counts(g)):
            rows.append(f"{gi}\t{ni}\t" + "\t".join(str(int(v)) for v in row))
    return "\n".join(rows) + "\n"
