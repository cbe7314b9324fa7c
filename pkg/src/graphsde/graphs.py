"""Padded graph containers, synthetic datasets, quantization and file I/O."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class DegreeOverflow(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(eq=False)
class Graph:
    """Node features ``X`` (N_max x F), adjacency ``A`` (N_max x N_max) and mask."""

    X: np.ndarray
    A: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.A = np.asarray(self.A, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)

    @property
    def n(self) -> int:
        return int(self.mask.sum())

    @property
    def n_max(self) -> int:
        return self.A.shape[0]

    def validate(self, atol: float = 0.0) -> None:
        A, m = self.A, self.mask
        if A.shape != (len(m), len(m)) or self.X.shape[0] != len(m):
            raise ValueError("inconsistent graph shapes")
        if np.max(np.abs(A - A.T), initial=0.0) > atol:
            raise ValueError("adjacency not symmetric")
        if np.any(np.diag(A) != 0):
            raise ValueError("adjacency diagonal not zero")
        off = ~m
        if np.any(A[off] != 0) or np.any(A[:, off] != 0) or np.any(self.X[off] != 0):
            raise ValueError("masked-out entries must be zero")

    def active_adjacency(self) -> np.ndarray:
        idx = np.flatnonzero(self.mask)
        return self.A[np.ix_(idx, idx)]

    def permuted(self, perm: Sequence[int]) -> "Graph":
        p = np.asarray(perm)
        return Graph(self.X[p], self.A[np.ix_(p, p)], self.mask[p])

    def same_as(self, other: "Graph") -> bool:
        return (self.A.shape == other.A.shape and np.array_equal(self.A, other.A)
                and np.array_equal(self.X, other.X) and np.array_equal(self.mask, other.mask))


def degrees(A: np.ndarray) -> np.ndarray:
    return (np.asarray(A) > 0).sum(axis=-1)


def degree_onehot_features(A: np.ndarray, mask: np.ndarray, F_max: int, *, clip: bool = False) -> np.ndarray:
    """One-hot encoding of node degrees; rows of inactive nodes stay zero.

    With ``clip`` degrees ``>= F_max`` land in the last slot instead of raising.
    """
    mask = np.asarray(mask, dtype=bool)
    deg = degrees(A)
    deg = np.where(mask, deg, 0)
    if np.any(deg >= F_max):
        if not clip:
            raise DegreeOverflow(f"degree {deg.max()} does not fit in F_max={F_max}")
        deg = np.minimum(deg, F_max - 1)
    X = np.zeros(deg.shape + (F_max,))
    np.put_along_axis(X, deg[..., None], 1.0, axis=-1)
    return X * mask[..., None]


def make_graph(A_active: np.ndarray, n_max: int, F: int) -> Graph:
    """Pad an ``n x n`` adjacency to ``n_max`` and attach degree features."""
    n = A_active.shape[0]
    A = np.zeros((n_max, n_max))
    A[:n, :n] = A_active
    mask = np.zeros(n_max, dtype=bool)
    mask[:n] = True
    return Graph(degree_onehot_features(A, mask, F), A, mask)


@dataclass
class GraphDataset:
    graphs: list[Graph]
    F: int
    n_max: int
    split: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.graphs)

    def __iter__(self):
        return iter(self.graphs)

    @property
    def node_count_histogram(self) -> dict[int, int]:
        return dict(sorted(Counter(g.n for g in self.graphs).items()))

    def subset(self, which: str) -> "GraphDataset":
        picked = [g for g, s in zip(self.graphs, self.split) if s == which]
        return GraphDataset(picked, self.F, self.n_max, [which] * len(picked))

    @property
    def train(self) -> "GraphDataset":
        return self.subset("train")

    @property
    def test(self) -> "GraphDataset":
        return self.subset("test")

    def batch(self, idx: Iterable[int] | None = None):
        """Stack graphs into ``(X[B,N,F], A[B,N,N], mask[B,N])``."""
        gs = self.graphs if idx is None else [self.graphs[i] for i in idx]
        return stack_graphs(gs)

    def same_as(self, other: "GraphDataset") -> bool:
        return (len(self) == len(other) and self.F == other.F and self.n_max == other.n_max
                and all(a.same_as(b) for a, b in zip(self.graphs, other.graphs)))


def stack_graphs(graphs: Sequence[Graph]):
    X = np.stack([g.X for g in graphs])
    A = np.stack([g.A for g in graphs])
    mask = np.stack([g.mask for g in graphs]).astype(float)
    return X, A, mask


def finalize_dataset(adjs: Sequence[np.ndarray], *, n_max: int | None = None, F: int | None = None,
                     rng: np.random.Generator | None = None, test_fraction: float = 0.2) -> GraphDataset:
    """Pad raw adjacencies to a common size and assign a train/test split."""
    if n_max is None:
        n_max = max((a.shape[0] for a in adjs), default=0)
    if F is None:
        F = max((int(degrees(a).max(initial=0)) for a in adjs), default=0) + 1
    graphs = [make_graph(a, n_max, F) for a in adjs]
    for g in graphs:
        g.validate()
    split = ["train"] * len(graphs)
    if rng is not None and graphs:
        n_test = int(round(test_fraction * len(graphs)))
        order = rng.permutation(len(graphs))
        for i in order[:n_test]:
            split[i] = "test"
    return GraphDataset(graphs, F, n_max, split)


def community_adjacency(n: int, rng: np.random.Generator, p_intra: float = 0.7,
                        p_inter: float = 0.05) -> np.ndarray:
    sizes = [math.ceil(n / 2), n // 2]
    comm = np.repeat([0, 1], sizes)
    same = comm[:, None] == comm[None, :]
    p = np.where(same, p_intra, p_inter)
    draws = rng.random((n, n)) < p
    A = np.triu(draws, k=1).astype(float)
    cross = np.triu(~same, k=1)
    if not np.any(A[cross]):
        pairs = np.argwhere(cross)
        i, j = pairs[rng.integers(len(pairs))]
        A[i, j] = 1.0
    return A + A.T


def generate_community_small(count: int, rng: np.random.Generator, *, n_range=(12, 20),
                             p_intra: float = 0.7, p_inter: float = 0.05) -> GraphDataset:
    if count < 1:
        raise ValueError("count must be >= 1")
    adjs = []
    for _ in range(count):
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        adjs.append(community_adjacency(n, rng, p_intra, p_inter))
    return finalize_dataset(adjs, rng=rng)


def grid_adjacency(w: int, h: int) -> np.ndarray:
    n = w * h
    A = np.zeros((n, n))
    for r in range(h):
        for c in range(w):
            i = r * w + c
            if c + 1 < w:
                A[i, i + 1] = A[i + 1, i] = 1.0
            if r + 1 < h:
                A[i, i + w] = A[i + w, i] = 1.0
    return A


def generate_grid(count: int, rng: np.random.Generator, *, side_range=(10, 20)) -> GraphDataset:
    if count < 1:
        raise ValueError("count must be >= 1")
    adjs = []
    for _ in range(count):
        w, h = (int(v) for v in rng.integers(side_range[0], side_range[1] + 1, size=2))
        adjs.append(grid_adjacency(w, h))
    return finalize_dataset(adjs, rng=rng)


def quantize(A_raw: np.ndarray, levels: int = 2, mask=None) -> np.ndarray:
    """Round adjacency weights to integers in ``[0, levels-1]``.

    ``levels=2`` is the binary ``1[x > 0.5]`` rule. Works on a single matrix
    or a batch; the result is symmetric with a zero diagonal.
    """
    A_raw = np.asarray(A_raw, dtype=float)
    if A_raw.shape[-1] != A_raw.shape[-2]:
        raise ValueError("adjacency must be square")

    def q(x):
        # half-integers round up: [0.5, 1.5) -> 1, ...
        return np.clip(np.floor(x + 0.5), 0, levels - 1) if levels > 2 else (x > 0.5).astype(float)

    Q = q(A_raw)
    Q = q((Q + np.swapaxes(Q, -1, -2)) / 2.0)
    n = Q.shape[-1]
    Q[..., np.arange(n), np.arange(n)] = 0.0
    if mask is not None:
        m = np.asarray(mask, dtype=float)
        Q = Q * m[..., :, None] * m[..., None, :]
    return Q


def sample_node_count(dataset: GraphDataset, rng: np.random.Generator, size: int | None = None):
    hist = dataset.node_count_histogram
    if not hist:
        raise ValueError("dataset is empty")
    values = np.array(list(hist.keys()))
    probs = np.array(list(hist.values()), dtype=float)
    probs /= probs.sum()
    out = rng.choice(values, size=size, p=probs)
    return int(out) if size is None else out.astype(int)


# ------------------------------------------------------------------ I/O


def _fmt_weight(w: float) -> str:
    return str(int(w)) if float(w).is_integer() else repr(float(w))


def save_graphs(dataset: GraphDataset, path) -> None:
    """Write the edge-list format (0-based, upper triangle only)."""
    lines = [f"#graphs {len(dataset)}", f"#max_nodes {dataset.n_max}", f"#features {dataset.F}"]
    for g in dataset.graphs:
        A = g.active_adjacency()
        lines.append(f"g {g.n}")
        ii, jj = np.nonzero(np.triu(A, k=1))
        for i, j in zip(ii, jj):
            lines.append(f"e {i} {j} {_fmt_weight(A[i, j])}")
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_int(tok: str, lineno: int, what: str) -> int:
    try:
        return int(tok)
    except ValueError:
        raise ParseError(f"bad {what} {tok!r}", lineno) from None


def load_edge_list(path) -> GraphDataset:
    text = Path(path).read_text()
    adjs: list[np.ndarray] = []
    declared = None
    n_max = None
    F = None
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        toks = line.split()
        if toks[0].startswith("#"):
            key = toks[0][1:]
            if len(toks) != 2:
                raise ParseError(f"malformed header {line!r}", lineno)
            if key == "graphs":
                declared = _parse_int(toks[1], lineno, "graph count")
            elif key == "max_nodes":
                n_max = _parse_int(toks[1], lineno, "node count")
            elif key == "features":
                F = _parse_int(toks[1], lineno, "feature count")
            continue
        if toks[0] == "g" and len(toks) == 2:
            n = _parse_int(toks[1], lineno, "node count")
            if n < 0:
                raise ParseError("negative node count", lineno)
            current = np.zeros((n, n))
            adjs.append(current)
        elif toks[0] == "e" and len(toks) == 4:
            if current is None:
                raise ParseError("edge before any graph block", lineno)
            i = _parse_int(toks[1], lineno, "node index")
            j = _parse_int(toks[2], lineno, "node index")
            try:
                w = float(toks[3])
            except ValueError:
                raise ParseError(f"bad weight {toks[3]!r}", lineno) from None
            n = current.shape[0]
            if not (0 <= i < n and 0 <= j < n) or i == j:
                raise ParseError(f"edge ({i}, {j}) invalid for {n} nodes", lineno)
            current[i, j] = current[j, i] = w
        else:
            raise ParseError(f"unrecognized line {line!r}", lineno)
    if declared is not None and declared != len(adjs):
        raise ParseError(f"header declares {declared} graphs, found {len(adjs)}")
    if not adjs:
        return GraphDataset([], F or 1, n_max or 0, [])
    return finalize_dataset(adjs, n_max=n_max, F=F)


def dataset_to_json(dataset: GraphDataset) -> dict:
    out = []
    for g in dataset.graphs:
        A = g.active_adjacency()
        ii, jj = np.nonzero(np.triu(A, k=1))
        out.append({"n": g.n, "edges": [[int(i), int(j), float(A[i, j])] for i, j in zip(ii, jj)]})
    return {"graphs": out, "max_nodes": dataset.n_max, "features": dataset.F}


def save_graphs_json(dataset: GraphDataset, path) -> None:
    Path(path).write_text(json.dumps(dataset_to_json(dataset), indent=1))


def load_graphs_json(path) -> GraphDataset:
    doc = json.loads(Path(path).read_text())
    adjs = []
    for item in doc["graphs"]:
        A = np.zeros((item["n"], item["n"]))
        for i, j, w in item["edges"]:
            A[i, j] = A[j, i] = w
        adjs.append(A)
    return finalize_dataset(adjs, n_max=doc.get("max_nodes"), F=doc.get("features"))


def load_graphs(path) -> GraphDataset:
    return load_graphs_json(path) if str(path).endswith(".json") else load_edge_list(path)
