"""Item-item co-occurrence graphs and LightGCN-style propagation."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .corpus import PAD, CrossDomainSequence


class GraphError(ValueError):
    pass


@dataclass
class SparseAdjacency:
    """Coordinate-format weighted adjacency with row-sorted entries."""

    n: int
    rows: np.ndarray
    cols: np.ndarray
    weights: np.ndarray
    normalization: str = "none"

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.int64)
        self.cols = np.asarray(self.cols, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        order = np.lexsort((self.cols, self.rows))
        self.rows, self.cols, self.weights = self.rows[order], self.cols[order], self.weights[order]

    @property
    def nnz(self) -> int:
        return len(self.weights)

    def degrees(self) -> np.ndarray:
        return np.bincount(self.rows, weights=self.weights, minlength=self.n)

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n, self.n))
        np.add.at(out, (self.rows, self.cols), self.weights)
        return out

    def normalized(self) -> "SparseAdjacency":
        """Symmetric ``D^-1/2 A D^-1/2``."""
        if self.normalization == "symmetric":
            return self
        deg = self.degrees()
        scale = 1.0 / np.sqrt(deg[self.rows] * deg[self.cols])
        return SparseAdjacency(self.n, self.rows, self.cols, self.weights * scale, "symmetric")

    def isolated(self) -> np.ndarray:
        return np.bincount(self.rows, minlength=self.n) == 0

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"n={self.n} norm={self.normalization}\n")
            for r, c, w in zip(self.rows, self.cols, self.weights):
                fh.write(f"{r}\t{c}\t{float(w)!r}\n")

    @classmethod
    def load(cls, path) -> "SparseAdjacency":
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().split()
            meta = dict(tok.split("=", 1) for tok in header)
            rows, cols, weights = [], [], []
            for line in fh:
                r, c, w = line.split("\t")
                rows.append(int(r))
                cols.append(int(c))
                weights.append(float(w))
        return cls(int(meta["n"]), rows, cols, weights, meta["norm"])


def _cooccurrence(item_lists, n: int, window: int) -> SparseAdjacency:
    acc = defaultdict(float)
    for items in item_lists:
        for i, a in enumerate(items):
            for b in items[i + 1 : i + 1 + window]:
                if a == b:
                    continue
                acc[(a, b)] += 1.0
                acc[(b, a)] += 1.0
    if acc:
        keys = np.array(list(acc.keys()), dtype=np.int64)
        return SparseAdjacency(n, keys[:, 0], keys[:, 1], np.fromiter(acc.values(), float))
    return SparseAdjacency(n, [], [], [])


def build_domain_graph(
    sequences: list[CrossDomainSequence], domain: str, n_items: int, offset: int = 0, window: int = 1
) -> SparseAdjacency:
    """Undirected co-occurrence over each user's domain-restricted subsequence.

    Node ids are local indices: ``global - offset``.
    """
    if n_items <= 0:
        raise GraphError(f"domain {domain} has no items")
    lists = [[it - offset for it in seq.domain_items(domain)] for seq in sequences]
    return _cooccurrence(lists, n_items, window)


def build_mixed_graph(sequences: list[CrossDomainSequence], n_items: int, window: int = 1) -> SparseAdjacency:
    if n_items <= 0:
        raise GraphError("empty vocabulary")
    lists = [[it for it in seq.items if it != PAD] for seq in sequences]
    return _cooccurrence(lists, n_items, window)


class Propagator:
    """``propagate`` bound to one normalized graph."""

    def __init__(self, adj: SparseAdjacency, layers: int = 2):
        if layers < 0:
            raise GraphError("layer count must be >= 0")
        self.adj = adj.normalized()
        self.layers = layers
        self._rows = torch.from_numpy(self.adj.rows)
        self._cols = torch.from_numpy(self.adj.cols)
        self._vals = torch.from_numpy(self.adj.weights)
        self._iso = torch.from_numpy(self.adj.isolated())

    @property
    def n(self) -> int:
        return self.adj.n

    def __call__(self, emb: torch.Tensor) -> torch.Tensor:
        if emb.shape[0] != self.adj.n:
            raise GraphError(f"graph has {self.adj.n} nodes but embedding table has {emb.shape[0]} rows")
        if self.layers == 0:
            return emb
        vals = self._vals.to(emb.dtype).unsqueeze(1)
        iso = self._iso.to(emb.dtype).unsqueeze(1)
        layer, total = emb, emb
        for _ in range(self.layers):
            msg = emb.new_zeros(emb.shape).index_add(0, self._rows, vals * layer[self._cols])
            # isolated nodes carry their layer-0 row through every layer
            layer = msg + iso * emb
            total = total + layer
        return total / (self.layers + 1)


def propagate(adj: SparseAdjacency, emb: torch.Tensor, layers: int = 2) -> torch.Tensor:
    """Mean of ``Norm(A)^l E`` over ``l = 0..layers``."""
    if adj.normalization != "symmetric":
        raise GraphError("propagate expects a symmetric-normalized adjacency")
    return Propagator(adj, layers)(emb)


@dataclass
class ItemGraphs:
    """Per-domain graphs over local indices and the mixed graph over global indices."""

    x: SparseAdjacency
    y: SparseAdjacency
    mixed: SparseAdjacency

    FILES = {"x": "graph_X.tsv", "y": "graph_Y.tsv", "mixed": "graph_mixed.tsv"}

    @classmethod
    def build(cls, sequences, n_x: int, n_y: int, window: int = 1) -> "ItemGraphs":
        return cls(
            build_domain_graph(sequences, "X", n_x, 0, window),
            build_domain_graph(sequences, "Y", n_y, n_x, window),
            build_mixed_graph(sequences, n_x + n_y, window),
        )

    def save(self, directory) -> None:
        for attr, name in self.FILES.items():
            getattr(self, attr).save(Path(directory) / name)

    @classmethod
    def load(cls, directory) -> "ItemGraphs":
        return cls(**{attr: SparseAdjacency.load(Path(directory) / name) for attr, name in cls.FILES.items()})
