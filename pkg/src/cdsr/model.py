"""The full learnable parameter set and its forward computations."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .augment import NoiseGenerator
from .graph import ItemGraphs, Propagator
from .seqmodel import SequenceBatch, SequenceEncoder, user_states


@dataclass
class Tables:
    x: torch.Tensor
    y: torch.Tensor
    mixed: torch.Tensor

    def as_views(self) -> dict:
        return {"mixed": self.mixed, "X": self.x, "Y": self.y}


class CDSRModel(nn.Module):
    """Embeddings, noise generators, filter means, encoder and prediction heads.

    ``embedding`` is the single concatenated table; the X and Y tables are its
    row ranges.
    """

    def __init__(
        self,
        n_x: int,
        n_y: int,
        graphs: ItemGraphs,
        d: int = 256,
        max_len: int = 30,
        layers: int = 2,
        encoder_kind: str = "gnn-att",
        n_blocks: int = 2,
        n_heads: int = 2,
        d_ff: int | None = None,
        dropout: float = 0.2,
    ):
        super().__init__()
        self.n_x, self.n_y, self.d = n_x, n_y, d
        self.embedding = nn.Parameter(torch.empty(n_x + n_y, d))
        self.generators = nn.ModuleDict({"X": NoiseGenerator(d), "Y": NoiseGenerator(d)})
        self.filter_mu = nn.ParameterDict({"X": nn.Parameter(torch.zeros(d)), "Y": nn.Parameter(torch.zeros(d))})
        self.encoder = SequenceEncoder(d, max_len, encoder_kind, n_blocks, n_heads, d_ff, dropout)
        self.head_x = nn.Parameter(torch.empty(d, n_x))
        self.head_y = nn.Parameter(torch.empty(d, n_y))
        self.set_graphs(graphs, layers)
        # frozen replacement for the propagated global table (spectrum probing)
        self.global_override: torch.Tensor | None = None

    def set_graphs(self, graphs: ItemGraphs, layers: int) -> None:
        if graphs.x.n != self.n_x or graphs.y.n != self.n_y or graphs.mixed.n != self.n_x + self.n_y:
            raise ValueError("graph sizes do not match the vocabulary")
        self.graphs = graphs
        self.layers = layers
        self.prop_x = Propagator(graphs.x, layers)
        self.prop_y = Propagator(graphs.y, layers)
        self.prop_mixed = Propagator(graphs.mixed, layers)

    @property
    def emb_x(self) -> torch.Tensor:
        return self.embedding[: self.n_x]

    @property
    def emb_y(self) -> torch.Tensor:
        return self.embedding[self.n_x :]

    def head(self, domain: str) -> torch.Tensor:
        return self.head_x if domain == "X" else self.head_y

    def propagated(self) -> Tables:
        mixed = self.global_override if self.global_override is not None else self.prop_mixed(self.embedding)
        return Tables(self.prop_x(self.emb_x), self.prop_y(self.emb_y), mixed)

    def raw(self) -> Tables:
        return Tables(self.emb_x, self.emb_y, self.embedding)

    def sequence_tables(self, prop: Tables | None = None) -> Tables:
        if self.encoder.uses_graph:
            return prop if prop is not None else self.propagated()
        return self.raw()

    def states(self, batch: SequenceBatch, tables: Tables | None = None):
        """(H, H^X, H^Y) for a batch."""
        tables = tables if tables is not None else self.sequence_tables()
        return user_states(self.encoder, batch, tables.as_views())

    def parameter_groups(self) -> dict:
        return {
            "embedding": [self.embedding],
            "noise_generator": list(self.generators.parameters()),
            "filter_mu": list(self.filter_mu.parameters()),
            "encoder": list(self.encoder.parameters()),
            "heads": [self.head_x, self.head_y],
        }
