"""Causal sequence encoders over mixed and single-domain views."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .augment import masked_gru
from .corpus import PAD, CrossDomainSequence

ENCODER_KINDS = ("gnn-att", "attention-only", "recurrent")
MASK_FILL = -1e30
VIEWS = ("mixed", "X", "Y")


@dataclass
class SequenceBatch:
    """Left-padded mixed sequences: global indices (``-1`` at pads) and domain codes (0=X, 1=Y, -1=pad)."""

    items: torch.Tensor
    domains: torch.Tensor
    n_x: int

    @classmethod
    def from_sequences(cls, seqs: list[CrossDomainSequence], n_x: int) -> "SequenceBatch":
        code = {"X": 0, "Y": 1, "": -1}
        items = torch.tensor([s.items for s in seqs], dtype=torch.long)
        domains = torch.tensor([[code[d] for d in s.domains] for s in seqs], dtype=torch.long)
        return cls(items, domains, n_x)

    @property
    def valid(self) -> torch.Tensor:
        return self.items != PAD

    def view(self, which: str) -> torch.Tensor:
        """Row indices into the table used by ``which``; ``-1`` where the view is padded."""
        if which == "mixed":
            return self.items
        if which == "X":
            return torch.where(self.domains == 0, self.items, PAD)
        return torch.where(self.domains == 1, self.items - self.n_x, PAD)


def gather_rows(table: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """``table[idx]`` with zero vectors where ``idx`` is negative."""
    if idx.numel() and int(idx.max()) >= table.shape[0]:
        raise IndexError(f"item index {int(idx.max())} outside table of {table.shape[0]} rows")
    valid = (idx >= 0).unsqueeze(-1).to(table.dtype)
    return table[idx.clamp_min(0)] * valid


class SelfAttention(nn.Module):
    def __init__(self, d: int, n_heads: int, dropout: float):
        super().__init__()
        if d % n_heads:
            raise ValueError(f"d={d} is not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.out = nn.Linear(d, d)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        B, N, d = x.shape
        h, dh = self.n_heads, d // self.n_heads

        def split(t):
            return t.view(B, N, h, dh).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        causal = torch.ones(N, N, dtype=torch.bool, device=x.device).tril()
        allowed = causal & valid[:, None, None, :]
        scores = scores.masked_fill(~allowed, MASK_FILL)
        # queries with no visible key read nothing
        weights = torch.softmax(scores, dim=-1) * allowed.any(-1, keepdim=True)
        ctx = (self.drop(weights) @ v).transpose(1, 2).reshape(B, N, d)
        return self.out(ctx)


class Block(nn.Module):
    """Pre-norm residual attention block."""

    def __init__(self, d: int, n_heads: int, d_ff: int, dropout: float):
        super().__init__()
        self.ln_attn = nn.LayerNorm(d)
        self.attn = SelfAttention(d, n_heads, dropout)
        self.ln_ff = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, d_ff), nn.GELU(), nn.Dropout(dropout), nn.Linear(d_ff, d))
        self.drop = nn.Dropout(dropout)

    def forward(self, x, valid):
        x = x + self.drop(self.attn(self.ln_attn(x), valid))
        return x + self.drop(self.ff(self.ln_ff(x)))


class SequenceEncoder(nn.Module):
    """One parameter set shared by the mixed and both single-domain views."""

    def __init__(
        self,
        d: int,
        max_len: int,
        kind: str = "gnn-att",
        n_blocks: int = 2,
        n_heads: int = 2,
        d_ff: int | None = None,
        dropout: float = 0.2,
    ):
        super().__init__()
        if kind not in ENCODER_KINDS:
            raise ValueError(f"unknown encoder kind {kind!r}; expected one of {ENCODER_KINDS}")
        if not 0.0 <= dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        self.kind = kind
        self.max_len = max_len
        self.drop = nn.Dropout(dropout)
        if kind == "recurrent":
            self.gru = nn.GRUCell(d, d)
        else:
            self.pos = nn.Parameter(torch.zeros(max_len, d))
            self.blocks = nn.ModuleList(Block(d, n_heads, d_ff or d, dropout) for _ in range(n_blocks))
            self.ln_out = nn.LayerNorm(d)

    @property
    def uses_graph(self) -> bool:
        return self.kind == "gnn-att"

    def embed(self, table: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
        """Rows of ``table`` with zeros at pads; positions added on non-pad entries only."""
        x = gather_rows(table, idx)
        if self.kind != "recurrent":
            N = idx.shape[1]
            if N > self.max_len:
                raise ValueError(f"sequence length {N} exceeds positional table {self.max_len}")
            x = x + self.pos[-N:] * (idx >= 0).unsqueeze(-1).to(x.dtype)
        return x

    def forward(self, inputs: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        x = self.drop(inputs)
        if self.kind == "recurrent":
            return masked_gru(self.gru, x, valid)
        for block in self.blocks:
            x = block(x, valid)
        # no history yet: zero state, as the recurrent encoder gives from its zero start
        seen = valid.cumsum(1) > 0
        return self.ln_out(x) * seen.unsqueeze(-1).to(x.dtype)


def embed_sequence(encoder: SequenceEncoder, batch: SequenceBatch, which: str, tables: dict) -> torch.Tensor:
    return encoder.embed(tables[which], batch.view(which))


def user_states(encoder: SequenceEncoder, batch: SequenceBatch, tables: dict):
    """States for the mixed, X and Y views from one stacked forward pass."""
    inputs, masks = [], []
    for which in VIEWS:
        idx = batch.view(which)
        inputs.append(encoder.embed(tables[which], idx))
        masks.append(idx >= 0)
    H = encoder(torch.cat(inputs), torch.cat(masks))
    return tuple(H.chunk(3))
