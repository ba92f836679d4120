"""Sequence-aware feature augmentation and the in-batch InfoNCE loss."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

SIGMA_FLOOR = 1e-4
NORM_EPS = 1e-12


def masked_gru(cell: nn.GRUCell, inputs: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Run ``cell`` over ``inputs`` (B x T x d), holding the state fixed where ``mask`` is False.

    Returns all B x T x d states; the initial state is zero.
    """
    B, T, _ = inputs.shape
    h = inputs.new_zeros(B, cell.hidden_size)
    states = []
    for t in range(T):
        step = cell(inputs[:, t], h)
        h = torch.where(mask[:, t : t + 1], step, h)
        states.append(h)
    return torch.stack(states, dim=1)


class NoiseGenerator(nn.Module):
    """GRU summary of a domain sequence feeding mean and scale perceptrons."""

    def __init__(self, d: int):
        super().__init__()
        self.gru = nn.GRUCell(d, d)
        self.mu = nn.Sequential(nn.Linear(d, d), nn.Tanh(), nn.Linear(d, d))
        self.sigma = nn.Sequential(nn.Linear(d, d), nn.Tanh(), nn.Linear(d, d))

    def encode(self, reps: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Final hidden state over the non-pad positions of each row (B x T x d -> B x d)."""
        return masked_gru(self.gru, reps, mask)[:, -1]

    def scale(self, h: torch.Tensor) -> torch.Tensor:
        return F.softplus(self.sigma(h)) + SIGMA_FLOOR

    def forward(self, h: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
        return sample_noise(self, h, eps)


def encode_sequence(gen: NoiseGenerator, item_reps: torch.Tensor, seq) -> torch.Tensor:
    """Encode one sequence of local item indices (``-1`` = pad) against ``item_reps``."""
    seq = torch.as_tensor(seq, dtype=torch.long)
    keep = seq[seq >= 0]
    if keep.numel() == 0:
        raise ValueError("cannot encode an all-pad sequence")
    reps = item_reps[keep].unsqueeze(0)
    mask = torch.ones(1, keep.numel(), dtype=torch.bool)
    return gen.encode(reps, mask)[0]


def sample_noise(gen: NoiseGenerator, h: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Reparameterized draw ``mu(h) + eps * sigma(h)``."""
    return gen.mu(h) + eps * gen.scale(h)


def augment_items(emb: torch.Tensor, noise: torch.Tensor, alpha: float) -> torch.Tensor:
    if emb.shape != noise.shape:
        raise ValueError(f"shape mismatch {tuple(emb.shape)} vs {tuple(noise.shape)}")
    return emb + alpha * noise


def infonce(anchor: torch.Tensor, positive: torch.Tensor, tau: float) -> torch.Tensor:
    """Summed InfoNCE of row-aligned pairs with the other rows of ``positive`` as negatives."""
    if anchor.shape[0] == 0:
        raise ValueError("InfoNCE needs at least one pair")
    if anchor.shape != positive.shape:
        raise ValueError(f"shape mismatch {tuple(anchor.shape)} vs {tuple(positive.shape)}")
    a = anchor / anchor.norm(dim=1, keepdim=True).clamp_min(NORM_EPS)
    p = positive / positive.norm(dim=1, keepdim=True).clamp_min(NORM_EPS)
    logits = a @ p.T / tau
    return -(logits.diagonal() - torch.logsumexp(logits, dim=1)).sum()


def intra_infonce(anchor: torch.Tensor, positive: torch.Tensor, tau: float = 0.2) -> torch.Tensor:
    return infonce(anchor, positive, tau)
