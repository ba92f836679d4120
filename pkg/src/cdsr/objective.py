"""Next-item losses, the annealing schedule and total-loss assembly."""

from __future__ import annotations

import torch
import torch.nn.functional as F

ETA_FLOOR = 0.5
PARTS = ("single_x", "single_y", "intra_x", "intra_y", "cross", "align")


def _nll_sum(states: torch.Tensor, weight: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(states @ weight, target, reduction="sum")


def single_domain_loss(
    h_dom: torch.Tensor, h: torch.Tensor, weight: torch.Tensor, target: torch.Tensor, mask: torch.Tensor
) -> torch.Tensor:
    """Mean of ``-log softmax((h_dom + h) W)[target]`` over masked positions.

    ``target`` holds local indices; an empty mask gives a zero that keeps the graph.
    """
    n = int(mask.sum())
    if n == 0:
        return (h.sum() + h_dom.sum()) * 0.0
    return _nll_sum((h_dom + h)[mask], weight, target[mask]) / n


def cross_domain_loss(
    h: torch.Tensor,
    weight_x: torch.Tensor,
    weight_y: torch.Tensor,
    target_local: torch.Tensor,
    target_domain: torch.Tensor,
) -> torch.Tensor:
    """Mixed-state loss with each position routed to the head of its successor's domain."""
    mask_x, mask_y = target_domain == 0, target_domain == 1
    n = int(mask_x.sum() + mask_y.sum())
    if n == 0:
        return h.sum() * 0.0
    total = h.new_zeros(())
    if mask_x.any():
        total = total + _nll_sum(h[mask_x], weight_x, target_local[mask_x])
    if mask_y.any():
        total = total + _nll_sum(h[mask_y], weight_y, target_local[mask_y])
    return total / n


def anneal_eta(step: int, n_anneal: int) -> float:
    """Linear decay from 1 to 0.5 over ``n_anneal`` steps, then flat."""
    if n_anneal <= 0:
        raise ValueError("n_anneal must be positive")
    return max(ETA_FLOOR, 1.0 - 0.5 * step / n_anneal)


def total_loss(parts: dict, eta: float, lambda1: float, lambda2: float):
    intra = parts["single_x"] + parts["single_y"] + lambda1 * (parts["intra_x"] + parts["intra_y"])
    inter = parts["cross"] + lambda2 * parts["align"]
    return eta * intra + (1.0 - eta) * inter
