"""Adaptive spectrum filtering, filtered cross-domain alignment and the manual spectrum probe."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .augment import infonce

logger = logging.getLogger(__name__)

DEGENERATE_TOL = 1e-10


@dataclass(frozen=True)
class ProbeSpec:
    """Scale singular values ``first..last`` (1-based, inclusive) by ``coefficient``."""

    first: int
    last: int
    coefficient: float

    def __post_init__(self):
        if not 1 <= self.first <= self.last:
            raise ValueError(f"bad singular value group {self.first}-{self.last}")
        if not 0.0 <= self.coefficient <= 1.0:
            raise ValueError("coefficient must lie in [0, 1]")

    @classmethod
    def parse(cls, group: str, coefficient: float) -> "ProbeSpec":
        first, _, last = group.partition("-")
        return cls(int(first), int(last or first), coefficient)


def sample_filter(mu: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    return mu + eps


def filter_direction(emb: torch.Tensor, v: torch.Tensor) -> torch.Tensor | None:
    """``E^T E v``, or None when it is negligible against ``||E||_F``."""
    v_hat = emb.T @ (emb @ v)
    if v_hat.norm() < DEGENERATE_TOL * emb.norm():
        return None
    return v_hat


def project_out(rows: torch.Tensor, v_hat: torch.Tensor) -> torch.Tensor:
    u = v_hat / v_hat.norm()
    return rows - (rows @ u).unsqueeze(1) * u


def apply_rank1_filter(emb: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Remove the column-space direction ``E^T E v`` from every row of ``emb``.

    A degenerate direction leaves ``emb`` unchanged.
    """
    v_hat = filter_direction(emb, v)
    if v_hat is None:
        logger.debug("degenerate filter; representation left unfiltered")
        return emb
    return project_out(emb, v_hat)


def inter_infonce(
    filtered_x: torch.Tensor,
    local_x: torch.Tensor,
    filtered_y: torch.Tensor,
    local_y: torch.Tensor,
    tau: float = 0.2,
) -> torch.Tensor:
    """Alignment of filtered global rows (anchors) with local augmented rows, both domains summed."""
    if filtered_x.shape[0] == 0 and filtered_y.shape[0] == 0:
        raise ValueError("alignment needs items from at least one domain")
    total = filtered_x.new_zeros(())
    if filtered_x.shape[0]:
        total = total + infonce(filtered_x, local_x, tau)
    if filtered_y.shape[0]:
        total = total + infonce(filtered_y, local_y, tau)
    return total


def singular_values(emb) -> np.ndarray:
    return np.linalg.svd(np.asarray(emb, dtype=np.float64), compute_uv=False)


def numerical_rank(sv: np.ndarray, shape) -> int:
    if sv.size == 0:
        return 0
    tol = sv[0] * max(shape) * np.finfo(np.float64).eps
    return int((sv > tol).sum())


def probe_spectrum(emb, spec: ProbeSpec) -> np.ndarray:
    """Rescale a group of singular values of ``emb``.

    Computed as ``emb + U (S' - S) V^T`` so a coefficient of 1 returns the input exactly.
    """
    emb = np.asarray(emb, dtype=np.float64)
    u, s, vt = np.linalg.svd(emb, full_matrices=False)
    rank = numerical_rank(s, emb.shape)
    if spec.last > rank:
        raise ValueError(f"group {spec.first}-{spec.last} exceeds matrix rank {rank}")
    sl = slice(spec.first - 1, spec.last)
    delta = (spec.coefficient - 1.0) * s[sl]
    return emb + (u[:, sl] * delta) @ vt[sl]
