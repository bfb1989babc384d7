"""Incremental graph structure generation over partitioned phases.

A shared trainable base structure evolves through per-phase increments
predicted from a compact phase descriptor (location, duration, FC change).
Structures are binarized with a straight-through estimator and used to split
each phase FC matrix into a retained part and its complement. Three
regularizers score the continuous structures: binarization, temporal
smoothness with a margin, and sparsity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import DimensionError
from .segfc import PhasePartition


@dataclass
class StructRegWeights:
    delta_margin: float = 0.1
    lambda_bin: float = 1.0
    lambda_ms: float = 1.0
    lambda_sp: float = 0.27

    def validate(self) -> None:
        for name in ("delta_margin", "lambda_bin", "lambda_ms", "lambda_sp"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite >= 0, got {v}")


@dataclass
class StructureSequence:
    """Per-phase structures and the masked FC decomposition (torch tensors)."""

    continuous: list[torch.Tensor]   # S_t in [0, 1], symmetric
    binary: list[torch.Tensor]       # exactly 0/1 in the forward pass
    positive_fc: list[torch.Tensor]  # mask * A_t
    negative_fc: list[torch.Tensor]  # (1 - mask) * A_t
    descriptors: np.ndarray          # (W, 3) phase descriptors

    def __len__(self) -> int:
        return len(self.continuous)


def _ste_value(x: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Forward value exactly `target`, backward gradient exactly identity.

    `target + x - x.detach()` keeps the forward bits of `target` (x - x
    cancels exactly for finite x), unlike `x + (target - x).detach()` which
    reintroduces rounding.
    """
    return target.detach() + x - x.detach()


def clamp01_ste(x: torch.Tensor) -> torch.Tensor:
    return _ste_value(x, x.clamp(0.0, 1.0))


def binarize_ste(x: torch.Tensor) -> torch.Tensor:
    return _ste_value(x, (x > 0.5).to(x.dtype))


def phase_descriptor(
    c_prev: int,
    c_cur: int,
    a_cur: np.ndarray,
    a_prev: np.ndarray | None,
    total_len: int,
) -> np.ndarray:
    """[normalized center, normalized duration, FC change Frobenius norm].

    The change entry is 0 for the first phase, which has no predecessor.
    """
    if not 0 <= c_prev < c_cur <= total_len:
        raise ValueError(f"bad phase bounds ({c_prev}, {c_cur}) for T = {total_len}")
    change = 0.0 if a_prev is None else float(np.linalg.norm(a_cur - a_prev))
    return np.array(
        [(c_prev + c_cur) / (2.0 * total_len), (c_cur - c_prev) / total_len, change]
    )


def partition_descriptors(partition: PhasePartition, total_len: int) -> np.ndarray:
    rows = []
    prev_fc = None
    for (c_prev, c_cur), fc in zip(partition.phase_spans(), partition.fc_matrices):
        rows.append(phase_descriptor(c_prev, c_cur, fc, prev_fc, total_len))
        prev_fc = fc
    return np.stack(rows)


class StructGenModel(nn.Module):
    """Trainable base structure plus an increment MLP shared across phases."""

    def __init__(
        self,
        n_rois: int,
        hidden: int = 64,
        alpha_delta: float = 0.01,
        init_const: float = 0.05,
    ):
        super().__init__()
        self.n_rois = n_rois
        self.alpha_delta = alpha_delta
        self.init_const = init_const
        self.base = nn.Parameter(
            torch.full((n_rois, n_rois), init_const, dtype=torch.float64)
        )
        self.fc1 = nn.Linear(3, hidden)
        self.fc2 = nn.Linear(hidden, n_rois * n_rois)
        # zero-init the output layer: training starts exactly at the base
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)
        self.double()

    def increment(self, z: torch.Tensor) -> torch.Tensor:
        y = self.fc2(torch.tanh(self.fc1(z)))
        return y.view(self.n_rois, self.n_rois)


def evolve_structures(
    model: StructGenModel,
    partition: PhasePartition,
    total_len: int | None = None,
    hard_masks: bool = True,
) -> StructureSequence:
    """Recursive structure evolution plus the masked FC decomposition.

    S_t = clamp01(sym(S_{t-1} + alpha * f(z_t))), starting from the base.
    The clamp and the forward binarization both backpropagate as identity.
    With hard_masks=False the continuous S_t itself is used as the mask,
    which keeps the whole map smooth for finite-difference checking.
    """
    n = partition.n_rois
    if n != model.n_rois:
        raise DimensionError(f"partition has N = {n}, model has N = {model.n_rois}")
    if total_len is None:
        total_len = partition.boundaries[-1]
    desc = partition_descriptors(partition, total_len)
    z = torch.tensor(desc, dtype=torch.float64)

    continuous, binary, pos, neg = [], [], [], []
    s_prev = model.base
    for t in range(partition.phase_count):
        raw = s_prev + model.alpha_delta * model.increment(z[t])
        s_t = clamp01_ste((raw + raw.T) / 2.0)
        mask = binarize_ste(s_t) if hard_masks else s_t
        a_t = torch.tensor(partition.fc_matrices[t], dtype=torch.float64)
        continuous.append(s_t)
        binary.append(mask)
        pos.append(mask * a_t)
        neg.append((1.0 - mask) * a_t)
        s_prev = s_t
    return StructureSequence(
        continuous=continuous,
        binary=binary,
        positive_fc=pos,
        negative_fc=neg,
        descriptors=desc,
    )


def structure_regularizers(
    seq: StructureSequence, wts: StructRegWeights
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(L_bin, L_ms, L_sp) on the continuous structures, unweighted.

    L_bin sums ||S (1-S)||_F^2; L_ms sums log(1 + exp(||S_t - S_{t-1}||_F^2
    - delta)) over consecutive pairs (0 when W = 1); L_sp sums the mean
    absolute entry per phase.
    """
    wts.validate()
    s_list = seq.continuous
    n = s_list[0].shape[0]
    l_bin = sum(((s * (1.0 - s)) ** 2).sum() for s in s_list)
    l_sp = sum(s.abs().sum() for s in s_list) / (n * n)
    if len(s_list) >= 2:
        steps = [
            ((b - a) ** 2).sum() - wts.delta_margin
            for a, b in zip(s_list[:-1], s_list[1:])
        ]
        l_ms = sum(F.softplus(step) for step in steps)
    else:
        l_ms = torch.zeros((), dtype=torch.float64)
    return l_bin, l_ms, l_sp
