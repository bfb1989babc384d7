"""Structure-aware encoder for N x N connectivity matrices.

An edge-to-edge stage (row-aggregating plus column-aggregating convolutions,
broadcast back to an N x N map per channel) feeds an edge-to-node stage that
collapses each row to a per-node feature. A two-layer MLP head maps the
flattened node features to the embedding. One parameter set serves the
retained, complementary, and original connectivity streams.

The conv stack is kept linear; the nonlinearity sits in the MLP head. This
preserves additivity of the pre-head features, which the tests rely on.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import DimensionError
from .segfc import PhasePartition
from .structgen import StructureSequence


class EncoderModel(nn.Module):
    def __init__(
        self,
        n_rois: int,
        embed_dim: int = 32,
        e2e_channels: int = 8,
        e2n_channels: int = 8,
        hidden: int = 64,
    ):
        super().__init__()
        self.n_rois = n_rois
        self.embed_dim = embed_dim
        self.row_conv = nn.Conv2d(1, e2e_channels, (1, n_rois))
        self.col_conv = nn.Conv2d(1, e2e_channels, (n_rois, 1))
        self.e2n_conv = nn.Conv2d(e2e_channels, e2n_channels, (1, n_rois))
        self.fc1 = nn.Linear(e2n_channels * n_rois, hidden)
        self.fc2 = nn.Linear(hidden, embed_dim)
        self.double()

    def _check(self, a: torch.Tensor) -> None:
        if a.ndim != 3 or a.shape[1] != self.n_rois or a.shape[2] != self.n_rois:
            raise DimensionError(
                f"expected (B, {self.n_rois}, {self.n_rois}) matrices, got {tuple(a.shape)}"
            )

    def edge_features(self, a: torch.Tensor) -> torch.Tensor:
        """(B, N, N) -> (B, C, N, N): row aggregate + column aggregate."""
        self._check(a)
        x = a.unsqueeze(1)
        return self.row_conv(x) + self.col_conv(x)

    def node_features(self, e: torch.Tensor) -> torch.Tensor:
        """(B, C, N, N) -> (B, C2, N): per-node aggregation of edge features."""
        return self.e2n_conv(e).squeeze(3)

    def forward(self, a: torch.Tensor) -> torch.Tensor:
        f = self.node_features(self.edge_features(a))
        y = F.leaky_relu(self.fc1(f.flatten(1)))
        return self.fc2(y)


def encode_phase(model: EncoderModel, a: torch.Tensor | np.ndarray) -> torch.Tensor:
    """Embed a single N x N matrix to a d-vector."""
    if not isinstance(a, torch.Tensor):
        a = torch.tensor(a, dtype=torch.float64)
    return model(a.unsqueeze(0)).squeeze(0)


def encode_sequence(
    model: EncoderModel,
    seq: StructureSequence,
    partition: PhasePartition,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Per-phase embeddings (h_plus, h_minus, h_zero), each (W, d).

    All 3W matrices go through the one shared encoder in a single batch.
    """
    w = partition.phase_count
    if len(seq) != w:
        raise DimensionError(f"sequence has {len(seq)} phases, partition has {w}")
    originals = [torch.tensor(fc, dtype=torch.float64) for fc in partition.fc_matrices]
    stacked = torch.stack(seq.positive_fc + seq.negative_fc + originals)
    h = model(stacked)
    return h[:w], h[w : 2 * w], h[2 * w :]
