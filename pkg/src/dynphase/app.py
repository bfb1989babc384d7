"""Adaptive phase partitioning.

A dilated temporal-convolution autoencoder maps each sliding-window segment
to a latent split into a slow "state" part and a residual part. Training
combines reconstruction, a smoothness penalty on the state part, and an
orthogonality penalty between the two parts. Changepoints are consecutive
state-latent distances exceeding a threshold, mapped back to window centers
on the original time axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import DimensionError, TrainingError
from .segfc import MIN_FC_LEN, SegmentSequence

TAU_C_GRID = (0.01, 0.05, 0.1, 0.5)


@dataclass
class AppLossWeights:
    lambda_smooth: float = 0.1
    lambda_orth: float = 1.0

    def validate(self) -> None:
        if not (math.isfinite(self.lambda_smooth) and self.lambda_smooth >= 0):
            raise ValueError(f"lambda_smooth must be finite >= 0, got {self.lambda_smooth}")
        if not (math.isfinite(self.lambda_orth) and self.lambda_orth >= 0):
            raise ValueError(f"lambda_orth must be finite >= 0, got {self.lambda_orth}")


@dataclass
class ChangepointConfig:
    tau_c: float = 0.1

    def validate(self) -> None:
        if self.tau_c <= 0:
            raise ValueError(f"tau_c must be > 0, got {self.tau_c}")


class CausalConv1d(nn.Module):
    """Conv1d padded on the left so output length equals input length."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, dilation: int):
        super().__init__()
        self.pad = (kernel - 1) * dilation
        self.conv = nn.Conv1d(in_ch, out_ch, kernel, dilation=dilation)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(F.pad(x, (self.pad, 0)))


class _TcnEncoder(nn.Module):
    def __init__(self, n_rois: int, latent_dim: int, hidden: int):
        super().__init__()
        self.c1 = CausalConv1d(n_rois, hidden, 3, 1)
        self.c2 = CausalConv1d(hidden, hidden, 3, 2)
        self.c3 = CausalConv1d(hidden, latent_dim, 3, 4)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, N, w) -> pooled latent (B, d)
        y = torch.relu(self.c1(x))
        y = torch.relu(self.c2(y))
        y = self.c3(y)
        return y.mean(dim=2)


class _TcnDecoder(nn.Module):
    def __init__(self, n_rois: int, latent_dim: int, hidden: int, window: int):
        super().__init__()
        self.window = window
        self.w4 = max(1, window // 4)
        self.w2 = max(self.w4, window // 2)
        self.c1 = CausalConv1d(latent_dim, hidden, 3, 1)
        self.c2 = CausalConv1d(hidden, hidden, 3, 1)
        self.c3 = CausalConv1d(hidden, n_rois, 3, 1)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        # h: (B, d) -> reconstruction (B, N, w)
        y = h.unsqueeze(2).expand(-1, -1, self.w4)
        y = torch.relu(self.c1(y))
        y = F.interpolate(y, size=self.w2, mode="nearest")
        y = torch.relu(self.c2(y))
        y = F.interpolate(y, size=self.window, mode="nearest")
        return self.c3(y)


class AppModel(nn.Module):
    """Dilated-TCN autoencoder with a split latent [state, residual].

    Latents are layer-normalized (no affine) by default: pinning the latent
    scale keeps consecutive-distance magnitudes comparable across datasets,
    so the fixed changepoint-threshold grid stays meaningful.
    """

    def __init__(
        self,
        n_rois: int,
        window: int,
        latent_dim: int = 32,
        state_dim: int = 16,
        hidden_channels: int = 64,
        normalize_latents: bool = True,
        dtype: torch.dtype = torch.float64,
    ):
        super().__init__()
        if not 0 < state_dim < latent_dim:
            raise ValueError(f"need 0 < state_dim < latent_dim, got {state_dim}/{latent_dim}")
        self.n_rois = n_rois
        self.window = window
        self.latent_dim = latent_dim
        self.state_dim = state_dim
        self.resid_dim = latent_dim - state_dim
        self.hidden_channels = hidden_channels
        self.normalize_latents = normalize_latents
        self.encoder = _TcnEncoder(n_rois, latent_dim, hidden_channels)
        self.decoder = _TcnDecoder(n_rois, latent_dim, hidden_channels, window)
        self.to(dtype)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def _check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 3 or x.shape[1] != self.window or x.shape[2] != self.n_rois:
            raise DimensionError(
                f"expected segments of shape (B, {self.window}, {self.n_rois}), "
                f"got {tuple(x.shape)}"
            )

    def encode(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """x: (B, w, N) -> (state (B, state_dim), residual (B, resid_dim))."""
        self._check_input(x)
        h = self.encoder(x.transpose(1, 2))
        if self.normalize_latents:
            h = F.layer_norm(h, (self.latent_dim,))
        return h[:, : self.state_dim], h[:, self.state_dim :]

    def decode(self, state: torch.Tensor, resid: torch.Tensor) -> torch.Tensor:
        h = torch.cat([state, resid], dim=1)
        return self.decoder(h).transpose(1, 2)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        s, u = self.encode(x)
        return self.decode(s, u), s, u


def segments_tensor(
    segs: SegmentSequence, dtype: torch.dtype = torch.float64
) -> torch.Tensor:
    return torch.tensor(np.stack(segs.segments), dtype=dtype)


def encode_segments(
    model: AppModel, segs: SegmentSequence
) -> tuple[torch.Tensor, torch.Tensor]:
    """All K latent pairs of one subject, as (K, state_dim), (K, resid_dim)."""
    return model.encode(segments_tensor(segs, dtype=model.dtype))


def orthogonality_penalty(s: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    """Mean squared cosine between state and residual latents.

    Unit-normalizing both sides makes the penalty invariant to positive
    rescaling of either latent.
    """
    s_hat = s / s.norm(dim=1, keepdim=True).clamp_min(1e-12)
    u_hat = u / u.norm(dim=1, keepdim=True).clamp_min(1e-12)
    return ((s_hat * u_hat).sum(dim=1) ** 2).mean()


def _loss_terms(
    x: torch.Tensor, recon: torch.Tensor, s: torch.Tensor, u: torch.Tensor
) -> dict[str, torch.Tensor]:
    return {
        "recon": ((recon - x) ** 2).mean(),
        "smooth": ((s[1:] - s[:-1]) ** 2).sum(dim=1).mean(),
        "orth": orthogonality_penalty(s, u),
    }


def app_loss(
    model: AppModel,
    segments: torch.Tensor,
    weights: AppLossWeights,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Reconstruction + smoothness + orthogonality on one subject's segments.

    segments: (K, w, N) with K >= 2 (the smoothness term needs pairs).
    Returns the weighted total and the unweighted parts.
    """
    if segments.shape[0] < 2:
        raise DimensionError("app_loss needs K >= 2 segments")
    recon, s, u = model(segments)
    parts = _loss_terms(segments, recon, s, u)
    total = (
        parts["recon"]
        + weights.lambda_smooth * parts["smooth"]
        + weights.lambda_orth * parts["orth"]
    )
    return total, parts


def latent_distances(state_latents: np.ndarray) -> np.ndarray:
    """Squared consecutive distances d_k, k = 1..K-1 (0-indexed)."""
    s = np.asarray(state_latents, dtype=np.float64)
    return ((s[1:] - s[:-1]) ** 2).sum(axis=1)


def detect_changepoints(
    state_latents: np.ndarray | torch.Tensor,
    cfg: ChangepointConfig,
    window: int,
    step: int,
    total_len: int,
    min_gap: int = MIN_FC_LEN,
) -> list[int]:
    """Boundary list [0, ..., T] from thresholded consecutive latent distances.

    A run of consecutive over-threshold distances collapses to its maximal
    element (one boundary per transition). Each surviving segment index k maps
    to the window-center time round(k*step + window/2). Boundaries closer than
    min_gap to each other or to the ends are resolved strongest-first.
    """
    cfg.validate()
    if isinstance(state_latents, torch.Tensor):
        state_latents = state_latents.detach().cpu().numpy()
    if state_latents.shape[0] < 2:
        return [0, total_len]
    d = latent_distances(state_latents)

    over = d > cfg.tau_c
    candidates: list[tuple[float, int]] = []  # (distance, segment index k)
    run_start = None
    for j in range(len(d) + 1):
        if j < len(d) and over[j]:
            if run_start is None:
                run_start = j
        elif run_start is not None:
            run = d[run_start:j]
            best = run_start + int(np.argmax(run))
            candidates.append((float(d[best]), best + 1))  # distance j is step j-1 -> j
            run_start = None

    # segment index -> window-center time, round-half-up for determinism
    timed: dict[int, float] = {}
    for dist, k in candidates:
        t = int(math.floor(k * step + window / 2.0 + 0.5))
        if 0 < t < total_len:
            timed[t] = max(timed.get(t, 0.0), dist)

    accepted: list[int] = []
    for t, dist in sorted(timed.items(), key=lambda kv: (-kv[1], kv[0])):
        near_end = t < min_gap or total_len - t < min_gap
        if not near_end and all(abs(t - a) >= min_gap for a in accepted):
            accepted.append(t)
    return [0] + sorted(accepted) + [total_len]


def pretrain_app(
    model: AppModel,
    segment_sequences: list[SegmentSequence],
    weights: AppLossWeights,
    epochs: int,
    lr: float = 1e-3,
    batch_size: int = 8,
    seed: int = 0,
    grad_clip: float = 5.0,
) -> tuple[AppModel, list[float]]:
    """Train the autoencoder over all subjects; returns per-epoch mean loss.

    Deterministic for a fixed seed: subject order is shuffled by a dedicated
    numpy stream and all torch ops run on CPU.
    """
    weights.validate()
    if not segment_sequences:
        raise TrainingError("empty dataset")
    if epochs == 0:
        return model, []
    tensors = [segments_tensor(s, dtype=model.dtype) for s in segment_sequences]
    for x in tensors:
        model._check_input(x)
        if x.shape[0] < 2:
            raise DimensionError("every subject needs K >= 2 segments")
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    shuffler = np.random.default_rng([seed, 17])
    curve: list[float] = []
    for epoch in range(epochs):
        order = shuffler.permutation(len(tensors))
        total, count = 0.0, 0
        for start in range(0, len(order), batch_size):
            batch = order[start : start + batch_size]
            opt.zero_grad()
            # one fused forward over the batch; per-subject loss semantics
            # are preserved by slicing the outputs at subject offsets
            x = torch.cat([tensors[i] for i in batch])
            recon, s, u = model(x)
            losses = []
            offset = 0
            for idx in batch:
                k = tensors[idx].shape[0]
                sl = slice(offset, offset + k)
                parts = _loss_terms(x[sl], recon[sl], s[sl], u[sl])
                losses.append(
                    parts["recon"]
                    + weights.lambda_smooth * parts["smooth"]
                    + weights.lambda_orth * parts["orth"]
                )
                offset += k
            batch_loss = torch.stack(losses).mean()
            if not torch.isfinite(batch_loss):
                raise TrainingError(f"non-finite APP loss at epoch {epoch}")
            batch_loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
            opt.step()
            total += float(batch_loss.detach()) * len(batch)
            count += len(batch)
        curve.append(total / count)
    return model, curve
