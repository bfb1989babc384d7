"""Sliding-window segmentation and phase-wise Pearson connectivity."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DynphaseError

log = logging.getLogger(__name__)

# Phases shorter than this are merged before computing FC; 2-point Pearson
# correlations are always +-1 and carry no information.
MIN_FC_LEN = 5

# Default window sizes: long recordings (~1000+ time points) vs short ones.
WINDOW_LONG = 200
WINDOW_SHORT = 40


@dataclass
class SegmentSequence:
    """Overlapping windows of a T x N signal."""

    segments: list[np.ndarray]
    window: int
    step: int
    source_length: int

    def __len__(self) -> int:
        return len(self.segments)


@dataclass
class PhasePartition:
    """Boundary list 0 = c_0 < ... < c_W = T with one FC matrix per phase."""

    boundaries: list[int]
    fc_matrices: list[np.ndarray]

    @property
    def phase_count(self) -> int:
        return len(self.boundaries) - 1

    @property
    def n_rois(self) -> int:
        return self.fc_matrices[0].shape[0]

    def phase_spans(self) -> list[tuple[int, int]]:
        return list(zip(self.boundaries[:-1], self.boundaries[1:]))


def segment(signal: np.ndarray, window: int, step: int = 1) -> SegmentSequence:
    """Cut a T x N signal into K = floor((T - window)/step) + 1 slices."""
    signal = np.asarray(signal, dtype=np.float64)
    if signal.ndim != 2:
        raise DimensionError(f"signal must be 2-D (T, N), got shape {signal.shape}")
    t = signal.shape[0]
    if not 1 <= window <= t:
        raise DimensionError(f"window {window} out of range for T = {t}")
    if step < 1:
        raise DimensionError(f"step must be >= 1, got {step}")
    if step != 1:
        warnings.warn(f"step = {step}; overlapping step-1 windows are the intended use")
    k = (t - window) // step + 1
    segments = [signal[i * step : i * step + window].copy() for i in range(k)]
    return SegmentSequence(segments=segments, window=window, step=step, source_length=t)


def pearson_fc(x: np.ndarray) -> np.ndarray:
    """Sample Pearson correlation between columns of an L x N matrix.

    Zero-variance columns get zero off-diagonal correlation (with a warning)
    instead of NaN. Output is exactly symmetric with unit diagonal, entries
    clamped to [-1, 1].
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DimensionError(f"need an L x N matrix with L >= 2, got shape {x.shape}")
    centered = x - x.mean(axis=0)
    norms = np.sqrt((centered**2).sum(axis=0))
    degenerate = norms < 1e-12
    if degenerate.any():
        warnings.warn(
            f"{int(degenerate.sum())} zero-variance column(s); correlations set to 0"
        )
    safe = np.where(degenerate, 1.0, norms)
    z = centered / safe
    c = z.T @ z
    c[degenerate, :] = 0.0
    c[:, degenerate] = 0.0
    c = (c + c.T) / 2.0
    np.fill_diagonal(c, 1.0)
    return np.clip(c, -1.0, 1.0)


def _merge_short_phases(
    boundaries: list[int], min_fc_len: int
) -> list[int]:
    """Drop boundaries until every phase spans at least min_fc_len points.

    The offending phase is merged with the shorter of its neighbors (ties go
    left); repeats until stable.
    """
    bounds = list(boundaries)
    while len(bounds) > 2:
        lengths = [b - a for a, b in zip(bounds[:-1], bounds[1:])]
        short = [i for i, ln in enumerate(lengths) if ln < min_fc_len]
        if not short:
            break
        i = min(short, key=lambda ix: lengths[ix])
        left_len = lengths[i - 1] if i > 0 else None
        right_len = lengths[i + 1] if i < len(lengths) - 1 else None
        if right_len is None or (left_len is not None and left_len <= right_len):
            removed = bounds.pop(i)  # merge into left neighbor
        else:
            removed = bounds.pop(i + 1)  # merge into right neighbor
        log.info("merged short phase: removed boundary %d", removed)
    return bounds


def build_partition(
    signal: np.ndarray,
    boundaries: list[int],
    min_fc_len: int = MIN_FC_LEN,
) -> PhasePartition:
    """Pearson FC per phase, after merging phases shorter than min_fc_len."""
    signal = np.asarray(signal, dtype=np.float64)
    t = signal.shape[0]
    bounds = [int(b) for b in boundaries]
    if bounds != sorted(bounds) or len(set(bounds)) != len(bounds):
        raise DynphaseError(f"boundaries must be strictly increasing, got {bounds}")
    if not bounds or bounds[0] != 0 or bounds[-1] != t:
        raise DynphaseError(f"boundaries must start at 0 and end at T = {t}")
    if len(bounds) < 2:
        raise DynphaseError("need at least [0, T]")
    bounds = _merge_short_phases(bounds, min_fc_len)
    if bounds[-1] - bounds[0] < min_fc_len:
        raise DynphaseError(f"signal shorter than min_fc_len = {min_fc_len}")
    fcs = [pearson_fc(signal[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]
    return PhasePartition(boundaries=bounds, fc_matrices=fcs)
