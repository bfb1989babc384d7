"""Synthetic BOLD-like recordings with planted states and planted edges.

Each synthetic cohort shares a set of state correlation templates derived
from the master seed. A subject is a sequence of phases, each phase drawn
iid from a zero-mean multivariate normal with the state's correlation
matrix. Label-1 subjects get raised correlation on a chosen set of ROI
pairs within the designated states, which gives every downstream recovery
test a known ground truth.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DynphaseError

_TEMPLATE_STREAM = 101
_SUBJECT_STREAM = 1000

BLOCK_CORR = 0.6
RAISED_TARGET = 0.95
DIAG_LOAD = 0.05
MIN_EIG = 1e-6


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings. (seed, config) fully determines all output bits.

    ar_coeff adds temporal autocorrelation: innovations are scaled so each
    time point stays marginally zero-mean MVN with the state's correlation
    matrix. BOLD-like smoothness is what makes windows compressible for the
    phase autoencoder; 0 gives white (iid) samples.
    """

    n_rois: int
    n_timepoints: int
    n_states: int = 3
    min_phase_len: int = 80
    noise_sigma: float = 0.1
    ar_coeff: float = 0.6
    ar_spread: float = 0.3
    discriminative_block: tuple[tuple[int, int], ...] = ()
    discriminative_states: tuple[int, ...] = (0,)
    effect_size: float = 0.5
    seed: int = 0

    def state_ar_coeffs(self) -> tuple[float, ...]:
        """Per-state AR coefficients, spread evenly around ar_coeff.

        States differ in temporal dynamics as well as correlation structure,
        mirroring how real brain states differ in both; a reconstruction
        autoencoder can only pick up structure that affects the trajectory.
        """
        if self.n_states == 1 or self.ar_spread == 0.0:
            return (self.ar_coeff,) * self.n_states
        lo = self.ar_coeff - self.ar_spread / 2.0
        step = self.ar_spread / (self.n_states - 1)
        return tuple(
            min(max(lo + s * step, 0.0), 0.95) for s in range(self.n_states)
        )

    def validate(self) -> None:
        if not 0.0 <= self.ar_coeff < 1.0:
            raise ConfigError(f"ar_coeff must lie in [0, 1), got {self.ar_coeff}")
        if self.ar_spread < 0:
            raise ConfigError(f"ar_spread must be >= 0, got {self.ar_spread}")
        if self.ar_spread and not 0.0 <= min(self.state_ar_coeffs()):
            raise ConfigError("state AR coefficients fall below 0")
        if self.n_rois < 2:
            raise ConfigError(f"n_rois must be >= 2, got {self.n_rois}")
        if self.n_states < 2:
            raise ConfigError(f"n_states must be >= 2, got {self.n_states}")
        if self.min_phase_len < 2:
            raise ConfigError(f"min_phase_len must be >= 2, got {self.min_phase_len}")
        if self.n_states * self.min_phase_len > self.n_timepoints:
            raise ConfigError(
                f"n_states*min_phase_len = {self.n_states * self.min_phase_len} "
                f"exceeds n_timepoints = {self.n_timepoints}"
            )
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not 0.0 < self.effect_size <= 1.0:
            raise ConfigError(f"effect_size must lie in (0, 1], got {self.effect_size}")
        for i, j in self.discriminative_block:
            if i == j:
                raise ConfigError(f"discriminative_block contains self-pair ({i},{i})")
            if not (0 <= i < self.n_rois and 0 <= j < self.n_rois):
                raise ConfigError(
                    f"discriminative_block pair ({i},{j}) outside [0, {self.n_rois})"
                )
        for s in self.discriminative_states:
            if not 0 <= s < self.n_states:
                raise ConfigError(
                    f"discriminative state {s} outside [0, {self.n_states})"
                )


@dataclass
class BoldRecording:
    """One subject: a T x N signal with label and optional planted truth."""

    signal: np.ndarray
    label: int
    subject_id: str = "s0000"
    true_boundaries: list[int] | None = None
    true_edges: frozenset[tuple[int, int]] | None = None
    true_states: list[int] | None = None

    @property
    def n_timepoints(self) -> int:
        return self.signal.shape[0]

    @property
    def n_rois(self) -> int:
        return self.signal.shape[1]


def _normalize_pair(i: int, j: int) -> tuple[int, int]:
    return (i, j) if i < j else (j, i)


def _repair_correlation(mat: np.ndarray) -> np.ndarray:
    """Diagonal-load and renormalize until the matrix is a PD correlation."""
    c = mat.copy()
    for _ in range(200):
        d = np.sqrt(np.diag(c))
        c = c / np.outer(d, d)
        np.fill_diagonal(c, 1.0)
        c = (c + c.T) / 2.0
        if np.linalg.eigvalsh(c).min() > MIN_EIG:
            return c
        c = c + DIAG_LOAD * np.eye(c.shape[0])
    raise DynphaseError("correlation repair did not converge")


def _random_block_partition(n_rois: int, rng: np.random.Generator) -> tuple[int, ...]:
    """Contiguous split of [0, N) into 2-4 blocks, returned as cut points."""
    n_blocks = int(rng.integers(2, 5))
    n_blocks = min(n_blocks, n_rois)
    cuts = rng.choice(np.arange(1, n_rois), size=n_blocks - 1, replace=False)
    return tuple(sorted(int(c) for c in cuts))


def _partition_to_matrix(n_rois: int, cuts: tuple[int, ...]) -> np.ndarray:
    bounds = [0, *cuts, n_rois]
    c = np.zeros((n_rois, n_rois))
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        c[lo:hi, lo:hi] = BLOCK_CORR
    np.fill_diagonal(c, 1.0)
    return c


@functools.lru_cache(maxsize=64)
def state_templates(cfg: SynthConfig) -> tuple[np.ndarray, ...]:
    """Per-state correlation templates, shared by every subject of a cohort.

    Block partitions are resampled on collision so no two states share a
    template; otherwise planted boundaries would be unrecoverable.
    """
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, _TEMPLATE_STREAM])
    seen: set[tuple[int, ...]] = set()
    templates = []
    for _ in range(cfg.n_states):
        for _attempt in range(1000):
            cuts = _random_block_partition(cfg.n_rois, rng)
            if cuts not in seen:
                seen.add(cuts)
                break
        else:
            raise DynphaseError("could not draw distinct state partitions")
        templates.append(_repair_correlation(_partition_to_matrix(cfg.n_rois, cuts)))
    return tuple(templates)


@functools.lru_cache(maxsize=64)
def effect_templates(cfg: SynthConfig) -> tuple[np.ndarray, ...]:
    """Label-1 templates: discriminative states blended toward a raised target."""
    base = state_templates(cfg)
    gamma = min(1.0, cfg.effect_size / RAISED_TARGET)
    out = []
    for s, c in enumerate(base):
        if s in cfg.discriminative_states and cfg.discriminative_block:
            target = c.copy()
            for i, j in cfg.discriminative_block:
                target[i, j] = target[j, i] = RAISED_TARGET
            out.append(_repair_correlation((1.0 - gamma) * c + gamma * target))
        else:
            out.append(c)
    return tuple(out)


def _sample_phase_lengths(cfg: SynthConfig, rng: np.random.Generator) -> list[int]:
    """Lengths in [min, 2*min], last phase absorbs the remainder.

    Room is reserved while sampling so at least n_states phases always fit.
    """
    t, m, lo = cfg.n_timepoints, cfg.n_states, cfg.min_phase_len
    lengths: list[int] = []
    used = 0
    while t - used >= lo:
        still_needed = max(0, m - len(lengths) - 1)
        hi = min(2 * lo, t - used - still_needed * lo)
        lengths.append(int(rng.integers(lo, hi + 1)))
        used += lengths[-1]
    lengths[-1] += t - used
    return lengths


def _sample_state_sequence(
    n_phases: int, n_states: int, rng: np.random.Generator
) -> list[int]:
    """First n_states phases cover every state once; after that, any state
    different from its predecessor."""
    states = [int(s) for s in rng.permutation(n_states)[: min(n_phases, n_states)]]
    while len(states) < n_phases:
        nxt = int(rng.integers(0, n_states - 1))
        if nxt >= states[-1]:
            nxt += 1
        states.append(nxt)
    return states


def generate_subject(
    cfg: SynthConfig,
    label: int,
    rng: np.random.Generator,
    subject_id: str = "s0000",
) -> BoldRecording:
    """Draw one synthetic recording; phases, states and noise come from rng."""
    cfg.validate()
    if label not in (0, 1):
        raise ConfigError(f"label must be 0 or 1, got {label}")
    templates = effect_templates(cfg) if label == 1 else state_templates(cfg)
    chols = [np.linalg.cholesky(c) for c in templates]

    lengths = _sample_phase_lengths(cfg, rng)
    states = _sample_state_sequence(len(lengths), cfg.n_states, rng)
    boundaries = [0]
    for ln in lengths:
        boundaries.append(boundaries[-1] + ln)

    phis = cfg.state_ar_coeffs()
    signal = np.empty((cfg.n_timepoints, cfg.n_rois))
    prev = np.zeros(cfg.n_rois)
    t = 0
    for ln, s in zip(lengths, states):
        phi = phis[s]
        innov_scale = math.sqrt(1.0 - phi * phi)
        innov = rng.standard_normal((ln, cfg.n_rois)) @ chols[s].T
        for i in range(ln):
            prev = phi * prev + (innov_scale if t > 0 else 1.0) * innov[i]
            signal[t] = prev
            t += 1
    if cfg.noise_sigma > 0:
        signal = signal + cfg.noise_sigma * rng.standard_normal(signal.shape)

    mean = signal.mean(axis=0)
    std = signal.std(axis=0)
    std[std < 1e-12] = 1.0
    signal = (signal - mean) / std

    if label == 1:
        edges = frozenset(_normalize_pair(i, j) for i, j in cfg.discriminative_block)
    else:
        edges = frozenset()
    return BoldRecording(
        signal=signal,
        label=label,
        subject_id=subject_id,
        true_boundaries=boundaries,
        true_edges=edges,
        true_states=states,
    )


def generate_dataset(cfg: SynthConfig, n_per_class: int) -> list[BoldRecording]:
    """Balanced cohort of 2*n_per_class subjects.

    Per-subject streams are spawned from cfg.seed, so the full dataset is a
    pure function of (cfg, seed); an external rng would break that contract.
    """
    if n_per_class < 1:
        raise ConfigError(f"n_per_class must be >= 1, got {n_per_class}")
    cfg.validate()
    recordings = []
    for idx in range(2 * n_per_class):
        label = 0 if idx < n_per_class else 1
        rng = np.random.default_rng([cfg.seed, _SUBJECT_STREAM + idx])
        recordings.append(
            generate_subject(cfg, label, rng, subject_id=f"s{idx:04d}")
        )
    return recordings
