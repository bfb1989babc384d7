"""Phase attention, important-phase aggregation, classifier, and losses.

A shared scalar scorer produces per-phase softmax weights for each of the
three embedding streams. Phases whose retained-stream weight exceeds the
uniform level 1/W form the important set (argmax fallback when empty); their
renormalized weights aggregate the retained embeddings into the subject
vector fed to the linear classifier. Two InfoNCE-style terms supervise the
embedding space: a reference-adjusted supervised term on retained
aggregates, discounted by the similarity of the original-graph aggregates,
and an alignment term pulling the complementary aggregate toward the
original one.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .structgen import StructRegWeights, StructureSequence, structure_regularizers


@dataclass
class ContrastConfig:
    w_ref: float = 1.0
    w_usl: float = 1.0
    tau: float = 0.1
    beta: float = 0.65
    lambda_str: float = 1.0

    def validate(self) -> None:
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        for name in ("w_ref", "w_usl", "lambda_str"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite >= 0, got {v}")


class AttentionModel(nn.Module):
    """Linear-Tanh-Linear scalar scorer plus the final linear classifier."""

    def __init__(self, embed_dim: int = 32, hidden: int = 32, n_classes: int = 2):
        super().__init__()
        self.embed_dim = embed_dim
        self.score_in = nn.Linear(embed_dim, hidden)
        self.score_out = nn.Linear(hidden, 1)
        self.classifier = nn.Linear(embed_dim, n_classes)
        self.double()

    def scores(self, h: torch.Tensor) -> torch.Tensor:
        """(W, d) embeddings -> (W,) scalar attention scores."""
        return self.score_out(torch.tanh(self.score_in(h))).squeeze(1)


@dataclass
class EmbeddingBundle:
    """Per-phase embeddings, attention weights, and the three aggregates."""

    h_plus: torch.Tensor   # (W, d)
    h_minus: torch.Tensor
    h_zero: torch.Tensor
    alpha_plus: torch.Tensor  # (W,) softmax weights
    alpha_minus: torch.Tensor
    alpha_zero: torch.Tensor
    important_set: list[int]
    h_pp: torch.Tensor        # aggregate over important retained phases
    h_zero_agg: torch.Tensor  # aggregate over all original phases
    h_minus_agg: torch.Tensor

    @property
    def phase_count(self) -> int:
        return self.h_plus.shape[0]


def attend_and_aggregate(
    model: AttentionModel,
    h_plus: torch.Tensor,
    h_minus: torch.Tensor,
    h_zero: torch.Tensor,
) -> EmbeddingBundle:
    """Score phases, pick the important set, and build the three aggregates."""
    w = h_plus.shape[0]
    if w < 1:
        raise ValueError("need at least one phase")
    alpha_p = torch.softmax(model.scores(h_plus), dim=0)
    alpha_m = torch.softmax(model.scores(h_minus), dim=0)
    alpha_z = torch.softmax(model.scores(h_zero), dim=0)

    uniform = 1.0 / w
    alpha_vals = alpha_p.detach().numpy()
    important = [t for t in range(w) if alpha_vals[t] > uniform]
    if not important:
        important = [int(np.argmax(alpha_vals))]

    sel = alpha_p[important]
    tilde = sel / sel.sum()
    h_pp = (tilde.unsqueeze(1) * h_plus[important]).sum(dim=0)
    h_zero_agg = (alpha_z.unsqueeze(1) * h_zero).sum(dim=0)
    h_minus_agg = (alpha_m.unsqueeze(1) * h_minus).sum(dim=0)
    return EmbeddingBundle(
        h_plus=h_plus,
        h_minus=h_minus,
        h_zero=h_zero,
        alpha_plus=alpha_p,
        alpha_minus=alpha_m,
        alpha_zero=alpha_z,
        important_set=important,
        h_pp=h_pp,
        h_zero_agg=h_zero_agg,
        h_minus_agg=h_minus_agg,
    )


def classify(model: AttentionModel, h_pp: torch.Tensor) -> torch.Tensor:
    """Class probability vector for one subject aggregate."""
    return torch.softmax(model.classifier(h_pp), dim=-1)


def _row_normalize(x: torch.Tensor) -> torch.Tensor:
    """Unit rows; zero-norm rows stay zero (their cosines become 0)."""
    norms = x.norm(dim=1, keepdim=True)
    if bool((norms < 1e-12).any()):
        warnings.warn("zero-norm embedding; its cosine similarities are set to 0")
    return torch.where(norms < 1e-12, torch.zeros_like(x), x / norms.clamp_min(1e-12))


def _cosine_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return _row_normalize(a) @ _row_normalize(b).T


def reference_logits(
    h_pp: torch.Tensor, h_zero: torch.Tensor, cfg: ContrastConfig
) -> torch.Tensor:
    """Pairwise reference-adjusted logits: (cos_pp - beta * cos_zero) / tau."""
    return (
        _cosine_matrix(h_pp, h_pp) - cfg.beta * _cosine_matrix(h_zero, h_zero)
    ) / cfg.tau


def contrastive_loss(
    bundles: list[EmbeddingBundle],
    labels: np.ndarray | list[int],
    cfg: ContrastConfig,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(L_str, L_ref, L_usl) over a batch of subject bundles.

    L_ref: for each subject with at least one same-label peer, InfoNCE over
    reference-adjusted logits (cos of retained aggregates minus beta times
    cos of original aggregates, over temperature), denominator over all
    other subjects; averaged over contributing subjects. L_usl: InfoNCE
    aligning each original aggregate with its own complementary aggregate,
    denominator over the whole batch, summed over subjects.
    """
    cfg.validate()
    labels = np.asarray(labels)
    b = len(bundles)
    if b < 1:
        raise ValueError("need at least one subject")
    h_pp = torch.stack([bu.h_pp for bu in bundles])
    h_zero = torch.stack([bu.h_zero_agg for bu in bundles])
    h_minus = torch.stack([bu.h_minus_agg for bu in bundles])

    zero64 = torch.zeros((), dtype=torch.float64)
    ref_logits = reference_logits(h_pp, h_zero, cfg)
    off_diag = ~torch.eye(b, dtype=torch.bool)
    terms = []
    for i in range(b):
        positives = [p for p in range(b) if p != i and labels[p] == labels[i]]
        if not positives:
            continue
        lse = torch.logsumexp(ref_logits[i][off_diag[i]], dim=0)
        log_probs = ref_logits[i, positives] - lse
        terms.append(-log_probs.mean())
    if terms:
        l_ref = torch.stack(terms).mean()
    else:
        warnings.warn("no same-label pairs in batch; L_ref contributes 0")
        l_ref = zero64

    usl_logits = _cosine_matrix(h_zero, h_minus) / cfg.tau
    l_usl = (torch.logsumexp(usl_logits, dim=1) - usl_logits.diagonal()).sum()

    return cfg.w_ref * l_ref + cfg.w_usl * l_usl, l_ref, l_usl


def total_loss(
    model: AttentionModel,
    bundles: list[EmbeddingBundle],
    labels: np.ndarray | list[int],
    cfg: ContrastConfig,
    reg_weights: StructRegWeights,
    sequences: list[StructureSequence],
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Cross-entropy + weighted contrastive and structure terms.

    Structure regularizers are averaged over the batch so the loss scale
    does not depend on batch size.
    """
    labels_t = torch.tensor(np.asarray(labels), dtype=torch.long)
    logits = model.classifier(torch.stack([bu.h_pp for bu in bundles]))
    l_ce = F.cross_entropy(logits, labels_t)
    l_str, l_ref, l_usl = contrastive_loss(bundles, labels, cfg)
    l_bin = l_ms = l_sp = torch.zeros((), dtype=torch.float64)
    for seq in sequences:
        b_, m_, s_ = structure_regularizers(seq, reg_weights)
        l_bin, l_ms, l_sp = l_bin + b_, l_ms + m_, l_sp + s_
    l_bin, l_ms, l_sp = (x / len(sequences) for x in (l_bin, l_ms, l_sp))
    total = (
        l_ce
        + cfg.lambda_str * l_str
        + reg_weights.lambda_bin * l_bin
        + reg_weights.lambda_ms * l_ms
        + reg_weights.lambda_sp * l_sp
    )
    parts = {
        "ce": l_ce,
        "str": l_str,
        "ref": l_ref,
        "usl": l_usl,
        "bin": l_bin,
        "ms": l_ms,
        "sp": l_sp,
    }
    return total, parts
