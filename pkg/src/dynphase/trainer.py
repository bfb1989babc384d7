"""Two-stage training, cross-validation, metrics, and gradient checking.

Stage one pretrains the phase-partition autoencoder; stage two trains the
structure generator, shared encoder, attention, and classifier end to end.
Model selection (the changepoint threshold) happens on an inner validation
split, never on the held-out fold.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .app import (
    TAU_C_GRID,
    AppLossWeights,
    AppModel,
    ChangepointConfig,
    app_loss,
    detect_changepoints,
    pretrain_app,
    segments_tensor,
)
from .encoder import EncoderModel, encode_sequence
from .errors import ConfigError, DynphaseError, TrainingError
from .objective import (
    AttentionModel,
    ContrastConfig,
    EmbeddingBundle,
    attend_and_aggregate,
    classify,
    contrastive_loss,
    total_loss,
)
from .segfc import MIN_FC_LEN, PhasePartition, build_partition, segment
from .structgen import StructGenModel, StructRegWeights, evolve_structures, structure_regularizers
from .synthgen import BoldRecording


@dataclass
class TrainConfig:
    """Everything the two-stage pipeline needs; defaults are desk-scale."""

    window: int = 40
    step: int = 1
    latent_dim: int = 32
    state_dim: int = 16
    app_hidden: int = 64
    embed_dim: int = 32
    e2e_channels: int = 8
    e2n_channels: int = 8
    encoder_hidden: int = 64
    attn_hidden: int = 32
    struct_hidden: int = 64
    alpha_delta: float = 0.01
    init_const: float = 0.05
    app_epochs: int = 100
    main_epochs: int = 150
    select_epochs: int | None = None  # epochs for threshold selection runs
    learning_rate: float = 1e-3
    batch_size: int = 8
    grad_clip: float = 5.0
    seed: int = 0
    folds: int = 5
    tau_c_grid: tuple[float, ...] = TAU_C_GRID
    min_fc_len: int = MIN_FC_LEN
    app_weights: AppLossWeights = field(default_factory=AppLossWeights)
    reg_weights: StructRegWeights = field(default_factory=StructRegWeights)
    contrast: ContrastConfig = field(default_factory=ContrastConfig)

    def validate(self) -> None:
        if self.folds < 2:
            raise ConfigError(f"folds must be >= 2, got {self.folds}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if not self.tau_c_grid:
            raise ConfigError("tau_c_grid must be nonempty")
        if self.window < 1 or self.step < 1:
            raise ConfigError("window and step must be >= 1")
        self.app_weights.validate()
        self.reg_weights.validate()
        self.contrast.validate()


@dataclass
class EvalReport:
    """Cross-validation outcome; serialized by the CLI as structured text."""

    fold_accuracy: list[float]
    fold_auc: list[float]
    confusions: list[list[list[int]]]  # per fold, [[tn, fp], [fn, tp]]
    selected_tau_c: list[float]
    mean_accuracy: float
    std_accuracy: float
    mean_auc: float
    std_auc: float
    seed: int
    loss_curves: dict[str, list[float]]

    def validate(self) -> None:
        for v in (*self.fold_accuracy, *self.fold_auc, self.mean_accuracy, self.mean_auc):
            if not 0.0 <= v <= 1.0:
                raise DynphaseError(f"metric {v} outside [0, 1]")
        if self.std_accuracy < 0 or self.std_auc < 0:
            raise DynphaseError("negative std")


def compute_metrics(scores, labels) -> tuple[float, float]:
    """Accuracy at threshold 0.5 and rank-statistic AUC with ties at 0.5."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.min() < 0 or scores.max() > 1:
        raise DynphaseError("scores must lie in [0, 1]")
    preds = (scores > 0.5).astype(np.int64)
    acc = float((preds == labels).mean())
    pos, neg = scores[labels == 1], scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise DynphaseError("AUC undefined: need at least one subject of each class")
    greater = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    auc = float((greater + 0.5 * ties) / (len(pos) * len(neg)))
    return acc, auc


def confusion_matrix(scores, labels) -> list[list[int]]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    preds = (scores > 0.5).astype(np.int64)
    tn = int(((preds == 0) & (labels == 0)).sum())
    fp = int(((preds == 1) & (labels == 0)).sum())
    fn = int(((preds == 0) & (labels == 1)).sum())
    tp = int(((preds == 1) & (labels == 1)).sum())
    return [[tn, fp], [fn, tp]]


def stratified_folds(
    labels: np.ndarray, n_folds: int, rng: np.random.Generator
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Round-robin class-stratified folds; returns (train_idx, test_idx) pairs."""
    labels = np.asarray(labels)
    assignment = np.empty(len(labels), dtype=np.int64)
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(len(idx))]
        assignment[idx] = np.arange(len(idx)) % n_folds
    out = []
    for f in range(n_folds):
        test = np.flatnonzero(assignment == f)
        train = np.flatnonzero(assignment != f)
        out.append((train, test))
    return out


def stratified_split(
    indices: np.ndarray,
    labels: np.ndarray,
    train_frac: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Class-stratified split of `indices`; each class keeps >= 1 on both sides."""
    indices = np.asarray(indices)
    train, val = [], []
    for cls in np.unique(labels[indices]):
        idx = indices[labels[indices] == cls]
        idx = idx[rng.permutation(len(idx))]
        n_train = int(round(train_frac * len(idx)))
        n_train = min(max(n_train, 1), len(idx) - 1)
        train.extend(idx[:n_train])
        val.extend(idx[n_train:])
    return np.sort(np.array(train)), np.sort(np.array(val))


class MainModel(nn.Module):
    """Structure generator + shared encoder + attention/classifier."""

    def __init__(self, cfg: TrainConfig, n_rois: int):
        super().__init__()
        self.structgen = StructGenModel(
            n_rois,
            hidden=cfg.struct_hidden,
            alpha_delta=cfg.alpha_delta,
            init_const=cfg.init_const,
        )
        self.encoder = EncoderModel(
            n_rois,
            embed_dim=cfg.embed_dim,
            e2e_channels=cfg.e2e_channels,
            e2n_channels=cfg.e2n_channels,
            hidden=cfg.encoder_hidden,
        )
        self.attention = AttentionModel(
            embed_dim=cfg.embed_dim, hidden=cfg.attn_hidden, n_classes=2
        )

    def forward_subject(
        self, partition: PhasePartition, hard_masks: bool = True
    ) -> tuple[EmbeddingBundle, "StructureSequence"]:
        seq = evolve_structures(self.structgen, partition, hard_masks=hard_masks)
        h_plus, h_minus, h_zero = encode_sequence(self.encoder, seq, partition)
        bundle = attend_and_aggregate(self.attention, h_plus, h_minus, h_zero)
        return bundle, seq


def subject_partitions(
    app_model: AppModel,
    recordings: list[BoldRecording],
    cfg: TrainConfig,
    tau_c: float,
) -> list[PhasePartition]:
    """Partition every recording with a frozen phase model and one threshold."""
    latents = subject_state_latents(app_model, recordings, cfg)
    return partitions_from_latents(latents, recordings, cfg, tau_c)


def subject_state_latents(
    app_model: AppModel, recordings: list[BoldRecording], cfg: TrainConfig
) -> list[np.ndarray]:
    out = []
    with torch.no_grad():
        for rec in recordings:
            segs = segment(rec.signal, cfg.window, cfg.step)
            s, _ = app_model.encode(segments_tensor(segs))
            out.append(s.numpy())
    return out


def partitions_from_latents(
    latents: list[np.ndarray],
    recordings: list[BoldRecording],
    cfg: TrainConfig,
    tau_c: float,
) -> list[PhasePartition]:
    parts = []
    cp_cfg = ChangepointConfig(tau_c=tau_c)
    for s, rec in zip(latents, recordings):
        bounds = detect_changepoints(
            s, cp_cfg, cfg.window, cfg.step, rec.n_timepoints, min_gap=cfg.min_fc_len
        )
        parts.append(build_partition(rec.signal, bounds, min_fc_len=cfg.min_fc_len))
    return parts


def train_main(
    model: MainModel,
    partitions: list[PhasePartition],
    labels: np.ndarray,
    cfg: TrainConfig,
    epochs: int,
    seed: int,
) -> dict[str, list[float]]:
    """End-to-end training of the main model; returns per-epoch loss curves."""
    labels = np.asarray(labels)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    shuffler = np.random.default_rng([seed, 29])
    terms = ("total", "ce", "str", "bin", "ms", "sp")
    curves: dict[str, list[float]] = {t: [] for t in terms}
    for epoch in range(epochs):
        order = shuffler.permutation(len(partitions))
        sums = dict.fromkeys(terms, 0.0)
        count = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            if len(batch) < 2:
                continue  # contrastive terms need pairs; remainder joins next epoch
            opt.zero_grad()
            bundles, seqs = [], []
            for idx in batch:
                bundle, seq = model.forward_subject(partitions[idx])
                bundles.append(bundle)
                seqs.append(seq)
            loss, parts = total_loss(
                model.attention, bundles, labels[batch], cfg.contrast, cfg.reg_weights, seqs
            )
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite main loss at epoch {epoch}")
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            sums["total"] += float(loss.detach()) * len(batch)
            for t in terms[1:]:
                sums[t] += float(parts[t].detach()) * len(batch)
            count += len(batch)
        for t in terms:
            curves[t].append(sums[t] / max(count, 1))
    return curves


def predict_scores(model: MainModel, partitions: list[PhasePartition]) -> np.ndarray:
    """Class-1 probability per subject."""
    out = []
    with torch.no_grad():
        for part in partitions:
            bundle, _ = model.forward_subject(part)
            out.append(float(classify(model.attention, bundle.h_pp)[1]))
    return np.array(out)


def _fold_seed(master: int, *parts: int) -> int:
    s = master
    for p in parts:
        s = (s * 1000003 + p + 1) % (2**31 - 1)
    return s


def _pretrain_fold_app(
    recordings: list[BoldRecording],
    idx: np.ndarray,
    cfg: TrainConfig,
    seed: int,
) -> tuple[AppModel, list[float]]:
    torch.manual_seed(seed)
    model = AppModel(
        recordings[0].n_rois,
        cfg.window,
        latent_dim=cfg.latent_dim,
        state_dim=cfg.state_dim,
        hidden_channels=cfg.app_hidden,
    )
    seqs = [segment(recordings[i].signal, cfg.window, cfg.step) for i in idx]
    model, curve = pretrain_app(
        model,
        seqs,
        cfg.app_weights,
        epochs=cfg.app_epochs,
        lr=cfg.learning_rate,
        batch_size=cfg.batch_size,
        seed=seed,
        grad_clip=cfg.grad_clip,
    )
    return model, curve


def _fit_candidate(
    recordings: list[BoldRecording],
    partitions: list[PhasePartition],
    train_idx: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    epochs: int,
    seed: int,
) -> MainModel:
    torch.manual_seed(seed)
    model = MainModel(cfg, recordings[0].n_rois)
    train_main(
        model, [partitions[i] for i in train_idx], labels[train_idx], cfg, epochs, seed
    )
    return model


def select_tau_c(
    recordings: list[BoldRecording],
    latents: list[np.ndarray],
    inner_train: np.ndarray,
    inner_val: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    seed: int,
) -> tuple[float, dict[float, float]]:
    """Pick the threshold whose trained model scores best on inner validation.

    Ties resolve to the earliest grid entry for determinism.
    """
    select_epochs = cfg.select_epochs if cfg.select_epochs is not None else cfg.main_epochs
    val_acc: dict[float, float] = {}
    for gi, tau in enumerate(cfg.tau_c_grid):
        partitions = partitions_from_latents(latents, recordings, cfg, tau)
        model = _fit_candidate(
            recordings, partitions, inner_train, labels, cfg, select_epochs,
            _fold_seed(seed, gi),
        )
        scores = predict_scores(model, [partitions[i] for i in inner_val])
        acc, _ = compute_metrics(scores, labels[inner_val])
        val_acc[tau] = acc
    best = max(cfg.tau_c_grid, key=lambda t: val_acc[t])
    return best, val_acc


def run_cv(recordings: list[BoldRecording], cfg: TrainConfig) -> EvalReport:
    """Stratified k-fold evaluation of the full two-stage pipeline."""
    cfg.validate()
    labels = np.array([r.label for r in recordings])
    for cls in (0, 1):
        if (labels == cls).sum() < cfg.folds:
            raise ConfigError(
                f"class {cls} has {(labels == cls).sum()} subjects, need >= {cfg.folds}"
            )
    fold_rng = np.random.default_rng([cfg.seed, 7])
    folds = stratified_folds(labels, cfg.folds, fold_rng)

    fold_acc, fold_auc, confusions, taus = [], [], [], []
    curves: dict[str, list[float]] = {}
    for f, (train_idx, test_idx) in enumerate(folds):
        if len(np.intersect1d(train_idx, test_idx)) > 0:
            raise DynphaseError("train/test fold overlap")
        split_rng = np.random.default_rng([cfg.seed, 11, f])
        inner_train, inner_val = stratified_split(train_idx, labels, 0.8, split_rng)

        app_model, app_curve = _pretrain_fold_app(
            recordings, inner_train, cfg, _fold_seed(cfg.seed, f, 1)
        )
        latents = subject_state_latents(app_model, recordings, cfg)
        best_tau, _ = select_tau_c(
            recordings, latents, inner_train, inner_val, labels, cfg,
            _fold_seed(cfg.seed, f, 2),
        )
        partitions = partitions_from_latents(latents, recordings, cfg, best_tau)
        refit_seed = _fold_seed(cfg.seed, f, 3)
        torch.manual_seed(refit_seed)
        model = MainModel(cfg, recordings[0].n_rois)
        main_curves = train_main(
            model,
            [partitions[i] for i in train_idx],
            labels[train_idx],
            cfg,
            cfg.main_epochs,
            refit_seed,
        )

        scores = predict_scores(model, [partitions[i] for i in test_idx])
        acc, auc = compute_metrics(scores, labels[test_idx])
        fold_acc.append(acc)
        fold_auc.append(auc)
        confusions.append(confusion_matrix(scores, labels[test_idx]))
        taus.append(best_tau)
        curves[f"fold{f}/app"] = app_curve
        for term, values in main_curves.items():
            curves[f"fold{f}/{term}"] = values
    report = EvalReport(
        fold_accuracy=fold_acc,
        fold_auc=fold_auc,
        confusions=confusions,
        selected_tau_c=taus,
        mean_accuracy=float(np.mean(fold_acc)),
        std_accuracy=float(np.std(fold_acc)),
        mean_auc=float(np.mean(fold_auc)),
        std_auc=float(np.std(fold_auc)),
        seed=cfg.seed,
        loss_curves=curves,
    )
    report.validate()
    return report


# ---------------------------------------------------------------------------
# Finite-difference gradient checking


def analytic_grads(loss_fn, params: list[torch.Tensor]) -> list[np.ndarray]:
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return [
        np.zeros(p.shape) if g is None else g.detach().numpy().copy()
        for p, g in zip(params, grads)
    ]


def finite_difference_grads(
    loss_fn, params: list[torch.Tensor], step: float = 1e-5
) -> list[np.ndarray]:
    """Central differences of loss_fn with respect to every parameter entry."""
    out = []
    for p in params:
        flat = p.data.view(-1)
        g = np.zeros(flat.numel())
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + step
            with torch.no_grad():
                up = float(loss_fn())
            flat[i] = orig - step
            with torch.no_grad():
                down = float(loss_fn())
            flat[i] = orig
            g[i] = (up - down) / (2.0 * step)
        out.append(g.reshape(tuple(p.shape)))
    return out


def max_relative_error(
    analytic: list[np.ndarray], numeric: list[np.ndarray]
) -> float:
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst


@dataclass
class GradcheckEntry:
    term: str
    max_rel_error: float
    tolerance: float
    passed: bool


@dataclass
class GradcheckReport:
    entries: list[GradcheckEntry]
    seed: int

    @property
    def all_passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def lines(self) -> list[str]:
        return [
            f"{e.term:12s} max_rel_err={e.max_rel_error:.3e} "
            f"tol={e.tolerance:.0e} {'PASS' if e.passed else 'FAIL'}"
            for e in self.entries
        ]


def _random_partition(
    rng: np.random.Generator, n_rois: int, boundaries: list[int]
) -> PhasePartition:
    fcs = []
    for _ in range(len(boundaries) - 1):
        a = rng.uniform(-1, 1, size=(n_rois, n_rois))
        a = (a + a.T) / 2.0
        np.fill_diagonal(a, 1.0)
        fcs.append(a)
    return PhasePartition(boundaries=boundaries, fc_matrices=fcs)


def _check_term(
    entries: list[GradcheckEntry],
    term: str,
    loss_fn,
    params: list[torch.Tensor],
    tolerance: float = 1e-4,
    corrupt: bool = False,
) -> None:
    ana = analytic_grads(loss_fn, params)
    if corrupt:
        ana[0].reshape(-1)[0] += 1e-2
    num = finite_difference_grads(loss_fn, params)
    err = max_relative_error(ana, num)
    entries.append(GradcheckEntry(term, err, tolerance, err <= tolerance))


def gradcheck_suite(seed: int = 0, corrupt: bool = False) -> GradcheckReport:
    """Finite-difference checks of every loss term on micro instances.

    With corrupt=True the first analytic gradient entry of the reconstruction
    term is deliberately offset, which must flag that term (harness
    sensitivity check). The straight-through estimator is excluded: the
    composed check runs with soft masks, and the STE contract is covered
    structurally by the structgen tests.
    """
    rng = np.random.default_rng([seed, 41])
    entries: list[GradcheckEntry] = []

    # Eq. 1 terms: micro autoencoder, N=4, w=8, d=6, K=3 segments
    torch.manual_seed(_fold_seed(seed, 101))
    app = AppModel(4, 8, latent_dim=6, state_dim=3, hidden_channels=8)
    segs = torch.tensor(rng.standard_normal((3, 8, 4)))
    app_params = list(app.parameters())
    app_parts = lambda: app_loss(app, segs, AppLossWeights())[1]  # noqa: E731
    _check_term(entries, "recon", lambda: app_parts()["recon"], app_params, corrupt=corrupt)
    _check_term(entries, "smooth", lambda: app_parts()["smooth"], app_params)
    _check_term(entries, "orth", lambda: app_parts()["orth"], app_params)
    _check_term(
        entries, "app_total", lambda: app_loss(app, segs, AppLossWeights())[0], app_params
    )

    # structure regularizers through the full recursion, N=3, W=3
    torch.manual_seed(_fold_seed(seed, 102))
    sg = StructGenModel(3, hidden=4)
    with torch.no_grad():
        sg.fc2.weight.add_(torch.tensor(0.1 * rng.standard_normal((9, 4))))
        sg.fc2.bias.add_(torch.tensor(0.1 * rng.standard_normal(9)))
    part = _random_partition(rng, 3, [0, 8, 16, 25])
    wts = StructRegWeights()
    sg_params = list(sg.parameters())

    def reg_terms() -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return structure_regularizers(evolve_structures(sg, part), wts)

    _check_term(entries, "bin", lambda: reg_terms()[0], sg_params)
    _check_term(entries, "ms", lambda: reg_terms()[1], sg_params)
    _check_term(entries, "sp", lambda: reg_terms()[2], sg_params)

    # contrastive terms on leaf embeddings, B=4, d=4
    left = [
        torch.tensor(rng.standard_normal((4, 4)), requires_grad=True) for _ in range(3)
    ]
    hpp, hz, hm = left
    con_labels = np.array([0, 0, 1, 1])
    ccfg = ContrastConfig()

    def bundles_from_leaves() -> list[EmbeddingBundle]:
        out = []
        for i in range(4):
            out.append(
                EmbeddingBundle(
                    h_plus=hpp[i : i + 1],
                    h_minus=hm[i : i + 1],
                    h_zero=hz[i : i + 1],
                    alpha_plus=torch.ones(1, dtype=torch.float64),
                    alpha_minus=torch.ones(1, dtype=torch.float64),
                    alpha_zero=torch.ones(1, dtype=torch.float64),
                    important_set=[0],
                    h_pp=hpp[i],
                    h_zero_agg=hz[i],
                    h_minus_agg=hm[i],
                )
            )
        return out

    _check_term(
        entries, "ref",
        lambda: contrastive_loss(bundles_from_leaves(), con_labels, ccfg)[1], left,
    )
    _check_term(
        entries, "usl",
        lambda: contrastive_loss(bundles_from_leaves(), con_labels, ccfg)[2], left,
    )

    # cross-entropy through the linear classifier on leaf aggregates
    torch.manual_seed(_fold_seed(seed, 103))
    attn = AttentionModel(embed_dim=4, hidden=4, n_classes=2)
    ce_labels = torch.tensor([0, 1, 1, 0])
    ce_params = [hpp, *attn.classifier.parameters()]
    _check_term(
        entries, "ce",
        lambda: nn.functional.cross_entropy(attn.classifier(hpp), ce_labels), ce_params,
    )

    # composed objective through the full main pipeline with soft masks
    torch.manual_seed(_fold_seed(seed, 104))
    micro = TrainConfig(
        embed_dim=3, e2e_channels=2, e2n_channels=2, encoder_hidden=8,
        attn_hidden=4, struct_hidden=4,
    )
    model = MainModel(micro, 4)
    with torch.no_grad():
        model.structgen.fc2.weight.add_(torch.tensor(0.1 * rng.standard_normal((16, 4))))
        model.structgen.fc2.bias.add_(torch.tensor(0.1 * rng.standard_normal(16)))
    parts_b = [_random_partition(rng, 4, [0, 10, 20]) for _ in range(3)]
    comp_labels = np.array([0, 0, 1])

    def composed() -> torch.Tensor:
        bundles, seqs = [], []
        for p in parts_b:
            bundle, seq = model.forward_subject(p, hard_masks=False)
            bundles.append(bundle)
            seqs.append(seq)
        return total_loss(
            model.attention, bundles, comp_labels, micro.contrast, micro.reg_weights, seqs
        )[0]

    _check_term(entries, "composed", composed, list(model.parameters()), tolerance=1e-3)

    return GradcheckReport(entries=entries, seed=seed)
