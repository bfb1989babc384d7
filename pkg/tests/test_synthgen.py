import numpy as np
import pytest

from dynphase.errors import ConfigError
from dynphase.synthgen import (
    SynthConfig,
    effect_templates,
    generate_dataset,
    generate_subject,
    state_templates,
)

BLOCK = ((0, 9), (1, 10), (2, 11), (3, 12), (4, 13), (5, 14))


def make_cfg(**kw):
    base = dict(
        n_rois=16,
        n_timepoints=400,
        n_states=3,
        min_phase_len=80,
        noise_sigma=0.1,
        discriminative_block=BLOCK,
        discriminative_states=(0,),
        effect_size=0.5,
        seed=7,
    )
    base.update(kw)
    return SynthConfig(**base)


def test_control_subject_plants_no_edges():
    rec = generate_subject(make_cfg(), 0, np.random.default_rng(1))
    assert rec.true_edges == frozenset()
    assert len(rec.true_boundaries) - 1 >= 3


def test_case_subject_records_planted_edges():
    rec = generate_subject(make_cfg(), 1, np.random.default_rng(1))
    assert rec.true_edges == frozenset(BLOCK)


def test_same_seed_bit_identical():
    cfg = make_cfg()
    a = generate_subject(cfg, 1, np.random.default_rng(42))
    b = generate_subject(cfg, 1, np.random.default_rng(42))
    assert np.array_equal(a.signal, b.signal)
    assert a.true_boundaries == b.true_boundaries


def test_dataset_counts_and_balance():
    recs = generate_dataset(make_cfg(), 25)
    assert len(recs) == 50
    assert sum(r.label for r in recs) == 25


def test_dataset_subject_ids_unique():
    recs = generate_dataset(make_cfg(), 25)
    ids = [r.subject_id for r in recs]
    assert len(set(ids)) == len(ids)


def test_dataset_determinism():
    a = generate_dataset(make_cfg(), 3)
    b = generate_dataset(make_cfg(), 3)
    for x, y in zip(a, b):
        assert np.array_equal(x.signal, y.signal)


def test_signal_is_zscored_and_finite():
    rec = generate_subject(make_cfg(), 1, np.random.default_rng(3))
    assert np.isfinite(rec.signal).all()
    assert np.allclose(rec.signal.mean(axis=0), 0.0, atol=1e-9)
    assert np.allclose(rec.signal.std(axis=0), 1.0, atol=1e-9)


def test_boundaries_start_zero_end_t_and_phases_long_enough():
    cfg = make_cfg()
    for seed in range(5):
        rec = generate_subject(cfg, 0, np.random.default_rng(seed))
        bounds = rec.true_boundaries
        assert bounds[0] == 0 and bounds[-1] == cfg.n_timepoints
        lengths = np.diff(bounds)
        assert (lengths >= cfg.min_phase_len).all()
        assert len(rec.true_states) == len(lengths)
        # consecutive phases change state, all states appear
        assert all(a != b for a, b in zip(rec.true_states, rec.true_states[1:]))
        assert set(rec.true_states) == set(range(cfg.n_states))


def test_templates_are_pd_correlations():
    cfg = make_cfg()
    for tmpl in state_templates(cfg) + effect_templates(cfg):
        assert np.allclose(tmpl, tmpl.T)
        assert np.allclose(np.diag(tmpl), 1.0)
        assert np.linalg.eigvalsh(tmpl).min() > 1e-6


def test_planted_separability_direct_statistics():
    # mean block correlation inside discriminative-state phases, by label;
    # computed straight from the signals against the planted ground truth
    cfg = make_cfg(effect_size=0.3)
    recs = generate_dataset(cfg, 25)
    means = {0: [], 1: []}
    for rec in recs:
        vals = []
        spans = zip(rec.true_boundaries[:-1], rec.true_boundaries[1:])
        for (a, b), state in zip(spans, rec.true_states):
            if state not in cfg.discriminative_states:
                continue
            c = np.corrcoef(rec.signal[a:b].T)
            vals.extend(c[i, j] for i, j in BLOCK)
        means[rec.label].append(np.mean(vals))
    gap = np.mean(means[1]) - np.mean(means[0])
    assert gap >= cfg.effect_size / 2


def test_invalid_configs_rejected():
    with pytest.raises(ConfigError):
        make_cfg(n_states=6, min_phase_len=80).validate()  # 480 > 400
    with pytest.raises(ConfigError):
        make_cfg(discriminative_block=((3, 3),)).validate()
    with pytest.raises(ConfigError):
        make_cfg(discriminative_block=((0, 16),)).validate()
    with pytest.raises(ConfigError):
        make_cfg(effect_size=0.0).validate()
    with pytest.raises(ConfigError):
        generate_subject(make_cfg(), 2, np.random.default_rng(0))
