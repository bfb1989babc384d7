import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynphase.errors import DimensionError, DynphaseError
from dynphase.segfc import build_partition, pearson_fc, segment
from dynphase.synthgen import SynthConfig, state_templates


class TestSegment:
    def test_count_formula(self):
        x = np.zeros((1000, 4))
        assert len(segment(x, 200, 1)) == 801

    def test_single_window_identity(self):
        x = np.random.default_rng(0).standard_normal((40, 3))
        seq = segment(x, 40, 1)
        assert len(seq) == 1
        assert np.array_equal(seq.segments[0], x)

    def test_strided_slices(self):
        # T=10, w=4, s=3: slices start at 0, 3, 6 (enumerated by hand)
        x = np.arange(10, dtype=float).reshape(10, 1)
        with pytest.warns(UserWarning):
            seq = segment(x, 4, 3)
        assert len(seq) == 3
        starts = [int(s[0, 0]) for s in seq.segments]
        assert starts == [0, 3, 6]

    def test_window_too_large(self):
        with pytest.raises(DimensionError):
            segment(np.zeros((10, 2)), 11)

    def test_lossless_stride1(self):
        x = np.random.default_rng(1).standard_normal((50, 3))
        seq = segment(x, 8, 1)
        firsts = np.stack([s[0] for s in seq.segments])
        assert np.array_equal(firsts, x[: len(seq)])


class TestPearson:
    def test_affine_columns_fully_correlated(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal(100)
        x = np.stack([a, 2 * a + 3], axis=1)
        c = pearson_fc(x)
        assert c[0, 1] == pytest.approx(1.0, abs=1e-12)

    def test_independent_columns_nearly_uncorrelated(self):
        x = np.random.default_rng(3).standard_normal((10000, 6))
        c = pearson_fc(x)
        off = c[~np.eye(6, dtype=bool)]
        assert np.abs(off).max() < 0.05

    def test_constant_column_zeroed_with_warning(self):
        x = np.random.default_rng(4).standard_normal((50, 3))
        x[:, 1] = 7.0
        with pytest.warns(UserWarning):
            c = pearson_fc(x)
        assert c[1, 1] == 1.0
        assert (c[1, [0, 2]] == 0.0).all() and (c[[0, 2], 1] == 0.0).all()

    def test_exact_symmetry_and_range(self):
        x = np.random.default_rng(5).standard_normal((30, 8)) * 100
        c = pearson_fc(x)
        assert np.array_equal(c, c.T)
        assert (np.abs(c) <= 1.0).all()
        assert (np.diag(c) == 1.0).all()

    @given(st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_property_symmetric_unit_diag(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((rng.integers(2, 40), rng.integers(2, 6)))
        c = pearson_fc(x)
        assert np.array_equal(c, c.T)
        assert (np.abs(c) <= 1.0).all()


class TestBuildPartition:
    def test_two_even_phases(self):
        x = np.random.default_rng(6).standard_normal((400, 5))
        part = build_partition(x, [0, 200, 400])
        assert part.phase_count == 2
        assert all(fc.shape == (5, 5) for fc in part.fc_matrices)

    def test_short_phase_merged(self):
        x = np.random.default_rng(7).standard_normal((400, 5))
        part = build_partition(x, [0, 3, 400])
        assert part.boundaries == [0, 400]
        assert part.phase_count == 1

    def test_merge_prefers_shorter_neighbor(self):
        x = np.random.default_rng(8).standard_normal((100, 4))
        # middle phase (48, 50) is short; right neighbor (len 50) is longer
        # than left (len 48), so it merges left: boundary 48 is dropped
        part = build_partition(x, [0, 48, 50, 100])
        assert part.boundaries == [0, 50, 100]

    def test_never_returns_short_phase(self):
        x = np.random.default_rng(9).standard_normal((60, 4))
        part = build_partition(x, [0, 2, 4, 6, 60])
        assert all(b - a >= 5 for a, b in part.phase_spans())

    def test_invalid_boundaries(self):
        x = np.zeros((50, 3))
        with pytest.raises(DynphaseError):
            build_partition(x, [0, 30, 20, 50])
        with pytest.raises(DynphaseError):
            build_partition(x, [0, 20, 49])
        with pytest.raises(DynphaseError):
            build_partition(x, [5, 50])

    def test_stationary_split_fc_close(self):
        # both halves of a one-state signal estimate the same correlation;
        # the bound 3.5 was frozen from a 200-trial pre-build estimate of
        # sampling noise at N=16, L=100 (mean 1.9, max 3.4)
        cfg = SynthConfig(n_rois=16, n_timepoints=400, n_states=2, min_phase_len=100, seed=3)
        chol = np.linalg.cholesky(state_templates(cfg)[0])
        rng = np.random.default_rng(10)
        z = rng.standard_normal((200, 16)) @ chol.T
        part = build_partition(z, [0, 100, 200])
        gap = np.linalg.norm(part.fc_matrices[0] - part.fc_matrices[1])
        assert gap < 3.5
        # while a split across two different states is far apart
        chol2 = np.linalg.cholesky(state_templates(cfg)[1])
        z2 = np.concatenate([z[:100], rng.standard_normal((100, 16)) @ chol2.T])
        part2 = build_partition(z2, [0, 100, 200])
        gap2 = np.linalg.norm(part2.fc_matrices[0] - part2.fc_matrices[1])
        assert gap2 > gap
