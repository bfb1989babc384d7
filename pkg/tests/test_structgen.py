import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dynphase.errors import DimensionError
from dynphase.segfc import PhasePartition
from dynphase.structgen import (
    StructGenModel,
    StructRegWeights,
    StructureSequence,
    binarize_ste,
    clamp01_ste,
    evolve_structures,
    partition_descriptors,
    phase_descriptor,
    structure_regularizers,
)


def random_partition(n_rois, boundaries, seed=0):
    rng = np.random.default_rng(seed)
    fcs = []
    for _ in range(len(boundaries) - 1):
        a = rng.uniform(-1, 1, size=(n_rois, n_rois))
        a = (a + a.T) / 2
        np.fill_diagonal(a, 1.0)
        fcs.append(a)
    return PhasePartition(boundaries=boundaries, fc_matrices=fcs)


def perturbed_model(n_rois, seed=0, scale=0.1, hidden=4):
    torch.manual_seed(seed)
    model = StructGenModel(n_rois, hidden=hidden)
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        model.fc2.weight.add_(torch.tensor(scale * rng.standard_normal((n_rois**2, hidden))))
        model.fc2.bias.add_(torch.tensor(scale * rng.standard_normal(n_rois**2)))
    return model


class TestDescriptor:
    def test_direct_formula(self):
        a = np.eye(3)
        z = phase_descriptor(20, 50, a, a, 100)
        assert np.allclose(z, [0.35, 0.3, 0.0])

    def test_first_phase_change_is_zero(self):
        z = phase_descriptor(0, 40, np.ones((3, 3)), None, 100)
        assert z[2] == 0.0

    def test_frobenius_change(self):
        a_prev = np.zeros((4, 4))
        a_cur = 0.5 * np.eye(4)
        z = phase_descriptor(0, 10, a_cur, a_prev, 20)
        assert z[2] == pytest.approx(1.0, abs=1e-12)  # sqrt(4 * 0.25)

    def test_partition_descriptors_shape(self):
        part = random_partition(3, [0, 10, 25, 40])
        desc = partition_descriptors(part, 40)
        assert desc.shape == (3, 3)
        assert desc[0, 2] == 0.0 and desc[1, 2] > 0.0


class TestSte:
    def test_binarize_values_exact(self):
        x = torch.tensor([0.5, 0.5 + 1e-12, 0.7, 0.0, 1.0], dtype=torch.float64)
        b = binarize_ste(x)
        assert b.tolist() == [0.0, 1.0, 1.0, 0.0, 1.0]

    def test_clamp_values_exact(self):
        x = torch.tensor([-3.0, 0.0, 0.4, 1.0, 1e6], dtype=torch.float64)
        assert clamp01_ste(x).tolist() == [0.0, 0.0, 0.4, 1.0, 1.0]

    def test_backward_is_identity(self):
        x = torch.tensor([0.2, 0.8, -1.0, 2.0], dtype=torch.float64, requires_grad=True)
        binarize_ste(clamp01_ste(x)).sum().backward()
        assert torch.equal(x.grad, torch.ones_like(x))

    def test_hand_chained_2x2_surrogate(self):
        # loss = sum((mask * A)^2); treating the mask as the identity of S
        # gives dL/dS = 2 * (mask * A) * A, which the autograd STE must match
        s = torch.tensor([[0.3, 0.7], [0.6, 0.2]], dtype=torch.float64, requires_grad=True)
        a = torch.tensor([[1.5, -2.0], [0.5, 3.0]], dtype=torch.float64)
        mask = binarize_ste(s)
        ((mask * a) ** 2).sum().backward()
        hand = 2.0 * ((s.detach() > 0.5).double() * a) * a
        assert torch.allclose(s.grad, hand, atol=0, rtol=0)


class TestEvolve:
    def test_zero_increment_stays_at_base(self):
        torch.manual_seed(0)
        model = StructGenModel(4)  # zero-init output layer -> increments are 0
        part = random_partition(4, [0, 10, 20, 30])
        seq = evolve_structures(model, part)
        for s, b, pos, neg, fc in zip(
            seq.continuous, seq.binary, seq.positive_fc, seq.negative_fc, part.fc_matrices
        ):
            assert torch.all(s == 0.05)
            assert torch.all(b == 0.0)
            assert torch.all(pos == 0.0)
            assert np.array_equal(neg.detach().numpy(), fc)

    def test_threshold_strictness(self):
        torch.manual_seed(0)
        part = random_partition(3, [0, 10, 20])
        exactly_half = StructGenModel(3, init_const=0.5)
        seq = evolve_structures(exactly_half, part)
        assert torch.all(seq.binary[0] == 0.0)  # 0.5 is not > 0.5
        above = StructGenModel(3, init_const=0.7)
        seq = evolve_structures(above, part)
        assert torch.all(seq.binary[0] == 1.0)

    def test_decomposition_bit_exact(self):
        model = perturbed_model(5, seed=1, scale=2.0)
        part = random_partition(5, [0, 15, 40, 60], seed=2)
        seq = evolve_structures(model, part)
        for pos, neg, fc in zip(seq.positive_fc, seq.negative_fc, part.fc_matrices):
            total = (pos + neg).detach().numpy()
            assert np.array_equal(total, fc)

    def test_structures_symmetric_in_unit_interval(self):
        model = perturbed_model(4, seed=3, scale=5.0)
        part = random_partition(4, [0, 10, 20, 30, 40], seed=4)
        seq = evolve_structures(model, part)
        for s in seq.continuous:
            sn = s.detach().numpy()
            assert np.array_equal(sn, sn.T)
            assert sn.min() >= 0.0 and sn.max() <= 1.0

    @given(st.floats(min_value=-1e6, max_value=1e6), st.integers(0, 2**31 - 1))
    @settings(max_examples=20, deadline=None)
    def test_clamp_survives_adversarial_increments(self, bias, seed):
        torch.manual_seed(0)
        model = StructGenModel(3, hidden=4)
        with torch.no_grad():
            model.fc2.bias.fill_(bias)
        part = random_partition(3, [0, 10, 20, 30], seed=seed % 100)
        seq = evolve_structures(model, part)
        for s in seq.continuous:
            assert s.detach().min() >= 0.0 and s.detach().max() <= 1.0

    def test_variable_phase_count_same_model(self):
        model = perturbed_model(4, seed=5)
        for bounds in ([0, 30], [0, 10, 20, 30, 40, 50]):
            part = random_partition(4, bounds, seed=6)
            seq = evolve_structures(model, part)
            assert len(seq) == len(bounds) - 1

    def test_dimension_mismatch(self):
        model = StructGenModel(4)
        with pytest.raises(DimensionError):
            evolve_structures(model, random_partition(5, [0, 10, 20]))


class TestRegularizers:
    def manual_sequence(self, mats):
        tensors = [torch.tensor(m, dtype=torch.float64) for m in mats]
        return StructureSequence(
            continuous=tensors,
            binary=[torch.zeros_like(t) for t in tensors],
            positive_fc=[torch.zeros_like(t) for t in tensors],
            negative_fc=[torch.zeros_like(t) for t in tensors],
            descriptors=np.zeros((len(mats), 3)),
        )

    def test_binary_structures_zero_bin_loss(self):
        seq = self.manual_sequence([np.eye(4), np.ones((4, 4))])
        l_bin, _, _ = structure_regularizers(seq, StructRegWeights())
        assert float(l_bin) == 0.0

    def test_uniform_half_oracles(self):
        seq = self.manual_sequence([np.full((4, 4), 0.5)])
        l_bin, l_ms, l_sp = structure_regularizers(seq, StructRegWeights())
        assert float(l_bin) == pytest.approx(1.0, abs=1e-9)
        assert float(l_sp) == pytest.approx(0.5, abs=1e-9)
        assert float(l_ms) == 0.0  # single phase

    def test_static_sequence_ms_oracle(self):
        mat = np.random.default_rng(7).uniform(0, 1, size=(5, 5))
        seq = self.manual_sequence([mat, mat, mat])
        _, l_ms, _ = structure_regularizers(seq, StructRegWeights(delta_margin=0.1))
        expected = 2.0 * math.log(1.0 + math.exp(-0.1))
        assert float(l_ms) == pytest.approx(expected, abs=1e-9)

    def test_gradients_reach_base_and_mlp(self):
        model = perturbed_model(3, seed=8)
        part = random_partition(3, [0, 10, 20, 30], seed=9)
        seq = evolve_structures(model, part)
        l_bin, l_ms, l_sp = structure_regularizers(seq, StructRegWeights())
        (l_bin + l_ms + l_sp).backward()
        assert model.base.grad is not None and model.base.grad.abs().sum() > 0
        assert model.fc1.weight.grad is not None
