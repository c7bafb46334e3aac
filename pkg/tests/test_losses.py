"""
Unit tests for the loss terms and the contrastive tuple sampler.
"""

import math

import numpy as np
import pytest
import torch

from src.gradcore import ContractViolation
from src.losses import (
    FAKE,
    REAL,
    ContrastiveTuple,
    Labels,
    LossWeights,
    classification_stage2,
    contrastive,
    contrastive_batch,
    cross_entropy,
    l1_loss,
    sample_tuples,
    total_stage1,
    total_stage2,
)


def vec(*values):
    return torch.tensor(values, dtype=torch.float64)


def brute_force_contrastive(tuples, a):
    """Per-tuple python evaluation of the margin loss, averaged."""
    total = 0.0
    for t in tuples:
        d_pos = math.sqrt(sum((x - y) ** 2 for x, y in zip(t.anchor.tolist(), t.positive.tolist())))
        d_neg = math.sqrt(sum((x - y) ** 2 for x, y in zip(t.anchor.tolist(), t.negative.tolist())))
        total += max(0.0, a + d_pos - d_neg)
    return total / len(tuples)


def balanced_batch(n_per_class=8, methods=2):
    """Reals first, then fakes cycling through method classes 1..methods."""
    y = [REAL] * n_per_class + [FAKE] * n_per_class
    s = [0] * n_per_class + [1 + (i % methods) for i in range(n_per_class)]
    return y, s


class TestCrossEntropy:
    """Test the classification loss."""

    def test_uniform_logits(self):
        """Test ln 2 for uniform two-class logits."""
        loss = cross_entropy(torch.zeros(4, 2), [0, 1, 1, 0])
        assert loss.item() == pytest.approx(math.log(2), abs=1e-6)

    def test_reference_value(self):
        """Test logits [1, 0] with label 0."""
        loss = cross_entropy(torch.tensor([[1.0, 0.0]]), [0])
        assert loss.item() == pytest.approx(0.313262, abs=1e-6)

    def test_label_out_of_range(self):
        """Test that labels >= K raise."""
        with pytest.raises(ContractViolation, match="labels"):
            cross_entropy(torch.zeros(2, 3), [0, 3])

    def test_batch_mismatch(self):
        """Test that label and row counts must agree."""
        with pytest.raises(ContractViolation):
            cross_entropy(torch.zeros(2, 2), [0])

    def test_gradcheck(self):
        """Test analytic gradients against finite differences."""
        logits = torch.randn(5, 3, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(lambda z: cross_entropy(z, [0, 1, 2, 1, 0]), (logits,))


class TestL1:
    """Test the reconstruction loss."""

    def test_identical(self):
        """Test zero loss for identical tensors."""
        x = torch.rand(2, 3, 4, 4)
        assert l1_loss(x, x.clone()).item() == 0.0

    def test_constant_offset(self):
        """Test that a uniform offset of 0.25 gives 0.25."""
        x = torch.zeros(2, 3, 4, 4)
        assert l1_loss(x, x + 0.25).item() == pytest.approx(0.25)

    def test_zero_difference_subgradient(self):
        """Test sign(0) = 0 at exact matches."""
        target = torch.zeros(3)
        recon = torch.tensor([0.0, 1.0, -1.0], requires_grad=True)
        l1_loss(target, recon).backward()
        assert recon.grad.tolist() == pytest.approx([0.0, 1 / 3, -1 / 3])

    def test_shape_mismatch(self):
        """Test that differing shapes raise."""
        with pytest.raises(ContractViolation, match="L1"):
            l1_loss(torch.zeros(2, 2), torch.zeros(4))

    def test_gradcheck(self):
        """Test analytic gradients away from the kink."""
        target = torch.rand(4, 4, dtype=torch.float64)
        recon = (target + torch.rand(4, 4, dtype=torch.float64) + 0.1).requires_grad_()
        assert torch.autograd.gradcheck(lambda r: l1_loss(target, r), (recon,))


class TestContrastive:
    """Test the margin contrastive loss."""

    def test_satisfied_margin(self):
        """Test zero loss when the negative is far enough."""
        t = ContrastiveTuple("1u", vec(0, 0), vec(0, 0), vec(10, 0))
        assert contrastive(t, 3.0).item() == 0.0

    def test_reference_value(self):
        """Test anchor=pos=(0,0), neg=(1,0), a=3 gives 2."""
        t = ContrastiveTuple("0c", vec(0, 0), vec(0, 0), vec(1, 0))
        assert contrastive(t, 3.0).item() == pytest.approx(2.0)

    def test_collapsed_vectors_give_margin(self):
        """Test that identical vectors cost exactly a."""
        t = ContrastiveTuple("1c", vec(1, 2), vec(1, 2), vec(1, 2))
        assert contrastive(t, 0.7).item() == pytest.approx(0.7)

    def test_empty_batch(self):
        """Test that no tuples gives zero."""
        assert contrastive_batch([], 3.0).item() == 0.0

    def test_unknown_role(self):
        """Test that only the four roles are accepted."""
        with pytest.raises(ContractViolation, match="role"):
            ContrastiveTuple("2u", vec(0), vec(0), vec(0))

    def test_length_mismatch(self):
        """Test that vectors must have equal length."""
        with pytest.raises(ContractViolation):
            ContrastiveTuple("0u", vec(0, 0), vec(0), vec(0, 0))

    def test_batch_matches_brute_force(self):
        """Test the batched loss against per-tuple evaluation on 100 random batches."""
        rng = np.random.default_rng(7)
        for _ in range(100):
            count = int(rng.integers(1, 12))
            dim = int(rng.integers(1, 6))
            tuples = [
                ContrastiveTuple(
                    "0u",
                    torch.from_numpy(rng.normal(size=dim)),
                    torch.from_numpy(rng.normal(size=dim)),
                    torch.from_numpy(rng.normal(size=dim)),
                )
                for _ in range(count)
            ]
            a = float(rng.uniform(0.0, 3.0))
            assert contrastive_batch(tuples, a).item() == pytest.approx(brute_force_contrastive(tuples, a), abs=1e-6)

    def test_gradcheck(self):
        """Test gradients of the batched loss with respect to all vectors."""
        generator = torch.Generator().manual_seed(3)
        anchors, positives, negatives = (
            torch.randn(6, 4, dtype=torch.float64, generator=generator).requires_grad_() for _ in range(3)
        )

        def loss(a, p, q):
            tuples = [ContrastiveTuple("1u", a[i], p[i], q[i]) for i in range(6)]
            return contrastive_batch(tuples, 1.5)

        assert torch.autograd.gradcheck(loss, (anchors, positives, negatives))


class TestSampleTuples:
    """Test the contrastive tuple sampler."""

    def pooled(self, n, dim=3, seed=0):
        generator = torch.Generator().manual_seed(seed)
        return {"u": torch.randn(n, dim, generator=generator), "c": torch.randn(n, dim, generator=generator)}

    def test_balanced_batch_count(self):
        """Test that 8 reals and 8 fakes give 32 tuples."""
        y, s = balanced_batch()
        tuples = sample_tuples(self.pooled(16), y, s, np.random.default_rng(0))
        assert len(tuples) == 32
        assert sorted({t.role for t in tuples}) == ["0c", "0u", "1c", "1u"]

    def test_positive_and_negative_pools(self):
        """Test same-method positives for fakes and cross-class negatives for everyone."""
        y, s = balanced_batch()
        for t in sample_tuples(self.pooled(16), y, s, np.random.default_rng(1)):
            i, p, q = t.indices
            assert p != i
            assert y[p] == y[i]
            assert y[q] != y[i]
            if y[i] == FAKE:
                assert s[p] == s[i]

    def test_roles_share_draw(self):
        """Test that an anchor's u and c tuples use the same partners."""
        y, s = balanced_batch()
        tuples = sample_tuples(self.pooled(16), y, s, np.random.default_rng(2))
        for u_tuple, c_tuple in zip(tuples[::2], tuples[1::2]):
            assert u_tuple.role[1] == "u" and c_tuple.role[1] == "c"
            assert u_tuple.indices == c_tuple.indices

    def test_vectors_come_from_pooled(self):
        """Test that tuple vectors are rows of the pooled maps."""
        y, s = balanced_batch()
        pooled = self.pooled(16)
        for t in sample_tuples(pooled, y, s, np.random.default_rng(3)):
            i, p, q = t.indices
            key = t.role[1]
            assert torch.equal(t.anchor, pooled[key][i])
            assert torch.equal(t.positive, pooled[key][p])
            assert torch.equal(t.negative, pooled[key][q])

    def test_deterministic(self):
        """Test equal seeds give equal tuples."""
        y, s = balanced_batch()
        first = sample_tuples(self.pooled(16), y, s, np.random.default_rng(11))
        second = sample_tuples(self.pooled(16), y, s, np.random.default_rng(11))
        assert [t.indices for t in first] == [t.indices for t in second]

    def test_lonely_anchors_skipped(self):
        """Test that a fake without a same-method partner is skipped."""
        y = [REAL, REAL, FAKE, FAKE, FAKE]
        s = [0, 0, 1, 1, 2]
        tuples = sample_tuples(self.pooled(5), y, s, np.random.default_rng(0))
        assert len(tuples) == 8
        assert all(t.indices[0] != 4 for t in tuples)

    def test_single_class_batch(self):
        """Test that a batch without fakes yields no tuples."""
        tuples = sample_tuples(self.pooled(3), [REAL] * 3, [0] * 3, np.random.default_rng(0))
        assert tuples == []

    def test_inconsistent_labels(self):
        """Test that S must be 0 exactly for reals."""
        with pytest.raises(ContractViolation, match="Inconsistent"):
            sample_tuples(self.pooled(2), [REAL, FAKE], [1, 1], np.random.default_rng(0))

    def test_pooled_size_mismatch(self):
        """Test that pooled maps must cover the batch."""
        with pytest.raises(ContractViolation, match="pooled"):
            sample_tuples(self.pooled(3), [REAL, FAKE], [0, 1], np.random.default_rng(0))


class TestTotals:
    """Test the weighted stage totals."""

    def test_stage1_reference(self):
        """Test L_cls=0.5 and L_rec=1.0 with default weights."""
        assert total_stage1(0.5, 1.0, LossWeights()) == pytest.approx(0.8, abs=1e-12)

    def test_stage2_all_ones(self):
        """Test every component equal to 1 with default weights."""
        assert total_stage2(1.0, 1.0, 1.0, 1.0, LossWeights()) == pytest.approx(1.45, abs=1e-12)

    def test_stage2_reference(self):
        """Test a mixed set of components."""
        total = total_stage2(0.693, 0.693, 3.0, 0.2, LossWeights())
        assert total == pytest.approx(0.9723, abs=1e-9)

    def test_classification_part(self):
        """Test the stage-2 classification sum on its own."""
        assert classification_stage2(1.0, 2.0, LossWeights()) == pytest.approx(2.1)

    def test_tensor_totals_keep_gradients(self):
        """Test that tensor components stay differentiable."""
        cls = torch.tensor(0.5, requires_grad=True)
        rec = torch.tensor(1.0, requires_grad=True)
        total_stage1(cls, rec, LossWeights()).backward()
        assert cls.grad.item() == pytest.approx(1.0)
        assert rec.grad.item() == pytest.approx(0.3)

    def test_composed_gradcheck(self):
        """Test gradients through a full stage-2 total."""
        logits = torch.randn(4, 2, dtype=torch.float64, requires_grad=True)
        recon = (torch.rand(3, dtype=torch.float64) + 0.2).requires_grad_()

        def loss(z, r):
            cls = cross_entropy(z, [0, 1, 0, 1])
            return total_stage2(cls, cls, torch.zeros((), dtype=torch.float64),
                                l1_loss(torch.zeros(3, dtype=torch.float64), r), LossWeights())

        assert torch.autograd.gradcheck(loss, (logits, recon))

    def test_negative_weight(self):
        """Test that negative weights are rejected."""
        with pytest.raises(ContractViolation, match="rho5"):
            LossWeights(rho5=-0.1).validate()

    def test_weights_from_dict(self):
        """Test that loading weights keeps defaults for missing keys."""
        weights = LossWeights.from_dict({"rho2": "0.5", "extra": 1})
        assert weights.rho2 == 0.5
        assert weights.margin == 3.0


class TestLabels:
    """Test the label pair container."""

    def test_length_mismatch(self):
        """Test that y and S must align."""
        with pytest.raises(ContractViolation):
            Labels([0, 1], [1])

    def test_consistent(self):
        """Test a valid pair constructs."""
        assert Labels([FAKE, REAL], [2, 0]).s == [2, 0]
