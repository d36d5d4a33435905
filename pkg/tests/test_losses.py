import numpy as np
import pytest

from aunet.losses import MAX_TERM, OFFSET, SCALE, mean_loss, offset_cross_entropy
from aunet.tensor import Tensor, grad_check

LN21 = np.log(21.0)


def reference_loss(p, l):
    """Direct elementwise evaluation, independent of the tensor graph."""
    p = np.asarray(p, dtype=np.float64)
    l = np.asarray(l, dtype=np.float64)
    return float(-np.sum(l * np.log((p + 0.05) / 1.05) + (1 - l) * np.log((1.05 - p) / 1.05)))


class TestLossValues:
    def test_zero_when_probs_equal_labels(self):
        labels = np.array([[0.0, 1.0], [1.0, 0.0]])
        loss = offset_cross_entropy(Tensor(labels.copy()), labels)
        assert loss.item() == pytest.approx(0.0, abs=1e-15)

    def test_single_entry_worst_case_is_ln21(self):
        loss = offset_cross_entropy(Tensor(np.array([[0.0]])), np.array([[1.0]]))
        assert loss.item() == pytest.approx(LN21, abs=1e-12)
        loss = offset_cross_entropy(Tensor(np.array([[1.0]])), np.array([[0.0]]))
        assert loss.item() == pytest.approx(LN21, abs=1e-12)
        assert MAX_TERM == pytest.approx(LN21, abs=1e-15)

    def test_uncertain_positive(self):
        loss = offset_cross_entropy(Tensor(np.array([[0.5]])), np.array([[1.0]]))
        assert loss.item() == pytest.approx(-np.log(0.55 / 1.05), abs=1e-12)
        assert loss.item() == pytest.approx(0.6466, abs=5e-5)

    def test_matches_reference_on_1000_random_matrices(self):
        rng = np.random.default_rng(77)
        for _ in range(1000):
            rows = int(rng.integers(1, 8))
            cols = int(rng.integers(1, 14))
            p = rng.uniform(0.0, 1.0, size=(rows, cols))
            l = rng.integers(0, 2, size=(rows, cols)).astype(float)
            got = offset_cross_entropy(Tensor(p), l).item()
            assert got == pytest.approx(reference_loss(p, l), abs=1e-12)

    def test_nonnegative_and_bounded(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            p = rng.uniform(0, 1, size=(4, 12))
            l = rng.integers(0, 2, size=(4, 12)).astype(float)
            loss = offset_cross_entropy(Tensor(p), l).item()
            assert 0.0 <= loss <= LN21 * p.size + 1e-9

    def test_mean_loss_reporting(self):
        p = np.full((2, 3), 0.5)
        l = np.ones((2, 3))
        loss = offset_cross_entropy(Tensor(p), l)
        assert mean_loss(loss, p.size) == pytest.approx(-np.log(0.55 / 1.05), abs=1e-12)


class TestLossGradient:
    def test_finite_gradient_at_endpoints(self):
        p = np.array([[0.0, 1.0], [1.0, 0.0]])
        l = np.array([[1.0, 0.0], [1.0, 0.0]])
        t = Tensor(p, requires_grad=True)
        offset_cross_entropy(t, l).backward()
        assert np.isfinite(t.grad).all()
        # d/dp of -log((p+0.05)/1.05) at p=0 is -1/0.05 = -20
        assert t.grad[0, 0] == pytest.approx(-1.0 / OFFSET, abs=1e-12)
        # d/dp of -log((1.05-p)/1.05) at p=1 is 1/0.05 = 20
        assert t.grad[0, 1] == pytest.approx(1.0 / OFFSET, abs=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_grad_check(self, seed):
        rng = np.random.default_rng(seed)
        p = rng.uniform(0.02, 0.98, size=(3, 4))
        l = rng.integers(0, 2, size=(3, 4)).astype(float)
        err = grad_check(lambda t: offset_cross_entropy(t, l), [p])
        assert err < 1e-4


class TestLossValidation:
    def test_probability_out_of_range_rejected(self):
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            offset_cross_entropy(Tensor(np.array([[1.2]])), np.array([[1.0]]))
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            offset_cross_entropy(Tensor(np.array([[-0.1]])), np.array([[0.0]]))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shape"):
            offset_cross_entropy(Tensor(np.zeros((2, 2))), np.zeros((2, 3)))

    def test_nonbinary_labels_rejected(self):
        with pytest.raises(ValueError, match="binary"):
            offset_cross_entropy(Tensor(np.full((1, 1), 0.5)), np.array([[0.5]]))

    def test_scale_constant(self):
        assert SCALE == 1.05
