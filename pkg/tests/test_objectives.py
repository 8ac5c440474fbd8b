import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xaln.model import AlignmentModel, ModelConfig, AttentionConfig
from xaln.objectives import LossWeights, gkl_loss, ntxent_from_logits, ntxent_loss, total_loss
from xaln.tensor import Tensor, backward, check_gradients, precision


def _t(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def _gkl_oracle(x, xh):
    total = 0.0
    for a, b in zip(np.ravel(x), np.ravel(xh)):
        total += (a * math.log(a / b) if a > 0 else 0.0) - a + b
    return total


class TestGkl:
    def test_identity_is_exactly_zero(self, rng):
        x = rng.random((3, 6, 6)) * 0.98 + 0.01
        assert float(gkl_loss(x, _t(x)).data) == 0.0

    def test_zero_target_reduces_to_reconstruction(self):
        assert float(gkl_loss(np.array([[0.0]]), _t([[0.5]])).data) == pytest.approx(0.5, abs=1e-15)

    def test_half_quarter(self):
        expect = 0.5 * math.log(2) - 0.25
        assert expect == pytest.approx(0.096574, abs=1e-6)
        assert float(gkl_loss(np.array([[0.5]]), _t([[0.25]])).data) == pytest.approx(expect, abs=1e-15)

    def test_batch_average_matches_oracle(self, rng):
        x = rng.random((4, 5, 5))
        x[0, 0, 0] = 0.0
        xh = rng.random((4, 5, 5)) * 0.9 + 0.05
        assert float(gkl_loss(x, _t(xh)).data) == pytest.approx(_gkl_oracle(x, xh) / 4, rel=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_non_negative_and_zero_only_at_equality(self, seed):
        r = np.random.default_rng(seed)
        x = r.random((2, 4, 4))
        xh = r.random((2, 4, 4)) * 0.99 + 0.005
        value = float(gkl_loss(x, _t(xh)).data)
        assert value > 0
        assert float(gkl_loss(xh, _t(xh)).data) == pytest.approx(0.0, abs=1e-12)

    def test_negative_input_rejected(self):
        with pytest.raises(ValueError):
            gkl_loss(np.array([[-0.1]]), _t([[0.5]]))

    def test_gradient(self, f64, rng):
        x = rng.random((2, 3, 3))
        x[0, 0, 0] = 0.0
        xh = _t(rng.random((2, 3, 3)) * 0.8 + 0.1, grad=True)
        res = check_gradients(lambda: gkl_loss(x, xh), [("x_hat", xh)])
        assert res[0].max_rel_error < 1e-4


class TestNtXent:
    @pytest.mark.parametrize("n", [2, 5, 128])
    def test_identical_embeddings_give_log_n(self, rng, n):
        v = np.tile(rng.standard_normal(16), (n, 1))
        with precision(np.float64):
            value = float(ntxent_loss(_t(v), _t(v), 0.1).data)
        assert value == pytest.approx(math.log(n), abs=1e-6)

    def test_orthogonal_pairs_closed_form(self):
        e = np.eye(2)
        with precision(np.float64):
            value = float(ntxent_loss(_t(e), _t(e), 0.1).data)
        assert value == pytest.approx(math.log1p(math.exp(-10)), abs=1e-8)
        assert value == pytest.approx(4.54e-5, rel=1e-3)

    def test_swap_symmetry(self, rng):
        a, w = rng.standard_normal((6, 8)), rng.standard_normal((6, 8))
        with precision(np.float64):
            assert float(ntxent_loss(_t(a), _t(w)).data) == pytest.approx(float(ntxent_loss(_t(w), _t(a)).data), abs=1e-12)

    def test_row_rescaling_invariance(self, rng):
        a, w = rng.standard_normal((5, 8)), rng.standard_normal((5, 8))
        b = a.copy()
        b[2] *= 37.5
        with precision(np.float64):
            assert float(ntxent_loss(_t(a), _t(w)).data) == pytest.approx(float(ntxent_loss(_t(b), _t(w)).data), abs=1e-7)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 6), st.integers(0, 2**31 - 1), st.floats(0.01, 3.0))
    def test_monotone_in_positive_similarity(self, n, seed, bump):
        s = np.random.default_rng(seed).standard_normal((n, n)) * 3
        i = seed % n
        t = s.copy()
        t[i, i] += bump
        with precision(np.float64):
            assert float(ntxent_from_logits(_t(t)).data) < float(ntxent_from_logits(_t(s)).data)

    def test_needs_two_pairs(self):
        with pytest.raises(ValueError):
            ntxent_loss(_t(np.ones((1, 3))), _t(np.ones((1, 3))))

    def test_zero_norm_row_is_finite(self):
        a = np.zeros((2, 3))
        w = np.eye(3)[:2]
        assert math.isfinite(float(ntxent_loss(_t(a), _t(w)).data))

    def test_gradient(self, f64, rng):
        a = _t(rng.standard_normal((4, 6)), grad=True)
        w = _t(rng.standard_normal((4, 6)), grad=True)
        res = check_gradients(lambda: ntxent_loss(a, w, 0.1), [("a", a), ("w", w)])
        assert max(r.max_rel_error for r in res) < 1e-4


@pytest.fixture(scope="module")
def batch():
    r = np.random.default_rng(5)
    x = r.random((4, 96, 96)).astype(np.float32)
    z = r.standard_normal((4, 10, 128)).astype(np.float32)
    mask = np.zeros((4, 10), bool)
    mask[:, :3] = True
    return x, z, mask


class TestTotalLoss:
    def _model(self):
        return AlignmentModel(ModelConfig(tags=AttentionConfig(word_dim=128)), seed=0).eval()

    def test_weights_compose(self, batch):
        m = self._model()
        b = total_loss(m, *batch, LossWeights(5.0, 10.0, 0.1))
        assert float(b.total.data) == pytest.approx(5 * b.reconstruction + 10 * b.contrastive, rel=1e-5)

    def test_zero_contrastive_weight_is_autoencoder(self, batch):
        m = self._model()
        b = total_loss(m, *batch, LossWeights(1.0, 0.0, 0.1))
        assert float(b.total.data) == pytest.approx(b.reconstruction, rel=1e-6)

    def test_zero_reconstruction_weight_is_alignment(self, batch):
        m = self._model()
        b = total_loss(m, *batch, LossWeights(0.0, 1.0, 0.1))
        assert float(b.total.data) == pytest.approx(b.contrastive, rel=1e-6)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(-1.0, 1.0, 0.1)
        with pytest.raises(ValueError):
            LossWeights(1.0, 1.0, 0.0)
