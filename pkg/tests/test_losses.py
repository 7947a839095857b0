import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from pcnet.errors import DegenerateInputError, InvalidInputError, NumericError
from pcnet.losses import (
    alignment_scores, ambiguity, cls_loss, iad_loss, iad_terms, index_vector, ras_loss, total_loss,
)

import oracles

T = lambda a: torch.as_tensor(np.asarray(a, dtype=np.float64))  # noqa: E731


def _random_instance(rng, h=4, w=4, p=3):
    r = rng.random((h, w))
    masks = (rng.random((p, h, w)) < 0.35).astype(float)
    valid = np.ones(p, dtype=bool)
    if rng.random() < 0.3:
        valid[-1] = False
        masks[-1] = 0.0
    return r, masks, valid


class TestAlignmentScores:
    def test_example(self):
        al = alignment_scores(T([[1.0, 0.2], [0.0, 0.5]]), T([[[1, 0], [0, 0]]]))
        assert float(al.scores[0]) == 1.0

    def test_padding_scores_zero(self):
        r = T([[1.0, 0.2], [0.0, 0.5]])
        masks = T([[[1, 0], [0, 0]], [[0, 0], [0, 0]]])
        al = alignment_scores(r, masks, torch.tensor([True, False]))
        assert float(al.scores[1]) == 0.0
        assert int(al.fg_index) == 0

    def test_lowest_index_tiebreak(self):
        r = T([[0.3, 0.9], [0.9, 0.0]])
        masks = T([[[1, 0], [0, 0]], [[0, 1], [0, 0]], [[0, 0], [1, 0]]])
        al = alignment_scores(r, masks)
        np.testing.assert_allclose(al.scores.numpy(), [0.3, 0.9, 0.9])
        assert int(al.fg_index) == 1

    def test_invalid_never_foreground(self):
        r = T([[1.0, 0.0], [0.0, 0.0]])
        masks = T([[[1, 0], [0, 0]], [[0, 1], [0, 0]]])
        al = alignment_scores(r, masks, torch.tensor([False, True]))
        assert int(al.fg_index) == 1

    def test_no_valid(self):
        with pytest.raises(DegenerateInputError):
            alignment_scores(T(np.ones((2, 2))), T(np.zeros((2, 2, 2))), torch.tensor([False, False]))

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            r, masks, valid = _random_instance(rng)
            al = alignment_scores(T(r), T(masks), torch.as_tensor(valid))
            scores, fg, fg_mask, bg_mask = oracles.alignment(r, masks, valid)
            np.testing.assert_allclose(al.scores.numpy(), scores, rtol=0, atol=1e-12)
            assert int(al.fg_index) == fg
            np.testing.assert_array_equal(al.fg_mask.numpy(), fg_mask)
            np.testing.assert_array_equal(al.bg_mask.numpy(), bg_mask)
            amb = float(ambiguity(T(r), al.fg_mask, al.bg_mask))
            assert abs(amb - oracles.ambiguity(r, fg_mask, bg_mask)) <= 1e-12

    def test_batched_matches_single(self):
        rng = np.random.default_rng(2)
        rs, ms = rng.random((3, 2, 4, 4)), (rng.random((3, 1, 5, 4, 4)) < 0.4).astype(float)
        batched = alignment_scores(T(rs), T(ms))
        for i in range(3):
            for n in range(2):
                single = alignment_scores(T(rs[i, n]), T(ms[i, 0]))
                np.testing.assert_array_equal(batched.scores[i, n].numpy(), single.scores.numpy())
                assert int(batched.fg_index[i, n]) == int(single.fg_index)


class TestAmbiguity:
    def test_perfect(self):
        fg = T([[1, 1], [0, 0]])
        bg = T([[0, 0], [0, 1]])
        assert float(ambiguity(fg.clone(), fg, bg)) == 0.0

    def test_symmetric(self):
        r = T([[0.5, 0.5], [0.5, 0.5]])
        fg = T([[1, 0], [0, 0]])
        bg = T([[0, 1], [0, 0]])
        assert float(ambiguity(r, fg, bg)) == 1.0

    def test_margin(self):
        # soft IoU 0.6 with the foreground and 0.2 with the background
        r = T([[1.0, 1.0, 1.0, 0.0, 0.0]]).reshape(1, 5)
        fg = T([[1, 1, 1, 1, 1]])
        bg = T([[1, 0, 0, 0, 0]])
        assert oracles.soft_iou(r, fg) == pytest.approx(0.6)
        np.testing.assert_allclose(oracles.soft_iou(r, bg), 1 / 3)
        bg = T([[0, 0, 1, 1, 1]])
        np.testing.assert_allclose(oracles.soft_iou(r, bg), 0.2)
        np.testing.assert_allclose(float(ambiguity(r, fg, bg)), 0.6, atol=1e-15)

    def test_clamped(self):
        r = T([[0.0, 1.0]])
        assert float(ambiguity(r, T([[1, 0]]), T([[0, 1]]))) == 1.0


class TestRaS:
    @pytest.mark.parametrize("ambs, expected", [
        ([0.8, 0.5, 0.3], 0.0),
        ([0.3, 0.5], 0.2),
        ([0.2, 0.6, 0.4], 0.2),
    ])
    def test_examples(self, ambs, expected):
        np.testing.assert_allclose(float(ras_loss(T(ambs))), expected, atol=1e-15)

    def test_single_stage_is_zero(self, caplog):
        assert float(ras_loss(T([0.4]))) == 0.0
        assert "2 stages" in caplog.text

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.integers(2, 6), elements=st.floats(0, 1)))
    def test_range_and_oracle(self, ambs):
        v = float(ras_loss(T(ambs)))
        assert 0.0 <= v <= 1.0
        assert abs(v - oracles.ras(list(ambs))) <= 1e-12


class TestIndexVector:
    def test_one_hot_forward(self):
        np.testing.assert_array_equal(index_vector(T([0.1, 0.7, 0.2])).detach().numpy(), [0, 1, 0])

    def test_ties(self):
        np.testing.assert_array_equal(index_vector(T([0.4, 0.4, 0.4])).detach().numpy(), [1, 0, 0])

    def test_skips_invalid(self):
        y = index_vector(T([0.9, 0.1, 0.2]), torch.tensor([False, True, True]))
        np.testing.assert_array_equal(y.detach().numpy(), [0, 0, 1])

    def test_straight_through_gradient(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            s = T(rng.random(6)).requires_grad_(True)
            g = T(rng.normal(size=6))
            (index_vector(s) * g).sum().backward()
            np.testing.assert_allclose(s.grad.numpy(), g.numpy(), rtol=0, atol=1e-15)

    def test_reference_form_matches_finite_differences(self):
        """With sg(S) frozen as a constant, the S-path is linear: FD recovers g."""
        rng = np.random.default_rng(6)
        s0 = rng.random(5)
        ref = T(s0)
        g = rng.normal(size=5)
        f = lambda x: float((index_vector(T(x), reference=ref) * T(g)).sum())  # noqa: E731
        np.testing.assert_allclose(oracles.central_difference(f, s0), g, rtol=1e-6, atol=1e-8)

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-5, 5)))
    def test_forward_is_exact_one_hot(self, s):
        y = index_vector(T(s)).detach().numpy()
        assert set(np.unique(y)) <= {0.0, 1.0}
        assert y.sum() == 1.0
        assert int(np.argmax(y)) == int(np.argmax(s))


class TestIaD:
    def test_same_argmax(self):
        y = index_vector(T([0.1, 0.9, 0.0]))
        assert float(iad_terms(y, index_vector(T([0.2, 0.5, 0.1])))) == 1.0

    def test_different_argmax(self):
        y = index_vector(T([0.1, 0.9, 0.0]))
        assert float(iad_terms(y, index_vector(T([0.8, 0.5, 0.1])))) == -1.0

    def test_no_partners(self):
        y = index_vector(T([0.1, 0.9, 0.0]))
        assert float(iad_loss(y, torch.zeros(0, 3, dtype=torch.float64))) == 0.0

    def test_mean_over_partners(self):
        y = index_vector(T([0.1, 0.9, 0.0]))
        ds = torch.stack([index_vector(T([0.0, 1.0, 0.0])), index_vector(T([1.0, 0.0, 0.0]))])
        assert float(iad_loss(y, ds)) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(InvalidInputError):
            iad_loss(T([1.0, 0.0]), T([[1.0, 0.0, 0.0]]))

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, 4, elements=st.floats(0, 1)), arrays(np.float64, 4, elements=st.floats(0, 1)))
    def test_pair_term_depends_only_on_argmax(self, a, d):
        term = float(iad_terms(index_vector(T(a)), index_vector(T(d))))
        assert term in (-1.0, 1.0)
        assert term == (1.0 if np.argmax(a) == np.argmax(d) else -1.0)


class TestCls:
    def test_single(self):
        np.testing.assert_allclose(float(cls_loss(T([[0.0]]))), math.log(2), atol=1e-15)

    def test_saturation(self):
        y = torch.full((4, 4), -60.0, dtype=torch.float64)
        y.fill_diagonal_(60.0)
        assert float(cls_loss(y)) < 1e-20

    def test_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            y = rng.normal(scale=3, size=(3, 3))
            assert abs(float(cls_loss(T(y))) - oracles.cls(y.tolist())) <= 1e-12

    def test_non_square(self):
        with pytest.raises(InvalidInputError):
            cls_loss(T(np.zeros((2, 3))))

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, (4, 4), elements=st.floats(-20, 20)), st.permutations(range(4)))
    def test_permutation_equivariant_and_nonnegative(self, y, perm):
        perm = list(perm)
        a = float(cls_loss(T(y)))
        b = float(cls_loss(T(y[np.ix_(perm, perm)])))
        assert a >= 0.0
        assert a == pytest.approx(b, abs=1e-12)


class TestTotal:
    def test_sums(self):
        np.testing.assert_allclose(float(total_loss(T(0.7), T(0.2), T(1.0))), 1.9)
        np.testing.assert_allclose(float(total_loss(T(0.7), T(0.0), T(-1.0))), -0.3)

    def test_nan(self):
        with pytest.raises(NumericError, match="ras"):
            total_loss(T(0.7), T(float("nan")), T(0.0))
