import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from pcnet.errors import InvalidInputError
from pcnet.proposals import (
    binary_iou, filter_proposals, load_proposals, mask_stats, proposals_from_json, proposals_to_json,
    rle_decode, rle_encode, save_proposals, soft_iou, synth_proposals, synth_raw_proposals,
)

import oracles


def _block(shape, r0, c0, h, w):
    m = np.zeros(shape, dtype=bool)
    m[r0:r0 + h, c0:c0 + w] = True
    return m


class TestFilter:
    def test_area_threshold(self):
        shape = (100, 100)
        raw = [_block(shape, 0, 0, 20, 25), _block(shape, 30, 0, 30, 50), _block(shape, 0, 50, 40, 50)]
        assert [int(m.sum()) for m in raw] == [500, 1500, 2000]
        ps = filter_proposals(raw, area_min=1000, iou_dedupe=0.8, p=5)
        assert ps.n_valid == 2
        assert ps.p == 5
        np.testing.assert_array_equal(ps.masks[0], raw[2])
        np.testing.assert_array_equal(ps.masks[1], raw[1])
        assert not ps.masks[2:].any()
        np.testing.assert_array_equal(ps.valid, [True, True, False, False, False])

    def test_duplicates_collapse(self):
        m = _block((40, 40), 2, 2, 20, 20)
        ps = filter_proposals([m, m.copy(), m.copy()], area_min=1, iou_dedupe=0.8, p=4)
        assert ps.n_valid == 1

    def test_top_p_by_area(self):
        shape = (160, 160)
        raw = []
        for k in range(50):
            m = np.zeros(shape, dtype=bool)
            m.ravel()[k * 500:k * 500 + 1000 + 3 * k] = True  # distinct areas, pairwise overlap small
            raw.append(m)
        ps = filter_proposals(raw, area_min=1000, iou_dedupe=0.8, p=40)
        kept_areas = sorted((int(m.sum()) for m in ps.masks[ps.valid]), reverse=True)
        assert kept_areas == sorted((int(m.sum()) for m in raw), reverse=True)[:40]

    def test_mixed_resolution(self):
        with pytest.raises(InvalidInputError):
            filter_proposals([np.ones((4, 4)), np.ones((5, 4))], 1, 0.8, 2)

    def test_matches_oracle(self):
        rng = np.random.default_rng(0)
        for case in range(50):
            n = int(rng.integers(1, 9))
            raw = []
            for _ in range(n):
                r0, c0 = rng.integers(0, 10, size=2)
                h, w = rng.integers(1, 8, size=2)
                raw.append(_block((16, 16), r0, c0, h, w))
            if rng.random() < 0.3:
                raw.append(raw[0].copy())
            area_min, p = int(rng.integers(1, 12)), int(rng.integers(1, 6))
            ps = filter_proposals(raw, area_min, 0.8, p)
            kept = oracles.filter_proposals(raw, area_min, 0.8, p)
            assert ps.n_valid == len(kept), case
            for slot, i in enumerate(kept):
                np.testing.assert_array_equal(ps.masks[slot], raw[i])
            assert not ps.masks[len(kept):].any()


class TestSoftIoU:
    def test_identity(self):
        m = torch.as_tensor(_block((8, 8), 1, 1, 3, 4), dtype=torch.float64)
        assert float(soft_iou(m, m)) == 1.0

    def test_half(self):
        m = torch.as_tensor(_block((8, 8), 1, 1, 3, 4), dtype=torch.float64)
        np.testing.assert_allclose(float(soft_iou(0.5 * m, m)), 0.5, atol=1e-15)

    def test_disjoint(self):
        a = torch.as_tensor(_block((8, 8), 0, 0, 2, 2), dtype=torch.float64)
        b = torch.as_tensor(_block((8, 8), 5, 5, 2, 2), dtype=torch.float64)
        assert float(soft_iou(a, b)) == 0.0

    def test_empty_union(self):
        z = torch.zeros(4, 4, dtype=torch.float64)
        assert float(soft_iou(z, z)) == 0.0

    def test_binary_matches_pixel_count_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            a = rng.random((16, 16)) < 0.4
            b = rng.random((16, 16)) < 0.4
            got = float(soft_iou(torch.as_tensor(a, dtype=torch.float64), torch.as_tensor(b)))
            assert abs(got - oracles.binary_iou(a, b)) <= 1e-12
            assert abs(binary_iou(a, b) - oracles.binary_iou(a, b)) <= 1e-12

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, (5, 5), elements=st.floats(0, 1)),
           arrays(np.float64, (5, 5), elements=st.floats(0, 1)))
    def test_symmetric_bounded_and_oracle(self, r, m):
        a = float(soft_iou(torch.as_tensor(r), torch.as_tensor(m)))
        b = float(soft_iou(torch.as_tensor(m), torch.as_tensor(r)))
        assert a == pytest.approx(b, abs=1e-12)
        assert 0.0 <= a <= 1.0
        assert abs(a - oracles.soft_iou(r, m)) <= 1e-12


class TestSynth:
    def _gts(self):
        return [_block((64, 64), 5, 5, 12, 12), _block((64, 64), 30, 30, 14, 10)]

    def test_raw_count(self):
        assert len(synth_raw_proposals(self._gts(), 2, seed=3)) == 4

    def test_deterministic(self):
        a = synth_proposals(self._gts(), 4, seed=3, area_min=10, p=8)
        b = synth_proposals(self._gts(), 4, seed=3, area_min=10, p=8)
        np.testing.assert_array_equal(a.masks, b.masks)
        np.testing.assert_array_equal(a.valid, b.valid)

    def test_one_pixel_dilation_is_deduped(self):
        from scipy import ndimage
        gt = _block((64, 64), 10, 10, 20, 20)
        dil = ndimage.binary_dilation(gt, iterations=1)
        assert binary_iou(gt, dil) > 0.8
        ps = filter_proposals([gt, dil], area_min=1, iou_dedupe=0.8, p=4)
        assert ps.n_valid == 1
        np.testing.assert_array_equal(ps.masks[0], dil)  # larger area kept

    def test_needs_gt(self):
        with pytest.raises(InvalidInputError):
            synth_raw_proposals([], 2, 0)


class TestRLE:
    def test_starts_with_zero_run(self):
        m = np.array([[1, 1, 0], [0, 1, 1]], dtype=bool)
        assert rle_encode(m) == [0, 2, 2, 2]
        np.testing.assert_array_equal(rle_decode([0, 2, 2, 2], 2, 3), m)

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.bool_, st.tuples(st.integers(1, 9), st.integers(1, 9))))
    def test_round_trip(self, m):
        runs = rle_encode(m)
        assert sum(runs) == m.size
        np.testing.assert_array_equal(rle_decode(runs, *m.shape), m)

    def test_bad_length(self):
        with pytest.raises(InvalidInputError):
            rle_decode([1, 2], 2, 2)

    def test_file_round_trip(self, tmp_path):
        masks = [_block((10, 12), 1, 2, 3, 4), _block((10, 12), 5, 5, 4, 4)]
        save_proposals(tmp_path / "p.json", "img7", masks)
        image_id, back = load_proposals(tmp_path / "p.json")
        assert image_id == "img7"
        for a, b in zip(masks, back):
            np.testing.assert_array_equal(a, b)
        doc = proposals_to_json("img7", masks)
        assert doc["height"] == 10 and doc["width"] == 12
        assert [d["area"] for d in doc["masks"]] == [12, 16]

    def test_area_mismatch(self):
        doc = proposals_to_json("x", [_block((4, 4), 0, 0, 2, 2)])
        doc["masks"][0]["area"] = 3
        with pytest.raises(InvalidInputError):
            proposals_from_json(doc)


def test_mask_stats():
    s = mask_stats(_block((10, 10), 2, 3, 4, 5))
    assert s.area == 20
    assert s.bbox == (2, 3, 5, 7)
    assert mask_stats(np.zeros((3, 3))).bbox is None
