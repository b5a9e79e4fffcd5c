import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from a2gnn.labels import (
    UNKNOWN,
    Box,
    affinity_pairs,
    assemble_box_seeds,
    confident_image_seeds,
    downsample,
    fuse_seeds,
    radius_pairs,
    select_confident,
)


def brute_pairs(h, w, r):
    pts = [(y, x) for y in range(h) for x in range(w)]
    out = []
    for a, b in itertools.combinations(range(len(pts)), 2):
        (y0, x0), (y1, x1) = pts[a], pts[b]
        if (y0 - y1) ** 2 + (x0 - x1) ** 2 <= r * r:
            out.append((a, b))
    return sorted(out)


label_maps = st.integers(1, 9).flatmap(
    lambda h: st.integers(1, 9).flatmap(
        lambda w: st.lists(st.sampled_from([0, 1, 2, UNKNOWN]), min_size=h * w, max_size=h * w).map(
            lambda v: np.array(v, np.uint8).reshape(h, w))))


class TestAssembleBoxSeeds:
    def test_outside_boxes_is_background(self):
        b = Box(1, 2, 2, 5, 5)
        m = assemble_box_seeds([np.full((3, 3), 1, np.uint8)], [b], (8, 8))
        assert m[0, 0] == 0 and m[7, 7] == 0
        assert (m[2:5, 2:5] == 1).all()

    def test_no_boxes(self):
        assert (assemble_box_seeds([], [], (4, 6)) == 0).all()

    def test_nested_boxes_inner_wins(self):
        outer, inner = Box(1, 0, 0, 8, 8), Box(2, 2, 2, 5, 5)
        f_outer = np.full((8, 8), 1, np.uint8)
        f_outer[3, 3] = UNKNOWN
        f_inner = np.full((3, 3), UNKNOWN, np.uint8)
        f_inner[1, 1] = 2
        # listing order must not matter: area decides
        for boxes, frags in (([outer, inner], [f_outer, f_inner]), ([inner, outer], [f_inner, f_outer])):
            m = assemble_box_seeds(frags, boxes, (8, 8))
            assert m[3, 3] == 2
            assert m[2, 2] == 1  # inner fragment unknown there, outer value stays

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            assemble_box_seeds([np.ones((2, 2), np.uint8)], [Box(1, 0, 0, 3, 3)], (4, 4))

    def test_foreign_class_in_fragment(self):
        with pytest.raises(ValueError):
            assemble_box_seeds([np.full((2, 2), 2, np.uint8)], [Box(1, 0, 0, 2, 2)], (4, 4))

    def test_class_out_of_range(self):
        with pytest.raises(ValueError):
            Box(4, 0, 0, 2, 2).validate((4, 4), n_classes=3)


class TestFuseSeeds:
    def test_cases(self):
        box = Box(5, 0, 0, 2, 2)
        m_b = np.zeros((4, 4), np.uint8)
        m_b[:2, :2] = 5
        m_i = np.full((4, 4), UNKNOWN, np.uint8)
        m_i[0, 0] = 7
        m_i[3, 3] = 1
        score = np.zeros((4, 4, 8))
        out = fuse_seeds(m_i, score, m_b, [box])
        assert out[3, 3] == 0  # outside: box seed
        assert out[0, 0] == 5  # class 5 never predicted inside the box
        assert (out[:2, :2] == 5).all()

    def test_agreement_and_unknown(self):
        box = Box(3, 0, 0, 3, 3)
        m_b = np.zeros((4, 4), np.uint8)
        m_b[:3, :3] = 3
        m_i = np.full((4, 4), UNKNOWN, np.uint8)
        m_i[1, 1] = 3
        m_i[0, 0] = 1
        out = fuse_seeds(m_i, np.zeros((4, 4, 4)), m_b, [box])
        assert out[1, 1] == 3
        assert out[0, 0] == UNKNOWN  # disagree, class present in the box
        assert out[2, 2] == UNKNOWN

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            fuse_seeds(np.zeros((3, 3), np.uint8), np.zeros((3, 3, 2)), np.zeros((4, 4), np.uint8), [])

    @given(label_maps, st.integers(0, 2**31))
    @settings(max_examples=60, deadline=None)
    def test_outside_equals_box_seeds(self, m_i, seed):
        rng = np.random.default_rng(seed)
        h, w = m_i.shape
        y0, x0 = int(rng.integers(0, h)), int(rng.integers(0, w))
        box = Box(1, x0, y0, int(rng.integers(x0 + 1, w + 1)), int(rng.integers(y0 + 1, h + 1)))
        frag = np.where(rng.random((box.height, box.width)) < 0.6, 1, UNKNOWN).astype(np.uint8)
        m_b = assemble_box_seeds([frag], [box], (h, w))
        out = fuse_seeds(m_i, np.zeros((h, w, 3)), m_b, [box])
        inside = np.zeros((h, w), bool)
        inside[box.slices()] = True
        assert (out[~inside] == m_b[~inside]).all()


class TestSelectConfident:
    def test_sort_and_cut(self):
        m_i = np.full((1, 10), 1, np.uint8)
        score = np.zeros((1, 10, 2))
        score[0, :, 1] = np.arange(10)
        kept = confident_image_seeds(m_i, score, 0.4)
        order = np.argsort(score[0, :, 1])[::-1][:4]  # oracle: top 40 percent by sorting
        assert set(np.flatnonzero(kept[0] == 1)) == set(order) == {6, 7, 8, 9}

    def test_ratio_one_keeps_all(self):
        m_i = np.array([[0, 1, UNKNOWN], [1, 1, 0]], np.uint8)
        out = confident_image_seeds(m_i, np.full((2, 3, 2), 0.5), 1.0)
        assert (out == m_i).all()

    def test_box_agreement_branch(self):
        m = np.zeros((3, 3), np.uint8)
        out = select_confident(m, m, np.full((3, 3), UNKNOWN, np.uint8), np.zeros((3, 3, 2)))
        assert (out == 0).all()

    def test_in_box_seeds_must_be_confident(self):
        box = Box(1, 0, 0, 5, 1)
        m_b = np.ones((1, 5), np.uint8)
        m_i = np.ones((1, 5), np.uint8)
        score = np.zeros((1, 5, 2))
        score[0, :, 1] = np.arange(5)
        m_f = fuse_seeds(m_i, score, m_b, [box])
        literal = select_confident(m_f, m_b, m_i, score, 0.4)
        checked = select_confident(m_f, m_b, m_i, score, 0.4, boxes=[box])
        assert (literal == 1).all()
        np.testing.assert_array_equal(checked[0], [UNKNOWN, UNKNOWN, UNKNOWN, 1, 1])

    def test_bad_inputs(self):
        m = np.zeros((2, 2), np.uint8)
        with pytest.raises(ValueError):
            confident_image_seeds(m, np.zeros((2, 2, 1)), 0.0)
        bad = np.zeros((2, 2, 1))
        bad[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            confident_image_seeds(m, bad, 0.4)

    @given(label_maps, st.integers(0, 2**31), st.floats(0.05, 1.0))
    @settings(max_examples=60, deadline=None)
    def test_never_invents_labels(self, m_f, seed, ratio):
        rng = np.random.default_rng(seed)
        m_b = rng.choice([0, 1, UNKNOWN], m_f.shape).astype(np.uint8)
        m_i = rng.choice([0, 1, 2, UNKNOWN], m_f.shape).astype(np.uint8)
        out = select_confident(m_f, m_b, m_i, rng.random(m_f.shape + (3,)), ratio)
        assert ((out == m_f) | (out == UNKNOWN)).all()


class TestDownsample:
    def test_identity(self):
        m = np.arange(12, dtype=np.uint8).reshape(3, 4)
        np.testing.assert_array_equal(downsample(m, 1), m)

    def test_checkerboard(self):
        m = (np.indices((4, 4)).sum(0) % 2).astype(np.uint8)
        # cell (0, 0) spans rows/cols 0..1, centre index (0 + 2 - 1) // 2 = 0
        np.testing.assert_array_equal(downsample(m, 2), [[m[0, 0], m[0, 2]], [m[2, 0], m[2, 2]]])

    def test_all_unknown_and_shape(self):
        out = downsample(np.full((5, 7), UNKNOWN, np.uint8), 2)
        assert out.shape == (3, 4) and (out == UNKNOWN).all()

    def test_bad_stride(self):
        with pytest.raises(ValueError):
            downsample(np.zeros((2, 2)), 0)

    @given(label_maps, st.integers(1, 4))
    def test_values_come_from_input(self, m, s):
        assert set(np.unique(downsample(m, s))) <= set(np.unique(m))


class TestAffinityPairs:
    def test_single_labeled_pixel(self):
        m = np.full((3, 3), UNKNOWN, np.uint8)
        m[1, 1] = 0
        assert len(affinity_pairs(m, 5)) == 0

    def test_adjacent_same_class(self):
        m = np.array([[2, 2]], np.uint8)
        p = affinity_pairs(m, 5)
        assert (len(p), int(p.label[0])) == (1, 1)

    def test_3x3_radius_one(self):
        p = affinity_pairs(np.zeros((3, 3), np.uint8), 1)
        assert len(p) == len(brute_pairs(3, 3, 1)) == 12

    @given(st.integers(1, 16), st.integers(1, 16), st.floats(0.5, 5.5))
    @settings(max_examples=50, deadline=None)
    def test_radius_pairs_match_brute_force(self, h, w, r):
        i, j = radius_pairs(h, w, r)
        assert list(zip(i.tolist(), j.tolist())) == brute_pairs(h, w, r)

    @given(label_maps, st.floats(0.5, 3.0))
    @settings(max_examples=50, deadline=None)
    def test_labels_match_brute_force(self, m, r):
        p = affinity_pairs(m, r)
        flat = m.ravel()
        want = [(a, b, int(flat[a] == flat[b])) for a, b in brute_pairs(*m.shape, r)
                if flat[a] != UNKNOWN and flat[b] != UNKNOWN]
        assert list(zip(p.i.tolist(), p.j.tolist(), p.label.tolist())) == want
