from collections import Counter

import numpy as np
import pytest
from hypothesis import given, strategies as st

from alquery.core import AnnotationState, LabelVolume, PatchBox, derive_stream
from alquery.oracle import (
    InfeasibleStart,
    annotate,
    build_starting_budget,
    count_annotated_foreground,
    starting_budget_entries,
)


def labels3(n=4, dims=(24, 24, 24)):
    out = []
    for i in range(n):
        lab = np.zeros(dims, dtype=np.uint8)
        lab[2:10, 2:10, 2:10] = 1
        lab[12:18, 12:18, 3 + i:9 + i] = 2
        lab[20:23, 3:6, 18:21] = 3
        out.append(LabelVolume(lab, 3))
    return out


class TestAnnotate:
    def test_background_patch(self):
        labels = [LabelVolume(np.zeros((8, 8, 8)), 1)]
        st0 = annotate(AnnotationState.empty([(8, 8, 8)], 1), [(0, PatchBox((0, 0, 0), (4, 4, 4)))], labels)
        assert st0.fg_voxels == 0 and st0.n_patches == 1 and st0.annotated_voxels == 64

    def test_counts_fresh_foreground(self):
        lab = np.zeros((8, 8, 8), dtype=np.uint8)
        lab.flat[np.random.default_rng(0).choice(64, 17, replace=False)] = 1
        lab = lab.reshape(8, 8, 8)
        # the 17 foreground voxels live in the first 64 voxels, i.e. z = 0, y < 8
        labels = [LabelVolume(lab, 1)]
        box = PatchBox((0, 0, 0), (1, 8, 8))
        s1 = annotate(AnnotationState.empty([(8, 8, 8)], 1), [(0, box)], labels)
        assert s1.fg_voxels == 17
        s2 = annotate(s1, [(0, box)], labels)
        assert s2.fg_voxels == 17 and s2.n_patches == 2

    def test_does_not_mutate_input(self):
        labels = [LabelVolume(np.ones((4, 4, 4)), 1)]
        s0 = AnnotationState.empty([(4, 4, 4)], 1)
        annotate(s0, [(0, PatchBox((0, 0, 0), (2, 2, 2)))], labels)
        assert s0.annotated_voxels == 0 and s0.n_patches == 0

    def test_out_of_bounds(self):
        with pytest.raises(ValueError):
            annotate(AnnotationState.empty([(4, 4, 4)], 1), [(0, PatchBox((3, 0, 0), (2, 2, 2)))],
                     [LabelVolume(np.zeros((4, 4, 4)), 1)])

    @given(st.integers(0, 10_000))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        dims = (10, 9, 8)
        labels = [LabelVolume(rng.integers(0, 3, dims), 2) for _ in range(2)]
        state = AnnotationState.empty([dims] * 2, 2)
        last = 0
        for _ in range(4):
            pairs = []
            for _ in range(3):
                size = tuple(int(rng.integers(1, 5)) for _ in range(3))
                origin = tuple(int(rng.integers(0, d - s + 1)) for d, s in zip(dims, size))
                pairs.append((int(rng.integers(0, 2)), PatchBox(origin, size)))
            state = annotate(state, pairs, labels)
            assert state.fg_voxels == count_annotated_foreground(state, labels)
            assert state.fg_voxels >= last
            last = state.fg_voxels
            assert all(np.array_equal(a, b) for a, b in zip(state.masks, state.derive_masks()))
            per_class = [sum(((lab.labels == c) & m).sum() for lab, m in zip(labels, state.masks)) for c in (1, 2)]
            assert list(state.fg_voxels_per_class) == per_class


class TestStartingBudget:
    def test_composition(self):
        labels = labels3()
        state = build_starting_budget(labels, (4, 4, 4), 10, derive_stream(0, "start"))
        assert state.n_patches == 10
        boxes = list(state.all_boxes())
        for c in (1, 2, 3):
            assert sum((labels[i].labels[b.slices] == c).any() for i, b in boxes) >= 2
        masks = [np.zeros((24, 24, 24), bool) for _ in labels]
        for i, b in boxes:
            assert not masks[i][b.slices].any()
            masks[i][b.slices] = True

    def test_remainder_split(self):
        # 6 class seeds, then 4 more of which floor(0.33 * 4) = 1 is foreground-centred
        state, entries = starting_budget_entries(labels3(), (4, 4, 4), 10, derive_stream(0, "start"))
        channels = [str(e.channel) for e in entries]
        assert channels[:6] == ["fg:1", "fg:1", "fg:2", "fg:2", "fg:3", "fg:3"]
        assert channels[6].startswith("fg:") and channels[7:] == ["random"] * 3
        assert state.n_patches == 10

    def test_single_class(self):
        lab = np.zeros((16, 16, 16), dtype=np.uint8)
        lab[5:9, 5:9, 5:9] = 1
        labels = [LabelVolume(lab, 1)]
        state = build_starting_budget(labels, (2, 2, 2), 2, derive_stream(0, "start"))
        assert state.n_patches == 2
        assert all((lab[b.slices] == 1).any() for _, b in state.all_boxes())

    def test_reproducible(self):
        a = build_starting_budget(labels3(), (4, 4, 4), 12, derive_stream(9, "start"))
        b = build_starting_budget(labels3(), (4, 4, 4), 12, derive_stream(9, "start"))
        assert a.boxes == b.boxes and a.fg_voxels_per_class == b.fg_voxels_per_class

    def test_each_class_twice(self):
        labels = labels3()
        state = build_starting_budget(labels, (3, 3, 3), 20, derive_stream(1, "start"))
        hits = Counter()
        for i, b in state.all_boxes():
            for c in np.unique(labels[i].labels[b.slices]):
                hits[int(c)] += 1
        assert all(hits[c] >= 2 for c in (1, 2, 3))

    def test_infeasible(self):
        lab = np.zeros((8, 8, 8), dtype=np.uint8)
        lab[0, 0, 0] = 1
        with pytest.raises(InfeasibleStart):
            build_starting_budget([LabelVolume(lab, 2)], (2, 2, 2), 4, derive_stream(0, "start"))
        with pytest.raises(InfeasibleStart):
            build_starting_budget(labels3(1), (2, 2, 2), 5, derive_stream(0, "start"))
