"""Patch-level candidate scoring with 3D summed-area tables, plus overlap checks."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .core import Dims, PatchBox


class PatchLargerThanVolume(ValueError):
    pass


class SummedAreaTable3D:
    """Zero-padded inclusive prefix sums, shape (D+1, H+1, W+1), float64."""

    def __init__(self, table: np.ndarray):
        self.table = table

    @property
    def dims(self) -> Dims:
        return tuple(int(s) - 1 for s in self.table.shape)

    def box_sums(self, origins: np.ndarray, size: Sequence[int]) -> np.ndarray:
        """Sums of the boxes ``origins[i] + [0, size)``; origins is (N, 3)."""
        o = np.asarray(origins, dtype=np.intp).reshape(-1, 3)
        z0, y0, x0 = o[:, 0], o[:, 1], o[:, 2]
        z1, y1, x1 = z0 + size[0], y0 + size[1], x0 + size[2]
        t = self.table
        return (
            t[z1, y1, x1]
            - t[z0, y1, x1] - t[z1, y0, x1] - t[z1, y1, x0]
            + t[z0, y0, x1] + t[z0, y1, x0] + t[z1, y0, x0]
            - t[z0, y0, x0]
        )

    def box_sum(self, box: PatchBox) -> float:
        return float(self.box_sums(np.array([box.origin]), box.size)[0])

    def all_box_sums(self, size: Sequence[int]) -> np.ndarray:
        """Sums for every stride-1 origin at once, shape (D-d+1, H-h+1, W-w+1)."""
        t = self.table
        (z0, y0, x0) = (slice(0, n - s) for n, s in zip(t.shape, size))
        (z1, y1, x1) = (slice(s, None) for s in size)
        return (
            t[z1, y1, x1]
            - t[z0, y1, x1] - t[z1, y0, x1] - t[z1, y1, x0]
            + t[z0, y0, x1] + t[z0, y1, x0] + t[z1, y0, x0]
            - t[z0, y0, x0]
        )


def build_sat(field: np.ndarray) -> SummedAreaTable3D:
    f = np.asarray(field, dtype=np.float64)
    if f.ndim != 3:
        raise ValueError(f"expected a 3D field, got shape {f.shape}")
    if not np.all(np.isfinite(f)):
        raise ValueError("field must be finite")
    table = np.zeros(tuple(s + 1 for s in f.shape))
    table[1:, 1:, 1:] = f.cumsum(0).cumsum(1).cumsum(2)
    return SummedAreaTable3D(table)


def lattice_origins(dim: int, size: int, stride: int) -> np.ndarray:
    """Stride lattice along one axis plus the flush boundary origin ``dim - size``."""
    last = dim - size
    return np.unique(np.append(np.arange(0, last + 1, stride), last))


def candidate_origins(dims: Sequence[int], patch: Sequence[int], stride: int) -> np.ndarray:
    if any(p > d for p, d in zip(patch, dims)):
        raise PatchLargerThanVolume(f"patch {tuple(patch)} does not fit in volume {tuple(dims)}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    axes = [lattice_origins(d, p, stride) for d, p in zip(dims, patch)]
    grid = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grid], axis=1)


@dataclass(frozen=True)
class CandidateSet:
    """Scored candidate patches, stored column-wise.

    ``noised`` holds the perturbed score used for ranking; it equals ``scores``
    until a noising step replaces it.
    """

    image_ids: np.ndarray
    origins: np.ndarray  # (N, 3)
    scores: np.ndarray
    noised: np.ndarray
    size: Dims
    stride: int

    def __len__(self) -> int:
        return int(self.scores.shape[0])

    def box(self, i: int) -> PatchBox:
        return PatchBox(tuple(self.origins[i]), self.size)

    def with_noised(self, noised: np.ndarray) -> "CandidateSet":
        return replace(self, noised=np.asarray(noised, dtype=np.float64))

    def take(self, idx) -> "CandidateSet":
        return CandidateSet(
            self.image_ids[idx], self.origins[idx], self.scores[idx], self.noised[idx], self.size, self.stride
        )

    @staticmethod
    def concat(sets: Sequence["CandidateSet"]) -> "CandidateSet":
        sets = list(sets)
        if not sets:
            raise ValueError("nothing to concatenate")
        return CandidateSet(
            np.concatenate([s.image_ids for s in sets]),
            np.concatenate([s.origins for s in sets]),
            np.concatenate([s.scores for s in sets]),
            np.concatenate([s.noised for s in sets]),
            sets[0].size,
            sets[0].stride,
        )

    def ranking(self, key: str = "noised") -> np.ndarray:
        """Indices by descending score; ties by (image id, z, y, x) ascending."""
        s = getattr(self, key)
        o = self.origins
        return np.lexsort((o[:, 2], o[:, 1], o[:, 0], self.image_ids, -s))

    def ranked_chunks(self, key: str = "noised", first: int = 2048):
        """Yield :meth:`ranking` in successive chunks without sorting the whole pool.

        Each chunk holds every candidate scoring at least the chunk's cut-off, so
        ties never straddle a chunk boundary.
        """
        neg = -getattr(self, key)
        o = self.origins
        remaining = np.arange(len(neg))
        k = first
        while remaining.size:
            if remaining.size <= k:
                chunk = remaining
                remaining = remaining[:0]
            else:
                cut = np.partition(neg[remaining], k - 1)[k - 1]
                inside = neg[remaining] <= cut
                chunk, remaining = remaining[inside], remaining[~inside]
            sub = np.lexsort((o[chunk, 2], o[chunk, 1], o[chunk, 0], self.image_ids[chunk], neg[chunk]))
            yield chunk[sub]
            k *= 4


def aggregate_patch_scores(
    field: np.ndarray, patch: Sequence[int], stride: int = 1, image_id: int = 0
) -> CandidateSet:
    """Patch-mean score for every candidate origin on the stride lattice."""
    field = np.asarray(field, dtype=np.float64)
    patch = tuple(int(p) for p in patch)
    origins = candidate_origins(field.shape, patch, stride)
    axes = [lattice_origins(d, p, stride) for d, p in zip(field.shape, patch)]
    sums = build_sat(field).all_box_sums(patch)[np.ix_(*axes)]
    scores = sums.ravel() / float(np.prod(patch))
    ids = np.full(len(origins), image_id, dtype=np.intp)
    return CandidateSet(ids, origins, scores, scores.copy(), patch, stride)


def union_mask(boxes: Iterable[PatchBox], dims: Sequence[int]) -> np.ndarray:
    mask = np.zeros(tuple(dims), dtype=bool)
    for b in boxes:
        mask[b.slices] = True
    return mask


def overlap_fraction(candidate: PatchBox, existing, dims: Sequence[int] | None = None) -> float:
    """Fraction of ``candidate`` voxels covered by the union of ``existing``.

    ``existing`` may be a boolean mask or an iterable of boxes.
    """
    if isinstance(existing, np.ndarray):
        mask = existing
    else:
        boxes = list(existing)
        if dims is None:
            dims = tuple(
                max([candidate.origin[k] + candidate.size[k]] + [b.origin[k] + b.size[k] for b in boxes])
                for k in range(3)
            )
        mask = union_mask(boxes, dims)
    return float(mask[candidate.slices].sum()) / candidate.volume


class OverlapIndex:
    """Union mask of one image's taken boxes with an O(1) disjointness test.

    ``blocked[z, y, x]`` is True when a box of ``patch`` size at that origin
    would intersect any box added so far.
    """

    def __init__(self, dims: Sequence[int], patch: Sequence[int], mask: np.ndarray | None = None,
                 boxes: Iterable[PatchBox] = ()):
        self.dims = tuple(int(d) for d in dims)
        self.patch = tuple(int(p) for p in patch)
        self.mask = np.zeros(self.dims, dtype=bool) if mask is None else np.array(mask, dtype=bool)
        self.blocked = np.zeros(tuple(max(d - p + 1, 0) for d, p in zip(self.dims, self.patch)), dtype=bool)
        if mask is not None and mask.any():
            self._block_from_mask()
        for b in boxes:
            self.add(b)

    def _block_from_mask(self):
        if self.blocked.size == 0:
            return
        sat = build_sat(self.mask.astype(np.float64))
        self.blocked |= sat.all_box_sums(self.patch) > 0.5

    def add(self, box: PatchBox):
        self.mask[box.slices] = True
        sl = tuple(
            slice(max(o - p + 1, 0), min(o + s, n))
            for o, s, p, n in zip(box.origin, box.size, self.patch, self.blocked.shape)
        )
        self.blocked[sl] = True

    def fraction(self, box: PatchBox) -> float:
        return float(self.mask[box.slices].sum()) / box.volume

    def admits(self, box: PatchBox, o: float) -> bool:
        if o == 0 and box.size == self.patch:
            return not self.blocked[box.origin]
        return self.fraction(box) <= o
