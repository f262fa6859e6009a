"""Simulated annotator: starting budget construction and label reveal."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .core import AnnotationState, LabelVolume, PatchBox, RngStream
from .strategies import (
    RETRY_FACTOR,
    ClassVoxels,
    QueryEntry,
    QueryResult,
    overlap_indexes,
    fg_centered_patch,
    query_random_fg,
)

START_FG_FRACTION = 0.33
SEEDS_PER_CLASS = 2


class InfeasibleStart(ValueError):
    pass


def annotate(
    state: AnnotationState,
    result: QueryResult | Iterable[tuple[int, PatchBox]],
    labels: Sequence[LabelVolume],
) -> AnnotationState:
    """Reveal the labels inside the queried boxes.

    Only voxels not yet annotated add to the foreground counters.
    """
    pairs = result.boxes if isinstance(result, QueryResult) else list(result)
    n_classes = labels[0].n_classes
    boxes = [list(b) for b in state.boxes]
    masks = list(state.masks)
    per_class = np.zeros(n_classes + 1, dtype=np.int64)
    per_class[1:] = state.fg_voxels_per_class or np.zeros(n_classes, dtype=np.int64)
    copied = set()
    for i, box in pairs:
        if not box.fits(labels[i].dims):
            raise ValueError(f"box {box} does not fit image {i} with dims {labels[i].dims}")
        if i not in copied:
            masks[i] = masks[i].copy()
            copied.add(i)
        sl = box.slices
        fresh = ~masks[i][sl]
        per_class += np.bincount(labels[i].labels[sl][fresh], minlength=n_classes + 1)
        masks[i][sl] = True
        boxes[i].append(box)
    for i in copied:
        masks[i].setflags(write=False)
    return AnnotationState(
        boxes=tuple(tuple(b) for b in boxes),
        masks=tuple(masks),
        fg_voxels=int(per_class[1:].sum()),
        fg_voxels_per_class=tuple(int(v) for v in per_class[1:]),
    )


def starting_budget_entries(
    labels: Sequence[LabelVolume],
    patch: Sequence[int],
    n_start: int,
    stream: RngStream,
    o: float = 0.0,
) -> tuple[AnnotationState, list[QueryEntry]]:
    """Two foreground-centred patches per class (ascending class id), then Random 33% FG.

    Returns the annotated state and the entries in selection order.
    """
    patch = tuple(patch)
    n_classes = labels[0].n_classes
    if n_start < SEEDS_PER_CLASS * n_classes:
        raise InfeasibleStart(f"starting budget {n_start} < {SEEDS_PER_CLASS} patches x {n_classes} classes")
    voxels = ClassVoxels(labels)
    absent = [c for c in range(1, n_classes + 1) if voxels.count(c) == 0]
    if absent:
        raise InfeasibleStart(f"classes {absent} have no voxels in the pool")

    state = AnnotationState.empty([lab.dims for lab in labels], n_classes)
    indexes = overlap_indexes(state, patch)
    seeded: list[QueryEntry] = []
    for c in range(1, n_classes + 1):
        for _ in range(SEEDS_PER_CLASS):
            e = fg_centered_patch(c, voxels, patch, o, stream, indexes, RETRY_FACTOR)
            if e is None:
                raise InfeasibleStart(f"could not place a non-overlapping patch on class {c}")
            seeded.append(e)
    state = annotate(state, QueryResult(seeded), labels)
    rest = query_random_fg(labels, patch, n_start - len(seeded), START_FG_FRACTION, o, stream, state, voxels)
    return annotate(state, rest, labels), seeded + rest.entries


def build_starting_budget(
    labels: Sequence[LabelVolume],
    patch: Sequence[int],
    n_start: int,
    stream: RngStream,
    o: float = 0.0,
) -> AnnotationState:
    return starting_budget_entries(labels, patch, n_start, stream, o)[0]


def count_annotated_foreground(state: AnnotationState, labels: Sequence[LabelVolume]) -> int:
    """Brute-force foreground count under the union masks."""
    return int(sum(((lab.labels > 0) & mask).sum() for mask, lab in zip(state.masks, labels)))
