"""Deployment recipe: query patch size from label statistics and per-class query budgets."""

from __future__ import annotations

import logging
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

from .core import LabelVolume

log = logging.getLogger(__name__)

# face neighbours only
SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)
DEFAULT_CYCLES = 5


class ClassAbsent(ValueError):
    pass


def lower_median(values: Sequence[int]) -> int:
    """Median with the lower middle element for even counts."""
    s = sorted(values)
    if not s:
        raise ValueError("median of empty sequence")
    return int(s[(len(s) - 1) // 2])


def label_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    return ndimage.label(mask, structure=SIX_CONNECTED)


def largest_component_extent(mask: np.ndarray) -> tuple[int, int, int] | None:
    """Bounding-box extents (d, h, w) of the largest 6-connected component."""
    lab, n = label_components(mask)
    if n == 0:
        return None
    sizes = np.bincount(lab.ravel())[1:]
    biggest = int(np.argmax(sizes)) + 1
    sl = ndimage.find_objects(lab, max_label=biggest)[biggest - 1]
    return tuple(s.stop - s.start for s in sl)


def class_extents(labels: Sequence[LabelVolume], c: int) -> list[tuple[int, int, int]]:
    out = []
    for lab in labels:
        e = largest_component_extent(lab.labels == c)
        if e is not None:
            out.append(e)
    return out


def patch_size_from_labels(
    labels: Sequence[LabelVolume], classes_of_interest: Sequence[int] | None = None
) -> tuple[int, int, int]:
    """Per-axis median of per-class median largest-component bounding boxes."""
    if not labels:
        raise ValueError("no label volumes given")
    n_classes = labels[0].n_classes
    classes = list(range(1, n_classes + 1)) if classes_of_interest is None else list(classes_of_interest)
    per_class = []
    for c in classes:
        ext = class_extents(labels, c)
        if not ext:
            raise ClassAbsent(f"class {c} does not appear in any image")
        per_class.append(tuple(lower_median([e[k] for e in ext]) for k in range(3)))
    size = tuple(lower_median([m[k] for m in per_class]) for k in range(3))
    smallest = tuple(min(lab.dims[k] for lab in labels) for k in range(3))
    clamped = tuple(min(s, d) for s, d in zip(size, smallest))
    if clamped != size:
        log.warning("patch size %s clamped to smallest image dims %s", size, clamped)
    return clamped


def query_budget(class_weights: Mapping[str, int] | Sequence[int], cycles: int = DEFAULT_CYCLES) -> tuple[int, int]:
    """Per-cycle query size as the sum of per-class patch counts, and the total budget."""
    weights = list(class_weights.values()) if isinstance(class_weights, Mapping) else list(class_weights)
    if not weights:
        raise ValueError("need at least one class")
    n = int(sum(weights))
    return n, n * cycles
