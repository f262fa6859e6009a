"""Shared domain types, seeded random streams and dataset serialization.

Every random draw in the package goes through an :class:`RngStream`. Streams are
numpy ``Philox4x64`` generators (a counter-based 64-bit generator) keyed by a
BLAKE2b digest of ``(root_seed, purpose, index)``, so a stream is reproducible
bit-for-bit on every platform and distinct purposes never share a key.

Volumes use C order with z as the slowest axis throughout.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterator, Sequence

import numpy as np

if TYPE_CHECKING:
    from .strategies import QueryMethodSpec

Dims = tuple[int, int, int]

# uniform draws are clamped to [TINY, 1 - TINY] before log transforms
TINY = 2.0**-53
EULER_GAMMA = 0.5772156649015329


class RngStream:
    """A named, seeded random stream backed by Philox4x64."""

    def __init__(self, root_seed: int, purpose: str, index: int = 0):
        self.root_seed = int(root_seed)
        self.purpose = str(purpose)
        self.index = int(index)
        digest = hashlib.blake2b(
            f"{self.root_seed}:{self.purpose}:{self.index}".encode(), digest_size=16
        ).digest()
        self.key = (
            int.from_bytes(digest[:8], "little"),
            int.from_bytes(digest[8:], "little"),
        )
        self.generator = np.random.Generator(np.random.Philox(key=np.array(self.key, dtype=np.uint64)))

    @property
    def fingerprint(self) -> str:
        return f"{self.key[0]:016x}{self.key[1]:016x}"

    def __repr__(self) -> str:
        return f"RngStream({self.root_seed}, {self.purpose!r}, {self.index})"

    def next_u64(self) -> int:
        return int(self.generator.integers(0, 2**64, dtype=np.uint64, endpoint=False))

    def uniform(self, size=None):
        """Uniform draws on (0, 1), clamped away from both ends."""
        u = self.generator.random(size)
        return np.clip(u, TINY, 1.0 - TINY)

    def integers(self, low: int, high: int, size=None):
        return self.generator.integers(low, high, size=size)

    def normal(self, size=None):
        return self.generator.standard_normal(size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def gumbel(self, scale: float, size=None):
        return gumbel_from_uniform(self.uniform(size), scale)

    def spawn(self, purpose: str, index: int = 0) -> "RngStream":
        """Child stream keyed under this stream's purpose."""
        return RngStream(self.root_seed, f"{self.purpose}/{self.index}/{purpose}", index)


def derive_stream(root_seed: int, purpose: str, index: int = 0) -> RngStream:
    return RngStream(root_seed, purpose, index)


def gumbel_from_uniform(u, scale: float):
    """Inverse-CDF transform of uniform draws to Gumbel(0, scale)."""
    u = np.clip(u, TINY, 1.0 - TINY)
    return -scale * np.log(-np.log(u))


def gumbel_sample(stream: RngStream, scale: float) -> float:
    if not scale > 0:
        raise ValueError(f"Gumbel scale must be positive, got {scale}")
    return float(gumbel_from_uniform(stream.uniform(), scale))


def member_mean(stack: np.ndarray) -> np.ndarray:
    """Mean over axis 0, taken as offsets from the first entry.

    Identical entries then average to exactly that entry, which a plain
    sum-and-divide does not guarantee.
    """
    stack = np.asarray(stack, dtype=np.float64)
    return stack[0] + (stack - stack[0]).mean(axis=0)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class VoxelGrid:
    """Dense real-valued 3D field (image intensities or voxel scores)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ValueError(f"VoxelGrid needs a non-empty 3D array, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("VoxelGrid values must be finite")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def dims(self) -> Dims:
        return tuple(int(s) for s in self.values.shape)


@dataclass(frozen=True)
class LabelVolume:
    """Integer class ids per voxel, 0 = background, foreground 1..n_classes."""

    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 3:
            raise ValueError(f"LabelVolume needs a 3D array, got shape {lab.shape}")
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        if lab.size and (lab.min() < 0 or lab.max() > self.n_classes):
            raise ValueError(f"labels must lie in 0..{self.n_classes}")
        object.__setattr__(self, "labels", _frozen(lab.astype(np.uint8)))

    @property
    def dims(self) -> Dims:
        return tuple(int(s) for s in self.labels.shape)


@dataclass(frozen=True)
class ProbabilityField:
    """Per-voxel categorical distribution, shape (C+1, D, H, W)."""

    p: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        if p.ndim != 4 or p.shape[0] < 2:
            raise ValueError(f"ProbabilityField needs shape (C+1, D, H, W), got {p.shape}")
        if p.min() < -1e-12 or p.max() > 1 + 1e-12:
            raise ValueError("probabilities must lie in [0, 1]")
        if not np.allclose(p.sum(axis=0), 1.0, atol=1e-6, rtol=0):
            raise ValueError("probabilities must sum to 1 at every voxel")
        object.__setattr__(self, "p", _frozen(np.clip(p, 0.0, 1.0)))

    @property
    def dims(self) -> Dims:
        return tuple(int(s) for s in self.p.shape[1:])

    @property
    def n_channels(self) -> int:
        return int(self.p.shape[0])


@dataclass(frozen=True, order=True)
class PatchBox:
    origin: Dims
    size: Dims

    def __post_init__(self):
        origin = tuple(int(v) for v in self.origin)
        size = tuple(int(v) for v in self.size)
        if len(origin) != 3 or len(size) != 3:
            raise ValueError("PatchBox origin and size must be 3-tuples")
        if min(origin) < 0 or min(size) < 1:
            raise ValueError(f"invalid PatchBox origin={origin} size={size}")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "size", size)

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(o, o + s) for o, s in zip(self.origin, self.size))

    @property
    def volume(self) -> int:
        return math.prod(self.size)

    def fits(self, dims: Sequence[int]) -> bool:
        return all(o + s <= d for o, s, d in zip(self.origin, self.size, dims))

    def to_json(self) -> dict:
        return {"origin": list(self.origin), "size": list(self.size)}


@dataclass(frozen=True)
class AnnotationState:
    """Annotated patches per pool image and the voxel masks they cover.

    Treated as an immutable snapshot; :func:`alquery.oracle.annotate` returns a
    new state.
    """

    boxes: tuple[tuple[PatchBox, ...], ...]
    masks: tuple[np.ndarray, ...]
    fg_voxels: int = 0
    fg_voxels_per_class: tuple[int, ...] = ()

    @classmethod
    def empty(cls, dims: Sequence[Dims], n_classes: int = 1) -> "AnnotationState":
        return cls(
            boxes=tuple(() for _ in dims),
            masks=tuple(_frozen(np.zeros(d, dtype=bool)) for d in dims),
            fg_voxels=0,
            fg_voxels_per_class=(0,) * n_classes,
        )

    @property
    def n_images(self) -> int:
        return len(self.masks)

    @property
    def n_patches(self) -> int:
        return sum(len(b) for b in self.boxes)

    @property
    def annotated_voxels(self) -> int:
        return int(sum(m.sum() for m in self.masks))

    def all_boxes(self) -> Iterator[tuple[int, PatchBox]]:
        for i, bs in enumerate(self.boxes):
            for b in bs:
                yield i, b

    def derive_masks(self) -> tuple[np.ndarray, ...]:
        """Rebuild the masks from the box lists."""
        out = []
        for m, bs in zip(self.masks, self.boxes):
            fresh = np.zeros(m.shape, dtype=bool)
            for b in bs:
                fresh[b.slices] = True
            out.append(fresh)
        return tuple(out)


@dataclass
class ExperimentConfig:
    dataset: str
    method: "QueryMethodSpec"
    cycles: int = 5
    query_size: int = 30
    patch_size: Dims = (8, 8, 8)
    seed: int = 0
    ensemble_size: int = 5
    stride: int | None = None
    name: str | None = None
    # extra run-time knobs that do not change results
    threads: int | None = field(default=None, compare=False)

    def __post_init__(self):
        self.patch_size = tuple(int(v) for v in self.patch_size)
        if len(self.patch_size) != 3 or min(self.patch_size) < 1:
            raise ValueError(f"patch_size must be three positive ints, got {self.patch_size}")
        if self.cycles < 2:
            raise ValueError("cycles must be >= 2 (start budget plus at least one query)")
        if self.query_size < 1:
            raise ValueError("query_size must be >= 1")
        if self.ensemble_size < 1:
            raise ValueError("ensemble_size must be >= 1")
        if self.stride is not None and self.stride < 1:
            raise ValueError("stride must be >= 1")

    @property
    def total_budget(self) -> int:
        return self.query_size * self.cycles

    def resolved_stride(self, dims: Dims) -> int:
        if self.stride is not None:
            return self.stride
        return default_stride(dims, self.patch_size)


def default_stride(dims: Sequence[int], patch: Sequence[int]) -> int:
    if math.prod(dims) <= 64**3:
        return 1
    return math.ceil(max(patch) / 4)


# ---------------------------------------------------------------------------
# dataset directory format

MANIFEST = "manifest.json"
FORMAT_VERSION = 1


@dataclass
class Dataset:
    name: str
    n_classes: int
    train: list[tuple[VoxelGrid, LabelVolume]]
    test: list[tuple[VoxelGrid, LabelVolume]]

    @property
    def pool_images(self) -> list[VoxelGrid]:
        return [img for img, _ in self.train]

    @property
    def pool_labels(self) -> list[LabelVolume]:
        return [lab for _, lab in self.train]


def save_dataset(ds: Dataset, out_dir: str | Path) -> Path:
    """Write ``manifest.json`` plus flat little-endian payloads."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for split, items in (("train", ds.train), ("test", ds.test)):
        for i, (img, lab) in enumerate(items):
            stem = f"{split}_{i:03d}"
            img.values.astype("<f4").tofile(out / f"{stem}_image.f32")
            lab.labels.astype(np.uint8).tofile(out / f"{stem}_label.u8")
            entries.append(
                {
                    "id": stem,
                    "split": split,
                    "dims": list(img.dims),
                    "image": f"{stem}_image.f32",
                    "label": f"{stem}_label.u8",
                }
            )
    manifest = {
        "format_version": FORMAT_VERSION,
        "name": ds.name,
        "n_classes": ds.n_classes,
        "spacing": [1.0, 1.0, 1.0],
        "image_dtype": "float32-le",
        "label_dtype": "uint8",
        "layout": "C",
        "images": entries,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    return out


def load_dataset(path: str | Path) -> Dataset:
    root = Path(path)
    manifest = json.loads((root / MANIFEST).read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format {manifest.get('format_version')!r}")
    n_classes = int(manifest["n_classes"])
    splits: dict[str, list] = {"train": [], "test": []}
    for e in manifest["images"]:
        dims = tuple(e["dims"])
        img = np.fromfile(root / e["image"], dtype="<f4").astype(np.float64).reshape(dims)
        lab = np.fromfile(root / e["label"], dtype=np.uint8).reshape(dims)
        splits[e["split"]].append((VoxelGrid(img), LabelVolume(lab, n_classes)))
    return Dataset(manifest["name"], n_classes, splits["train"], splits["test"])
