"""Synthetic imbalanced 3D segmentation datasets made of ellipsoidal blobs."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .core import Dataset, LabelVolume, RngStream, VoxelGrid, derive_stream


class SpecInfeasible(ValueError):
    pass


@dataclass
class SynthSpec:
    """Parameters of a synthetic dataset.

    Per-class lists are indexed by foreground class (``n_classes`` entries),
    except ``intensity_mean`` and ``noise_sigma`` which include background at
    index 0.
    """

    name: str = "synth"
    n_train: int = 20
    n_test: int = 8
    dims: tuple[int, int, int] = (48, 48, 48)
    n_classes: int = 3
    blob_count: list[tuple[int, int]] = field(default_factory=lambda: [(1, 8), (1, 6), (1, 4)])
    radius: list[tuple[float, float]] = field(
        default_factory=lambda: [(5.0, 9.0), (4.0, 7.0), (3.0, 5.0)]
    )
    volume_fraction: list[float] = field(default_factory=lambda: [0.06, 0.03, 0.006])
    intensity_mean: list[float] = field(default_factory=lambda: [0.0, 1.0, 2.0, 3.0])
    noise_sigma: list[float] = field(default_factory=lambda: [0.45, 0.45, 0.45, 0.45])
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.blob_count = [tuple(int(v) for v in r) for r in self.blob_count]
        self.radius = [tuple(float(v) for v in r) for r in self.radius]
        self.volume_fraction = [float(v) for v in self.volume_fraction]
        self.intensity_mean = [float(v) for v in self.intensity_mean]
        self.noise_sigma = [float(v) for v in self.noise_sigma]
        c = self.n_classes
        if c < 1:
            raise ValueError("n_classes must be >= 1")
        if len(self.dims) != 3 or min(self.dims) < 16:
            raise ValueError(f"dims must be at least (16, 16, 16), got {self.dims}")
        for attr, want in (("blob_count", c), ("radius", c), ("volume_fraction", c),
                           ("intensity_mean", c + 1), ("noise_sigma", c + 1)):
            if len(getattr(self, attr)) != want:
                raise ValueError(f"{attr} needs {want} entries")
        if sum(self.volume_fraction) >= 1:
            raise ValueError("volume fractions must sum to < 1 so background dominates")
        if any(lo < 1 or hi < lo for lo, hi in self.blob_count):
            raise ValueError("blob_count ranges need 1 <= lo <= hi")
        if any(lo <= 0 or hi < lo for lo, hi in self.radius):
            raise ValueError("radius ranges need 0 < lo <= hi")
        if any(s < 0 for s in self.noise_sigma):
            raise ValueError("noise_sigma must be non-negative")
        if self.n_train < 1 or self.n_test < 0:
            raise ValueError("need n_train >= 1 and n_test >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "SynthSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["blob_count"] = [list(r) for r in self.blob_count]
        d["radius"] = [list(r) for r in self.radius]
        return d


def ellipsoid_mask(dims, center, radii) -> np.ndarray:
    """Voxels whose centres satisfy sum(((v - c) / r)^2) <= 1."""
    zz, yy, xx = (np.arange(n, dtype=np.float64) for n in dims)
    dz = ((zz - center[0]) / radii[0]) ** 2
    dy = ((yy - center[1]) / radii[1]) ** 2
    dx = ((xx - center[2]) / radii[2]) ** 2
    return dz[:, None, None] + dy[None, :, None] + dx[None, None, :] <= 1.0


def _check_fit(spec: SynthSpec):
    for c, (_, hi) in enumerate(spec.radius, start=1):
        for d in spec.dims:
            if 2 * hi > d - 1:
                raise SpecInfeasible(f"class {c}: radius {hi} does not fit inside dim {d}")


def generate_image(spec: SynthSpec, stream: RngStream) -> tuple[VoxelGrid, LabelVolume]:
    dims = spec.dims
    n_vox = float(np.prod(dims))
    labels = np.zeros(dims, dtype=np.uint8)
    for c in range(1, spec.n_classes + 1):
        lo, hi = spec.blob_count[c - 1]
        r_lo, r_hi = spec.radius[c - 1]
        target = spec.volume_fraction[c - 1] * n_vox
        painted = np.zeros(dims, dtype=bool)
        n_blobs = 0
        while n_blobs < hi and (n_blobs < lo or painted.sum() < target):
            radii = r_lo + (r_hi - r_lo) * stream.uniform(3)
            center = [r + (d - 1 - 2 * r) * u for r, d, u in zip(radii, dims, stream.uniform(3))]
            painted |= ellipsoid_mask(dims, center, radii)
            n_blobs += 1
        labels[painted] = c
    mean = np.asarray(spec.intensity_mean)[labels]
    sigma = np.asarray(spec.noise_sigma)[labels]
    image = mean + sigma * stream.normal(dims)
    # round through float32 so in-memory and serialized datasets agree exactly
    image = image.astype(np.float32).astype(np.float64)
    return VoxelGrid(image), LabelVolume(labels, spec.n_classes)


def generate_dataset(spec: SynthSpec) -> Dataset:
    _check_fit(spec)
    train = [generate_image(spec, derive_stream(spec.seed, "synth/train", i)) for i in range(spec.n_train)]
    test = [generate_image(spec, derive_stream(spec.seed, "synth/test", i)) for i in range(spec.n_test)]
    present = np.zeros(spec.n_classes + 1, dtype=bool)
    for _, lab in train:
        present[np.unique(lab.labels)] = True
    missing = [c for c in range(1, spec.n_classes + 1) if not present[c]]
    if missing:
        raise SpecInfeasible(f"classes {missing} never survive in the training images")
    return Dataset(spec.name, spec.n_classes, train, test)


def class_fractions(items) -> np.ndarray:
    """Mean per-class voxel fraction over a list of (image, label) pairs."""
    fr = [np.bincount(lab.labels.ravel(), minlength=lab.n_classes + 1) / lab.labels.size for _, lab in items]
    return np.mean(fr, axis=0)
