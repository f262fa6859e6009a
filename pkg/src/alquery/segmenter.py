"""Bootstrap ensemble of Gaussian naive-Bayes voxel classifiers.

Each voxel is described by four features: its intensity and its normalized
(z, y, x) position. Training reads labels only inside annotated patches.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import AnnotationState, LabelVolume, ProbabilityField, RngStream, VoxelGrid, member_mean

VAR_FLOOR = 1e-4
N_FEATURES = 4


class NoAnnotations(ValueError):
    pass


@dataclass(frozen=True)
class GaussianClassModel:
    mean: np.ndarray  # (C+1, 4)
    var: np.ndarray  # (C+1, 4)
    log_prior: np.ndarray  # (C+1,), -inf for classes unseen by this member

    @property
    def n_channels(self) -> int:
        return int(self.log_prior.shape[0])


@dataclass(frozen=True)
class Ensemble:
    members: tuple[GaussianClassModel, ...]

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def n_channels(self) -> int:
        return self.members[0].n_channels


def coordinate_axes(dims) -> list[np.ndarray]:
    return [np.arange(n, dtype=np.float64) / max(n - 1, 1) for n in dims]


def voxel_features(image: VoxelGrid, mask: np.ndarray | None = None) -> np.ndarray:
    """(N, 4) feature rows for the voxels selected by ``mask`` (all if None)."""
    dims = image.dims
    if mask is None:
        mask = np.ones(dims, dtype=bool)
    idx = np.nonzero(mask)
    axes = coordinate_axes(dims)
    feats = np.empty((idx[0].size, N_FEATURES))
    feats[:, 0] = image.values[idx]
    for k in range(3):
        feats[:, k + 1] = axes[k][idx[k]]
    return feats


def fit_member(features: np.ndarray, labels: np.ndarray, n_channels: int) -> GaussianClassModel:
    counts = np.bincount(labels, minlength=n_channels).astype(np.float64)
    mean = np.zeros((n_channels, N_FEATURES))
    var = np.ones((n_channels, N_FEATURES))
    seen = counts > 0
    for k in range(N_FEATURES):
        s1 = np.bincount(labels, weights=features[:, k], minlength=n_channels)
        s2 = np.bincount(labels, weights=features[:, k] ** 2, minlength=n_channels)
        mu = np.divide(s1, counts, out=np.zeros(n_channels), where=seen)
        v = np.divide(s2, counts, out=np.ones(n_channels), where=seen) - mu**2
        mean[:, k] = mu
        var[:, k] = v
    var = np.maximum(var, VAR_FLOOR)
    with np.errstate(divide="ignore"):
        log_prior = np.log(counts / counts.sum())
    return GaussianClassModel(mean, var, log_prior)


def annotated_voxels(
    annotations: AnnotationState, images: Sequence[tuple[VoxelGrid, LabelVolume]]
) -> tuple[np.ndarray, np.ndarray]:
    feats, labs = [], []
    for mask, (img, lab) in zip(annotations.masks, images):
        if not mask.any():
            continue
        feats.append(voxel_features(img, mask))
        labs.append(lab.labels[mask])
    if not feats:
        raise NoAnnotations("no annotated voxels to train on")
    return np.concatenate(feats), np.concatenate(labs).astype(np.intp)


def fit(
    annotations: AnnotationState,
    images: Sequence[tuple[VoxelGrid, LabelVolume]],
    stream: RngStream,
    M: int = 5,
) -> Ensemble:
    """Fit ``M`` members, each on a same-size bootstrap resample of the annotated voxels."""
    if M < 1:
        raise ValueError("ensemble size must be >= 1")
    feats, labs = annotated_voxels(annotations, images)
    n_channels = images[0][1].n_classes + 1
    n = labs.size
    members = []
    for _ in range(M):
        pick = stream.integers(0, n, size=n)
        members.append(fit_member(feats[pick], labs[pick], n_channels))
    return Ensemble(tuple(members))


def fit_full(images: Sequence[tuple[VoxelGrid, LabelVolume]], stream: RngStream, M: int = 5) -> Ensemble:
    """Reference fit on every voxel of every image (full annotation)."""
    state = AnnotationState(
        boxes=tuple(() for _ in images),
        masks=tuple(np.ones(img.dims, dtype=bool) for img, _ in images),
    )
    return fit(state, images, stream, M)


def member_probabilities(model: GaussianClassModel, image: VoxelGrid) -> np.ndarray:
    """Softmax of Gaussian log-likelihood plus log prior, shape (C+1, D, H, W)."""
    dims = image.dims
    axes = coordinate_axes(dims)
    x = image.values
    logp = np.empty((model.n_channels,) + dims)
    for c in range(model.n_channels):
        if not np.isfinite(model.log_prior[c]):
            logp[c] = -np.inf
            continue
        mu, var = model.mean[c], model.var[c]
        ll = -0.5 * (np.log(2 * np.pi * var[0]) + (x - mu[0]) ** 2 / var[0])
        sep = [-0.5 * (np.log(2 * np.pi * var[k + 1]) + (axes[k] - mu[k + 1]) ** 2 / var[k + 1]) for k in range(3)]
        logp[c] = ll + sep[0][:, None, None] + sep[1][None, :, None] + sep[2][None, None, :] + model.log_prior[c]
    logp -= logp.max(axis=0, keepdims=True)
    p = np.exp(logp)
    p /= p.sum(axis=0, keepdims=True)
    return p


def predict_arrays(ensemble: Ensemble, image: VoxelGrid) -> tuple[np.ndarray, np.ndarray]:
    """Member and mean probabilities as raw arrays: (M, C+1, D, H, W) and (C+1, D, H, W)."""
    members = np.stack([member_probabilities(m, image) for m in ensemble.members])
    return members, member_mean(members)


def predict(ensemble: Ensemble, image: VoxelGrid) -> tuple[list[ProbabilityField], ProbabilityField]:
    if ensemble.size < 1:
        raise ValueError("empty ensemble")
    members, mean = predict_arrays(ensemble, image)
    return [ProbabilityField(m) for m in members], ProbabilityField(mean)


def predict_labels(ensemble: Ensemble, image: VoxelGrid) -> np.ndarray:
    _, mean = predict_arrays(ensemble, image)
    return mean.argmax(axis=0).astype(np.uint8)
