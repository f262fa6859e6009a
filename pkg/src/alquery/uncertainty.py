"""Voxel-level uncertainty fields and their class-stratified variants.

All functions take raw probability arrays with the class axis first, or
:class:`ProbabilityField` instances, and work in nats.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ProbabilityField, member_mean


class EnsembleTooSmall(ValueError):
    pass


def _arr(p) -> np.ndarray:
    return p.p if isinstance(p, ProbabilityField) else np.asarray(p, dtype=np.float64)


def entropy(p, axis: int = 0) -> np.ndarray:
    """-sum p log p along ``axis`` with 0 log 0 = 0."""
    p = _arr(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return np.maximum(-terms.sum(axis=axis), 0.0)


def predictive_entropy(mean) -> np.ndarray:
    return entropy(mean, axis=0)


def bald(members, mean=None) -> np.ndarray:
    """Mutual information H[mean] - mean_m H[p_m], clamped at zero.

    ``members`` is a sequence of fields or an array of shape (M, C+1, ...).
    """
    if isinstance(members, np.ndarray):
        stack = members.astype(np.float64, copy=False)
    else:
        stack = np.stack([_arr(m) for m in members])
    if stack.shape[0] < 2:
        raise EnsembleTooSmall(f"BALD needs at least 2 members, got {stack.shape[0]}")
    mean = member_mean(stack) if mean is None else _arr(mean)
    expected = member_mean(entropy(stack, axis=1))
    return np.maximum(entropy(mean, axis=0) - expected, 0.0)


@dataclass(frozen=True)
class StratifiedScoreStack:
    """Channels 0..C-1 are u * p_c for foreground classes 1..C; the last channel is u."""

    channels: np.ndarray  # (C+1, D, H, W)

    @property
    def n_classes(self) -> int:
        return int(self.channels.shape[0] - 1)

    @property
    def global_channel(self) -> np.ndarray:
        return self.channels[-1]

    def class_channel(self, c: int) -> np.ndarray:
        """Channel for foreground class ``c`` (1-based)."""
        if not 1 <= c <= self.n_classes:
            raise IndexError(c)
        return self.channels[c - 1]


def stratify(u: np.ndarray, mean) -> StratifiedScoreStack:
    p = _arr(mean)
    u = np.asarray(u, dtype=np.float64)
    if p.shape[1:] != u.shape:
        raise ValueError(f"shape mismatch: probabilities {p.shape[1:]} vs scores {u.shape}")
    fg = p[1:] * u[None]
    return StratifiedScoreStack(np.concatenate([fg, u[None]], axis=0))


def uncertainty_field(kind: str, members: np.ndarray, mean: np.ndarray) -> np.ndarray:
    if kind == "pe":
        return predictive_entropy(mean)
    if kind == "bald":
        return bald(members, mean)
    raise ValueError(f"unknown uncertainty kind {kind!r}")

