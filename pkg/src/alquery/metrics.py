"""Segmentation and trajectory metrics with the statistics used to compare query methods."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import combinations
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .core import LabelVolume, derive_stream

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
LOG_GAMMA_BOUNDS = (math.log(1e-4), math.log(1e4))
NEMENYI_SAMPLES = 1_000_000
NEMENYI_SEED = 20240901
Z95 = 1.96


class TooFewCycles(ValueError):
    pass


class DegenerateFit(ValueError):
    pass


class SeedMismatch(ValueError):
    pass


# ---------------------------------------------------------------------------
# segmentation


def _labels(v) -> np.ndarray:
    return v.labels if isinstance(v, LabelVolume) else np.asarray(v)


def dice(pred, gt, n_classes: int) -> tuple[np.ndarray, float]:
    """Per-foreground-class Dice and their mean.

    A class absent from both volumes gets NaN and is left out of the mean.
    """
    a, b = _labels(pred), _labels(gt)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    n = n_classes + 1
    pa = np.bincount(a.ravel(), minlength=n)[1:n].astype(np.float64)
    pb = np.bincount(b.ravel(), minlength=n)[1:n].astype(np.float64)
    both = np.bincount(a[a == b].ravel(), minlength=n)[1:n].astype(np.float64)
    denom = pa + pb
    per_class = np.full(n_classes, np.nan)
    ok = denom > 0
    per_class[ok] = 2.0 * both[ok] / denom[ok]
    mean = float(np.nanmean(per_class)) if ok.any() else float("nan")
    return per_class, mean


# ---------------------------------------------------------------------------
# trajectory metrics


def aubc(mean_dice: Sequence[float]) -> float:
    """Trapezoid area under the Dice curve over a budget axis rescaled to [0, 1]."""
    y = np.asarray(mean_dice, dtype=np.float64)
    if y.size < 2:
        raise TooFewCycles("AUBC needs at least two cycles")
    h = 1.0 / (y.size - 1)
    return float(h * (y[0] / 2 + y[1:-1].sum() + y[-1] / 2))


@dataclass(frozen=True)
class FgEffFit:
    gamma: float
    y_full: float
    y0: float
    t0: float
    residual: float

    def predict(self, t) -> np.ndarray:
        return decay_curve(np.asarray(t, dtype=np.float64), self.gamma, self.y0, self.y_full, self.t0)


def decay_curve(t, gamma: float, y0: float, y_full: float, t0: float):
    return (y0 - y_full) * np.exp(-gamma * (t - t0)) + y_full


def golden_section(f, lo: float, hi: float, rtol: float = 1e-8, max_iter: int = 500) -> float:
    """Minimize a unimodal ``f`` on [lo, hi]."""
    a, b = lo, hi
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if abs(b - a) <= rtol * max(1.0, abs(a) + abs(b)) / 2:
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    return (a + b) / 2


def fg_eff(t: Sequence[float], y: Sequence[float], y_full: float, grid: int = 401) -> FgEffFit:
    """Fit the exponential-decay rate gamma of Dice against annotated-foreground fraction.

    The curve is anchored at the first cycle (t0, y0) and at ``y_full``. gamma is
    searched in log space over [1e-4, 1e4]: a coarse grid brackets the minimum
    of the squared error, golden-section refines it.
    """
    t = np.asarray(t, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if t.size < 3:
        raise TooFewCycles("FG-Eff needs at least three cycles")
    if t.shape != y.shape:
        raise ValueError("t and y lengths differ")
    if np.any(np.diff(t) <= 0):
        raise ValueError("t must be strictly increasing")
    t0, y0 = float(t[0]), float(y[0])
    if y0 == y_full:
        raise DegenerateFit("starting performance equals full-data performance")

    def sse(log_gamma: float) -> float:
        r = decay_curve(t, math.exp(log_gamma), y0, y_full, t0) - y
        return float(r @ r)

    lo, hi = LOG_GAMMA_BOUNDS
    xs = np.linspace(lo, hi, grid)
    vals = np.array([sse(x) for x in xs])
    k = int(np.argmin(vals))
    a, b = xs[max(k - 1, 0)], xs[min(k + 1, grid - 1)]
    lg = golden_section(sse, a, b, rtol=1e-10)
    return FgEffFit(math.exp(lg), float(y_full), y0, t0, sse(lg))


# ---------------------------------------------------------------------------
# pairwise penalty matrix


@dataclass
class TrajectoryRecord:
    method: str
    setting: str
    seed: int
    budgets: list[int]
    fg_voxels: list[int]
    mean_dice: list[float]
    dice_per_class: list[list[float]] = field(default_factory=list)

    def __post_init__(self):
        if any(b2 <= b1 for b1, b2 in zip(self.budgets, self.budgets[1:])):
            raise ValueError("budgets must be strictly increasing")
        if not (len(self.budgets) == len(self.fg_voxels) == len(self.mean_dice)):
            raise ValueError("per-cycle lists must have equal length")

    @property
    def n_cycles(self) -> int:
        return len(self.mean_dice)


def paired_test(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Two-sided paired t-test; returns (mean difference, p). p is NaN when undefined."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if d.size < 2:
        raise SeedMismatch("paired test needs at least two seeds")
    if np.ptp(d) == 0:
        return float(d.mean()), float("nan")
    res = stats.ttest_rel(a, b)
    return float(d.mean()), float(res.pvalue)


def holm_divisor(n_methods: int, n_loops: int) -> int:
    return n_methods * (n_methods - 1) // 2 * n_loops


def holm_reject(pvalues: Sequence[float], alpha: float) -> np.ndarray:
    """Holm step-down rejections; NaN p-values are never rejected."""
    p = np.asarray(pvalues, dtype=np.float64)
    m = p.size
    reject = np.zeros(m, dtype=bool)
    finite = np.flatnonzero(np.isfinite(p))
    order = finite[np.argsort(p[finite], kind="stable")]
    for rank, j in enumerate(order):
        if p[j] <= alpha / (m - rank):
            reject[j] = True
        else:
            break
    return reject


@dataclass
class PenaltyMatrix:
    methods: list[str]
    win: np.ndarray  # win[i, j]: % of comparisons where method i significantly beats j
    n_comparisons: int
    p: float
    correction: str

    @property
    def loss(self) -> np.ndarray:
        return self.win.T

    @property
    def mean_row(self) -> np.ndarray:
        """Per method, the mean % of comparisons it loses (lower is better)."""
        k = len(self.methods)
        if k < 2:
            return np.zeros(k)
        return self.win.sum(axis=0) / (k - 1)


def _group_by_setting(records: Iterable[TrajectoryRecord]):
    grouped: dict[str, dict[str, list[TrajectoryRecord]]] = defaultdict(lambda: defaultdict(list))
    for r in records:
        grouped[r.setting][r.method].append(r)
    return grouped


def ppm(records: Sequence[TrajectoryRecord], p: float = 0.05, correction: str = "none",
        methods: Sequence[str] | None = None) -> PenaltyMatrix:
    """Pairwise penalty matrix from per-cycle paired t-tests over seeds.

    Tests are run per (setting, cycle, pair), then win fractions are pooled over
    all settings and cycles. With ``correction="holm"`` the step-down correction
    is applied within each setting across all its pair x cycle tests.
    """
    if correction not in ("none", "holm"):
        raise ValueError(f"unknown correction {correction!r}")
    methods = sorted({r.method for r in records}) if methods is None else list(methods)
    pos = {m: i for i, m in enumerate(methods)}
    k = len(methods)
    wins = np.zeros((k, k))
    total = 0
    for setting, by_method in sorted(_group_by_setting(records).items()):
        present = [m for m in methods if m in by_method]
        seeds = {m: sorted(r.seed for r in by_method[m]) for m in present}
        ref = next(iter(seeds.values()), [])
        if any(s != ref for s in seeds.values()):
            raise SeedMismatch(f"setting {setting!r}: methods were run with different seeds")
        if len(ref) < 2:
            raise SeedMismatch(f"setting {setting!r}: need at least two seeds")
        n_cycles = min(r.n_cycles for m in present for r in by_method[m])
        curves = {
            m: np.array([r.mean_dice[:n_cycles] for r in sorted(by_method[m], key=lambda r: r.seed)])
            for m in present
        }
        tests = []
        for a, b in combinations(present, 2):
            for c in range(n_cycles):
                diff, pv = paired_test(curves[a][:, c], curves[b][:, c])
                tests.append((pos[a], pos[b], diff, pv))
        pvals = [t[3] for t in tests]
        if correction == "holm":
            sig = holm_reject(pvals, p)
        else:
            sig = np.array([np.isfinite(v) and v <= p for v in pvals], dtype=bool)
        for (i, j, diff, _), s in zip(tests, sig):
            if s and diff > 0:
                wins[i, j] += 1
            elif s and diff < 0:
                wins[j, i] += 1
        # each unordered pair is compared once per cycle
        total += n_cycles
    win = 100.0 * wins / total if total else wins
    return PenaltyMatrix(methods, win, total, p, correction)


# ---------------------------------------------------------------------------
# Friedman / Nemenyi


def nemenyi_scale(k: int, N: int) -> float:
    """Standard error of an average-rank difference: sqrt(k(k+1) / 6N)."""
    return math.sqrt(k * (k + 1) / (6.0 * N))


def delta_from_effect_size(r: float, k: int, N: int) -> float:
    """Average-rank difference whose Nemenyi z-score gives effect size r = z / sqrt(N)."""
    return r * math.sqrt(N) * nemenyi_scale(k, N)


def effect_size_from_delta(delta: float, k: int, N: int) -> float:
    return delta / nemenyi_scale(k, N) / math.sqrt(N)


@lru_cache(maxsize=16)
def _range_samples(k: int, n_samples: int, seed: int) -> np.ndarray:
    stream = derive_stream(seed, "studentized-range", k)
    out = np.empty(n_samples)
    chunk = 100_000
    for start in range(0, n_samples, chunk):
        m = min(chunk, n_samples - start)
        z = stream.normal((m, k))
        out[start:start + m] = z.max(axis=1) - z.min(axis=1)
    out.sort()
    out.setflags(write=False)
    return out


def studentized_range_sf(q, k: int, n_samples: int = NEMENYI_SAMPLES, seed: int = NEMENYI_SEED):
    """P(range of k iid standard normals >= q), by fixed-seed Monte Carlo."""
    samples = _range_samples(k, n_samples, seed)
    q = np.asarray(q, dtype=np.float64)
    return (n_samples - np.searchsorted(samples, q, side="left")) / n_samples


@dataclass
class FriedmanNemenyi:
    methods: list[str]
    avg_ranks: np.ndarray
    statistic: float
    pvalue: float
    nemenyi_p: np.ndarray  # (k, k)
    groups: list[list[str]]
    alpha: float


def average_ranks(scores: np.ndarray, higher_is_better: bool = True) -> np.ndarray:
    """Per-row ranks (1 = best, ties averaged), shape (N, k)."""
    s = np.asarray(scores, dtype=np.float64)
    return np.vstack([stats.rankdata(-row if higher_is_better else row) for row in s])


def friedman_nemenyi(
    scores,
    methods: Sequence[str],
    alpha: float = 0.05,
    higher_is_better: bool = True,
    n_samples: int = NEMENYI_SAMPLES,
) -> FriedmanNemenyi:
    """Friedman test over N settings x k methods with Nemenyi post-hoc p-values."""
    s = np.asarray(scores, dtype=np.float64)
    N, k = s.shape
    if N < 2 or k < 2:
        raise ValueError(f"need N >= 2 settings and k >= 2 methods, got N={N}, k={k}")
    ranks = average_ranks(s, higher_is_better)
    R = ranks.mean(axis=0)
    chi2 = 12.0 * N / (k * (k + 1)) * (np.sum(R**2) - k * (k + 1) ** 2 / 4.0)
    # tie correction
    tie_term = sum(((cnt**3 - cnt).sum()) for cnt in (np.unique(row, return_counts=True)[1] for row in ranks))
    denom = 1.0 - tie_term / (N * (k**3 - k))
    chi2 = chi2 / denom if denom > 0 else 0.0
    pvalue = float(stats.chi2.sf(chi2, k - 1))
    z = np.abs(R[:, None] - R[None, :]) / nemenyi_scale(k, N)
    pmat = studentized_range_sf(z * math.sqrt(2.0), k, n_samples)
    np.fill_diagonal(pmat, 1.0)
    return FriedmanNemenyi(list(methods), R, float(chi2), pvalue, pmat, significance_groups(R, pmat, methods, alpha), alpha)


def significance_groups(avg_ranks, pmat, methods, alpha: float) -> list[list[str]]:
    """Maximal sets of methods with no pairwise-significant difference.

    p decreases with rank distance, so in rank order such sets are contiguous runs.
    """
    order = np.argsort(avg_ranks, kind="stable")
    runs = []
    for a in range(len(order)):
        b = a
        while b + 1 < len(order) and pmat[order[a], order[b + 1]] >= alpha:
            b += 1
        runs.append((a, b))
    maximal = [r for r in runs if not any(o != r and o[0] <= r[0] and r[1] <= o[1] for o in runs)]
    seen, groups = set(), []
    for a, b in maximal:
        if (a, b) not in seen:
            seen.add((a, b))
            groups.append([methods[order[i]] for i in range(a, b + 1)])
    return groups


# ---------------------------------------------------------------------------
# aggregated means


def aggregate_mean_ci(means: Sequence[float], stds: Sequence[float], n_seeds: int) -> tuple[float, float, float]:
    """Mean over settings with error propagation; returns (mean, standard error, 95% half-width)."""
    mu = np.asarray(means, dtype=np.float64)
    sd = np.asarray(stds, dtype=np.float64)
    if mu.size < 1 or mu.shape != sd.shape:
        raise ValueError("need matching, non-empty means and stds")
    if n_seeds < 2:
        raise ValueError("need at least two seeds")
    S = mu.size
    se = math.sqrt(float(np.sum((sd / math.sqrt(n_seeds)) ** 2))) / S
    return float(mu.mean()), se, Z95 * se
