"""Query methods: random baselines, top-k uncertainty, power/softrank noising and ClaSP.

Every selector is greedy over a ranked candidate list and accepts a patch only
if its overlap with the image's annotated voxels plus the patches already taken
this round is at most ``o``. Ranking ties are broken by (image id, z, y, x)
ascending so results are a pure function of inputs and the random stream.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .core import AnnotationState, LabelVolume, PatchBox, RngStream
from .patchscore import CandidateSet, OverlapIndex, aggregate_patch_scores
from .uncertainty import StratifiedScoreStack

SCORE_FLOOR = 1e-12
RETRY_FACTOR = 10_000

KINDS = ("random", "random_fg", "topk", "power", "softrank", "clasp", "cla", "clap")
_REQUIRED = {
    "random": (),
    "random_fg": ("fg_fraction",),
    "topk": ("uncertainty",),
    "power": ("uncertainty", "beta"),
    "softrank": ("uncertainty", "beta"),
    "clasp": ("uncertainty", "alpha", "beta0", "beta_max"),
    "cla": ("uncertainty", "alpha"),
    "clap": ("uncertainty", "alpha", "beta"),
}
_OPTIONAL = ("fg_fraction", "uncertainty", "alpha", "beta", "beta0", "beta_max")


@dataclass(frozen=True)
class QueryMethodSpec:
    kind: str
    uncertainty: str | None = None
    fg_fraction: float | None = None
    alpha: float | None = None
    beta: float | None = None
    beta0: float | None = None
    beta_max: float | None = None
    overlap: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown method kind {self.kind!r}; expected one of {KINDS}")
        need = _REQUIRED[self.kind]
        for name in _OPTIONAL:
            present = getattr(self, name) is not None
            if present != (name in need):
                verb = "requires" if name in need else "does not take"
                raise ValueError(f"method kind {self.kind!r} {verb} parameter {name!r}")
        if self.uncertainty is not None and self.uncertainty not in ("pe", "bald"):
            raise ValueError(f"uncertainty must be 'pe' or 'bald', got {self.uncertainty!r}")
        if self.fg_fraction is not None and not 0 <= self.fg_fraction <= 1:
            raise ValueError("fg_fraction must lie in [0, 1]")
        if self.alpha is not None and not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        for name in ("beta", "beta0", "beta_max"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.overlap < 1:
            raise ValueError("overlap must lie in [0, 1)")

    @property
    def uses_model(self) -> bool:
        return self.kind not in ("random", "random_fg")

    @property
    def stratified(self) -> bool:
        return self.kind in ("clasp", "cla", "clap")

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d: dict) -> "QueryMethodSpec":
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown method keys: {sorted(unknown)}")
        return cls(**d)


METHODS: dict[str, QueryMethodSpec] = {
    "random": QueryMethodSpec("random"),
    "random_fg33": QueryMethodSpec("random_fg", fg_fraction=0.33),
    "random_fg66": QueryMethodSpec("random_fg", fg_fraction=0.66),
    "pe": QueryMethodSpec("topk", uncertainty="pe"),
    "bald": QueryMethodSpec("topk", uncertainty="bald"),
    "power_pe": QueryMethodSpec("power", uncertainty="pe", beta=1.0),
    "power_bald": QueryMethodSpec("power", uncertainty="bald", beta=1.0),
    "softrank_bald": QueryMethodSpec("softrank", uncertainty="bald", beta=1.0),
    "clasp_pe": QueryMethodSpec("clasp", uncertainty="pe", alpha=0.66, beta0=1.0, beta_max=100.0),
    "cla_pe33": QueryMethodSpec("cla", uncertainty="pe", alpha=0.33),
    "cla_pe66": QueryMethodSpec("cla", uncertainty="pe", alpha=0.66),
    "clap_pe": QueryMethodSpec("clap", uncertainty="pe", alpha=0.66, beta=1.0),
}

# the nine methods compared on the main benchmark
MAIN_METHODS = (
    "random", "random_fg33", "random_fg66", "pe", "bald",
    "power_pe", "power_bald", "softrank_bald", "clasp_pe",
)


def method_spec(method: str | dict | QueryMethodSpec) -> QueryMethodSpec:
    if isinstance(method, QueryMethodSpec):
        return method
    if isinstance(method, str):
        try:
            return METHODS[method]
        except KeyError:
            raise ValueError(f"unknown method preset {method!r}; known: {sorted(METHODS)}") from None
    return QueryMethodSpec.from_dict(dict(method))


@dataclass(frozen=True)
class QueryEntry:
    image_id: int
    box: PatchBox
    channel: int | str
    raw: float
    noised: float

    def to_json(self) -> dict:
        return {
            "image": self.image_id,
            "origin": list(self.box.origin),
            "size": list(self.box.size),
            "channel": self.channel,
            "raw_score": self.raw,
            "noised_score": self.noised,
        }


@dataclass
class QueryResult:
    entries: list[QueryEntry]
    cycle: int = 0
    exhausted: bool = False
    shortfall: dict[int, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def boxes(self) -> list[tuple[int, PatchBox]]:
        return [(e.image_id, e.box) for e in self.entries]


def floor_share(fraction: float, n: int) -> int:
    """floor(fraction * n), robust to binary representation error (0.29 * 100 -> 29)."""
    return math.floor(round(fraction * n, 9))


def beta_schedule(t: int, T: int, beta0: float = 1.0, beta_max: float = 100.0) -> float:
    """Exponential interpolation from beta0 at t = 0 to beta_max at t = T."""
    if T < 1 or not 0 <= t <= T:
        raise ValueError(f"need T >= 1 and 0 <= t <= T, got t={t}, T={T}")
    if t == 0:
        return float(beta0)
    if t == T:
        return float(beta_max)
    return math.exp((1 - t / T) * math.log(beta0) + (t / T) * math.log(beta_max))


def overlap_indexes(annotations: AnnotationState, patch) -> dict[int, OverlapIndex]:
    """Lazily built per-image overlap indexes seeded with the annotated masks."""

    class _Lazy(dict):
        def __missing__(self, i):
            mask = annotations.masks[i]
            idx = OverlapIndex(mask.shape, patch, mask=mask)
            self[i] = idx
            return idx

    return _Lazy()


def _blocked(cands: CandidateSet, sub: np.ndarray, indexes) -> np.ndarray:
    ids = cands.image_ids[sub]
    org = cands.origins[sub]
    out = np.empty(len(sub), dtype=bool)
    for i in np.unique(ids):
        m = ids == i
        b = indexes[int(i)].blocked
        out[m] = b[org[m, 0], org[m, 1], org[m, 2]]
    return out


def _greedy(cands: CandidateSet, order, indexes, o: float, limit: int) -> list[int]:
    """Walk candidates in ranked order, keeping those admitted by the overlap rule.

    ``order`` is a ranked index array or an iterable of consecutive ranked chunks.
    """
    taken: list[int] = []
    if limit <= 0:
        return taken
    chunks = [order] if isinstance(order, np.ndarray) else order
    fast = o == 0 and all(indexes[int(i)].patch == cands.size for i in np.unique(cands.image_ids))
    for chunk in chunks:
        if fast:
            # blocked origins can only grow, so re-filter the tail after each pick
            rest = chunk[~_blocked(cands, chunk, indexes)]
            while rest.size:
                j = int(rest[0])
                idx = indexes[int(cands.image_ids[j])]
                idx.add(cands.box(j))
                taken.append(j)
                if len(taken) >= limit:
                    return taken
                rest = rest[1:]
                rest = rest[~_blocked(cands, rest, indexes)]
            continue
        for j in chunk:
            idx = indexes[int(cands.image_ids[j])]
            box = cands.box(j)
            if idx.admits(box, o):
                idx.add(box)
                taken.append(int(j))
                if len(taken) >= limit:
                    return taken
    return taken


def _entries(cands: CandidateSet, picks: Sequence[int], channel) -> list[QueryEntry]:
    return [
        QueryEntry(int(cands.image_ids[j]), cands.box(j), channel, float(cands.scores[j]), float(cands.noised[j]))
        for j in picks
    ]


def select_topk(
    candidates: CandidateSet | Sequence[CandidateSet],
    n: int,
    o: float,
    annotations: AnnotationState,
    key: str = "noised",
    channel="global",
) -> QueryResult:
    """Greedy descending sweep over the pooled candidates of all images."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cands = candidates if isinstance(candidates, CandidateSet) else CandidateSet.concat(candidates)
    patch = cands.size
    picks = _greedy(cands, cands.ranked_chunks(key), overlap_indexes(annotations, patch), o, n)
    return QueryResult(_entries(cands, picks, channel), exhausted=len(picks) < n)


def log_scores(cands: CandidateSet, floor: float = SCORE_FLOOR) -> np.ndarray:
    return np.log(np.maximum(cands.scores, floor))


def apply_power_noise(cands: CandidateSet, beta: float, stream: RngStream, floor: float = SCORE_FLOOR) -> CandidateSet:
    """log(max(score, floor)) + Gumbel(0, 1/beta)."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    noise = stream.gumbel(1.0 / beta, len(cands))
    return cands.with_noised(log_scores(cands, floor) + noise)


def apply_softrank_noise(cands: CandidateSet, beta: float, stream: RngStream) -> CandidateSet:
    """-log(rank) + Gumbel(0, 1/beta), rank 1 = best raw score over the whole pool."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    ranks = np.empty(len(cands))
    ranks[cands.ranking("scores")] = np.arange(1, len(cands) + 1)
    noise = stream.gumbel(1.0 / beta, len(cands))
    return cands.with_noised(-np.log(ranks) + noise)


def _random_origin(dims, patch, stream: RngStream) -> tuple[int, int, int]:
    return tuple(int(stream.integers(0, d - p + 1)) for d, p in zip(dims, patch))


def query_random(
    dims: Sequence[Sequence[int]],
    patch: Sequence[int],
    n: int,
    o: float,
    stream: RngStream,
    annotations: AnnotationState,
    indexes=None,
) -> QueryResult:
    """Uniform image, then uniform in-bounds origin; rejection on overlap."""
    patch = tuple(patch)
    indexes = overlap_indexes(annotations, patch) if indexes is None else indexes
    entries: list[QueryEntry] = []
    attempts = 0
    cap = RETRY_FACTOR * max(n, 1)
    while len(entries) < n and attempts < cap:
        attempts += 1
        i = int(stream.integers(0, len(dims)))
        box = PatchBox(_random_origin(dims[i], patch, stream), patch)
        if indexes[i].admits(box, o):
            indexes[i].add(box)
            entries.append(QueryEntry(i, box, "random", 0.0, 0.0))
    return QueryResult(entries, exhausted=len(entries) < n)


class ClassVoxels:
    """Flat ground-truth voxel coordinates per foreground class over the pool."""

    def __init__(self, labels: Sequence[LabelVolume]):
        self.n_classes = labels[0].n_classes
        self.dims = [lab.dims for lab in labels]
        per_class: dict[int, list[np.ndarray]] = {c: [] for c in range(1, self.n_classes + 1)}
        for i, lab in enumerate(labels):
            flat = lab.labels.ravel()
            for c in range(1, self.n_classes + 1):
                pos = np.flatnonzero(flat == c)
                if pos.size:
                    per_class[c].append(np.stack([np.full(pos.size, i), pos], axis=1))
        self.voxels = {
            c: (np.concatenate(v) if v else np.empty((0, 2), dtype=np.int64)) for c, v in per_class.items()
        }

    def present(self) -> list[int]:
        return [c for c, v in self.voxels.items() if len(v)]

    def count(self, c: int) -> int:
        return len(self.voxels[c])

    def draw(self, c: int, stream: RngStream) -> tuple[int, tuple[int, int, int]]:
        vox = self.voxels[c]
        i, flat = vox[int(stream.integers(0, len(vox)))]
        return int(i), tuple(int(v) for v in np.unravel_index(int(flat), self.dims[int(i)]))


def centered_box(voxel, dims, patch) -> PatchBox:
    origin = tuple(min(max(v - p // 2, 0), d - p) for v, d, p in zip(voxel, dims, patch))
    return PatchBox(origin, tuple(patch))


def fg_centered_patch(
    c: int, voxels: ClassVoxels, patch, o: float, stream: RngStream, indexes, max_attempts: int
) -> QueryEntry | None:
    """Patch centred on a uniformly drawn voxel of class ``c``, retried until it fits."""
    for _ in range(max_attempts):
        i, v = voxels.draw(c, stream)
        box = centered_box(v, voxels.dims[i], patch)
        if indexes[i].admits(box, o):
            indexes[i].add(box)
            return QueryEntry(i, box, f"fg:{c}", 0.0, 0.0)
    return None


def query_random_fg(
    labels: Sequence[LabelVolume],
    patch: Sequence[int],
    n: int,
    fg_fraction: float,
    o: float,
    stream: RngStream,
    annotations: AnnotationState,
    voxels: ClassVoxels | None = None,
) -> QueryResult:
    """Foreground-aware random: a share of patches centred on ground-truth foreground.

    Classes are visited round-robin in a stream-shuffled order so the
    foreground share stays class balanced.
    """
    patch = tuple(patch)
    dims = [lab.dims for lab in labels]
    indexes = overlap_indexes(annotations, patch)
    n_fg = floor_share(fg_fraction, n)
    entries: list[QueryEntry] = []
    exhausted = False
    if n_fg > 0:
        voxels = ClassVoxels(labels) if voxels is None else voxels
        classes = voxels.present()
        if classes:
            order = [classes[k] for k in stream.permutation(len(classes))]
            budget = RETRY_FACTOR * n_fg
            for k in range(n_fg):
                e = fg_centered_patch(order[k % len(order)], voxels, patch, o, stream, indexes, budget)
                if e is None:
                    exhausted = True
                    break
                entries.append(e)
    rest = query_random(dims, patch, n - len(entries), o, stream, annotations, indexes=indexes)
    return QueryResult(entries + rest.entries, exhausted=exhausted or rest.exhausted)


def _noised(cands: CandidateSet, beta: float | None, stream: RngStream) -> CandidateSet:
    if beta is None or math.isinf(beta):
        return cands.with_noised(log_scores(cands))
    return apply_power_noise(cands, beta, stream)


def query_clasp(
    stacks: Sequence[StratifiedScoreStack],
    n: int,
    alpha: float,
    beta: float | None,
    o: float,
    annotations: AnnotationState,
    stream: RngStream,
    patch: Sequence[int],
    stride: int = 1,
) -> QueryResult:
    """Class-stratified selection with log-scale power noise at inverse scale ``beta``.

    ``beta=None`` (or inf) disables noising. A per-class shortfall is recorded
    in ``shortfall`` and filled from the global channel instead.
    """
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must lie in [0, 1]")
    patch = tuple(patch)
    C = stacks[0].n_classes
    per_class = floor_share(alpha, n) // C
    # the unstratified pool must be able to cover the fill even when alpha = 0
    per_image_global = max(per_class, n - C * per_class)

    pools: dict[int | str, list[CandidateSet]] = {c: [] for c in range(1, C + 1)}
    pools["global"] = []
    for i, stack in enumerate(stacks):
        mask = annotations.masks[i]
        image_index = {i: OverlapIndex(mask.shape, patch, mask=mask)}
        if per_class > 0:
            for c in (int(k) + 1 for k in stream.permutation(C)):
                cands = _noised(aggregate_patch_scores(stack.class_channel(c), patch, stride, i), beta, stream)
                picks = _greedy(cands, cands.ranked_chunks(), image_index, o, per_class)
                pools[c].append(cands.take(np.array(picks, dtype=np.intp)))
        cands = _noised(aggregate_patch_scores(stack.global_channel, patch, stride, i), beta, stream)
        picks = _greedy(cands, cands.ranked_chunks(), image_index, o, per_image_global)
        pools["global"].append(cands.take(np.array(picks, dtype=np.intp)))

    indexes = overlap_indexes(annotations, patch)
    entries: list[QueryEntry] = []
    shortfall: dict[int, int] = {}
    for c in range(1, C + 1):
        if per_class == 0:
            break
        cands = CandidateSet.concat(pools[c])
        picks = _greedy(cands, cands.ranked_chunks(), indexes, o, per_class)
        entries += _entries(cands, picks, c)
        if len(picks) < per_class:
            shortfall[c] = per_class - len(picks)
    cands = CandidateSet.concat(pools["global"])
    remaining = n - len(entries)
    picks = _greedy(cands, cands.ranked_chunks(), indexes, o, remaining)
    entries += _entries(cands, picks, "global")
    return QueryResult(entries, exhausted=len(entries) < n, shortfall=shortfall)


def query(
    spec: QueryMethodSpec,
    *,
    n: int,
    patch: Sequence[int],
    stride: int,
    annotations: AnnotationState,
    stream: RngStream,
    labels: Sequence[LabelVolume] | None = None,
    fields: Sequence[np.ndarray] | None = None,
    stacks: Sequence[StratifiedScoreStack] | None = None,
    t: int = 0,
    T: int = 1,
    cycle: int = 0,
) -> QueryResult:
    """Dispatch one query round for ``spec``.

    ``fields`` holds the per-image global uncertainty map (top-k, power and
    softrank kinds); ``stacks`` the stratified stacks (clasp kinds); ``labels``
    is read only by the random kinds.
    """
    o = spec.overlap
    if spec.kind == "random":
        res = query_random([lab.dims for lab in labels], patch, n, o, stream, annotations)
    elif spec.kind == "random_fg":
        res = query_random_fg(labels, patch, n, spec.fg_fraction, o, stream, annotations)
    elif spec.kind in ("topk", "power", "softrank"):
        cands = CandidateSet.concat([aggregate_patch_scores(f, patch, stride, i) for i, f in enumerate(fields)])
        if spec.kind == "power":
            cands = apply_power_noise(cands, spec.beta, stream)
        elif spec.kind == "softrank":
            cands = apply_softrank_noise(cands, spec.beta, stream)
        res = select_topk(cands, n, o, annotations)
    else:
        beta = query_beta(spec, t, T)
        res = query_clasp(stacks, n, spec.alpha, beta, o, annotations, stream, patch, stride)
    res.cycle = cycle
    return res


def query_beta(spec: QueryMethodSpec, t: int, T: int) -> float | None:
    """The inverse noise scale a method uses at query step ``t``; None if noise-free."""
    if spec.kind == "clasp":
        # a single query step has nothing to interpolate and stays at beta0
        return beta_schedule(t, T, spec.beta0, spec.beta_max) if T >= 1 else spec.beta0
    if spec.kind in ("power", "softrank", "clap"):
        return spec.beta
    return None
