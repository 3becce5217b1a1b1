"""Relevance pivots + coverage completion, and the progressive stage schedule.

Each stage keeps exactly ``R_s`` of the current survivors: ``K1 = floor(a R_s)``
attention pivots, then ``K2 = R_s - K1`` medoids of a spherical K-means run
over the non-pivot pool, seeded with the ``K2`` tokens least similar to any
pivot. Every tie (top-K, bottom-K, cluster assignment, medoid) resolves to
the lowest index.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .core import AdapruneError, LayerStack, ShapeMismatch, TokenMatrix, ZeroNormRow, l2_normalize_rows
from .fusion import IDENTITY, ClassProfile, Projection, align_stack, fuse, project
from .saliency import AttentionRecord, saliency

log = logging.getLogger(__name__)

DEFAULT_ITERS = 5
DEFAULT_STAGE_LAYERS = (2, 6, 15)
# effective budget R -> per-stage retention at decoder layers 2/6/15, for 576 input tokens
PRESET_SCHEDULES = {192: (300, 200, 110), 128: (303, 110, 36), 64: (66, 30, 17)}


class BudgetExceedsPool(AdapruneError):
    pass


class EmptyPivotSet(AdapruneError):
    pass


class MissingAttention(AdapruneError):
    pass


class StageError(AdapruneError):
    def __init__(self, stage_layer: int, cause: Exception):
        super().__init__(f"stage at decoder layer {stage_layer}: {cause}")
        self.stage_layer = stage_layer
        self.cause = cause


class OpCounter:
    """Tally of multiply-adds per pipeline step (``fusion``, ``redundancy``, ``kmeans``, ``medoid``).

    Work that is only needed to record the objective trace goes to ``aux``.
    """

    def __init__(self):
        self.counts: Counter[str] = Counter()

    def add(self, key: str, n: int) -> None:
        self.counts[key] += int(n)

    def __getitem__(self, key: str) -> int:
        return self.counts[key]

    def as_dict(self) -> dict[str, int]:
        return dict(self.counts)


def _count(counter, key, n):
    if counter is not None:
        counter.add(key, n)


@dataclass(frozen=True)
class BudgetSplit:
    k1: int
    k2: int

    @property
    def total(self) -> int:
        return self.k1 + self.k2


def split_budget(a: float, total: int) -> BudgetSplit:
    """``K1 = floor(a * R)``, ``K2 = R - K1``.

    ``a`` is read at its shortest decimal value so grid ratios such as 0.29
    floor the way they read.
    """
    if not 0.0 <= a <= 1.0:
        raise ValueError(f"split ratio {a} outside [0, 1]")
    if total < 1:
        raise ValueError(f"budget must be >= 1, got {total}")
    k1 = int(Fraction(repr(float(a))) * int(total)) if a < 1 else int(total)
    return BudgetSplit(k1, int(total) - k1)


@dataclass(frozen=True)
class StageSchedule:
    stages: tuple[tuple[int, int], ...]

    def __post_init__(self):
        stages = tuple((int(l), int(r)) for l, r in self.stages)
        if not stages:
            raise ValueError("schedule needs at least one stage")
        budgets = [r for _, r in stages]
        if any(r < 1 for r in budgets) or any(b >= a for a, b in zip(budgets, budgets[1:])):
            raise ValueError(f"stage budgets must be >= 1 and strictly decreasing: {budgets}")
        object.__setattr__(self, "stages", stages)

    @classmethod
    def from_budgets(cls, budgets: Sequence[int], layers: Sequence[int] = DEFAULT_STAGE_LAYERS) -> "StageSchedule":
        if len(budgets) > len(layers):
            raise ValueError(f"{len(budgets)} budgets but only stage layers {tuple(layers)}")
        return cls(tuple(zip(layers, budgets)))

    @classmethod
    def parse(cls, text: str) -> "StageSchedule":
        """``"300,200,110"`` (layers 2/6/15 implied) or ``"2:300,6:200,15:110"``."""
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if parts and all(":" in p for p in parts):
            return cls(tuple(tuple(int(x) for x in p.split(":", 1)) for p in parts))
        return cls.from_budgets([int(p) for p in parts])

    @classmethod
    def preset(cls, effective_budget: int) -> "StageSchedule":
        if effective_budget not in PRESET_SCHEDULES:
            raise ValueError(f"no preset schedule for R={effective_budget}; known: {sorted(PRESET_SCHEDULES)}")
        return cls.from_budgets(PRESET_SCHEDULES[effective_budget])

    @property
    def budgets(self) -> tuple[int, ...]:
        return tuple(r for _, r in self.stages)


def select_pivots(phi: np.ndarray, k1: int) -> np.ndarray:
    """Positions of the ``k1`` largest scores (sorted ascending)."""
    phi = np.asarray(phi, dtype=np.float64).reshape(-1)
    if not 0 <= k1 <= phi.size:
        raise BudgetExceedsPool(f"{k1} pivots requested from {phi.size} tokens")
    order = np.argsort(-phi, kind="stable")
    return np.sort(order[:k1])


def pivot_redundancy(unit_pool: np.ndarray, unit_pivots: np.ndarray, counter=None) -> np.ndarray:
    """Worst-case cosine overlap of every pool token with the pivot set."""
    if len(unit_pivots) == 0:
        raise EmptyPivotSet("redundancy needs at least one pivot")
    pool = np.asarray(unit_pool, dtype=np.float64)
    piv = np.asarray(unit_pivots, dtype=np.float64)
    if pool.shape[1] != piv.shape[1]:
        raise ShapeMismatch("pool and pivot features differ in width")
    _count(counter, "redundancy", pool.shape[0] * piv.shape[0] * pool.shape[1])
    if pool.shape[0] == 0:
        return np.zeros(0)
    return np.clip((pool @ piv.T).max(axis=1), -1.0, 1.0)


def seed_completion(rho: np.ndarray, k2: int) -> tuple[np.ndarray, float | None]:
    """Bottom-``k2`` positions by redundancy and the threshold ``delta`` (largest seed rho)."""
    rho = np.asarray(rho, dtype=np.float64).reshape(-1)
    if not 0 <= k2 <= rho.size:
        raise BudgetExceedsPool(f"{k2} seeds requested from {rho.size} tokens")
    if k2 == 0:
        return np.zeros(0, dtype=np.int64), None
    seeds = np.sort(np.argsort(rho, kind="stable")[:k2])
    return seeds, float(rho[seeds].max())


@dataclass(frozen=True)
class ClusterState:
    assignments: np.ndarray  # pool position -> cluster id (0-based)
    centers: np.ndarray  # K2 x d unit rows, float64
    j_trace: tuple[float, ...]
    iterations_run: int
    frozen: tuple[int, ...] = ()  # clusters that were empty at some update

    @property
    def k(self) -> int:
        return self.centers.shape[0]


def coverage_objective(centers: np.ndarray, unit_pool: np.ndarray) -> float:
    """Sum over tokens of the best cosine similarity to any center."""
    pool = np.asarray(unit_pool, dtype=np.float64)
    if pool.shape[0] == 0:
        return 0.0
    return float((pool @ np.asarray(centers, dtype=np.float64).T).max(axis=1).sum())


def spherical_kmeans(unit_pool: np.ndarray, seed_rows: np.ndarray, iters: int = DEFAULT_ITERS, counter=None) -> ClusterState:
    """Cosine K-means started from the seed rows; coordinate ascent on the coverage objective.

    A cluster that ends an assignment step empty (or whose members cancel out)
    keeps its previous center.
    """
    x = np.asarray(unit_pool, dtype=np.float64)
    seed_rows = np.asarray(seed_rows, dtype=np.int64)
    if seed_rows.size < 1:
        raise ValueError("spherical K-means needs at least one seed")
    if iters < 0:
        raise ValueError("iteration count must be >= 0")
    n, d = x.shape
    k = seed_rows.size
    centers = x[seed_rows].copy()
    sims = x @ centers.T
    trace = [float(sims.max(axis=1).sum())]
    assign = sims.argmax(axis=1)
    frozen: set[int] = set()
    for _ in range(iters):
        # the similarity matrix for this assignment was produced at the end of the previous round
        assign = sims.argmax(axis=1)
        _count(counter, "kmeans", n * k * d)
        sums = np.zeros((k, d))
        np.add.at(sums, assign, x)
        _count(counter, "kmeans", n * d)
        norms = np.linalg.norm(sums, axis=1)
        live = norms > 1e-12
        frozen.update(np.flatnonzero(~live).tolist())
        centers[live] = sums[live] / norms[live, None]
        sims = x @ centers.T
        trace.append(float(sims.max(axis=1).sum()))
    # objective-only work: the post-update similarity pass of the last round (or the seed pass when iters == 0)
    _count(counter, "aux", n * k * d)
    return ClusterState(assign, centers, tuple(trace), iters, tuple(sorted(frozen)))


def select_medoids(cluster: ClusterState, unit_pool: np.ndarray, rho: np.ndarray | None = None, counter=None) -> np.ndarray:
    """One member per cluster closest to its center; empty clusters are backfilled.

    Backfill takes the not-yet-chosen pool token with the smallest redundancy
    (lowest position when ``rho`` is None or tied).
    """
    x = np.asarray(unit_pool, dtype=np.float64)
    assign = cluster.assignments
    own = np.einsum("ij,ij->i", x, cluster.centers[assign])
    _count(counter, "medoid", x.shape[0] * x.shape[1])
    chosen: list[int] = []
    empty = 0
    for c in range(cluster.k):
        members = np.flatnonzero(assign == c)
        if members.size == 0:
            empty += 1
            continue
        chosen.append(int(members[np.argmax(own[members])]))
    if empty:
        key = np.zeros(x.shape[0]) if rho is None else np.asarray(rho, dtype=np.float64)
        taken = set(chosen)
        for pos in np.argsort(key, kind="stable"):
            if empty == 0:
                break
            if int(pos) not in taken:
                chosen.append(int(pos))
                taken.add(int(pos))
                empty -= 1
    return np.sort(np.asarray(chosen, dtype=np.int64))


@dataclass(frozen=True)
class PruneStageResult:
    stage_layer: int
    survivors: np.ndarray
    split: BudgetSplit
    pivots: np.ndarray
    completion: np.ndarray
    seeds: np.ndarray
    delta: float | None
    cluster: ClusterState | None
    retained: np.ndarray
    attn_reused: bool = False
    flags: tuple[str, ...] = ()

    @property
    def pool(self) -> np.ndarray:
        return np.setdiff1d(self.survivors, self.pivots, assume_unique=True)


def prune_stage(
    feats: TokenMatrix | np.ndarray,
    phi: np.ndarray,
    a: float,
    budget: int,
    iters: int = DEFAULT_ITERS,
    survivors: np.ndarray | None = None,
    stage_layer: int = 0,
    attn_reused: bool = False,
    counter=None,
) -> PruneStageResult:
    """Keep exactly ``budget`` of the rows of ``feats`` (token ids given by ``survivors``)."""
    data = feats.data if isinstance(feats, TokenMatrix) else np.asarray(feats)
    n = data.shape[0]
    survivors = np.arange(n, dtype=np.int64) if survivors is None else np.asarray(survivors, dtype=np.int64)
    phi = np.asarray(phi, dtype=np.float64).reshape(-1)
    if survivors.shape[0] != n or phi.shape[0] != n:
        raise ShapeMismatch(f"{n} feature rows, {survivors.shape[0]} survivors, {phi.shape[0]} scores")
    if budget > n:
        raise BudgetExceedsPool(f"stage budget {budget} exceeds {n} surviving tokens")
    split = split_budget(a, budget)
    piv = select_pivots(phi, split.k1)
    pool = np.setdiff1d(np.arange(n), piv, assume_unique=True)
    flags: list[str] = []
    seeds = np.zeros(0, dtype=np.int64)
    q = np.zeros(0, dtype=np.int64)
    delta = None
    cluster = None
    if split.k2 > 0:
        try:
            # float64 units keep the cosine/distance identities exact to rounding
            unit = l2_normalize_rows(data, np.float64)
        except ZeroNormRow as exc:
            raise ZeroNormRow(int(survivors[exc.index])) from None
        upool = unit[pool]
        if split.k1 > 0:
            rho = pivot_redundancy(upool, unit[piv], counter)
            seeds, delta = seed_completion(rho, split.k2)
        else:
            rho = None
            seeds = np.arange(split.k2, dtype=np.int64)
            flags.append("no_pivots")
        cluster = spherical_kmeans(upool, seeds, iters, counter)
        if cluster.frozen:
            flags.append("empty_clusters")
        q = pool[select_medoids(cluster, upool, rho, counter)]
        seeds = pool[seeds]
    retained = np.union1d(piv, q)
    return PruneStageResult(
        stage_layer=int(stage_layer),
        survivors=survivors,
        split=split,
        pivots=survivors[piv],
        completion=survivors[q],
        seeds=survivors[seeds],
        delta=delta,
        cluster=cluster,
        retained=survivors[retained],
        attn_reused=attn_reused,
        flags=tuple(flags),
    )


@dataclass(frozen=True)
class PruneTrace:
    stages: tuple[PruneStageResult, ...]
    category: int | None
    profile: ClassProfile | None
    alpha: np.ndarray | None
    iters: int
    num_tokens: int
    features: TokenMatrix | None = field(default=None, repr=False)

    @property
    def retained(self) -> np.ndarray:
        return self.stages[-1].retained


def _records_by_stage(records) -> dict[int, AttentionRecord]:
    if isinstance(records, Mapping):
        return {int(k): v for k, v in records.items()}
    return {r.stage_layer: r for r in records}


def run_schedule(
    source: LayerStack | TokenMatrix,
    records: Mapping[int, AttentionRecord] | Sequence[AttentionRecord],
    profile: ClassProfile | None,
    schedule: StageSchedule,
    iters: int = DEFAULT_ITERS,
    projection: Projection = IDENTITY,
    category: int | None = None,
    split_ratio: float | None = None,
    align_mode: str = "bilinear",
    keep_cls: bool = False,
    counter=None,
) -> PruneTrace:
    """Fuse and project once, then prune stage by stage.

    ``source`` is a layer stack (mixed with the profile's weights) or an
    already-fused token matrix. A stage without its own attention record reuses
    the previous stage's record, restricted to the survivors, and is flagged.
    """
    alpha = None
    if isinstance(source, LayerStack):
        if profile is None:
            raise ValueError("a profile is required to fuse a layer stack")
        stack = align_stack(source, mode=align_mode) if not source.is_aligned() else source
        alpha = profile.mixture(stack.layer_ids)
        fused = fuse(stack, alpha, keep_cls=keep_cls, counter=counter)
    else:
        fused = source
    feats = project(fused, projection)
    a = split_ratio if split_ratio is not None else (profile.split_ratio if profile else None)
    if a is None:
        raise ValueError("split ratio unknown: pass a profile or split_ratio")
    by_stage = _records_by_stage(records)
    survivors = np.arange(feats.rows, dtype=np.int64)
    if schedule.stages[0][1] > feats.rows:
        raise BudgetExceedsPool(f"first stage keeps {schedule.stages[0][1]} of only {feats.rows} tokens")
    results = []
    prev = None
    for layer, budget in schedule.stages:
        try:
            rec = by_stage.get(layer)
            reused = rec is None
            if reused:
                if prev is None:
                    raise MissingAttention(f"no attention record for decoder layer {layer}")
                log.info("stage %d: reusing attention recorded at layer %d", layer, prev.stage_layer)
                rec = prev
            phi = saliency(rec, survivors)
            res = prune_stage(
                feats.data[survivors], phi, a, budget, iters,
                survivors=survivors, stage_layer=layer, attn_reused=reused, counter=counter,
            )
        except AdapruneError as exc:
            raise StageError(layer, exc) from exc
        results.append(res)
        survivors = res.retained
        prev = rec
    return PruneTrace(tuple(results), category, profile, alpha, iters, feats.rows, feats)
