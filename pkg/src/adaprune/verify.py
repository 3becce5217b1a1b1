"""Randomized and exact checks of the fusion / pruning guarantees, plus op-count accounting.

Every bound checked here is a theorem about the construction, so a single
violation means an implementation defect. Probes draw from a seeded
generator recorded in each report.
"""

from __future__ import annotations

import itertools
import json
import math
from fractions import Fraction
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import pruner
from .core import LayerStack, TokenMatrix, l2_normalize_rows
from .fusion import check_simplex, default_profiles, fuse, project, Projection, softmax_mixture, softmax_rows
from .router import NUM_CATEGORIES


class DegenerateArgmax(ValueError):
    pass


@dataclass
class ProbeConfig:
    seed: int = 0
    cos_euclid_pairs: int = 10_000
    lipschitz_probes: int = 100_000
    stability_probes: int = 10_000
    hull_probes: int = 1_000
    seed_instances: int = 500
    kmeans_runs: int = 1_000
    prune_runs: int = 300
    complexity_configs: int = 50
    max_layers: int = 32
    score_range: float = 10.0
    taus: tuple[float, ...] = (0.1, 1.0, 4.0)
    norm_bound: float = 4.0
    max_pool: int = 18
    max_k2: int = 6
    iters: int = 5
    tol_unit: float = 1e-6
    tol_lipschitz: float = 1e-9
    tol_stability: float = 1e-6
    tol_hull: float = 1e-5
    tol_seed: float = 1e-9

    def __post_init__(self):
        counts = [self.cos_euclid_pairs, self.lipschitz_probes, self.stability_probes, self.hull_probes,
                  self.seed_instances, self.kmeans_runs, self.prune_runs, self.complexity_configs]
        if min(counts) < 1 or self.norm_bound <= 0 or min(self.taus) <= 0:
            raise ValueError("probe counts must be >= 1, norm bound and temperatures > 0")

    @classmethod
    def quick(cls, seed: int = 0) -> "ProbeConfig":
        return cls(seed=seed, cos_euclid_pairs=500, lipschitz_probes=5_000, stability_probes=500,
                   hull_probes=100, seed_instances=100, kmeans_runs=100, prune_runs=50, complexity_configs=10)


@dataclass
class CheckReport:
    name: str
    trials: int = 0
    worst_slack: float = math.inf
    violations: int = 0
    exemplars: list = field(default_factory=list)
    seed: int | None = None
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def record(self, slack: float, exemplar=None) -> None:
        """Count one trial; negative slack is a violation."""
        self.trials += 1
        self.worst_slack = min(self.worst_slack, float(slack))
        if slack < 0:
            self.violations += 1
            if exemplar is not None and len(self.exemplars) < 5:
                self.exemplars.append(exemplar)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        d["worst_slack"] = None if math.isinf(self.worst_slack) else self.worst_slack
        return d

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        slack = "n/a" if math.isinf(self.worst_slack) else f"{self.worst_slack:.3e}"
        return f"[{status}] {self.name}: {self.trials} trials, {self.violations} violations, worst slack {slack}"


def _rng(cfg: ProbeConfig, salt: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, salt])


def _random_units(rng, n, d) -> np.ndarray:
    return l2_normalize_rows(rng.standard_normal((n, d)), np.float64)


# -- geometry ---------------------------------------------------------------

def check_cos_euclid(cfg: ProbeConfig = ProbeConfig()) -> CheckReport:
    rep = CheckReport("cos_euclid", seed=cfg.seed)
    rng = _rng(cfg, 1)
    for i in range(cfg.cos_euclid_pairs):
        d = int(rng.integers(1, 65))
        u, v = _random_units(rng, 2, d).astype(np.float64)
        if i % 50 == 0:
            v = u.copy()
        elif i % 50 == 1:
            v = -u
        lhs = float(np.sum((u - v) ** 2))
        rhs = 2.0 * (1.0 - float(u @ v))
        rep.record(cfg.tol_unit - abs(lhs - rhs), {"d": d, "lhs": lhs, "rhs": rhs})
    return rep


# -- fusion -----------------------------------------------------------------

def check_softmax_lipschitz(cfg: ProbeConfig = ProbeConfig()) -> CheckReport:
    """``||a(tau w) - a(tau w')||_1 <= tau/2 ||w - w'||_1`` on random probes."""
    rep = CheckReport("softmax_lipschitz", seed=cfg.seed)
    rng = _rng(cfg, 2)
    n = cfg.lipschitz_probes
    sizes = rng.integers(1, cfg.max_layers + 1, size=n)
    taus = rng.choice(np.asarray(cfg.taus), size=n)
    worst_ratio = 0.0
    for L in np.unique(sizes):
        idx = np.flatnonzero(sizes == L)
        w = rng.uniform(-cfg.score_range, cfg.score_range, (idx.size, L))
        w2 = rng.uniform(-cfg.score_range, cfg.score_range, (idx.size, L))
        # a slice of near-identical pairs probes the small-perturbation regime
        near = rng.random(idx.size) < 0.2
        w2[near] = w[near] + rng.normal(0, 1e-3, (near.sum(), L))
        tau = taus[idx][:, None]
        lhs = np.abs(softmax_rows(tau * w) - softmax_rows(tau * w2)).sum(axis=1)
        rhs = taus[idx] / 2 * np.abs(w - w2).sum(axis=1)
        slack = rhs + cfg.tol_lipschitz - lhs
        for j in range(idx.size):
            rep.record(slack[j], {"L": int(L), "tau": float(taus[idx[j]]), "lhs": float(lhs[j]), "rhs": float(rhs[j])})
        ok = rhs > 0
        if ok.any():
            worst_ratio = max(worst_ratio, float((lhs[ok] / rhs[ok]).max()))
    rep.details["worst_ratio"] = worst_ratio
    return rep


def check_temp_limits(w: Sequence[float], tau_small: float = 1e-6, tau_large: float | None = None) -> CheckReport:
    """Small temperature gives the uniform mixture; large temperature the one-hot argmax."""
    w = np.asarray(w, dtype=np.float64)
    top = np.sort(w)[::-1]
    if w.size > 1 and top[0] == top[1]:
        raise DegenerateArgmax(f"tied maxima in {w.tolist()}")
    rep = CheckReport("temp_limits")
    small = softmax_mixture(w, tau_small)
    rep.record(1e-4 - float(np.abs(small - 1.0 / w.size).max()), {"branch": "small", "alpha": small.tolist()})
    if tau_large is None:
        gap = top[0] - top[1] if w.size > 1 else 1.0
        tau_large = 1e3 * max(1.0, 1.0 / gap)
    large = softmax_mixture(w, tau_large)
    ok_arg = int(np.argmax(large)) == int(np.argmax(w))
    rep.record(float(large.max()) - (1 - 1e-6) if ok_arg else -1.0, {"branch": "large", "alpha": large.tolist()})
    rep.details["tau_large"] = tau_large
    return rep


def check_hull(stack: LayerStack, alpha: np.ndarray, tol: float = 1e-5, rep: CheckReport | None = None) -> CheckReport:
    """Coordinate-interval and norm containment of the fused tokens, plus a float64 re-derivation."""
    alpha = check_simplex(alpha)
    rep = rep or CheckReport("hull")
    fused = fuse(stack, alpha).data.astype(np.float64)
    layers = np.stack([l.data.astype(np.float64) for l in stack.layers])
    lo, hi = layers.min(axis=0), layers.max(axis=0)
    box = min(float((fused - lo).min()), float((hi - fused).min()))
    rep.record(box + tol, {"check": "coordinate_interval", "slack": box})
    max_norm = np.linalg.norm(layers, axis=2).max(axis=0)
    norm_slack = float((max_norm - np.linalg.norm(fused, axis=1)).min())
    rep.record(norm_slack + tol, {"check": "norm", "slack": norm_slack})
    exact = np.zeros_like(fused)
    for a, z in zip(alpha, layers):
        exact += a * z
    err = float(np.abs(exact - fused).max())
    rep.record(tol - err, {"check": "definition", "err": err})
    return rep


def _random_stack(rng, L, m, d, bound=None) -> LayerStack:
    layers = []
    for _ in range(L):
        x = rng.standard_normal((m, d))
        if bound is not None:
            radius = rng.uniform(0, bound * (1 - 1e-6), size=(m, 1))
            x = x / np.linalg.norm(x, axis=1, keepdims=True) * radius
        layers.append(TokenMatrix(x.astype(np.float32)))
    return LayerStack(tuple(layers), tuple(range(1, L + 1)))


def check_hull_probes(cfg: ProbeConfig = ProbeConfig()) -> CheckReport:
    rep = CheckReport("hull", seed=cfg.seed)
    rng = _rng(cfg, 3)
    for _ in range(cfg.hull_probes):
        L, m, d = (int(rng.integers(1, 9)), int(rng.integers(1, 17)), int(rng.integers(1, 17)))
        stack = _random_stack(rng, L, m, d)
        alpha = softmax_mixture(rng.uniform(-5, 5, L), float(rng.choice(cfg.taus)))
        check_hull(stack, alpha, cfg.tol_hull, rep)
    return rep


def _drift(stack, a1, a2) -> float:
    z1 = fuse(stack, a1).data.astype(np.float64)
    z2 = fuse(stack, a2).data.astype(np.float64)
    return float(np.linalg.norm(z1 - z2, axis=1).max())


def check_stability_bound(cfg: ProbeConfig = ProbeConfig()) -> CheckReport:
    """Fused-token drift ``<= B tau / 2 * ||w - w'||_1``, including class-to-class misrouting."""
    rep = CheckReport("stability_bound", seed=cfg.seed)
    rng = _rng(cfg, 4)
    B = cfg.norm_bound
    for i in range(cfg.stability_probes):
        L, m, d = (int(rng.integers(1, 9)), int(rng.integers(1, 9)), int(rng.integers(1, 17)))
        stack = _random_stack(rng, L, m, d, bound=B)
        tau = float(rng.choice(cfg.taus))
        w = rng.uniform(-3, 3, L)
        w2 = w.copy() if i % 100 == 0 else rng.uniform(-3, 3, L)
        drift = _drift(stack, softmax_mixture(w, tau), softmax_mixture(w2, tau))
        bound = B * tau / 2 * float(np.abs(w - w2).sum())
        rep.record(bound + cfg.tol_stability - drift, {"L": L, "tau": tau, "drift": drift, "bound": bound})
    misroute = 0
    for backbone in ("llava", "qwen2.5-vl"):
        table = default_profiles(backbone)
        ids = table.layer_ids()
        rows = {c: table[c].mixture(ids) for c in range(NUM_CATEGORIES)}
        for _ in range(max(1, cfg.stability_probes // 100)):
            stack = _random_stack(rng, len(ids), int(rng.integers(1, 9)), int(rng.integers(1, 17)), bound=B)
            stack = LayerStack(stack.layers, ids)
            for c, c2 in itertools.permutations(range(NUM_CATEGORIES), 2):
                # profile rows read as layer scores
                for tau in cfg.taus:
                    drift = _drift(stack, softmax_mixture(rows[c], tau), softmax_mixture(rows[c2], tau))
                    bound = B * tau / 2 * float(np.abs(rows[c] - rows[c2]).sum())
                    rep.record(bound + cfg.tol_stability - drift,
                               {"misroute": [backbone, c, c2], "tau": tau, "drift": drift, "bound": bound})
                # profile rows read as mixture weights: drift <= B * ||alpha - alpha'||_1
                drift = _drift(stack, rows[c], rows[c2])
                bound = B * float(np.abs(rows[c] - rows[c2]).sum())
                rep.record(bound + cfg.tol_stability - drift,
                           {"misroute_weights": [backbone, c, c2], "drift": drift, "bound": bound})
                misroute += 1
    rep.details["misroute_pairs"] = misroute
    return rep


# -- pruning ----------------------------------------------------------------

def brute_force_seeds(rho: Sequence[float], k2: int) -> tuple[tuple[int, ...], float]:
    """Lexicographically first size-``k2`` subset minimizing the exact sum of ``rho``.

    Sums are taken over exact integer images of the doubles, so subsets whose
    float sums round to the same value are still ordered correctly.
    """
    fr = [Fraction(float(r)) for r in rho]
    denom = max((f.denominator for f in fr), default=1)
    ints = [f.numerator * (denom // f.denominator) for f in fr]
    best, best_sum = None, None
    for combo in itertools.combinations(range(len(ints)), k2):
        s = sum(ints[i] for i in combo)
        if best_sum is None or s < best_sum:
            best, best_sum = combo, s
    return best, float(Fraction(best_sum, denom))


def _seed_instances(cfg: ProbeConfig, rng) -> Iterable[tuple[np.ndarray, int]]:
    for i in range(cfg.seed_instances):
        n = int(rng.integers(1, cfg.max_pool + 1))
        k2 = int(rng.integers(1, min(cfg.max_k2, n) + 1))
        if i % 3 == 0:
            rho = rng.integers(-2, 3, n) / 2.0  # few levels, many ties
        else:
            rho = rng.uniform(-1, 1, n)
        yield rho, k2


def check_seed_optimality(cfg: ProbeConfig = ProbeConfig()) -> CheckReport:
    """Engine seeding vs exhaustive subset search, on raw redundancy vectors and full prune runs."""
    rep = CheckReport("seed_optimality", seed=cfg.seed)
    rng = _rng(cfg, 5)
    for rho, k2 in _seed_instances(cfg, rng):
        _seed_compare(rep, rho, k2, pruner.seed_completion(rho, k2)[0], cfg.tol_seed)
    for unit, res in prune_runs(cfg, small=True):
        rho = pruner.pivot_redundancy(unit[res.pool], unit[res.pivots])
        local = np.searchsorted(res.pool, res.seeds)
        _seed_compare(rep, rho, res.split.k2, local, cfg.tol_seed)
    return rep


def _seed_compare(rep: CheckReport, rho, k2, engine_seeds, tol) -> None:
    best, best_sum = brute_force_seeds(rho, k2)
    got = tuple(int(i) for i in np.sort(engine_seeds))
    got_sum = math.fsum(float(rho[i]) for i in got)
    slack = tol - abs(got_sum - best_sum) if got == best else -max(abs(got_sum - best_sum), tol)
    rep.record(slack, {"rho": [float(r) for r in rho], "k2": k2, "engine": list(got), "oracle": list(best)})


def check_kmeans_monotone(traces: Iterable[tuple[Sequence[float], int]], tol: float = 1e-6) -> CheckReport:
    """Each ``(j_trace, pool_size)`` must be non-decreasing (within ``tol``) and at most the pool size."""
    rep = CheckReport("kmeans_monotone")
    for trace, n in traces:
        steps = np.diff(np.asarray(trace, dtype=np.float64))
        worst_step = float(steps.min()) if steps.size else 0.0
        cap = n - float(max(trace))
        rep.record(min(worst_step + tol, cap + tol), {"trace": list(trace), "pool": n})
    return rep


def kmeans_probe_traces(cfg: ProbeConfig = ProbeConfig()) -> list[tuple[tuple[float, ...], int]]:
    rng = _rng(cfg, 6)
    out = []
    for i in range(cfg.kmeans_runs):
        n = int(rng.integers(1, 201))
        d = int(rng.integers(2, 33))
        k = int(rng.integers(1, min(n, 20) + 1))
        if i % 2:
            centers = rng.standard_normal((max(1, k // 2), d))
            x = centers[rng.integers(0, centers.shape[0], n)] + 0.3 * rng.standard_normal((n, d))
        else:
            x = rng.standard_normal((n, d))
        unit = l2_normalize_rows(x, np.float64)
        seeds = np.sort(rng.choice(n, size=k, replace=False))
        state = pruner.spherical_kmeans(unit, seeds, cfg.iters)
        out.append((state.j_trace, n))
    return out


def prune_runs(cfg: ProbeConfig = ProbeConfig(), small: bool = False):
    """Random single-stage prune runs as ``(unit_features, result)`` pairs.

    ``small`` instances keep the non-pivot pool at most ``max_pool`` tokens so
    seeds can be checked by enumeration; duplicated directions create ties.
    """
    rng = _rng(cfg, 7 if small else 8)
    runs = []
    count = cfg.seed_instances if small else cfg.prune_runs
    for i in range(count):
        if small:
            k1 = int(rng.integers(1, 9))
            pool = int(rng.integers(1, cfg.max_pool + 1))
            m = k1 + pool
            k2 = int(rng.integers(1, min(cfg.max_k2, pool) + 1))
            budget = k1 + k2
            a = (k1 + 0.5) / budget  # floor(a * budget) == k1 without rounding hazards
        else:
            m = int(rng.integers(16, 577))
            budget = int(rng.integers(1, m + 1))
            a = float(rng.choice(np.round(np.arange(0, 1.01, 0.2), 1)))
        d = int(rng.integers(2, 17))
        if i % 4 == 0:
            dirs = rng.standard_normal((max(2, m // 4), d))
            x = dirs[rng.integers(0, dirs.shape[0], m)]
        else:
            x = rng.standard_normal((m, d))
        phi = rng.random(m)
        res = pruner.prune_stage(x.astype(np.float32), phi, a, budget, cfg.iters)
        if small and res.split.k1 != k1:
            raise AssertionError("ratio did not reproduce the intended split")
        runs.append((l2_normalize_rows(x.astype(np.float32), np.float64), res))
    return runs


def check_separation(runs: Iterable[tuple[np.ndarray, "pruner.PruneStageResult"]], tol: float = 1e-6) -> CheckReport:
    """Seeds vs pivots: ``u_s . u_p <= delta`` and ``||u_s - u_p|| >= sqrt(2 (1 - delta))``.

    ``delta`` is recomputed independently as the K2-th smallest redundancy of
    the pool; the engine's reported threshold must match it.
    """
    rep = CheckReport("separation")
    for unit, res in runs:
        if res.pivots.size == 0 or res.seeds.size == 0:
            continue
        u = np.asarray(unit, dtype=np.float64)
        pool, piv = res.pool, res.pivots
        rho = np.clip((u[pool] @ u[piv].T).max(axis=1), -1.0, 1.0)
        delta = float(np.sort(rho)[res.split.k2 - 1])
        reported = res.delta if res.delta is not None else math.nan
        rep.record(1e-12 - abs(reported - delta) if not math.isnan(reported) else -1.0,
                   {"check": "delta", "reported": res.delta, "expected": delta})
        dots = u[res.seeds] @ u[piv].T
        dists = np.linalg.norm(u[res.seeds][:, None, :] - u[piv][None, :, :], axis=2)
        dot_slack = float((delta + tol - dots).min())
        dist_slack = float((dists - (math.sqrt(max(0.0, 2 * (1 - delta))) - tol)).min())
        rep.record(dot_slack, {"check": "dot", "delta": delta, "max_dot": float(dots.max())})
        rep.record(dist_slack, {"check": "distance", "delta": delta, "min_dist": float(dists.min())})
    return rep


def check_exact_budget(runs: Iterable[tuple[np.ndarray, "pruner.PruneStageResult"]]) -> CheckReport:
    rep = CheckReport("exact_budget")
    for _, res in runs:
        budget = res.split.total
        overlap = np.intersect1d(res.pivots, res.completion).size
        ok = res.retained.size == budget and overlap == 0 and np.union1d(res.pivots, res.completion).size == budget
        rep.record(0.0 if ok else -1.0, {"budget": budget, "kept": int(res.retained.size), "overlap": overlap})
    return rep


# -- complexity -------------------------------------------------------------

@dataclass(frozen=True)
class ComplexityEstimate:
    fusion: int
    topk_comparisons: float
    redundancy: int
    bottomk_comparisons: float
    kmeans: int
    medoid: int

    def multiply_adds(self) -> dict[str, int]:
        return {"fusion": self.fusion, "redundancy": self.redundancy, "kmeans": self.kmeans, "medoid": self.medoid}


def complexity_estimate(m: int, layers: int, d_v: int, d: int, k1: int, k2: int, iters: int) -> ComplexityEstimate:
    """Per-step operation counts of one fused single-stage prune.

    Multiply-add terms are exact for this engine; the two selection terms
    follow the heap model (``n log2 k`` comparisons). Without completion slots
    (``k2 == 0``) redundancy, clustering and medoid search do not run.
    """
    if min(m, layers, d_v, d, k1, k2, iters) < 0 or k1 + k2 > m:
        raise ValueError("invalid shape configuration")
    pool = m - k1
    return ComplexityEstimate(
        fusion=layers * m * d_v,
        topk_comparisons=m * math.log2(k1) if k1 > 1 else 0.0,
        redundancy=pool * k1 * d if k2 > 0 else 0,
        bottomk_comparisons=pool * math.log2(k2) if k2 > 1 and k1 > 0 else 0.0,
        kmeans=(iters * pool * k2 * d + iters * pool * d) if k2 > 0 else 0,
        medoid=pool * d if k2 > 0 else 0,
    )


def instrumented_counts(stack: LayerStack, alpha, projection: Projection, phi, a, budget, iters) -> dict[str, int]:
    counter = pruner.OpCounter()
    feats = project(fuse(stack, alpha, counter=counter), projection)
    pruner.prune_stage(feats, phi, a, budget, iters, counter=counter)
    return {k: counter[k] for k in ("fusion", "redundancy", "kmeans", "medoid")}


def check_complexity(cfg: ProbeConfig = ProbeConfig()) -> CheckReport:
    rep = CheckReport("complexity_counters", seed=cfg.seed)
    rng = _rng(cfg, 9)
    for _ in range(cfg.complexity_configs):
        L, m = int(rng.integers(1, 6)), int(rng.integers(2, 200))
        d_v, d = int(rng.integers(1, 33)), int(rng.integers(1, 49))
        budget = int(rng.integers(1, m + 1))
        a = float(rng.choice([0.0, 0.2, 0.4, 0.5, 0.6, 0.8, 1.0]))
        iters = int(rng.integers(0, 7))
        stack = _random_stack(rng, L, m, d_v)
        proj = Projection(rng.standard_normal((d_v, d)).astype(np.float32))
        alpha = softmax_mixture(rng.uniform(-1, 1, L))
        split = pruner.split_budget(a, budget)
        got = instrumented_counts(stack, alpha, proj, rng.random(m), a, budget, iters)
        want = complexity_estimate(m, L, d_v, d, split.k1, split.k2, iters).multiply_adds()
        rep.record(0.0 if got == want else -1.0, {"shape": [m, L, d_v, d, split.k1, split.k2, iters], "got": got, "want": want})
    return rep


# -- suite ------------------------------------------------------------------

def run_suite(cfg: ProbeConfig = ProbeConfig()) -> list[CheckReport]:
    reports = [
        check_cos_euclid(cfg),
        check_softmax_lipschitz(cfg),
    ]
    temp = CheckReport("temp_limits", seed=cfg.seed)
    for w in ((1.7, -3.2, 0.4), (0.1, 0.9, 0.3), (2.0, -1.0), (0.0,)):
        sub = check_temp_limits(w)
        temp.trials += sub.trials
        temp.violations += sub.violations
        temp.worst_slack = min(temp.worst_slack, sub.worst_slack)
        temp.exemplars += sub.exemplars
    reports.append(temp)
    reports.append(check_hull_probes(cfg))
    reports.append(check_stability_bound(cfg))
    reports.append(check_seed_optimality(cfg))
    traces = kmeans_probe_traces(cfg)
    runs = prune_runs(cfg) + prune_runs(cfg, small=True)
    km = check_kmeans_monotone(traces + [(r.cluster.j_trace, r.pool.size) for _, r in runs if r.cluster])
    km.seed = cfg.seed
    reports.append(km)
    sep = check_separation(runs)
    sep.seed = cfg.seed
    reports.append(sep)
    budget = check_exact_budget(runs)
    budget.seed = cfg.seed
    reports.append(budget)
    reports.append(check_complexity(cfg))
    return reports


def suite_json(reports: Sequence[CheckReport], cfg: ProbeConfig) -> str:
    doc = {
        "format": "adaprune-verify/1",
        "config": asdict(cfg),
        "passed": all(r.passed for r in reports),
        "checks": [r.to_dict() for r in reports],
    }
    return json.dumps(doc, indent=2, default=float) + "\n"
