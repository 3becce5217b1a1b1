"""Per-class exhaustive search over layer prototypes x split ratios.

Scorers are callables ``scorer(sample, retained_indices) -> float``. The
built-in one rewards retention of a sample's labelled evidence tokens;
``ExternalScorer`` talks to a child process over a line protocol:

* request (one JSON object per line on the child's stdin)::

    {"sample_id": "s0", "category": 5, "prompt": "...", "retained": [0, 4, 9]}

* response: one decimal number per line on the child's stdout, same order.
"""

from __future__ import annotations

import json
import logging
import math
import selectors
import shlex
import subprocess
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .core import AdapruneError, TokenMatrix
from .fusion import ClassProfile, ProfileTable, fuse, project, align_stack
from .io import Dump
from .pruner import DEFAULT_ITERS, StageSchedule, run_schedule
from .router import DEFAULT_CATEGORY, NUM_CATEGORIES

log = logging.getLogger(__name__)


class NoSamples(AdapruneError):
    pass


class ScorerFailure(AdapruneError):
    def __init__(self, context: str, cause: Exception):
        super().__init__(f"scorer failed for {context}: {cause}")
        self.context = context
        self.cause = cause


class ScorerTimeout(AdapruneError):
    pass


class MalformedScore(AdapruneError):
    pass


class ProcessExit(AdapruneError):
    def __init__(self, code: int | None):
        super().__init__(f"scorer process exited with code {code}")
        self.code = code


@dataclass(frozen=True)
class CalSample:
    sample_id: str
    category: int
    dump: Dump
    evidence: np.ndarray | None = None
    prompt: str = ""

    def __post_init__(self):
        if not 0 <= self.category < NUM_CATEGORIES:
            raise ValueError(f"category {self.category} out of range")

    @classmethod
    def from_dump(cls, dump: Dump, category: int | None = None) -> "CalSample":
        cat = category if category is not None else dump.category
        if cat is None:
            raise ValueError(f"sample {dump.sample_id} has no category label")
        return cls(dump.sample_id, int(cat), dump, dump.evidence, dump.prompt)


def _layer_weights(entry) -> dict[int, float]:
    if isinstance(entry, Mapping):
        w = {int(k): float(v) for k, v in entry.items()}
        if not w or any(v < 0 for v in w.values()) or abs(sum(w.values()) - 1) > 1e-6:
            raise ValueError(f"explicit candidate weights must be a simplex point: {w}")
        return dict(sorted(w.items()))
    layers = sorted({int(l) for l in entry})
    if not 1 <= len(layers) <= 5:
        raise ValueError(f"candidate layer sets hold 1-5 layers, got {layers}")
    return {l: 1.0 / len(layers) for l in layers}


@dataclass(frozen=True)
class CandidateSpace:
    """Layer prototypes x ratio grid, enumerated layer-set-major.

    A layer-set entry is either a list of layer ids (uniform weights) or an
    explicit ``{layer_id: weight}`` mapping.
    """

    layer_sets: tuple
    ratio_grid: tuple[float, ...]

    def __post_init__(self):
        sets = tuple(_layer_weights(e) for e in self.layer_sets)
        grid = tuple(float(a) for a in self.ratio_grid)
        if not sets or not grid:
            raise ValueError("candidate space must be non-empty")
        if any(not 0.0 <= a <= 1.0 for a in grid):
            raise ValueError(f"ratios must lie in [0, 1]: {grid}")
        object.__setattr__(self, "layer_sets", sets)
        object.__setattr__(self, "ratio_grid", grid)

    def __len__(self) -> int:
        return len(self.layer_sets) * len(self.ratio_grid)

    def candidates(self):
        i = 0
        for s, weights in enumerate(self.layer_sets):
            for a in self.ratio_grid:
                yield i, s, weights, a
                i += 1

    def layer_ids(self) -> set[int]:
        return {l for w in self.layer_sets for l in w}

    @classmethod
    def from_dict(cls, doc: Mapping) -> "CandidateSpace":
        return cls(tuple(doc["layer_sets"]), tuple(doc["ratio_grid"]))


def synthetic_score(retained: Iterable[int], evidence: Iterable[int]) -> float:
    """Fraction of evidence tokens that survived pruning."""
    ev = {int(i) for i in evidence}
    kept = {int(i) for i in retained}
    return len(kept & ev) / max(1, len(ev))


def builtin_scorer(sample: CalSample, retained: np.ndarray) -> float:
    if sample.evidence is None:
        raise ValueError(f"sample {sample.sample_id} carries no evidence indices")
    return synthetic_score(retained, sample.evidence)


builtin_scorer.thread_safe = True  # type: ignore[attr-defined]


def score_request(sample_id: str, retained, prompt: str, category: int) -> str:
    return json.dumps(
        {"sample_id": sample_id, "category": int(category), "prompt": prompt,
         "retained": [int(i) for i in retained]},
        sort_keys=True,
    )


class ExternalScorer:
    """Scores through a long-lived child process, one request line -> one score line."""

    thread_safe = False

    def __init__(self, cmd: str | Sequence[str], timeout: float = 30.0):
        self.cmd = shlex.split(cmd) if isinstance(cmd, str) else list(cmd)
        self.timeout = timeout
        self._proc: subprocess.Popen | None = None
        self._buf = b""

    def _start(self) -> subprocess.Popen:
        if self._proc is None:
            self._proc = subprocess.Popen(
                self.cmd, stdin=subprocess.PIPE, stdout=subprocess.PIPE, bufsize=0,
            )
        return self._proc

    def _readline(self, proc: subprocess.Popen) -> bytes:
        deadline = time.monotonic() + self.timeout
        with selectors.DefaultSelector() as sel:
            sel.register(proc.stdout, selectors.EVENT_READ)
            while b"\n" not in self._buf:
                remaining = deadline - time.monotonic()
                if remaining <= 0 or not sel.select(remaining):
                    self.close()
                    raise ScorerTimeout(f"no score within {self.timeout}s")
                chunk = proc.stdout.read1(65536) if hasattr(proc.stdout, "read1") else proc.stdout.read(65536)
                if not chunk:
                    code = proc.wait(timeout=self.timeout)
                    self._proc = None
                    raise ProcessExit(code)
                self._buf += chunk
        line, self._buf = self._buf.split(b"\n", 1)
        return line

    def score(self, sample_id: str, retained, prompt: str = "", category: int = DEFAULT_CATEGORY) -> float:
        proc = self._start()
        try:
            proc.stdin.write((score_request(sample_id, retained, prompt, category) + "\n").encode())
            proc.stdin.flush()
        except BrokenPipeError:
            code = proc.wait(timeout=self.timeout)
            self._proc = None
            raise ProcessExit(code) from None
        text = self._readline(proc).decode("utf-8", "replace").strip()
        try:
            value = float(text)
        except ValueError:
            raise MalformedScore(f"scorer replied {text!r}") from None
        if not math.isfinite(value):
            raise MalformedScore(f"scorer replied non-finite {text!r}")
        return value

    def __call__(self, sample: CalSample, retained: np.ndarray) -> float:
        return self.score(sample.sample_id, retained, sample.prompt, sample.category)

    def close(self) -> None:
        if self._proc is not None:
            proc, self._proc = self._proc, None
            try:
                proc.stdin.close()
            except OSError:
                pass
            try:
                proc.wait(timeout=2)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class GridEntry:
    index: int
    layer_set: int
    layer_weights: dict[int, float]
    split_ratio: float
    score: float | None
    samples: int
    phase: str = "full"

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "layer_set": self.layer_set,
            "layer_weights": {str(k): v for k, v in self.layer_weights.items()},
            "split_ratio": self.split_ratio,
            "score": self.score,
            "samples": self.samples,
            "phase": self.phase,
        }


@dataclass
class ClassResult:
    category: int
    samples: int
    grid: list[GridEntry]
    best: GridEntry
    source: str = "calibrated"

    def profile(self, category: int | None = None) -> ClassProfile:
        cat = self.category if category is None else category
        return ClassProfile(cat, self.best.split_ratio, layer_weights=self.best.layer_weights)


class FeatureCache:
    """Fused + projected features per (sample, layer weights); layers are loaded once per dump."""

    def __init__(self):
        self._store: dict[tuple, TokenMatrix] = {}

    def get(self, sample: CalSample, weights: Mapping[int, float]) -> TokenMatrix:
        key = (id(sample.dump), sample.sample_id, tuple(weights.items()))
        hit = self._store.get(key)
        if hit is None:
            stack = sample.dump.stack
            if not stack.is_aligned():
                stack = align_stack(stack)
            profile = ClassProfile(sample.category, 0.0, layer_weights=weights)
            hit = project(fuse(stack, profile.mixture(stack.layer_ids)), sample.dump.projection)
            self._store[key] = hit
        return hit


def _mean(scores: Sequence[float]) -> float:
    # exactly rounded, so the mean does not depend on sample order
    return math.fsum(scores) / len(scores)


def _evaluate(samples, weights, a, schedule, scorer, iters, cache, context) -> float:
    scores = []
    for s in samples:
        feats = cache.get(s, weights)
        trace = run_schedule(feats, s.dump.records, None, schedule, iters, split_ratio=a, category=s.category)
        try:
            scores.append(float(scorer(s, trace.retained)))
        except Exception as exc:
            raise ScorerFailure(f"{context}, sample {s.sample_id}", exc) from exc
    return _mean(scores)


def calibrate_class(
    samples: Sequence[CalSample],
    space: CandidateSpace,
    schedule: StageSchedule,
    scorer: Callable = builtin_scorer,
    iters: int = DEFAULT_ITERS,
    early_fraction: float | None = None,
    early_keep: int = 3,
    workers: int = 1,
    cache: FeatureCache | None = None,
) -> ClassResult:
    """Score every (layer set, ratio) candidate on one class; ties go to the earliest candidate.

    With ``early_fraction`` set, all candidates are first scored on that share
    of the samples and only the ``early_keep`` best are rescored on all of them.
    """
    if not samples:
        raise NoSamples("calibration needs at least one sample for the class")
    category = samples[0].category
    if any(s.category != category for s in samples):
        raise ValueError("calibrate_class received samples from several classes")
    for s in samples:
        missing = space.layer_ids() - set(s.dump.stack.layer_ids)
        if missing:
            raise ValueError(f"sample {s.sample_id} lacks candidate layers {sorted(missing)}")
    cache = cache or FeatureCache()
    cands = list(space.candidates())
    # warm the cache serially so worker threads only read it
    for _, _, weights, _ in cands:
        for s in samples:
            cache.get(s, weights)

    def run(pool: Sequence[CalSample], todo, phase: str) -> list[GridEntry]:
        def one(c):
            i, s_idx, weights, a = c
            ctx = f"class {category}, candidate {i} (layers {list(weights)}, a={a})"
            score = _evaluate(pool, weights, a, schedule, scorer, iters, cache, ctx)
            return GridEntry(i, s_idx, dict(weights), a, score, len(pool), phase)

        if workers > 1 and getattr(scorer, "thread_safe", False):
            with ThreadPoolExecutor(workers) as ex:
                return list(ex.map(one, todo))
        return [one(c) for c in todo]

    if early_fraction is not None and len(samples) > 1:
        n_early = max(1, int(round(early_fraction * len(samples))))
        first = run(samples[:n_early], cands, "early")
        ranked = sorted(first, key=lambda e: (-e.score, e.index))[:early_keep]
        keep = {e.index for e in ranked}
        full = {e.index: e for e in run(samples, [c for c in cands if c[0] in keep], "full")}
        grid = [full.get(e.index, e) for e in first]
    else:
        grid = run(samples, cands, "full")
    grid.sort(key=lambda e: e.index)
    best = None
    for e in grid:
        if e.phase == "full" and (best is None or e.score > best.score):
            best = e
    return ClassResult(category, len(samples), grid, best)


@dataclass
class CalibrationReport:
    classes: dict[int, ClassResult]
    scorer: str
    schedule: StageSchedule
    iters: int
    space: CandidateSpace
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        out = []
        for c in range(NUM_CATEGORIES):
            r = self.classes[c]
            out.append({
                "category": c,
                "source": r.source,
                "samples": r.samples,
                "best": r.best.to_dict(),
                "grid": [e.to_dict() for e in r.grid] if r.source == "calibrated" else [],
            })
        return {
            "format": "adaprune-calibration/1",
            "scorer": self.scorer,
            "schedule": [list(s) for s in self.schedule.stages],
            "iters": self.iters,
            "space": {
                "layer_sets": [{str(k): v for k, v in w.items()} for w in self.space.layer_sets],
                "ratio_grid": list(self.space.ratio_grid),
            },
            "classes": out,
            "notes": self.notes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def calibrate_all(
    dataset: Sequence[CalSample],
    space: CandidateSpace,
    schedule: StageSchedule,
    scorer: Callable = builtin_scorer,
    iters: int = DEFAULT_ITERS,
    fallback: ProfileTable | None = None,
    scorer_name: str = "builtin",
    **kwargs,
) -> tuple[ProfileTable, CalibrationReport]:
    """Calibrate each class on its own samples.

    Classes without samples take the class-8 result when class 8 was
    calibrated, else the matching profile of ``fallback``.
    """
    by_class: dict[int, list[CalSample]] = {c: [] for c in range(NUM_CATEGORIES)}
    for s in dataset:
        by_class[s.category].append(s)
    cache = kwargs.pop("cache", None) or FeatureCache()
    results: dict[int, ClassResult] = {}
    notes = []
    for c in range(NUM_CATEGORIES):
        if by_class[c]:
            try:
                results[c] = calibrate_class(by_class[c], space, schedule, scorer, iters, cache=cache, **kwargs)
            except AdapruneError as exc:
                raise AdapruneError(f"class {c}: {exc}") from exc
    profiles = {}
    for c in range(NUM_CATEGORIES):
        if c in results:
            profiles[c] = results[c].profile()
        elif DEFAULT_CATEGORY in results:
            base = results[DEFAULT_CATEGORY]
            results[c] = ClassResult(c, 0, [], base.best, source=f"inherited:{DEFAULT_CATEGORY}")
            profiles[c] = base.profile(c)
            notes.append(f"class {c} has no samples; inherited class {DEFAULT_CATEGORY}")
        elif fallback is not None:
            fp = fallback[c]
            weights = {int(l): float(w) for l, w in zip(fp.support, fp.mixture(fp.support))}
            entry = GridEntry(-1, -1, weights, fp.split_ratio, None, 0)
            results[c] = ClassResult(c, 0, [], entry, source="fallback")
            profiles[c] = fp
            notes.append(f"class {c} has no samples; kept fallback profile")
        else:
            raise NoSamples(f"class {c} has no samples and no fallback profile")
    table = ProfileTable(tuple(profiles[c] for c in range(NUM_CATEGORIES)), backbone="calibrated")
    return table, CalibrationReport(results, scorer_name, schedule, iters, space, notes)
