"""Acceptance criteria 1-12, each at its stated tolerance.

Every test records one PASS/FAIL line; the lines are printed in the pytest
terminal summary (see conftest.py). Run alone with
``pytest tests/test_acceptance.py -m acceptance``.
"""

import json
import time

import numpy as np
import pytest

from adaprune import pruner, verify
from adaprune.calibration import CalSample, CandidateSpace, calibrate_all
from adaprune.cli import main
from adaprune.core import LayerStack, TokenMatrix, l2_normalize_rows
from adaprune.fusion import Projection, default_profiles
from adaprune.io import load_dump
from adaprune.pruner import StageSchedule, prune_stage, run_schedule, split_budget
from adaprune.synth import PROTOTYPES, make_dataset, make_dump

pytestmark = pytest.mark.acceptance

RESULTS: dict[int, str] = {}
RATIOS = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(RESULTS[n])
    assert ok, RESULTS[n]


def budget_runs(seed: int = 0, count: int = 1000):
    """Random single-stage prune runs: M in [16, 576], random saliency, random unit features."""
    rng = np.random.default_rng(seed)
    runs = []
    for i in range(count):
        m = int(rng.integers(16, 577))
        d = int(rng.integers(2, 65))
        unit = l2_normalize_rows(rng.standard_normal((m, d)), np.float64)
        a = RATIOS[i % len(RATIOS)]
        budget = int(rng.integers(1, m + 1))
        runs.append((unit, prune_stage(unit, rng.random(m), a, budget)))
    return runs


SEED_CFG = verify.ProbeConfig(seed=0, seed_instances=500)


@pytest.fixture(scope="module")
def runs_1():
    t0 = time.perf_counter()
    runs = budget_runs()
    return runs, time.perf_counter() - t0


@pytest.fixture(scope="module")
def runs_2():
    return verify.prune_runs(SEED_CFG, small=True)


def test_criterion_01_exact_budget(runs_1):
    runs, secs = runs_1
    rep = verify.check_exact_budget(runs)
    ratios = {r.split.k1 / r.split.total if r.split.total else 0 for _, r in runs}
    record(1, rep.passed and rep.trials >= 1000 and secs < 60 and len(ratios) > 6,
           f"{rep.trials} instances, {rep.violations} violations, {secs:.1f}s")


def test_criterion_02_seed_optimality():
    t0 = time.perf_counter()
    rep = verify.check_seed_optimality(SEED_CFG)
    secs = time.perf_counter() - t0
    record(2, rep.passed and secs < 60,
           f"{rep.trials} brute-force comparisons (500 raw + 500 prune runs), {rep.violations} mismatches, {secs:.1f}s")


def test_criterion_03_kmeans_monotone():
    cfg = verify.ProbeConfig(seed=0, kmeans_runs=1000, iters=5)
    rep = verify.check_kmeans_monotone(verify.kmeans_probe_traces(cfg))
    record(3, rep.passed and rep.trials == 1000, f"{rep.trials} runs, {rep.violations} violations")


def test_criterion_04_softmax_lipschitz():
    rep = verify.check_softmax_lipschitz(verify.ProbeConfig(seed=0, lipschitz_probes=100_000))
    record(4, rep.passed and rep.trials == 100_000,
           f"{rep.trials} probes, {rep.violations} violations, worst ratio {rep.details['worst_ratio']:.4f}")


def test_criterion_05_fusion_stability():
    rep = verify.check_stability_bound(verify.ProbeConfig(seed=0, stability_probes=10_000, norm_bound=4.0))
    record(5, rep.passed and rep.details["misroute_pairs"] > 0,
           f"{rep.trials} probes incl. {rep.details['misroute_pairs']} misroute pairs, {rep.violations} violations")


def test_criterion_06_separation(runs_1, runs_2):
    runs = runs_1[0] + runs_2
    rep = verify.check_separation(runs)
    record(6, rep.passed and rep.trials > 0, f"{rep.trials} checks over {len(runs)} runs, {rep.violations} violations")


def test_criterion_07_preset_schedules():
    dump = make_dump(np.random.default_rng(0), "s", grid=(24, 24))
    profile = default_profiles("llava")[0]
    got = {}
    for r in (192, 128, 64):
        trace = run_schedule(dump.stack, dump.records, profile, StageSchedule.preset(r))
        got[r] = [int(s.retained.size) for s in trace.stages]
    want = {192: [300, 200, 110], 128: [303, 110, 36], 64: [66, 30, 17]}
    record(7, got == want and dump.num_tokens == 576, f"stage sizes {got}")


def test_criterion_08_class0_split():
    a = default_profiles("llava")[0].split_ratio
    split = split_budget(a, 192)
    rng = np.random.default_rng(0)
    res = prune_stage(rng.standard_normal((576, 16)), rng.random(576), a, 192)
    ok = (a, split.k1, split.k2) == (0.8, 153, 39) and (res.pivots.size, res.completion.size) == (153, 39)
    record(8, ok, f"a={a}, K1={split.k1}, K2={split.k2}, stage kept {res.pivots.size}+{res.completion.size}")


def test_criterion_09_complexity():
    rep = verify.check_complexity(verify.ProbeConfig(seed=0, complexity_configs=50))
    rng = np.random.default_rng(0)
    stack = LayerStack(tuple(TokenMatrix(rng.standard_normal((576, 1024))) for _ in range(3)), (5, 15, 22))
    proj = Projection(rng.standard_normal((1024, 1024)).astype(np.float32) / 32)
    got = verify.instrumented_counts(stack, np.array([0.2, 0.3, 0.5]), proj, rng.random(576), 0.8, 192, 5)
    est = verify.complexity_estimate(576, 3, 1024, 1024, 153, 39, 5)
    worked = got["redundancy"] == est.redundancy == (576 - 153) * 153 * 1024
    # the quoted worked figure 66,281,472 rests on 423 * 153 = 64,728; the product is 64,719
    quoted_gap = 66_281_472 - est.redundancy
    record(9, rep.passed and worked and got == est.multiply_adds() and quoted_gap == 9 * 1024,
           f"{rep.trials} configs, {rep.violations} mismatches; redundancy at M=576,K1=153,d=1024: "
           f"{got['redundancy']:,} (quoted 66,281,472 is off by 9*1024)")


def _calibration_report():
    dumps = make_dataset(seed=0, per_class=2)
    space = CandidateSpace(tuple(list(p) for p in PROTOTYPES), (0.2, 0.4, 0.6, 0.8))
    _, report = calibrate_all([CalSample.from_dump(d) for d in dumps], space, StageSchedule.preset(64))
    return report.to_json()


def test_criterion_10_calibration_exhaustive():
    texts = [_calibration_report() for _ in range(3)]
    doc = json.loads(texts[0])
    confirmed = 0
    for c in doc["classes"]:
        grid = c["grid"]
        # independent re-scan: first entry with the maximal score, in grid order
        top = max(e["score"] for e in grid)
        first = next(e for e in grid if e["score"] == top)
        ok = len(grid) == 20 and c["best"] == first and [e["index"] for e in grid] == list(range(20))
        confirmed += ok
    record(10, confirmed == 9 and len(set(texts)) == 1,
           f"{confirmed}/9 classes confirmed by re-scan, {len(set(texts))} distinct report(s) over 3 runs")


def test_criterion_11_cli_determinism(tmp_path):
    assert main(["gen-synth", str(tmp_path / "ds"), "--per-class", "1", "--classes", "4"]) == 0
    dump = tmp_path / "ds" / "c4_s0"
    outs = []
    for name in ("a", "b"):
        path = tmp_path / f"{name}.json"
        assert main(["prune", str(dump), "--schedule", "300,200,110", "--out", str(path)]) == 0
        outs.append(path.read_bytes())
    record(11, outs[0] == outs[1] and load_dump(dump).num_tokens == 576,
           f"two prune runs -> {len(outs[0])} bytes each, identical={outs[0] == outs[1]}")


def test_criterion_12_verify_gate(monkeypatch, capsys):
    code = main(["verify"])
    capsys.readouterr()

    def top_k2(rho, k2):
        rho = np.asarray(rho, dtype=np.float64).reshape(-1)
        if k2 == 0:
            return np.zeros(0, dtype=np.int64), None
        seeds = np.sort(np.argsort(-rho, kind="stable")[:k2])
        return seeds, float(rho[seeds].max())

    monkeypatch.setattr(pruner, "seed_completion", top_k2)
    c2 = verify.check_seed_optimality(SEED_CFG)
    c6 = verify.check_separation(budget_runs() + verify.prune_runs(SEED_CFG, small=True))
    mutated_code = main(["verify", "--quick"])
    capsys.readouterr()
    record(12, code == 0 and not c2.passed and not c6.passed and mutated_code == 4,
           f"verify exit {code}; Top-K2 mutant: criterion 2 violations {c2.violations}, "
           f"criterion 6 violations {c6.violations}, verify exit {mutated_code}")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-s"]))
