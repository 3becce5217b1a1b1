"""Command-line entry point.

Exit codes: 0 success, 2 usage error, 3 data/config error, 4 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, verify
from .calibration import (
    CalSample,
    CandidateSpace,
    ExternalScorer,
    builtin_scorer,
    calibrate_all,
)
from .core import AdapruneError
from .fusion import align_stack, fuse, resolve_profiles
from .io import MANIFEST_NAME, canonical_json, load_dump, result_record, write_tensor
from .pruner import DEFAULT_ITERS, OpCounter, StageSchedule, run_schedule
from .router import CATEGORY_NAMES, default_rules, load_rules_file, route
from .synth import make_dataset, write_dataset

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 2, 3, 4

log = logging.getLogger("adaprune")


class UsageError(Exception):
    pass


def _schedule(args) -> StageSchedule:
    try:
        if args.schedule:
            return StageSchedule.parse(args.schedule)
        return StageSchedule.preset(args.budget if args.budget is not None else 192)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _rules(args):
    return load_rules_file(args.rules) if getattr(args, "rules", None) else default_rules()


def _category(args, dump) -> int:
    """Flag, then manifest label, then the prompt router."""
    if args.category is not None:
        if not 0 <= args.category < len(CATEGORY_NAMES):
            raise UsageError(f"--category must be in 0..{len(CATEGORY_NAMES) - 1}")
        return args.category
    if dump.category is not None:
        return dump.category
    return route(dump.prompt, _rules(args))


def _dump_dirs(path: Path) -> list[Path]:
    if not path.exists():
        raise FileNotFoundError(f"no such dump or directory: {path}")
    if path.is_file() or (path / MANIFEST_NAME).exists():
        return [path]
    dirs = sorted(p for p in path.iterdir() if (p / MANIFEST_NAME).exists()) if path.is_dir() else []
    if not dirs:
        raise UsageError(f"{path} is neither a dump nor a directory of dumps")
    return dirs


# -- subcommands ------------------------------------------------------------

def cmd_route(args) -> int:
    c = route(args.prompt, _rules(args))
    print(f"{c}\t{CATEGORY_NAMES[c]}")
    return EXIT_OK


def cmd_fuse(args) -> int:
    dump = load_dump(args.dump)
    table = resolve_profiles(args.profile)
    c = _category(args, dump)
    stack = dump.stack if dump.stack.is_aligned() else align_stack(dump.stack, mode=args.align_mode)
    fused = fuse(stack, table[c].mixture(stack.layer_ids), keep_cls=args.keep_cls)
    write_tensor(Path(args.out), fused.data)
    print(json.dumps({"category": c, "rows": fused.rows, "cols": fused.cols, "file": str(args.out)}))
    return EXIT_OK


def _prune_config(args, schedule, table, category) -> dict:
    return {
        "backbone": table.backbone,
        "profile": table[category].to_dict(),
        "schedule": [list(s) for s in schedule.stages],
        "budget_label": args.budget,
        "iters": args.iters,
        "align_mode": args.align_mode,
        "keep_cls": args.keep_cls,
    }


def _prune_one(args, path: Path, schedule, table) -> dict:
    dump = load_dump(path)
    c = _category(args, dump)
    trace = run_schedule(
        dump.stack, dump.records, table[c], schedule, args.iters, dump.projection,
        category=c, align_mode=args.align_mode, keep_cls=args.keep_cls,
    )
    return result_record(trace, dump.sample_id, _prune_config(args, schedule, table, c), args.timestamp)


def cmd_prune(args) -> int:
    schedule = _schedule(args)
    table = resolve_profiles(args.profile)
    src = Path(args.dump)
    dumps = _dump_dirs(src)
    if src.is_file() or (src / MANIFEST_NAME).exists():
        text = canonical_json(_prune_one(args, dumps[0], schedule, table))
        if args.out:
            Path(args.out).write_text(text, encoding="utf-8")
        else:
            sys.stdout.write(text)
        return EXIT_OK
    if not args.out:
        raise UsageError("--out DIR is required when pruning a directory of dumps")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def job(p: Path) -> str:
        rec = _prune_one(args, p, schedule, table)
        (out / f"{p.name}.json").write_text(canonical_json(rec), encoding="utf-8")
        return p.name

    with ThreadPoolExecutor(max_workers=max(1, args.workers)) as pool:
        for name in pool.map(job, dumps):
            log.info("pruned %s", name)
    print(f"wrote {len(dumps)} results to {out}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    schedule = _schedule(args)
    try:
        space = CandidateSpace.from_dict(json.loads(Path(args.space).read_text(encoding="utf-8")))
    except (KeyError, TypeError, ValueError) as exc:
        raise AdapruneError(f"candidate space {args.space}: {exc}") from None
    samples = [CalSample.from_dump(load_dump(p)) for p in _dump_dirs(Path(args.dataset))]
    fallback = resolve_profiles(args.fallback) if args.fallback else None
    kwargs = {"early_fraction": args.early_fraction, "early_keep": args.early_keep}
    if args.scorer == "builtin":
        table, report = calibrate_all(samples, space, schedule, builtin_scorer, args.iters, fallback,
                                      scorer_name="builtin", workers=args.workers, **kwargs)
    elif args.scorer.startswith("exec:"):
        with ExternalScorer(args.scorer[5:], timeout=args.timeout) as scorer:
            table, report = calibrate_all(samples, space, schedule, scorer, args.iters, fallback,
                                          scorer_name=args.scorer, **kwargs)
    else:
        raise UsageError("--scorer must be 'builtin' or 'exec:<command>'")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "profiles.json").write_text(table.to_json(), encoding="utf-8")
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    for c in range(len(CATEGORY_NAMES)):
        best = report.classes[c].best
        score = "n/a" if best.score is None else f"{best.score:.4f}"
        print(f"class {c} ({CATEGORY_NAMES[c]}): layers {sorted(best.layer_weights)} a={best.split_ratio} score={score} "
              f"[{report.classes[c].source}]")
    return EXIT_OK


def cmd_verify(args) -> int:
    cfg = verify.ProbeConfig.quick(args.seed) if args.quick else verify.ProbeConfig(seed=args.seed)
    reports = verify.run_suite(cfg)
    for r in reports:
        print(r.summary())
    if args.report:
        Path(args.report).write_text(verify.suite_json(reports, cfg), encoding="utf-8")
    return EXIT_OK if all(r.passed for r in reports) else EXIT_VERIFY


def cmd_bench(args) -> int:
    schedule = _schedule(args)
    table = resolve_profiles(args.profile)
    dump = load_dump(args.dump)
    c = _category(args, dump)
    times = []
    counter = None
    for _ in range(args.repeat):
        counter = OpCounter()
        t0 = time.perf_counter()
        trace = run_schedule(dump.stack, dump.records, table[c], schedule, args.iters, dump.projection,
                             category=c, align_mode=args.align_mode, counter=counter)
        times.append(time.perf_counter() - t0)
    stack = dump.stack
    d = trace.features.cols
    expected = {"fusion": stack.num_layers * trace.num_tokens * stack.d_v, "redundancy": 0, "kmeans": 0, "medoid": 0}
    for s in trace.stages:
        est = verify.complexity_estimate(s.survivors.size, stack.num_layers, stack.d_v, d, s.split.k1, s.split.k2, args.iters)
        for key in ("redundancy", "kmeans", "medoid"):
            expected[key] += est.multiply_adds()[key]
    got = counter.as_dict()
    match = all(got.get(k, 0) == v for k, v in expected.items())
    print(json.dumps({
        "sample_id": dump.sample_id,
        "category": c,
        "stages": [int(s.retained.size) for s in trace.stages],
        "seconds_median": float(np.median(times)),
        "samples_per_second": float(1.0 / np.median(times)) if np.median(times) > 0 else None,
        "counted": got,
        "estimated": expected,
        "counters_match": match,
    }, indent=2, sort_keys=True))
    return EXIT_OK if match else EXIT_VERIFY


def cmd_gen_synth(args) -> int:
    try:
        h, w = (int(x) for x in args.grid.lower().split("x"))
    except ValueError:
        raise UsageError(f"--grid expects HxW, got {args.grid!r}") from None
    classes = tuple(int(c) for c in args.classes.split(",")) if args.classes else tuple(range(len(CATEGORY_NAMES)))
    dumps = make_dataset(args.seed, args.per_class, classes, grid=(h, w), d_v=args.d_v, proj_dim=args.proj_dim)
    paths = write_dataset(args.out, dumps)
    print(f"wrote {len(paths)} dumps to {args.out}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def _add_schedule(p):
    p.add_argument("--budget", type=int, help="effective budget preset: 192, 128 or 64")
    p.add_argument("--schedule", help="per-stage budgets, e.g. 300,200,110 or 2:300,6:200,15:110")
    p.add_argument("--iters", type=int, default=DEFAULT_ITERS, help="K-means iterations (default 5)")


def _add_profile(p):
    p.add_argument("--profile", help="profile JSON, or 'llava' / 'qwen2.5-vl' (default: $ADAPRUNE_PROFILE or llava)")
    p.add_argument("--category", type=int, help="override the routed category")
    p.add_argument("--rules", help="router rule table JSON")
    p.add_argument("--align-mode", choices=("bilinear", "nearest"), default="bilinear")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adaprune", description="Intent-aware visual token pruning")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("route", help="map a prompt to its intent category")
    p.add_argument("prompt")
    p.add_argument("--rules")
    p.set_defaults(func=cmd_route)

    p = sub.add_parser("fuse", help="write the fused token matrix of a dump")
    p.add_argument("dump")
    p.add_argument("--out", required=True)
    p.add_argument("--keep-cls", action="store_true")
    _add_profile(p)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("prune", help="prune a dump (or a directory of dumps)")
    p.add_argument("dump")
    p.add_argument("--out", help="result file (single dump) or directory (dump directory); stdout if omitted")
    p.add_argument("--timestamp", action="store_true", help="add metadata.timestamp to the result")
    p.add_argument("--keep-cls", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    _add_schedule(p)
    _add_profile(p)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("calibrate", help="grid-search per-class profiles on a labelled dataset")
    p.add_argument("dataset")
    p.add_argument("--space", required=True, help='JSON {"layer_sets": [...], "ratio_grid": [...]}')
    p.add_argument("--out", required=True, help="directory for profiles.json and report.json")
    p.add_argument("--scorer", default="builtin", help="builtin or exec:<command>")
    p.add_argument("--timeout", type=float, default=30.0)
    p.add_argument("--fallback", help="profiles for classes without samples")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--early-fraction", type=float)
    p.add_argument("--early-keep", type=int, default=3)
    _add_schedule(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("verify", help="run the randomized guarantee checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quick", action="store_true", help="reduced probe counts")
    p.add_argument("--report", help="write the JSON report here")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="time one dump and compare op counters with the estimate")
    p.add_argument("dump")
    p.add_argument("--repeat", type=int, default=5)
    _add_schedule(p)
    _add_profile(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gen-synth", help="write synthetic dumps with planted evidence")
    p.add_argument("out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-class", type=int, default=2)
    p.add_argument("--classes", help="comma-separated class ids (default all)")
    p.add_argument("--grid", default="24x24")
    p.add_argument("--d-v", type=int, default=32)
    p.add_argument("--proj-dim", type=int)
    p.set_defaults(func=cmd_gen_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"adaprune {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (AdapruneError, OSError, ValueError) as exc:
        print(f"adaprune {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
