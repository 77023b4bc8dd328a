"""Command-line interface.

Exit codes: 0 success, 1 usage or configuration error, 2 I/O or format
error, 3 internal error.  Progress goes to standard error; machine-readable
output goes to files named by ``--out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import random
import sys
from pathlib import Path
from typing import Sequence

from . import fixtures, io
from .attack import AttackError, EngineConfig
from .model import Ensemble, ModelError, random_ensemble
from .pipeline import (ConfigError, InvariantError, RunConfig, Setting, adversarial_pairs,
                       empirical_robustness, generate, perturbation_histogram, summarize)
from .subset import StatTestConfig, SubsetError, select_subset

log = logging.getLogger("treeprune")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ------------------------------------------------------------- helpers

def _run_config(args, delta=None) -> RunConfig:
    kw = dict(engine=args.engine, seed=args.seed, threads=args.threads,
              node_budget=args.node_budget)
    if args.timeout_full is not None:
        kw["t_full"] = args.timeout_full
    if args.timeout_pruned is not None:
        kw["t_prun"] = args.timeout_pruned
    if args.global_timeout is not None:
        kw["global_timeout"] = args.global_timeout
    return RunConfig(args.delta if delta is None else delta, **kw)


def _load(args) -> tuple[Ensemble, list]:
    e = io.load_ensemble(args.model)
    data = io.load_dataset(args.data, args.label_column)
    for r, x in enumerate(data):
        if len(x) != e.num_features:
            raise io.FormatError(
                f"{args.data}: row {r + 2} has {len(x)} features, model expects {e.num_features}")
    return e, data


def _shuffled(data: Sequence, seed: int) -> list:
    pool = list(data)
    random.Random(seed).shuffle(pool)
    return pool


def _stat_config(args, pool_size: int) -> StatTestConfig:
    return StatTestConfig(n=args.n, N=pool_size, tau=args.tau, eta=args.eta,
                          corrections=args.corrections)


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.4g}" if isinstance(v, float) else str(v)


# ------------------------------------------------------------- commands

def cmd_attack(args) -> int:
    setting = Setting(args.setting)
    if setting is not Setting.FULL and args.features is None:
        raise UsageError(f"--features is required for the {setting.value} setting")
    e, data = _load(args)
    features = io.load_subset(args.features).features if args.features else ()
    cfg = _run_config(args)
    log.info("attacking %d examples (%s, %s, delta=%g)", len(data), setting.value,
             cfg.engine, cfg.delta)
    records = generate(e, data, features, setting, cfg)
    io.write_records(records, args.out)
    s = summarize(records)
    print(f"{setting.value}: {s.sat} SAT, {s.unsat} UNSAT, {s.timeout} TIMEOUT, "
          f"{s.misclassified} misclassified, {s.skipped} skipped; "
          f"{s.total_wall_s:.3f}s")
    return EXIT_OK


def cmd_select(args) -> int:
    e, data = _load(args)
    pool = _shuffled(data, args.seed)
    cfg = _stat_config(args, len(pool))
    if len(pool) < 5 * cfg.n:
        raise SubsetError(f"subset selection needs at least {5 * cfg.n} examples "
                          f"(5 x n), got {len(pool)}")
    run = _run_config(args)
    log.info("selecting features: n=%d, N=%d, margin=%g", cfg.n, cfg.N, cfg.margin)
    subset, report = select_subset(e, pool, run, cfg)
    io.save_subset(report, args.out)
    print(f"selected {len(subset)} features ({subset.fraction:g} of {e.num_features}) "
          f"after {report.rounds_used} rounds; v_bar={report.v_bar_history}, "
          f"margin={report.delta_margin:g}")
    return EXIT_OK


BENCH_DEFAULTS = {
    "delta": None, "engine": "exact", "settings": ["full", "pruned", "mixed"],
    "timeout_full": None, "timeout_pruned": None, "global_timeout": None,
    "n": 100, "tau": 0.25, "eta": 0.1, "corrections": 4, "seed": 0,
    "features": None, "dataset_name": None, "threads": 1, "node_budget": None,
    "label_column": "label",
}


def _bench_args(args) -> argparse.Namespace:
    merged = dict(BENCH_DEFAULTS)
    if args.config is not None:
        try:
            conf = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise io.FormatError(f"{args.config}: invalid JSON: {exc}") from None
        unknown = set(conf) - set(BENCH_DEFAULTS) - {"model", "data", "out"}
        if unknown:
            raise ConfigError(f"unknown bench config keys: {sorted(unknown)}")
        merged.update(conf)
    for key, value in vars(args).items():
        if value is not None and key not in ("config", "func", "cmd"):
            merged[key] = value
    for key in ("model", "data", "out", "delta"):
        if merged.get(key) is None:
            raise UsageError(f"bench needs '{key}' from --{key} or the config file")
    bad = [s for s in merged["settings"] if s not in {x.value for x in Setting}]
    if bad:
        raise ConfigError(f"unknown settings {bad}")
    return argparse.Namespace(**merged)


def cmd_bench(args) -> int:
    args = _bench_args(args)
    e, data = _load(args)
    cfg = _run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    settings = [Setting(s) for s in args.settings]
    features: tuple[int, ...] = ()
    subset_size = None
    if any(s is not Setting.FULL for s in settings):
        if args.features is not None:
            features = io.load_subset(args.features).features
        else:
            pool = _shuffled(data, args.seed)
            stat = _stat_config(args, len(pool))
            log.info("selecting features on %d examples", len(pool))
            subset, report = select_subset(e, pool, cfg, stat)
            io.save_subset(report, out / "subset.json")
            features = subset.features
        subset_size = len(features)
    runs = {}
    # full first so the others can be compared against it
    for s in sorted(settings, key=lambda s: s is not Setting.FULL):
        log.info("running %s setting on %d examples", s.value, len(data))
        runs[s] = generate(e, data, features if s is not Setting.FULL else (), s, cfg)
        io.write_records(runs[s], out / f"{s.value}.jsonl")
    full = runs.get(Setting.FULL)
    name = args.dataset_name or Path(args.data).stem
    summaries = []
    for s in settings:
        summaries.append(summarize(
            runs[s], reference=full, dataset=name, engine=cfg.engine,
            subset_size=subset_size if s is not Setting.FULL else None,
            paired_full=full if s is Setting.PRUNED else None))
    io.write_summaries(summaries, out / "summary.csv")
    for sm in summaries:
        print(f"{sm.setting}: total {sm.total_wall_s:.3f}s speedup {_fmt(sm.speedup)} "
              f"fnr {_fmt(sm.fnr)} fallback {_fmt(sm.fallback_frac)} "
              f"timeouts {_fmt(sm.timeout_frac)}")
    return EXIT_OK


def cmd_robustness(args) -> int:
    setting = Setting(args.setting)
    if setting is not Setting.FULL and args.features is None:
        raise UsageError(f"--features is required for the {setting.value} setting")
    e, data = _load(args)
    features = io.load_subset(args.features).features if args.features else ()
    cfg = _run_config(args, delta=math.inf if args.delta is None else args.delta)
    report = empirical_robustness(e, data, setting, cfg, features)
    io.write_robustness(report, args.out)
    print(f"mean empirical robustness ({setting.value}): {_fmt(report.mean)}")
    return EXIT_OK


def cmd_histogram(args) -> int:
    data = io.load_dataset(args.data, args.label_column)
    records = io.read_records(args.results)
    pairs = adversarial_pairs(data, records)
    if not pairs:
        raise ConfigError("the results contain no adversarial examples")
    hist = perturbation_histogram(pairs, len(pairs), len(data[0]), args.cutoff)
    io.write_histogram(hist, args.out)
    print(f"never {hist.never}, rare {hist.rare}, frequent {hist.frequent} "
          f"over {len(pairs)} adversarial examples")
    return EXIT_OK


def cmd_gen(args) -> int:
    kind = args.kind
    if kind == "random":
        e = random_ensemble(args.trees, args.depth, args.features, args.leaf_scale, args.seed)
    elif kind == "informative":
        e = fixtures.informative_ensemble(args.features, args.trees, args.depth, args.seed)
    elif kind == "sparse":
        e = fixtures.sparse_relevance_ensemble(args.features, args.trees, args.depth,
                                               seed=args.seed)
    elif kind == "two-stumps":
        e = fixtures.two_stumps()
    else:
        e = fixtures.parity_ensemble(args.features)
    io.save_ensemble(e, args.out)
    if args.data_out is not None:
        if kind == "parity":
            data = fixtures.parity_data(e.num_features, args.rows, seed=args.seed)
        else:
            data = fixtures.uniform_data(e, args.rows, args.seed)
        io.save_dataset(data, args.data_out)
    print(f"wrote {len(e.trees)} trees over {e.num_features} features to {args.out}")
    return EXIT_OK


def cmd_import(args) -> int:
    e = io.import_xgboost_dump(args.dump, args.num_features, args.base_score)
    io.save_ensemble(e, args.out)
    print(f"imported {len(e.trees)} trees to {args.out}")
    return EXIT_OK


# -------------------------------------------------------------- parser

def _attack_flags(p, delta_required=True, defaults=True):
    d = (lambda v: v) if defaults else (lambda v: None)
    p.add_argument("--model", required=defaults)
    p.add_argument("--data", required=defaults)
    p.add_argument("--delta", type=float, required=delta_required and defaults)
    p.add_argument("--engine", choices=["exact", "heuristic"], default=d("exact"))
    p.add_argument("--timeout-full", type=float)
    p.add_argument("--timeout-pruned", type=float)
    p.add_argument("--global-timeout", type=float)
    p.add_argument("--node-budget", type=int)
    p.add_argument("--seed", type=int, default=d(0))
    p.add_argument("--threads", type=int, default=d(1))
    p.add_argument("--label-column", default=d("label"))


def _stat_flags(p, defaults=True):
    d = (lambda v: v) if defaults else (lambda v: None)
    p.add_argument("--n", type=int, default=d(100))
    p.add_argument("--tau", type=float, default=d(0.25))
    p.add_argument("--eta", type=float, default=d(0.1))
    p.add_argument("--corrections", type=int, default=d(4))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="treeprune",
                     description="Adversarial example generation for tree ensembles "
                                 "with relevant-feature pruning.")
    parser.add_argument("-q", "--quiet", action="store_true", help="no progress output")
    sub = parser.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    p = sub.add_parser("attack", help="generate adversarial examples")
    _attack_flags(p)
    p.add_argument("--setting", choices=[s.value for s in Setting], default="full")
    p.add_argument("--features", help="feature-subset JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("select", help="select the relevant feature subset")
    _attack_flags(p)
    _stat_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("bench", help="run full/pruned/mixed and write a summary")
    p.add_argument("--config", help="JSON file; flags override its values")
    _attack_flags(p, defaults=False)
    _stat_flags(p, defaults=False)
    p.add_argument("--settings", nargs="+")
    p.add_argument("--features")
    p.add_argument("--dataset-name")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("robustness", help="nearest adversarial distance per example")
    _attack_flags(p, delta_required=False)
    p.add_argument("--setting", choices=[s.value for s in Setting], default="full")
    p.add_argument("--features")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_robustness)

    p = sub.add_parser("histogram", help="bucket features by perturbation frequency")
    p.add_argument("--data", required=True)
    p.add_argument("--results", required=True, help="attack results JSONL")
    p.add_argument("--cutoff", type=float, default=0.05)
    p.add_argument("--label-column", default="label")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_histogram)

    p = sub.add_parser("gen", help="write a synthetic model (and data)")
    p.add_argument("--kind", choices=["random", "informative", "sparse", "two-stumps",
                                      "parity"], default="random")
    p.add_argument("--trees", type=int, default=20)
    p.add_argument("--depth", type=int, default=5)
    p.add_argument("--features", type=int, default=100)
    p.add_argument("--leaf-scale", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rows", type=int, default=1000)
    p.add_argument("--data-out")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("import", help="convert an XGBoost JSON dump")
    p.add_argument("--dump", required=True)
    p.add_argument("--num-features", type=int, required=True)
    p.add_argument("--base-score", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_import)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ConfigError, SubsetError, AttackError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (io.FormatError, ModelError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except InvariantError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
