"""Command-line driver: train, eval, aggregate, analyze, list-methods, run-suite."""
import argparse
import logging
import multiprocessing as mp
import os
import sys
from pathlib import Path

from . import attacks, config, dataio, evalsuite, trainer
from .analysis import report
from .methods import registry

log = logging.getLogger("fastat")

EXIT_OK, EXIT_INVALID, EXIT_ABORT = 0, 1, 2


class CliError(Exception):
    def __init__(self, code, msg):
        super().__init__(msg)
        self.code = code


def _method_path(value):
    """Accept a YAML path or a registry name that maps to a packaged method file."""
    p = Path(value)
    if p.exists():
        return p
    packaged = config.packaged_config_dir() / "methods" / f"{value}.yaml"
    if packaged.exists():
        return packaged
    raise config.ConfigError(f"method config {value!r} not found (neither a file nor a packaged method)")


def _common_path(value):
    if value is None:
        return config.packaged_config_dir() / "common.yaml"
    p = Path(value)
    if not p.exists() and (config.packaged_config_dir() / f"{value}.yaml").exists():
        return config.packaged_config_dir() / f"{value}.yaml"
    return p


def resolve_config(common, method, seed=None, overrides=(), deterministic=False):
    items = list(overrides)
    if seed is not None:
        items.append(f"seed={seed}")
    if deterministic:
        items.append("deterministic=true")
    common = _common_path(common)
    if method is None:
        cfg_path = common
        merged = config.read_yaml(common)
        for item in items:
            merged = config.deep_merge(merged, config.parse_override(item))
        cfg = config.from_dict(merged)
        problems = config.validate(cfg)
        if problems:
            raise config.ConfigError("; ".join(problems))
        log.debug("config from %s", cfg_path)
        return cfg
    return config.load_layered(common, _method_path(method), items)


def _out(args, cfg=None):
    if args.out is not None:
        return Path(args.out)
    return Path(cfg.output_dir if cfg is not None else "runs")


# ---------------------------------------------------------------------------
# verbs


def cmd_train(args):
    cfg = resolve_config(args.common, args.method, args.seed, args.set, args.deterministic)
    out = trainer.train(cfg, data_root=args.data_root, out_dir=_out(args, cfg), profile=not args.no_profile)
    r = out.report
    print(f"run_dir={out.run_dir}")
    print(f"selected_epoch={r.selected_epoch} train_seconds={r.total_seconds:.2f} peak_memory_gb={r.peak_memory_gb:.3f}")
    return EXIT_OK


def _default_checkpoint(cfg, run_dir):
    name = "best_wa.ckpt" if cfg.method.use_wa_model else "best_raw.ckpt"
    return run_dir / name


def evaluate_run(cfg, out_root, data_root=None, checkpoint=None):
    run_dir = cfg.run_dir(out_root)
    ckpt = Path(checkpoint) if checkpoint else _default_checkpoint(cfg, run_dir)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    rep_path = run_dir / "report.json"
    rep = trainer.TrainReport.load(rep_path) if rep_path.exists() else None
    result = evalsuite.evaluate_checkpoint(cfg, ckpt, data_root=data_root, report=rep)
    path = result.save(evalsuite.result_path(out_root, cfg.dataset_name, cfg.method.name, cfg.seed))
    return result, path


def cmd_eval(args):
    cfg = resolve_config(args.common, args.method, args.seed, args.set, args.deterministic)
    result, path = evaluate_run(cfg, _out(args, cfg), args.data_root, args.checkpoint)
    print(f"result={path}")
    for m in evalsuite.METRICS:
        print(f"{m}={getattr(result, m)}")
    return EXIT_OK


def cmd_aggregate(args):
    root = Path(args.inp) if args.inp else _out(args)
    results = evalsuite.collect_results(root)
    if not results:
        raise FileNotFoundError(f"no results under {root / 'results'}")
    aggs = evalsuite.aggregate_all(results)
    paths = evalsuite.write_summary(aggs, _out(args))
    for agg in aggs:
        row = " ".join(f"{m}={evalsuite.format_stat(agg.metrics[m])}" for m in evalsuite.METRICS)
        print(f"{agg.dataset} {agg.method} {row}")
    print(f"summary={paths['json']}")
    return EXIT_OK


ANALYZE_KINDS = {"pareto": "pareto-plot", "radar": "radar-plot"}


def cmd_analyze(args):
    summary = evalsuite.load_summary(args.inp)
    kind = ANALYZE_KINDS.get(args.what)
    if kind is None:
        kind = "csv" if args.format == "csv" else "markdown-table"
    files = report.emit(summary, kind, _out(args), x=args.x, y=args.y)
    if kind == "markdown-table":
        for f in files:
            print(Path(f).read_text(), end="")
    for f in files:
        print(f"wrote {f}")
    return EXIT_OK


def cmd_list_methods(args):
    print(f"{'method':<12} {'category':<19} {'state':<14} {'status':<16} defaults")
    for name, info in registry.REGISTRY.items():
        status = "implemented" if info.implemented else "not implemented"
        defaults = ", ".join(f"{k}={v}" for k, v in info.defaults.items()) or "-"
        print(f"{name:<12} {info.category:<19} {info.state or '-':<14} {status:<16} {defaults}")
    return EXIT_OK


def _suite_job(job):
    """Train + evaluate one (method, seed) in its own process."""
    cfg_dict, out_root, data_root, profile = job
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    cfg = config.from_dict(cfg_dict)
    trainer.train(cfg, data_root=data_root, out_dir=out_root, profile=profile)
    _, path = evaluate_run(cfg, Path(out_root), data_root)
    return str(path)


def cmd_run_suite(args):
    if args.parallel > 1 and not args.no_profile:
        raise config.ConfigError("--parallel > 1 requires --no-profile (concurrent runs distort time/memory)")
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    methods = args.method or [n for n in registry.implemented_methods()]
    jobs = []
    out_root = None
    for m in methods:
        for s in seeds:
            cfg = resolve_config(args.common, m, s, args.set, args.deterministic)
            out_root = _out(args, cfg)
            jobs.append((cfg.to_dict(), str(out_root), args.data_root, not args.no_profile))
    ctx = mp.get_context("spawn")
    with ctx.Pool(processes=args.parallel, maxtasksperchild=1) as pool:
        for path in pool.imap(_suite_job, jobs):
            print(f"result={path}")
    aggs = evalsuite.aggregate_all(evalsuite.collect_results(out_root))
    paths = evalsuite.write_summary(aggs, out_root)
    print(f"summary={paths['json']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _config_flags(p, suite=False):
    p.add_argument("--common", help="common YAML config (default: packaged common.yaml)")
    if suite:
        p.add_argument("--method", action="append",
                       help="method YAML or registry name; repeatable (default: all implemented)")
    else:
        p.add_argument("--method", help="method YAML config or registry name")
        p.add_argument("--seed", type=int, help="random seed (overrides the config)")
    p.add_argument("--data-root", default=os.environ.get("FASTAT_DATA_ROOT"),
                   help="dataset directory (default: $FASTAT_DATA_ROOT)")
    p.add_argument("--out", help="output root (default: config output_dir)")
    p.add_argument("--set", action="append", default=[], metavar="K=V", help="override a config key; repeatable")
    p.add_argument("--deterministic", action="store_true", help="force deterministic kernels")


def build_parser():
    parser = argparse.ArgumentParser(prog="fastat", description="Fast adversarial training benchmark harness.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="verb", required=True, metavar="VERB")

    p = sub.add_parser("train", help="train one (method, seed) and save checkpoints")
    _config_flags(p)
    p.add_argument("--no-profile", action="store_true", help="skip time/memory profiling")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained checkpoint with the attack suite")
    _config_flags(p)
    p.add_argument("--checkpoint", help="checkpoint path (default: the run's selected checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("aggregate", help="combine per-seed results into summary.json/csv")
    p.add_argument("--in", dest="inp", help="results root (default: --out)")
    p.add_argument("--out", help="output directory (default: runs)")
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("analyze", help="pareto frontier, radar chart or results table")
    p.add_argument("what", choices=("pareto", "radar", "table"))
    p.add_argument("--in", dest="inp", required=True, help="summary.json produced by aggregate")
    p.add_argument("--out", default="analysis", help="output directory (default: analysis)")
    p.add_argument("--x", default="train_seconds", help="pareto cost metric (default: train_seconds)")
    p.add_argument("--y", default="aa_lite_pct", help="pareto score metric (default: aa_lite_pct)")
    p.add_argument("--format", choices=("markdown", "csv"), default="markdown", help="table format")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("list-methods", help="print the method registry")
    p.set_defaults(func=cmd_list_methods)

    p = sub.add_parser("run-suite", help="train and evaluate methods x seeds, then aggregate")
    _config_flags(p, suite=True)
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds (default: 0,1,2)")
    p.add_argument("--no-profile", action="store_true", help="skip time/memory profiling")
    p.add_argument("--parallel", type=int, default=1, help="worker processes; >1 needs --no-profile")
    p.set_defaults(func=cmd_run_suite)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (config.ConfigError, KeyError) as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except trainer.TrainingAborted as exc:
        print(f"error: trainer: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except dataio.DatasetError as exc:
        print(f"error: dataio: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except attacks.AttackError as exc:
        print(f"error: attacks: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ABORT


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
