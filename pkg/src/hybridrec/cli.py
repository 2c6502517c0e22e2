"""Command-line entry point.

Every subcommand is a thin wrapper over library calls; all outputs are CSV
or JSON plus PNG figures written into ``--out``.
"""
import argparse
import csv
import json
import logging
import os
import sys

from . import bench, report
from .config import RunConfig, apply_override, load_config, parse_faults, validate
from .data import estimate_alpha, generate_synthetic
from .errors import ConfigError, HybridError
from .orchestrator import compare_modes, load_dataset, run_training

EXIT_OK, EXIT_CONFIG, EXIT_RUN = 0, 2, 3

log = logging.getLogger("hybridrec")


def build_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    for pair in args.set or ():
        apply_override(cfg, pair)
    for spec in args.faults or ():
        cfg.faults.extend(parse_faults(spec, None, "--faults"))
    validate(cfg)
    return cfg


def _outdir(args):
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _write_rows(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def cmd_train(args) -> int:
    cfg = build_config(args)
    out = _outdir(args)
    m = run_training(cfg)
    m.write_csv(os.path.join(out, "metrics.csv"))
    m.write_report(os.path.join(out, "report.json"))
    if not args.no_plots:
        report.plot_run(m, out)
    print(f"{m.mode}: status={m.status} steps={m.steps_run}/{m.steps_planned} auc={m.final_auc} "
          f"max_staleness={m.max_staleness} samples/s={m.samples_per_sec:.0f}")
    return EXIT_OK if m.status == "ok" else EXIT_RUN


def cmd_compare(args) -> int:
    cfg = build_config(args)
    out = _outdir(args)
    modes = [s.strip() for s in args.modes.split(",") if s.strip()]
    rep = compare_modes(cfg, None, modes)
    rep.write_csv(os.path.join(out, "comparison.csv"))
    for mode, run in rep.runs.items():
        run.write_report(os.path.join(out, f"report_{mode}.json"))
    if not args.no_plots:
        report.plot_comparison(rep, out)
    for name, ok in rep.checks.items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    if rep.partial:
        print("partial: at least one mode did not finish", file=sys.stderr)
        return EXIT_RUN
    return EXIT_OK


def cmd_bench_codec(args) -> int:
    out = _outdir(args)
    rows = bench.bench_codec(seed=args.seed)
    _write_rows(os.path.join(out, "bench_codec.csv"), rows)
    for r in rows:
        print(f"batch={r['batch']} index x{r['index_ratio']:.2f} value x{r['value_ratio']:.2f} "
              f"max_rel_err={r['value_max_rel_err']:.2e}")
    return EXIT_OK


def cmd_bench_lru(args) -> int:
    out = _outdir(args)
    rows = bench.bench_lru(ops=args.ops, capacity=args.capacity, seed=args.seed)
    _write_rows(os.path.join(out, "bench_lru.csv"), rows)
    r = rows[0]
    print(f"{r['ops_per_sec']:.0f} ops/s hit_rate={r['hit_rate']:.3f} evictions={r['evictions']}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = build_config(args)
    ds = generate_synthetic(cfg.data.synth(cfg.model.embedding_dim), seed=cfg.train.seed) \
        if not cfg.data.data_file else load_dataset(cfg)
    path = args.output or os.path.join(_outdir(args), "dataset.hds")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    ds.save(path)
    a = estimate_alpha(ds)
    info = {"path": path, "samples": len(ds), "groups": len(ds.offsets), "positive_rate": float(ds.labels.mean()),
            "alpha_hat": a.alpha_hat, "digest": ds.digest()}
    print(json.dumps(info, indent=2))
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hybridrec", description="Hybrid sync/async embedding training experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        sp.add_argument("--out", default="out", help="output directory")
        if config:
            sp.add_argument("--config", help="config file (see docs/config.md)")
            sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override, repeatable")
            sp.add_argument("--faults", action="append", metavar="TARGET@step=N", help="fault injections")

    sp = sub.add_parser("train", help="run one training job")
    common(sp)
    sp.add_argument("--no-plots", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("compare", help="run the same job in several modes")
    common(sp)
    sp.add_argument("--modes", default="sync,hybrid_opt,async")
    sp.add_argument("--no-plots", action="store_true")
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("bench-codec", help="index and value codec sizes and timing")
    common(sp, config=False)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_bench_codec)

    sp = sub.add_parser("bench-lru", help="PS LRU store throughput")
    common(sp, config=False)
    sp.add_argument("--ops", type=int, default=100_000)
    sp.add_argument("--capacity", type=int, default=2_000)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_bench_lru)

    sp = sub.add_parser("gen-data", help="write a synthetic dataset file")
    common(sp)
    sp.add_argument("--output", help="dataset path (default OUT/dataset.hds)")
    sp.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except HybridError as exc:
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
