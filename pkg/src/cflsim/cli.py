"""``cflsim`` command line: gen-data, build-latency-table, run, report.

Exit codes: 0 ok, 2 bad configuration, 3 file problems, 4 anything else that
went wrong at run time.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as dt
import logging
import os
import sys
from pathlib import Path

from cflsim import bench, fl, report
from cflsim import search as sh
from cflsim.errors import CFLError, ConfigError, StructuralError

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_RUNTIME = 0, 2, 3, 4
DATA_ENV = "CFLSIM_DATA_DIR"

_D = fl.RunConfig()


def default_data_dir() -> Path:
    return Path(os.environ.get(DATA_ENV, "data"))


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global")
    g.add_argument("--seed", type=int, default=None, help=f"master seed (default: {_D.seed})")
    g.add_argument("--config", type=Path, default=None, help="key=value run config file (default: none)")
    g.add_argument("--out", type=Path, default=None, help="output directory (default: depends on command)")
    g.add_argument(
        "--data-dir", type=Path, default=None, help=f"data cache directory (default: ${DATA_ENV} or ./data)"
    )
    g.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key (default: none)"
    )
    g.add_argument("--log-level", default="WARNING", help="logging level (default: WARNING)")
    return p


def _cfg_flag(p: argparse.ArgumentParser, name: str, typ, **kw) -> None:
    key = name.replace("-", "_")
    p.add_argument(f"--{name}", dest=key, type=typ, default=None, help=f"(default: {getattr(_D, key)})", **kw)


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="cflsim", description="Customized federated learning simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    gd = sub.add_parser("gen-data", parents=[common], help="build worker, public and test caches")
    for name, typ in [
        ("workers", int),
        ("imbalance", float),
        ("train-samples", int),
        ("test-samples", int),
        ("public-fraction", float),
        ("local-test-fraction", float),
    ]:
        _cfg_flag(gd, name, typ)
    _cfg_flag(gd, "quality-assignment", str, choices=("round-robin", "random"))
    gd.add_argument("--idx-train", nargs=2, type=Path, metavar=("IMAGES", "LABELS"), help="IDX training files (default: synthetic)")
    gd.add_argument("--idx-test", nargs=2, type=Path, metavar=("IMAGES", "LABELS"), help="IDX test files (default: synthetic)")

    lt = sub.add_parser("build-latency-table", parents=[common], help="make the device fleet and latency table")
    for name, typ in [("workers", int), ("speed-spread", float), ("bound-factor", float)]:
        _cfg_flag(lt, name, typ)

    rn = sub.add_parser("run", parents=[common], help="run one experiment into a fresh run directory")
    _cfg_flag(rn, "mode", str, choices=fl.MODES)
    for name, typ in [("rounds", int), ("workers", int), ("local-epochs", int), ("lr", float), ("search-times", int)]:
        _cfg_flag(rn, name, typ)

    rp = sub.add_parser("report", parents=[common], help="write CSV tables from run directories")
    rp.add_argument("runs", nargs="+", type=Path, help="run directories")
    return parser


def resolve_config(args: argparse.Namespace) -> fl.RunConfig:
    """Defaults <- config file <- --set <- explicit flags <- --seed."""
    cfg = fl.RunConfig()
    if args.config is not None:
        try:
            text = args.config.read_text()
        except OSError as exc:
            raise FileNotFoundError(f"cannot read config file {args.config}: {exc}") from exc
        cfg = fl.parse_config_text(text, cfg)
    if args.set:
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        cfg = fl.parse_config_text("\n".join(args.set), cfg)
    names = {f.name for f in dataclasses.fields(fl.RunConfig)}
    flags = {k: v for k, v in vars(args).items() if k in names and v is not None}
    if flags:
        cfg = fl.parse_config_text("\n".join(f"{k}={v}" for k, v in flags.items()), cfg)
    return cfg


def _data_dir(args) -> Path:
    return args.data_dir if args.data_dir is not None else default_data_dir()


def _check_writable(path: Path) -> None:
    probe = path
    while not probe.exists():
        probe = probe.parent
    if not probe.is_dir() or not os.access(probe, os.W_OK):
        raise PermissionError(f"output path {path} is not writable")


def cmd_gen_data(args, cfg: fl.RunConfig) -> int:
    out = args.out or _data_dir(args)
    for pair in (args.idx_train, args.idx_test):
        for f in pair or ():
            if not f.is_file():
                raise FileNotFoundError(f"missing IDX file {f}")
    _check_writable(out)
    raw_train = bench.load_idx(*args.idx_train, cfg.net.num_classes) if args.idx_train else None
    raw_test = bench.load_idx(*args.idx_test, cfg.net.num_classes) if args.idx_test else None
    bm = fl.build_benchmark(cfg, raw_train, raw_test)
    fl.save_benchmark(bm, out)
    total = len(bm.public) + bm.unassigned
    for k, w in enumerate(bm.workers):
        n = len(w.y_train) + len(w.y_test)
        total += n
        print(f"worker {k} quality={w.quality} dominant={bm.dominant[k]} train={len(w.y_train)} test={len(w.y_test)}")
    print(f"public {len(bm.public)}")
    print(f"unassigned {bm.unassigned}")
    for q in range(len(bench.QualityLevel)):
        print(f"test quality={q} {int((bm.test.quality == q).sum())}")
    print(f"total {total}")
    return EXIT_OK


def cmd_build_latency_table(args, cfg: fl.RunConfig) -> int:
    out = args.out or _data_dir(args)
    _check_writable(out)
    fleet, table = fl.make_fleet_and_table(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "fleet.txt").write_text(bench.fleet_to_text(fleet))
    (out / "latency_table.txt").write_text(table.to_text())
    print(f"{len(fleet)} devices, {len(table.entries)} table entries -> {out}")
    return EXIT_OK


def _require(path: Path) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"missing input file {path}")
    return path


def new_run_dir(root: Path, cfg: fl.RunConfig) -> Path:
    stamp = dt.datetime.now().strftime("%Y%m%dT%H%M%S_%f")
    path = root / f"{cfg.mode}-s{cfg.seed}-{stamp}"
    n = 1
    while path.exists():
        path = root / f"{cfg.mode}-s{cfg.seed}-{stamp}-{n}"
        n += 1
    return path


def cmd_run(args, cfg: fl.RunConfig) -> int:
    data = _data_dir(args)
    root = args.out or Path("runs")
    fleet_path = _require(data / "fleet.txt")
    table_path = _require(data / "latency_table.txt")
    _require(data / "partition.txt")
    _check_writable(root)
    fleet = bench.fleet_from_text(fleet_path.read_text())
    table = sh.LatencyTable.from_text(table_path.read_text())
    bm = fl.load_benchmark(data)
    run_dir = new_run_dir(root, cfg)
    result = fl.run_experiment(cfg, bm, fleet, table, out_dir=run_dir)
    print(f"{run_dir} mean_final_accuracy={result.mean_final_accuracy():.4f} "
          f"mean_round_time_ms={result.summary['mean_round_time_ms']:.4f}")
    return EXIT_OK


def cmd_report(args, cfg: fl.RunConfig) -> int:
    for d in args.runs:
        if not d.is_dir():
            raise FileNotFoundError(f"run directory {d} does not exist")
    out = args.out or Path("report")
    _check_writable(out)
    for p in report.cmd_report(args.runs, out):
        print(p)
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "build-latency-table": cmd_build_latency_table,
    "run": cmd_run,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING))
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, StructuralError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (CFLError, ValueError, KeyError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
