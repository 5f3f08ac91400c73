"""End-to-end CLI pipeline: generate data, build the latency table, run each mode, write report tables."""

import argparse
from pathlib import Path

from cflsim.cli import main as cli

CONFIG = Path(__file__).with_name("configs") / "toy.cfg"


def step(argv):
    print("$ cflsim " + " ".join(argv), flush=True)
    code = cli(argv)
    if code:
        raise SystemExit(code)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--work", type=Path, default=Path("work"), help="output root (default: %(default)s)")
    ap.add_argument("--config", type=Path, default=CONFIG, help="run config (default: %(default)s)")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--modes", nargs="+", default=["cfl", "uniform-fl", "independent"])
    ap.add_argument("--rounds", type=int, default=None, help="override the config's round count")
    args = ap.parse_args()

    run_dirs = []
    for seed in args.seeds:
        data = args.work / f"data-s{seed}"
        common = ["--config", str(args.config), "--seed", str(seed), "--data-dir", str(data)]
        step(["gen-data", *common])
        step(["build-latency-table", *common])
        runs = args.work / "runs"
        for mode in args.modes:
            before = set(runs.iterdir()) if runs.exists() else set()
            extra = ["--rounds", str(args.rounds)] if args.rounds else []
            step(["run", *common, "--mode", mode, "--out", str(runs), *extra])
            run_dirs.extend(sorted(set(runs.iterdir()) - before))
    step(["report", *map(str, run_dirs), "--out", str(args.work / "report")])


if __name__ == "__main__":
    main()
