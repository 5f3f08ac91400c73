"""Mean final worker accuracy per mode over paired seeds on the toy task."""

import argparse
import time

import numpy as np

from cflsim import fl
from cflsim import supernet as sn


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--modes", nargs="+", default=["cfl", "independent", "uniform-fl"])
    ap.add_argument("--rounds", type=int, default=30)
    ap.add_argument("--workers", type=int, default=8)
    ap.add_argument("--train-samples", type=int, default=4800)
    ap.add_argument("--local-epochs", type=int, default=1)
    args = ap.parse_args()

    table: dict[str, list[float]] = {m: [] for m in args.modes}
    for seed in range(args.seeds):
        for mode in args.modes:
            cfg = fl.RunConfig(
                net=sn.toy_config(), mode=mode, seed=seed, workers=args.workers, rounds=args.rounds,
                train_samples=args.train_samples, test_samples=300, local_epochs=args.local_epochs,
            )
            t0 = time.perf_counter()
            res = fl.run_experiment(cfg)
            table[mode].append(res.mean_final_accuracy())
            print(f"seed {seed} {mode:12s} acc {table[mode][-1]:.4f} ({time.perf_counter() - t0:.0f}s)", flush=True)

    print()
    print("mode          " + " ".join(f"s{s:<6d}" for s in range(args.seeds)) + " mean")
    for mode, accs in table.items():
        print(f"{mode:12s}  " + " ".join(f"{a:.4f} " for a in accs) + f" {np.mean(accs):.4f}")
    if "cfl" in table and "independent" in table:
        wins = sum(c >= i for c, i in zip(table["cfl"], table["independent"]))
        print(f"\ncfl >= independent in {wins}/{args.seeds} seeds")


if __name__ == "__main__":
    main()
