"""Simulated round time of cfl relative to uniform-model FL across fleet speed spreads."""

import argparse

import numpy as np

from cflsim import fl
from cflsim import supernet as sn


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--spreads", type=float, nargs="+", default=[1.0, 2.0, 4.0, 8.0])
    ap.add_argument("--bound-factor", type=float, default=0.6)
    ap.add_argument("--rounds", type=int, default=3)
    ap.add_argument("--workers", type=int, default=8)
    args = ap.parse_args()

    print("spread  mean_ratio  min_ratio  max_ratio  cfl_faster")
    for spread in args.spreads:
        ratios = []
        for seed in range(args.seeds):
            base = dict(
                net=sn.toy_config(), workers=args.workers, rounds=args.rounds, train_samples=800, test_samples=100,
                local_epochs=1, pretrain_epochs=1, reinforce_epochs=1, speed_spread=spread,
                bound_factor=args.bound_factor, seed=seed,
            )
            times = {}
            for mode in ("cfl", "uniform-fl"):
                res = fl.run_experiment(fl.RunConfig(mode=mode, **base))
                times[mode] = np.mean([r.round_time_ms for r in res.records])
            ratios.append(times["cfl"] / times["uniform-fl"])
        r = np.array(ratios)
        print(f"{spread:6.1f}  {r.mean():10.3f}  {r.min():9.3f}  {r.max():9.3f}  {int((r < 1).sum())}/{len(r)}", flush=True)


if __name__ == "__main__":
    main()
