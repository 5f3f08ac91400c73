"""Computation percentage and per-quality accuracy of the gated parent for several alpha values."""

import argparse

import numpy as np

from cflsim import bench
from cflsim import supernet as sn


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--alphas", type=float, nargs="+", default=[0.0, 0.1, 0.5, 1.0])
    ap.add_argument("--train-samples", type=int, default=2000)
    ap.add_argument("--warmup-epochs", type=int, default=6)
    ap.add_argument("--reinforce-epochs", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    net = sn.toy_config()
    raw = bench.synthetic_digits(args.train_samples, 11 + args.seed)
    train = bench.apply_quality_batches(raw, bench.partition_quality_iid(args.train_samples, 11 + args.seed))
    test = bench.synthetic_digits(500, 12 + args.seed)
    arch = sn.full_arch(net)

    header = "alpha  quality  acc_all_on  acc_greedy  computation"
    print(header)
    for alpha in args.alphas:
        model, gates, _ = sn.train_gated_parent(
            sn.init_parent(net, args.seed), sn.init_gates(net, args.seed + 1), train.images, train.labels, net,
            warmup_epochs=args.warmup_epochs, reinforce_epochs=args.reinforce_epochs, alpha=alpha, seed=args.seed,
        )
        for q in bench.QualityLevel:
            x = bench.apply_quality(test.images, int(q))
            pa, _ = sn.predict(model, arch, net, gates, x, "all-on")
            pg, masks = sn.predict(model, arch, net, gates, x, "greedy")
            print(
                f"{alpha:5.2f}  {int(q):7d}  {np.mean(pa == test.labels):10.3f}  {np.mean(pg == test.labels):10.3f}"
                f"  {sn.computation_percentage(masks):11.3f}",
                flush=True,
            )


if __name__ == "__main__":
    main()
