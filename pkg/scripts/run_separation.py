"""Own-MI versus gap-maximizing estimator training: held-out gaps per seed."""

import os
import statistics

from _common import parser, setup, splits, write

from namid.data import csv_text
from namid.evaluation import run_separation, separation_csv, separation_gaps
from namid.plots import separation_svg


def main():
    cfg, seeds, out = setup(parser(__doc__, "separation").parse_args())
    gaps = []
    for seed in seeds:
        c = cfg.replace(seed=seed)
        rows, _, _ = run_separation(c, *splits(c))
        write(os.path.join(out, f"separation_seed{seed}.csv"), separation_csv(rows))
        write(os.path.join(out, f"separation_seed{seed}.svg"), separation_svg(rows))
        gaps.append(separation_gaps(rows))
    keys = sorted(gaps[0])
    table = [[mode, est, statistics.median(g[(mode, est)] for g in gaps)] for mode, est in keys]
    write(os.path.join(out, "separation_median.csv"), csv_text(["mode", "estimator", "median_gap"], table))


if __name__ == "__main__":
    main()
