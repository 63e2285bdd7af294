"""Standard-MI estimates of a naturally trained model under growing PGD, per seed."""

import os
import statistics

from _common import parser, setup, splits, write

from namid.data import csv_text
from namid.evaluation import POC_HEADER, PoCCurves, run_proof_of_concept
from namid.plots import poc_svg


def main():
    cfg, seeds, out = setup(parser(__doc__, "poc").parse_args())
    per_seed = []
    for seed in seeds:
        c = cfg.replace(seed=seed)
        curves, _, _ = run_proof_of_concept(c, *splits(c))
        write(os.path.join(out, f"poc_seed{seed}.csv"), curves.csv())
        per_seed.append(curves)
    med = lambda attr: [statistics.median(vals) for vals in zip(*(getattr(c, attr) for c in per_seed))]  # noqa: E731
    summary = PoCCurves(list(cfg.poc_steps), cfg.poc_eps, med("adversarial_acc"), med("mi_natural"),
                        med("mi_adversarial"), med("mi_cross"))
    write(os.path.join(out, "poc_median.csv"), csv_text(list(POC_HEADER), summary.rows()))
    write(os.path.join(out, "poc_median.svg"), poc_svg(summary))
    ok = all(a > x and n >= a for n, a, x in zip(summary.mi_natural, summary.mi_adversarial, summary.mi_cross))
    print("adversarial above cross, natural above adversarial at every strength:", ok)


if __name__ == "__main__":
    main()
