"""Standard AT against NAMID and its ablations, evaluated under FGSM and PGD, per seed."""

import os
import statistics

from _common import parser, setup, splits, write

from namid.data import csv_text
from namid.evaluation import ablation_run
from namid.plots import grouped_bars_svg


def main():
    cfg, seeds, out = setup(parser(__doc__, "ablation").parse_args())
    reports = []
    for seed in seeds:
        c = cfg.replace(seed=seed)
        report = ablation_run(c, *splits(c)).report
        write(os.path.join(out, f"ablation_seed{seed}.csv"), report.accuracy_csv())
        reports.append(report)
    defenses = list(dict.fromkeys(r.defense for r in reports[0].rows))
    attacks = list(dict.fromkeys(r.attack for r in reports[0].rows))
    med = {(a, d): statistics.median(rep.find(d, a).adversarial_acc for rep in reports)
           for a in attacks for d in defenses}
    rows = [[d, a, med[(a, d)]] for d in defenses for a in attacks]
    write(os.path.join(out, "ablation_median.csv"), csv_text(["defense", "attack", "median_accuracy"], rows))
    write(os.path.join(out, "ablation_median.svg"),
          grouped_bars_svg(attacks, defenses, med, f"median over {len(seeds)} seeds", "accuracy (%)"))


if __name__ == "__main__":
    main()
