"""Command-line entry point: ``namid <subcommand> --config FILE --seed N --out DIR``.

Every subcommand writes CSV (and containers or SVGs where relevant) into
``--out`` together with ``manifest.json``. Any failure prints one line to
stderr and exits nonzero.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

import numpy as np

from namid import __version__
from namid.attacks import AttackSpec, check_constraints, pgd
from namid.config import RunManifest, SeedTree, TrainRunConfig, file_sha256, load_config, root_seed
from namid.data import (
    batch_entries,
    csv_text,
    load_container,
    save_container,
    split_entries,
    split_from_entries,
    train_test_splits,
)
from namid.defense import (
    EPOCH_HEADER,
    Checkpoint,
    load_checkpoint,
    load_estimator_pair,
    save_checkpoint,
    train,
    train_attack_spec,
)
from namid.errors import InputError, NamidError
from namid.estimators import EstimatorHistory, gaussian_benchmark, train_estimators
from namid.evaluation import (
    EVAL_HEADER,
    POC_HEADER,
    SEPARATION_HEADER,
    EvalReport,
    EvalRow,
    PoCCurves,
    SeparationRow,
    ablation_run,
    black_box_eval,
    default_suite,
    evaluate,
    run_proof_of_concept,
    run_separation,
    separation_csv,
    train_surrogate,
)
from namid.infotheory import (
    InfoReport,
    corollary1_residuals,
    proof_chain_residuals,
    random_joint,
    sweep_theorem1,
)
from namid.plots import emit_plots, grouped_bars_svg, poc_svg, separation_svg

log = logging.getLogger("namid")


class Run:
    """Resolved config, output directory and manifest bookkeeping for one invocation."""

    def __init__(self, args: argparse.Namespace, argv: list[str]):
        overrides = dict(_split_kv(kv) for kv in args.set or [])
        if args.seed is not None:
            overrides["seed"] = str(args.seed)
        self.config: TrainRunConfig = load_config(args.config, overrides)
        self.seed = root_seed(self.config.seed)
        self.out = args.out
        os.makedirs(self.out, exist_ok=True)
        self.manifest = RunManifest(
            config=self.config.portable().to_text(),
            seed=self.seed,
            command=" ".join(_strip_out(argv)),
        )
        if args.config:
            self.add_input(args.config)

    def add_input(self, path: str) -> None:
        self.manifest.inputs[os.path.basename(path)] = file_sha256(path)

    def path(self, name: str) -> str:
        return os.path.join(self.out, name)

    def splits(self):
        cfg = self.config
        self.manifest.streams.append("split/train")
        self.manifest.streams.append("split/test")
        return train_test_splits(cfg.data_kind, cfg.n_train, cfg.n_test, cfg.dim, self.seed)

    def split_or(self, path: str | None, index: int):
        """The dataset container at ``path`` if given, else generated split ``index`` (0 train, 1 test)."""
        if path is None:
            return self.splits()[index]
        self.add_input(path)
        return split_from_entries(load_container(path), os.path.basename(path))

    def write_text(self, name: str, text: str) -> str:
        path = self.path(name)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        return path

    def finish(self) -> None:
        self.write_text("manifest.json", self.manifest.to_json() + "\n")


def _split_kv(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise InputError(f"--set expects key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def _portable(tok: str) -> str:
    key, sep, value = tok.rpartition("=")
    if os.path.isfile(value):
        return key + sep + os.path.basename(value)
    return tok


def _strip_out(argv: list[str]) -> list[str]:
    # outputs location and input directories do not change results (inputs are
    # pinned by content hash), so reruns elsewhere share a manifest
    out, skip = [], False
    for tok in argv:
        if skip:
            skip = False
            continue
        if tok == "--out":
            skip = True
            continue
        if tok.startswith("--out="):
            continue
        out.append(_portable(tok))
    return out


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


# subcommands ---------------------------------------------------------------


def cmd_verify_theorem1(run: Run, args) -> int:
    worst, joint, report = sweep_theorem1(args.trials, run.seed, args.max_alphabet)
    rng = SeedTree(run.seed).rng("theorem1/chain")
    chain_worst: dict[str, float] = {}
    corollary_slack = -np.inf
    for _ in range(args.trials):
        j = random_joint(rng, args.max_alphabet)
        for key, value in proof_chain_residuals(j).items():
            chain_worst[key] = max(chain_worst.get(key, 0.0), value)
        interaction, cond_gap, approx_err = corollary1_residuals(j)
        corollary_slack = max(corollary_slack, approx_err - interaction - cond_gap)
    rows = [["trials", args.trials], ["max_alphabet", args.max_alphabet], ["max_residual", worst],
            ["corollary_max_slack", float(corollary_slack)]]
    rows += [[f"chain_{k}", v] for k, v in chain_worst.items()]
    rows += [[f"worst_{k}", v] for k, v in zip(InfoReport.FIELDS, report.as_row())]
    text = csv_text(["metric", "value"], rows)
    run.write_text("theorem1.csv", text)
    sys.stdout.write(text)
    ok = worst <= args.tol and max(chain_worst.values()) <= args.tol and corollary_slack <= args.tol
    if not ok:
        print(f"error: identity residual {worst:.3e} exceeds tolerance {args.tol:.1e}", file=sys.stderr)
        return 1
    return 0


def cmd_gauss_bench(run: Run, args) -> int:
    rows = []
    for rho in _floats(args.rhos):
        res = gaussian_benchmark(rho, sample_count=args.samples, seed=run.seed, steps=args.steps)
        rows.append([rho, res.estimate, res.analytic, res.abs_error])
    run.write_text("gauss_bench.csv", csv_text(["rho", "estimate", "analytic", "abs_error"], rows))
    return 0


def cmd_gen_data(run: Run, args) -> int:
    train_split, test_split = run.splits()
    rows = []
    for name, split in (("train", train_split), ("test", test_split)):
        save_container(run.path(f"{name}.nmid"), split_entries(split), run.manifest)
        counts = np.bincount(split.labels, minlength=split.num_classes)
        rows.append([name, split.n, split.dim, split.num_classes, " ".join(str(int(c)) for c in counts)])
    run.write_text("data_summary.csv", csv_text(["split", "n", "dim", "classes", "class_counts"], rows))
    return 0


def _history_csv(ckpt: Checkpoint) -> str:
    return csv_text(list(EPOCH_HEADER), ckpt.history)


def _train_command(run: Run, args, estimators) -> int:
    train_split, _ = run.splits()
    resume = None
    if args.resume:
        run.add_input(args.resume)
        resume = load_checkpoint(args.resume)
        if resume.config.config_hash() != run.config.portable().config_hash():
            raise InputError("--resume checkpoint was written under a different config")
    ckpt = train(run.config, train_split, estimators, resume=resume, stop_after=args.stop_after)
    run.manifest.streams += ["model/init", "train/epoch/*", "train/attack/*/*"]
    save_checkpoint(run.path("model.nmid"), ckpt, run.manifest)
    run.write_text("history.csv", _history_csv(ckpt))
    return 0


def cmd_train_at(run: Run, args) -> int:
    return _train_command(run, args, None)


def cmd_train_namid(run: Run, args) -> int:
    cfg = run.config
    for path in (cfg.estimator_natural, cfg.estimator_adversarial):
        if path and os.path.exists(path):
            run.add_input(path)
    return _train_command(run, args, load_estimator_pair(cfg))


def cmd_train_estimators(run: Run, args) -> int:
    run.add_input(args.model)
    model = load_checkpoint(args.model).model
    train_split = run.split_or(args.data, 0)
    history = EstimatorHistory()
    est_n, est_a = train_estimators(model, train_split, train_attack_spec(run.config), run.config,
                                    mode=args.mode, seed_tree=SeedTree(run.seed), history=history)
    run.manifest.streams += ["estimators/init", "estimators/attack", "estimators/epoch/*"]
    save_container(run.path("estimator_natural.nmid"), est_n.to_entries(), run.manifest)
    save_container(run.path("estimator_adversarial.nmid"), est_a.to_entries(), run.manifest)
    run.write_text("estimator_history.csv", csv_text(list(history.header), history.rows))
    return 0


def cmd_attack(run: Run, args) -> int:
    run.add_input(args.model)
    model = load_checkpoint(args.model).model
    test_split = run.split_or(args.data, 1)
    cfg = run.config
    norm = args.norm or cfg.norm
    eps = cfg.eps if args.eps is None else args.eps
    x, y = test_split.inputs, test_split.labels
    if args.attack == "fgsm":
        if norm != "linf":
            raise InputError("fgsm is defined for the linf norm; use --attack pgd --steps 1 for l2")
        # one full-size PGD step is FGSM bit for bit and keeps the exact noise
        spec = AttackSpec("linf", eps, 1, eps)
        batch = pgd(model, x, y, spec)
    else:
        steps = args.steps or cfg.eval_steps
        spec = AttackSpec(norm, eps, steps, eps / 4, random_start=args.random_start)
        batch = pgd(model, x, y, spec, rng=SeedTree(run.seed).rng("attack/start"))
    check_constraints(batch, spec)
    save_container(run.path("adversarial.nmid"), batch_entries(batch), run.manifest)
    nat = np.argmax(model.predict(x), axis=1) == y
    adv_ok = np.argmax(model.predict(batch.adversarial), axis=1) == y
    row = [args.attack, spec.norm, eps, spec.steps, 100.0 * nat.mean(), 100.0 * adv_ok.mean(),
           float(np.abs(batch.noise).max(initial=0.0)),
           float(np.sqrt((batch.noise ** 2).sum(axis=1)).max(initial=0.0))]
    header = ["attack", "norm", "eps", "steps", "natural_acc", "adversarial_acc", "max_linf", "max_l2"]
    run.write_text("attack.csv", csv_text(header, [row]))
    return 0


def _suite(cfg: TrainRunConfig):
    steps = sorted({10, cfg.eval_steps})
    return default_suite(cfg.norm, cfg.eps, steps)


def cmd_eval(run: Run, args) -> int:
    run.add_input(args.model)
    model = load_checkpoint(args.model).model
    test_split = run.split_or(args.data, 1)
    report = evaluate(model, test_split, _suite(run.config), args.name, run.seed)
    run.write_text("eval.csv", report.accuracy_csv(runtime=args.runtime))
    return 0


def cmd_eval_blackbox(run: Run, args) -> int:
    run.add_input(args.model)
    model = load_checkpoint(args.model).model
    train_split, test_split = run.splits()
    if args.data:
        test_split = run.split_or(args.data, 1)
    if args.surrogate:
        run.add_input(args.surrogate)
        surrogate = load_checkpoint(args.surrogate).model
    else:
        ckpt = train_surrogate(run.config, train_split)
        run.manifest.streams.append("surrogate")
        save_checkpoint(run.path("surrogate.nmid"), ckpt, run.manifest)
        surrogate = ckpt.model
    report = black_box_eval(model, surrogate, test_split, _suite(run.config), args.name, run.seed)
    run.write_text("eval_blackbox.csv", report.accuracy_csv(runtime=args.runtime))
    return 0


def cmd_poc(run: Run, args) -> int:
    train_split, test_split = run.splits()
    curves, _, _ = run_proof_of_concept(run.config, train_split, test_split)
    run.write_text("poc.csv", curves.csv())
    run.write_text("poc.svg", poc_svg(curves))
    return 0


def cmd_separation(run: Run, args) -> int:
    train_split, test_split = run.splits()
    rows, _, _ = run_separation(run.config, train_split, test_split)
    run.write_text("separation.csv", separation_csv(rows))
    run.write_text("separation.svg", separation_svg(rows))
    return 0


def cmd_ablate(run: Run, args) -> int:
    train_split, test_split = run.splits()
    result = ablation_run(run.config, train_split, test_split)
    run.write_text("ablation.csv", result.report.accuracy_csv())
    emit_plots(result.report, run.out, stem="ablation")
    return 0


def _read_csv(path: str) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InputError(f"{path}: empty CSV")
    return rows[0], rows[1:]


def cmd_plot(run: Run, args) -> int:
    run.add_input(args.input)
    header, rows = _read_csv(args.input)
    stem = os.path.splitext(os.path.basename(args.input))[0]
    if tuple(header[: len(EVAL_HEADER)]) == EVAL_HEADER:
        report = EvalReport([
            EvalRow(r[0], r[1], r[2], float(r[3]), int(r[4]), float(r[5]), float(r[6]), int(r[7]))
            for r in rows
        ])
        emit_plots(report, run.out, stem=stem)
    elif tuple(header) == POC_HEADER:
        cols = list(zip(*rows)) if rows else [[]] * len(POC_HEADER)
        curves = PoCCurves(
            steps=[int(v) for v in cols[0]], eps=float(cols[1][0]) if rows else 0.0,
            adversarial_acc=[float(v) for v in cols[2]], mi_natural=[float(v) for v in cols[3]],
            mi_adversarial=[float(v) for v in cols[4]], mi_cross=[float(v) for v in cols[5]],
        )
        run.write_text(f"{stem}.svg", poc_svg(curves))
    elif tuple(header) == SEPARATION_HEADER:
        parsed = [SeparationRow(r[0], r[1], r[2], float(r[3]), float(r[4]), float(r[5])) for r in rows]
        run.write_text(f"{stem}.svg", separation_svg(parsed))
    elif len(header) >= 2:
        # generic: first column as groups, every numeric column as a series
        values = {}
        series = header[1:]
        for r in rows:
            for name, cell in zip(series, r[1:]):
                try:
                    values[(r[0], name)] = float(cell)
                except ValueError:
                    continue
        run.write_text(f"{stem}.svg", grouped_bars_svg([r[0] for r in rows], series, values, stem))
    else:
        raise InputError(f"{args.input}: cannot plot a single-column CSV")
    return 0


COMMANDS = {
    "verify-theorem1": (cmd_verify_theorem1, "check the four-term MI decomposition on random joints"),
    "mi-gauss-bench": (cmd_gauss_bench, "estimate MI of correlated Gaussians against the closed form"),
    "gen-data": (cmd_gen_data, "write the train/test splits as containers"),
    "train-at": (cmd_train_at, "standard adversarial training"),
    "train-estimators": (cmd_train_estimators, "fit natural/adversarial MI estimators on a frozen model"),
    "train-namid": (cmd_train_namid, "adversarial training with the MI loss"),
    "attack": (cmd_attack, "craft FGSM/PGD examples on the test split"),
    "eval": (cmd_eval, "white-box accuracy under FGSM and PGD"),
    "eval-blackbox": (cmd_eval_blackbox, "transfer accuracy from a surrogate model"),
    "poc-fig2": (cmd_poc, "standard-MI curves of a natural model under growing PGD"),
    "separation-fig4": (cmd_separation, "natural/adversarial MI gaps of pair-trained vs selection-trained estimators"),
    "ablate": (cmd_ablate, "train standard AT and every MI-loss ablation, then evaluate"),
    "plot": (cmd_plot, "render a CSV produced by another subcommand as SVG"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="namid", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (func, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int, help="root seed (overrides the config)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override; repeatable")
        p.add_argument("-v", "--verbose", action="store_true")
        p.set_defaults(func=func)
        if name == "verify-theorem1":
            p.add_argument("--trials", type=int, default=1000)
            p.add_argument("--max-alphabet", type=int, default=4)
            p.add_argument("--tol", type=float, default=1e-12)
        elif name == "mi-gauss-bench":
            p.add_argument("--rho", "--rhos", dest="rhos", default="0,0.5,0.9", help="comma-separated list")
            p.add_argument("--n", "--samples", dest="samples", type=int, default=20000)
            p.add_argument("--steps", type=int, default=3000)
        elif name in ("train-at", "train-namid"):
            p.add_argument("--resume", help="checkpoint to continue from")
            p.add_argument("--stop-after", type=int, help="stop once this many epochs are done")
        elif name == "train-estimators":
            p.add_argument("--model", required=True)
            p.add_argument("--mode", choices=("eq4", "eq5"))
            p.add_argument("--data", help="training split container (default: generated from the config)")
        elif name == "attack":
            p.add_argument("--model", required=True)
            p.add_argument("--attack", choices=("fgsm", "pgd"), default="pgd")
            p.add_argument("--data", help="split container to attack (default: generated test split)")
            p.add_argument("--norm", choices=("linf", "l2"))
            p.add_argument("--steps", type=int)
            p.add_argument("--eps", type=float)
            p.add_argument("--random-start", action="store_true")
        elif name in ("eval", "eval-blackbox"):
            p.add_argument("--model", required=True)
            p.add_argument("--name", default="model", help="defense label in the report")
            p.add_argument("--data", help="test split container (default: generated from the config)")
            p.add_argument("--runtime", action="store_true", help="add a wall-clock column")
            if name == "eval-blackbox":
                p.add_argument("--surrogate", help="surrogate checkpoint; trained from the config if absent")
        elif name == "plot":
            p.add_argument("--input", required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = Run(args, argv)
        status = args.func(run, args)
        run.finish()
        return status
    except (NamidError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
