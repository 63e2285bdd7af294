"""Shared argument handling for the experiment scripts."""

import argparse
import os

from namid.config import load_config
from namid.data import train_test_splits

HERE = os.path.dirname(os.path.abspath(__file__))
TOY = os.path.join(HERE, os.pardir, "configs", "toy.cfg")


def parser(description: str, out: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--config", default=TOY)
    p.add_argument("--seeds", default="0,1,2", help="comma-separated root seeds")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out", default=os.path.join("results", out))
    return p


def setup(args):
    """Base config, seed list and output directory from parsed arguments."""
    overrides = dict(kv.split("=", 1) for kv in args.set)
    cfg = load_config(args.config, overrides)
    os.makedirs(args.out, exist_ok=True)
    return cfg, [int(s) for s in args.seeds.split(",")], args.out


def splits(cfg):
    return train_test_splits(cfg.data_kind, cfg.n_train, cfg.n_test, cfg.dim, cfg.seed)


def write(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    print(path)
