"""Run configuration, seed derivation and run manifests.

Configs are flat ``key=value`` text with ``#`` comments. Every field of
:class:`TrainRunConfig` has a default, so an empty file is a valid config.

Randomness comes from a single generator family: numpy's Philox
(counter-based, 64-bit keyed). Child seeds are derived from the root seed
with keyed BLAKE2b over a ``/``-separated purpose path, so a port in any
language can reproduce every stream from ``(root, path)``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from namid import __version__
from namid.errors import ConfigError

NORMS = ("linf", "l2")
DATA_KINDS = ("two_gaussians", "rings", "grid_digits")
EST_MODES = ("eq4", "eq5")
EST_BOUNDS = ("dv", "jsd")
DEFAULT_EPS = {"linf": 8 / 255, "l2": 0.5}

# config keys that are not valid python identifiers
_KEY_TO_FIELD = {"lambda": "lam"}
_FIELD_TO_KEY = {v: k for k, v in _KEY_TO_FIELD.items()}


@dataclass
class TrainRunConfig:
    # run / data
    seed: int = 0
    data_kind: str = "grid_digits"
    n_train: int = 2000
    n_test: int = 1000
    dim: int = 64
    hidden: tuple[int, ...] = (64, 64)
    # target-model optimisation
    epochs: int = 20
    batch_size: int = 128
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 2e-4
    grad_clip: float = 0.0  # global L2 gradient-norm cap, 0 disables
    # defense objective
    alpha: float = 5.0
    lam: float = 0.1
    drop_natural_mi: bool = False
    drop_adversarial_mi: bool = False
    zero_lambda: bool = False
    estimator_natural: str = ""
    estimator_adversarial: str = ""
    # attacks
    norm: str = "linf"
    eps: float | None = None
    train_steps: int = 10
    step_size: float | None = None
    random_start: bool = True
    eval_steps: int = 40
    # evaluation harnesses
    surrogate_hidden: tuple[int, ...] = (96, 96)
    poc_eps: float = 0.3
    poc_steps: tuple[int, ...] = (1, 2, 5, 10, 20, 40)
    # MI estimators
    est_patches: int = 4
    est_feat: int = 16
    est_hidden: int = 32
    est_epochs: int = 30
    est_batch: int = 128
    est_lr: float = 1e-3
    est_score_clip: float = 5.0
    est_mode: str = "eq5"
    est_bound: str = "dv"
    ema_decay: float = 0.99

    def __post_init__(self):
        if self.eps is None:
            self.eps = DEFAULT_EPS.get(self.norm, DEFAULT_EPS["linf"])
        self.validate()

    @property
    def attack_step(self) -> float:
        return self.step_size if self.step_size is not None else self.eps / 4

    @property
    def effective_lambda(self) -> float:
        return 0.0 if self.zero_lambda else self.lam

    def validate(self) -> None:
        checks = [
            ("alpha", self.alpha >= 0, "must be >= 0"),
            ("lambda", self.lam >= 0, "must be >= 0"),
            ("eps", self.eps >= 0, "must be >= 0"),
            ("lr", self.lr > 0, "must be > 0"),
            ("est_lr", self.est_lr > 0, "must be > 0"),
            ("momentum", 0 <= self.momentum < 1, "must be in [0, 1)"),
            ("weight_decay", self.weight_decay >= 0, "must be >= 0"),
            ("grad_clip", self.grad_clip >= 0, "must be >= 0"),
            ("est_score_clip", self.est_score_clip >= 0, "must be >= 0"),
            ("ema_decay", 0 <= self.ema_decay < 1, "must be in [0, 1)"),
            ("epochs", self.epochs >= 0, "must be >= 0"),
            ("est_epochs", self.est_epochs >= 0, "must be >= 0"),
            ("batch_size", self.batch_size >= 2, "must be >= 2"),
            ("est_batch", self.est_batch >= 2, "must be >= 2"),
            ("n_train", self.n_train >= 2, "must be >= 2"),
            ("n_test", self.n_test >= 2, "must be >= 2"),
            ("dim", self.dim >= 2, "must be >= 2"),
            ("train_steps", self.train_steps >= 1, "must be >= 1"),
            ("eval_steps", self.eval_steps >= 1, "must be >= 1"),
            ("est_patches", self.est_patches >= 1, "must be >= 1"),
            ("est_feat", self.est_feat >= 1, "must be >= 1"),
            ("est_hidden", self.est_hidden >= 1, "must be >= 1"),
            ("hidden", all(h >= 1 for h in self.hidden), "widths must be >= 1"),
            ("surrogate_hidden", all(h >= 1 for h in self.surrogate_hidden), "widths must be >= 1"),
            ("poc_eps", self.poc_eps >= 0, "must be >= 0"),
            ("poc_steps", len(self.poc_steps) > 0 and all(k >= 0 for k in self.poc_steps),
             "must be a nonempty list of iteration counts >= 0"),
            ("step_size", self.step_size is None or self.step_size > 0 or (self.step_size == 0 and self.eps == 0),
             "must be > 0"),
            ("norm", self.norm in NORMS, f"must be one of {NORMS}"),
            ("data_kind", self.data_kind in DATA_KINDS, f"must be one of {DATA_KINDS}"),
            ("est_mode", self.est_mode in EST_MODES, f"must be one of {EST_MODES}"),
            ("est_bound", self.est_bound in EST_BOUNDS, f"must be one of {EST_BOUNDS}"),
            ("seed", 0 <= self.seed < 2**64, "must fit in 64 bits"),
        ]
        for key, ok, msg in checks:
            if not ok:
                raise ConfigError(f"{key}: {msg} (got {getattr(self, _KEY_TO_FIELD.get(key, key))!r})")

    def replace(self, **changes: Any) -> "TrainRunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return serialize_config(self)

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def portable(self) -> "TrainRunConfig":
        """Copy with input file paths reduced to base names (their content is hashed elsewhere)."""
        return dataclasses.replace(
            self,
            estimator_natural=os.path.basename(self.estimator_natural),
            estimator_adversarial=os.path.basename(self.estimator_adversarial),
        )


def _field_types() -> dict[str, str]:
    return {f.name: str(f.type) for f in dataclasses.fields(TrainRunConfig)}


def _parse_value(key: str, ftype: str, raw: str, lineno: int) -> Any:
    where = f"line {lineno}, key {key!r}" if lineno else f"override {key!r}"
    try:
        if ftype == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if ftype == "int":
            return int(raw, 0)
        if ftype == "float":
            return float(raw)
        if ftype == "float | None":
            return None if raw == "" else float(raw)
        if ftype == "str":
            return raw
        if ftype == "tuple[int, ...]":
            return tuple(int(p) for p in raw.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {ftype}") from None
    raise ConfigError(f"{where}: unsupported type {ftype}")


def parse_config(text: str, overrides: dict[str, str] | None = None) -> TrainRunConfig:
    """Parse and validate a flat ``key=value`` config.

    ``overrides`` are applied after the file, with the same parsing rules.
    Unknown keys, bad values and range violations raise :class:`ConfigError`
    naming the key (and the line, for file input).
    """
    types = _field_types()
    values: dict[str, Any] = {}
    seen_line: dict[str, int] = {}
    items = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        items.append((key, raw, lineno))
    for key, raw in (overrides or {}).items():
        items.append((key, str(raw), 0))

    for key, raw, lineno in items:
        name = _KEY_TO_FIELD.get(key, key)
        if name not in types or key in _FIELD_TO_KEY:
            where = f"line {lineno}" if lineno else "override"
            raise ConfigError(f"{where}: unknown key {key!r}")
        values[name] = _parse_value(key, types[name], raw, lineno)
        seen_line[name] = lineno

    try:
        return TrainRunConfig(**values)
    except ConfigError as exc:
        key = str(exc).split(":", 1)[0]
        lineno = seen_line.get(_KEY_TO_FIELD.get(key, key))
        if lineno:
            raise ConfigError(f"line {lineno}, {exc}") from None
        raise


def load_config(path: str | os.PathLike | None, overrides: dict[str, str] | None = None) -> TrainRunConfig:
    text = ""
    if path:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    return parse_config(text, overrides)


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if value is None:
        return ""
    return str(value)


def serialize_config(cfg: TrainRunConfig) -> str:
    """Canonical text form: every key in declaration order, one per line."""
    lines = []
    for f in dataclasses.fields(cfg):
        key = _FIELD_TO_KEY.get(f.name, f.name)
        lines.append(f"{key}={_format_value(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def root_seed(cfg_seed: int) -> int:
    """Root seed, honouring the ``NAMID_SEED`` environment override."""
    env = os.environ.get("NAMID_SEED")
    if env:
        try:
            return int(env, 0) % 2**64
        except ValueError:
            raise ConfigError(f"NAMID_SEED: not an integer: {env!r}") from None
    return cfg_seed


@dataclass(frozen=True)
class SeedTree:
    root: int

    def derive(self, path: str) -> int:
        return derive_seed(self, path)

    def rng(self, path: str) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(self.derive(path)))

    def subtree(self, path: str) -> "SeedTree":
        return SeedTree(self.derive(path))


def derive_seed(tree: SeedTree, path: str) -> int:
    if not path:
        raise ConfigError("seed path must be nonempty")
    key = (tree.root % 2**64).to_bytes(8, "little")
    digest = hashlib.blake2b(path.encode("utf-8"), key=key, digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass
class RunManifest:
    config: str = ""
    inputs: dict[str, str] = field(default_factory=dict)
    seed: int = 0
    streams: list[str] = field(default_factory=list)
    command: str = ""
    tool_version: str = __version__
    # SOURCE_DATE_EPOCH keeps repeated runs byte-identical
    timestamp: int = dataclasses.field(default_factory=lambda: int(os.environ.get("SOURCE_DATE_EPOCH", "0")))

    def body(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(_canonical_json(self.body()).encode()).hexdigest()

    def to_json(self) -> str:
        doc = self.body()
        doc["sha256"] = self.digest()
        return _canonical_json(doc)

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        from namid.errors import VersionError

        doc = json.loads(text)
        stored = doc.pop("sha256", None)
        known = {f.name for f in dataclasses.fields(cls)}
        manifest = cls(**{k: v for k, v in doc.items() if k in known})
        if stored != manifest.digest() or set(doc) != known:
            raise VersionError("manifest hash mismatch; container was modified or written by another version")
        return manifest


def _canonical_json(doc: Any) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def file_sha256(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
