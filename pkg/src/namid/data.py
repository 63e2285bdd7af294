"""Synthetic datasets, the attack ``Batch`` record and the NMID1 container.

Container layout (all integers little-endian)::

    b"NMID1"                      magic
    u32   entry count
    per entry:
        u16   name length, then UTF-8 name
        u8    dtype code (1 = f64)
        u8    ndim, then ndim x u64 shape
        u64   payload offset (from start of payload region)
        u64   payload byte length
    payload region: f64 little-endian, entries packed in table order
"""

from __future__ import annotations

import csv
import io
import os
import struct
from dataclasses import dataclass

import numpy as np

from namid.config import DATA_KINDS, RunManifest, SeedTree
from namid.errors import ConfigError, FormatError, InputError

MAGIC = b"NMID1"
DTYPE_F64 = 1
MANIFEST_ENTRY = "__manifest"


@dataclass
class DatasetSplit:
    inputs: np.ndarray
    labels: np.ndarray
    name: str = ""
    seed: int = 0

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or len(self.inputs) < 1:
            raise InputError(f"inputs must be a nonempty [n, d] array, got {self.inputs.shape}")
        if self.labels.shape != (len(self.inputs),):
            raise InputError(f"labels shape {self.labels.shape} does not match {len(self.inputs)} inputs")
        if self.inputs.min() < 0 or self.inputs.max() > 1:
            raise InputError("inputs must lie in [0, 1]")
        if self.labels.min() < 0:
            raise InputError("labels must be non-negative")

    @property
    def n(self) -> int:
        return len(self.inputs)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    def subset(self, index) -> "DatasetSplit":
        return DatasetSplit(self.inputs[index], self.labels[index], self.name, self.seed)


@dataclass
class Batch:
    """Natural inputs, their adversarial counterparts and labels.

    ``noise`` is authoritative; ``adversarial`` is always ``natural + noise``.
    """

    natural: np.ndarray
    noise: np.ndarray
    labels: np.ndarray

    @property
    def adversarial(self) -> np.ndarray:
        return self.natural + self.noise

    def __len__(self) -> int:
        return len(self.natural)

    def subset(self, index) -> "Batch":
        return Batch(self.natural[index], self.noise[index], self.labels[index])


# synthetic generators -----------------------------------------------------


def _balanced_labels(n: int, classes: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % classes)


def _two_gaussians(n: int, d: int, rng: np.random.Generator, separation: float) -> tuple[np.ndarray, np.ndarray]:
    labels = _balanced_labels(n, 2, rng)
    direction = np.ones(d) / np.sqrt(d)
    centers = np.where(labels[:, None] == 1, 0.5, -0.5) * separation * direction
    z = centers + rng.standard_normal((n, d))
    # unit-variance noise mapped so +-7 sigma (beyond the class means) spans [0, 1]
    half_span = separation / 2 + 7.0
    return np.clip(0.5 + z / (2 * half_span), 0.0, 1.0), labels


def _rings(n: int, d: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    labels = _balanced_labels(n, 2, rng)
    radius = np.where(labels == 1, 0.32, 0.16) + 0.025 * rng.standard_normal(n)
    angle = rng.uniform(0.0, 2 * np.pi, n)
    x = np.empty((n, d))
    x[:, 0] = 0.5 + radius * np.cos(angle)
    x[:, 1] = 0.5 + radius * np.sin(angle)
    if d > 2:
        x[:, 2:] = 0.5 + 0.05 * rng.standard_normal((n, d - 2))
    return np.clip(x, 0.0, 1.0), labels


# 8x8 glyphs, one string per row
_GLYPHS = [
    ["..####..", ".#....#.", ".#....#.", ".#....#.", ".#....#.", ".#....#.", ".#....#.", "..####.."],
    ["...##...", "..###...", "...##...", "...##...", "...##...", "...##...", "...##...", "..####.."],
    ["..####..", ".#....#.", "......#.", ".....#..", "....#...", "...#....", "..#.....", ".######."],
    ["..####..", ".#....#.", "......#.", "...###..", "......#.", "......#.", ".#....#.", "..####.."],
    ["....##..", "...#.#..", "..#..#..", ".#...#..", ".######.", ".....#..", ".....#..", ".....#.."],
    [".######.", ".#......", ".#......", ".#####..", "......#.", "......#.", ".#....#.", "..####.."],
    ["..####..", ".#......", ".#......", ".#####..", ".#....#.", ".#....#.", ".#....#.", "..####.."],
    [".######.", "......#.", ".....#..", "....#...", "...#....", "...#....", "...#....", "...#...."],
    ["..####..", ".#....#.", ".#....#.", "..####..", ".#....#.", ".#....#.", ".#....#.", "..####.."],
    ["..####..", ".#....#.", ".#....#.", "..#####.", "......#.", "......#.", ".....#..", "..###..."],
]
GLYPHS = np.array([[[c == "#" for c in row] for row in g] for g in _GLYPHS], dtype=np.float64)


def _grid_digits(n: int, d: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    if d != 64:
        raise ConfigError(f"grid_digits renders 8x8 glyphs; dim must be 64, got {d}")
    labels = _balanced_labels(n, 10, rng)
    shifts = rng.integers(-1, 2, size=(n, 2))
    gains = rng.uniform(0.6, 1.0, size=n)
    images = np.empty((n, 8, 8))
    for i in range(n):
        img = np.roll(GLYPHS[labels[i]], shift=tuple(shifts[i]), axis=(0, 1))
        images[i] = img * gains[i]
    images += 0.08 * rng.standard_normal(images.shape)
    return np.clip(images.reshape(n, 64), 0.0, 1.0), labels


def generate_synthetic(kind: str, n: int, d: int, seed: int, separation: float = 6.0) -> DatasetSplit:
    """Deterministic toy split with inputs in [0, 1] and balanced classes."""
    if kind not in DATA_KINDS:
        raise ConfigError(f"unknown dataset kind {kind!r}; expected one of {DATA_KINDS}")
    classes = 10 if kind == "grid_digits" else 2
    if n < 2 * classes:
        raise InputError(f"{kind} needs n >= {2 * classes} (2 per class), got {n}")
    if d < 2:
        raise InputError(f"d must be >= 2, got {d}")
    rng = SeedTree(seed).rng(f"data/{kind}")
    if kind == "two_gaussians":
        x, y = _two_gaussians(n, d, rng, separation)
    elif kind == "rings":
        x, y = _rings(n, d, rng)
    else:
        x, y = _grid_digits(n, d, rng)
    return DatasetSplit(x, y, name=kind, seed=seed)


def train_test_splits(kind: str, n_train: int, n_test: int, d: int, seed: int) -> tuple[DatasetSplit, DatasetSplit]:
    tree = SeedTree(seed)
    train = generate_synthetic(kind, n_train, d, tree.derive("split/train") % 2**63)
    test = generate_synthetic(kind, n_test, d, tree.derive("split/test") % 2**63)
    return train, test


# container ----------------------------------------------------------------


def _encode_entry(name: str, arr: np.ndarray) -> tuple[bytes, bytes]:
    payload = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    raw = name.encode("utf-8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<BB", DTYPE_F64, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head, payload


def dump_container(entries: dict[str, np.ndarray] | list[tuple[str, np.ndarray]]) -> bytes:
    items = list(entries.items()) if isinstance(entries, dict) else list(entries)
    names = [k for k, _ in items]
    if len(set(names)) != len(names):
        dup = next(k for k in names if names.count(k) > 1)
        raise FormatError(f"duplicate entry name {dup!r}")
    table = io.BytesIO()
    table.write(MAGIC)
    table.write(struct.pack("<I", len(items)))
    payloads = []
    offset = 0
    for name, arr in items:
        arr = np.asarray(arr, dtype=np.float64)
        head, payload = _encode_entry(name, arr)
        table.write(head + struct.pack("<QQ", offset, len(payload)))
        payloads.append(payload)
        offset += len(payload)
    return table.getvalue() + b"".join(payloads)


def parse_container(blob: bytes) -> dict[str, np.ndarray]:
    if blob[: len(MAGIC)] != MAGIC:
        raise FormatError("bad magic: not an NMID1 container")
    pos = len(MAGIC)

    def read(fmt: str, what: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise FormatError(f"truncated header while reading {what}")
        vals = struct.unpack_from(fmt, blob, pos)
        pos += size
        return vals

    (count,) = read("<I", "entry count")
    table = []
    for i in range(count):
        (nlen,) = read("<H", f"entry {i} name length")
        if pos + nlen > len(blob):
            raise FormatError(f"truncated header while reading entry {i} name")
        name = blob[pos : pos + nlen].decode("utf-8")
        pos += nlen
        dtype, ndim = read("<BB", f"entry {name!r} dtype")
        if dtype != DTYPE_F64:
            raise FormatError(f"entry {name!r}: unsupported dtype code {dtype}")
        shape = read(f"<{ndim}Q", f"entry {name!r} shape")
        offset, nbytes = read("<QQ", f"entry {name!r} offsets")
        table.append((name, shape, offset, nbytes))

    base = pos
    out: dict[str, np.ndarray] = {}
    spans = []
    for name, shape, offset, nbytes in table:
        if name in out:
            raise FormatError(f"duplicate entry name {name!r}")
        expected = 8 * int(np.prod(shape, dtype=np.int64))
        if nbytes != expected:
            raise FormatError(f"entry {name!r}: declared {nbytes} bytes but shape {shape} needs {expected}")
        start = base + offset
        if start + nbytes > len(blob):
            raise FormatError(f"entry {name!r}: truncated payload")
        spans.append((offset, offset + nbytes, name))
        out[name] = np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=start).astype(np.float64).reshape(shape)
    spans.sort()
    for (_, end_a, name_a), (start_b, _, name_b) in zip(spans, spans[1:]):
        if start_b < end_a:
            raise FormatError(f"entries {name_a!r} and {name_b!r} overlap")
    return out


def save_container(path: str | os.PathLike, entries, manifest: RunManifest | None = None) -> None:
    items = list(entries.items()) if isinstance(entries, dict) else list(entries)
    if manifest is not None:
        items.append((MANIFEST_ENTRY, encode_text(manifest.to_json())))
    with open(path, "wb") as fh:
        fh.write(dump_container(items))


def load_container(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return parse_container(fh.read())


def encode_text(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def decode_text(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr, dtype=np.uint8).tolist()).decode("utf-8")


def read_manifest(entries: dict[str, np.ndarray]) -> RunManifest | None:
    if MANIFEST_ENTRY not in entries:
        return None
    return RunManifest.from_json(decode_text(entries[MANIFEST_ENTRY]))


def split_entries(split: DatasetSplit) -> dict[str, np.ndarray]:
    return {"inputs": split.inputs, "labels": split.labels.astype(np.float64)}


def split_from_entries(entries: dict[str, np.ndarray], name: str = "") -> DatasetSplit:
    for key in ("inputs", "labels"):
        if key not in entries:
            raise FormatError(f"dataset container missing entry {key!r}")
    labels = entries["labels"]
    if np.any(labels != np.round(labels)):
        raise FormatError("entry 'labels' holds non-integral values")
    return DatasetSplit(entries["inputs"], labels.astype(np.int64), name=name)


def batch_entries(batch: Batch) -> dict[str, np.ndarray]:
    return {
        "natural": batch.natural,
        "adversarial": batch.adversarial,
        "noise": batch.noise,
        "labels": batch.labels.astype(np.float64),
    }


def batch_from_entries(entries: dict[str, np.ndarray]) -> Batch:
    for key in ("natural", "noise", "labels"):
        if key not in entries:
            raise FormatError(f"batch container missing entry {key!r}")
    return Batch(entries["natural"], entries["noise"], entries["labels"].astype(np.int64))


# CSV ----------------------------------------------------------------------


def _csv_cell(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return str(value)


def write_csv(stream_or_path, header: list[str], rows: list[list]) -> None:
    """RFC-4180 CSV with CRLF line endings and a header row."""
    if isinstance(stream_or_path, (str, os.PathLike)):
        with open(stream_or_path, "w", newline="", encoding="utf-8") as fh:
            write_csv(fh, header, rows)
        return
    writer = csv.writer(stream_or_path, lineterminator="\r\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_csv_cell(v) for v in row])


def csv_text(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO(newline="")
    write_csv(buf, header, rows)
    return buf.getvalue()
