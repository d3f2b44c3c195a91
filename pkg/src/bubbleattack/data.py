"""Synthetic bubbles and swatches, the BBLD dataset file, and batching.

Pixels are intensities in [0, 1] (1 = white paper) stored at rest as
8-bit codes k/255. Darkness of a pixel is ``1 - intensity``.
"""
from __future__ import annotations

import csv
import enum
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .models import IMAGE_SHAPE, MARK, NONMARK

HEIGHT, WIDTH = IMAGE_SHAPE
N_PIXELS = HEIGHT * WIDTH


class Label(enum.IntEnum):
    Mark = MARK
    NonMark = NONMARK


class Provenance(enum.IntEnum):
    Bubble = 0
    Swatch = 1
    PostChannel = 2


class DatasetFormatError(ValueError):
    pass


class DatasetError(ValueError):
    pass


def quantize(pixels) -> np.ndarray:
    return np.clip(np.rint(np.asarray(pixels, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


@dataclass
class BubbleImage:
    pixels: np.ndarray  # (40, 50) float64
    label: Label
    provenance: Provenance

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.shape != IMAGE_SHAPE:
            raise DatasetError(f"image must be {HEIGHT}x{WIDTH}, got {self.pixels.shape}")
        self.label = Label(self.label)
        self.provenance = Provenance(self.provenance)

    @property
    def darkness(self) -> float:
        return float(np.sum(1.0 - self.pixels))


# ---------------------------------------------------------------- generators

@dataclass(frozen=True)
class BubbleStyle:
    paper_low: float = 0.85
    paper_high: float = 1.0
    outline_dark: tuple[float, float] = (0.55, 0.85)
    fill_dark: tuple[float, float] = (0.6, 0.9)
    fill_coverage: tuple[float, float] = (0.75, 1.0)
    grain: float = 0.02


def gen_bubble(filled: bool, seed: int, style: BubbleStyle = BubbleStyle()) -> BubbleImage:
    """Render an oval answer bubble on paper texture."""
    rng = np.random.default_rng(seed)
    paper = rng.uniform(style.paper_low, style.paper_high)
    img = paper + rng.normal(0.0, style.grain, IMAGE_SHAPE)
    yy, xx = np.mgrid[0:HEIGHT, 0:WIDTH] + 0.5
    cy = HEIGHT / 2 + rng.uniform(-2, 2)
    cx = WIDTH / 2 + rng.uniform(-2, 2)
    ry, rx = rng.uniform(13, 16), rng.uniform(18, 21)
    r = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
    stroke = rng.uniform(0.06, 0.12)
    outline = np.clip(1.0 - np.abs(r - 1.0) / stroke, 0.0, 1.0)
    img = img * (1.0 - rng.uniform(*style.outline_dark) * outline)
    if filled:
        # hand-filled mark: dark interior, ragged edge
        reach = rng.uniform(*style.fill_coverage)
        edge = reach + 0.08 * rng.standard_normal(IMAGE_SHAPE)
        fill = np.clip((edge - r) / 0.1, 0.0, 1.0)
        img = img * (1.0 - rng.uniform(*style.fill_dark) * fill)
    px = quantize(img) / 255.0
    return BubbleImage(px, Label.Mark if filled else Label.NonMark, Provenance.Bubble)


@dataclass(frozen=True)
class SwatchSpec:
    ink_mass: float
    seed: int
    threshold: float = 500.0


def gen_swatch(spec: SwatchSpec) -> BubbleImage:
    """Scatter ``ink_mass`` units of darkness over random pixels.

    Ink comes in 1/255 quanta: full black specks at random distinct pixels
    plus one partial pixel for the remainder, so the darkness total is exact
    after quantization.
    """
    if not 0.0 <= spec.ink_mass <= N_PIXELS:
        raise DatasetError(f"ink_mass must be in [0, {N_PIXELS}], got {spec.ink_mass}")
    rng = np.random.default_rng(spec.seed)
    quanta = int(round(spec.ink_mass * 255))
    full, rest = divmod(quanta, 255)
    codes = np.full(N_PIXELS, 255, dtype=np.int64)
    order = rng.permutation(N_PIXELS)
    codes[order[:full]] = 0
    if rest:
        codes[order[full]] = 255 - rest
    px = codes.reshape(IMAGE_SHAPE) / 255.0
    label = Label.Mark if spec.ink_mass >= spec.threshold else Label.NonMark
    return BubbleImage(px, label, Provenance.Swatch)


def random_swatch_masses(n: int, seed: int, threshold: float = 500.0, dead_band: float = 50.0,
                         high: float = 1000.0) -> np.ndarray:
    """Uniform masses on [0, high] with ``threshold +- dead_band`` excluded."""
    rng = np.random.default_rng(seed)
    lo, hi = threshold - dead_band, threshold + dead_band
    out = np.empty(0)
    while out.size < n:
        draw = rng.uniform(0.0, high, size=2 * n)
        out = np.concatenate([out, draw[(draw < lo) | (draw >= hi)]])
    return out[:n]


# ---------------------------------------------------------------- dataset

class Dataset:
    """Parallel arrays of 8-bit pixels, labels and provenance."""

    def __init__(self, codes, labels, provenance, tag: str = ""):
        self.codes = np.ascontiguousarray(codes, dtype=np.uint8).reshape((-1,) + IMAGE_SHAPE)
        self.labels = np.asarray(labels, dtype=np.uint8).reshape(-1)
        self.provenance = np.asarray(provenance, dtype=np.uint8).reshape(-1)
        self.tag = tag
        if not (len(self.codes) == len(self.labels) == len(self.provenance)):
            raise DatasetError("codes, labels and provenance lengths differ")

    @classmethod
    def from_images(cls, images, tag: str = "") -> "Dataset":
        images = list(images)
        if not images:
            return cls(np.zeros((0,) + IMAGE_SHAPE, np.uint8), [], [], tag)
        return cls(np.stack([quantize(im.pixels) for im in images]),
                   [int(im.label) for im in images], [int(im.provenance) for im in images], tag)

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> BubbleImage:
        return BubbleImage(self.codes[i] / 255.0, self.labels[i], self.provenance[i])

    @property
    def pixels(self) -> np.ndarray:
        return self.codes / 255.0

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.codes[idx], self.labels[idx], self.provenance[idx], self.tag)

    def concat(self, other: "Dataset") -> "Dataset":
        return Dataset(np.concatenate([self.codes, other.codes]),
                       np.concatenate([self.labels, other.labels]),
                       np.concatenate([self.provenance, other.provenance]), self.tag)

    def class_counts(self) -> dict[str, int]:
        return {lab.name: int(np.sum(self.labels == lab)) for lab in Label}


def make_bubbles(n: int, seed: int, mark_fraction: float = 0.5) -> Dataset:
    seq = np.random.SeedSequence(seed)
    seeds = seq.generate_state(n, dtype=np.uint64)
    n_mark = int(round(n * mark_fraction))
    return Dataset.from_images(gen_bubble(i < n_mark, int(s)) for i, s in enumerate(seeds))


def make_swatches(n: int, seed: int, threshold: float = 500.0, dead_band: float = 50.0) -> Dataset:
    masses = random_swatch_masses(n, seed, threshold, dead_band)
    seeds = np.random.SeedSequence([seed, 1]).generate_state(n, dtype=np.uint64)
    return Dataset.from_images(gen_swatch(SwatchSpec(m, int(s), threshold)) for m, s in zip(masses, seeds))


MAGIC = b"BBLD"
_HEADER = struct.Struct("<4sIHH")
_RECORD = 2 + N_PIXELS


def save_dataset(ds: Dataset, path):
    # header stores the 40 then 50 extents in field order
    head = _HEADER.pack(MAGIC, len(ds), HEIGHT, WIDTH)
    rec = np.empty((len(ds), _RECORD), dtype=np.uint8)
    rec[:, 0] = ds.labels
    rec[:, 1] = ds.provenance
    rec[:, 2:] = ds.codes.reshape(len(ds), -1)
    Path(path).write_bytes(head + rec.tobytes())


def load_dataset(path, tag: str | None = None) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetFormatError(f"truncated header: file has {len(raw)} bytes, header needs {_HEADER.size} (offset 0)")
    magic, count, h, w = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r} at offset 0")
    if (h, w) != (HEIGHT, WIDTH):
        raise DatasetFormatError(f"unsupported image extents {h}x{w} at offset 8")
    body = len(raw) - _HEADER.size
    if body < count * _RECORD:
        have = body // _RECORD
        raise DatasetFormatError(
            f"truncated: header count {count} but only {have} complete records; "
            f"record {have} starts at offset {_HEADER.size + have * _RECORD}")
    if body > count * _RECORD:
        raise DatasetFormatError(
            f"count mismatch: {body - count * _RECORD} extra bytes at offset {_HEADER.size + count * _RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8, offset=_HEADER.size).reshape(count, _RECORD)
    labels, prov = rec[:, 0], rec[:, 1]
    for name, col, limit in (("label", labels, 2), ("provenance", prov, 3)):
        bad = np.flatnonzero(col >= limit)
        if bad.size:
            i = int(bad[0])
            off = _HEADER.size + i * _RECORD + (0 if name == "label" else 1)
            raise DatasetFormatError(f"invalid {name} byte {col[i]} at offset {off}")
    return Dataset(rec[:, 2:].copy(), labels.copy(), prov.copy(), tag if tag is not None else Path(path).stem)


# ---------------------------------------------------------------- batching and splits

def balanced_batches(ds: Dataset, batch_size: int, seed: int) -> Iterator[np.ndarray]:
    """One epoch of class-balanced index batches.

    The majority class is visited once in shuffled order; the minority class
    is drawn with replacement to the same count.
    """
    if batch_size < 2:
        raise DatasetError("batch_size must be at least 2")
    marks = np.flatnonzero(ds.labels == Label.Mark)
    nonmarks = np.flatnonzero(ds.labels == Label.NonMark)
    if marks.size == 0 or nonmarks.size == 0:
        raise DatasetError("balanced batching needs both Mark and NonMark samples")
    rng = np.random.default_rng(seed)
    major, minor = (marks, nonmarks) if marks.size >= nonmarks.size else (nonmarks, marks)
    a = rng.permutation(major)
    b = minor[rng.integers(0, minor.size, size=major.size)] if minor.size < major.size else rng.permutation(minor)
    per, extra = divmod(batch_size, 2)
    i = j = 0
    k = 0
    while i < a.size or j < b.size:
        na = per + (extra if k % 2 == 0 else 0)
        nb = per + (extra if k % 2 == 1 else 0)
        batch = np.concatenate([a[i:i + na], b[j:j + nb]])
        i, j, k = i + na, j + nb, k + 1
        yield rng.permutation(batch)


def train_val_split(ds: Dataset, fraction: float = 0.8, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified split; per-class train counts use largest-remainder rounding."""
    if not 0.0 < fraction < 1.0:
        raise DatasetError(f"fraction must be in (0, 1), got {fraction}")
    if len(ds) == 0:
        raise DatasetError("cannot split an empty dataset")
    rng = np.random.default_rng(seed)
    groups = [np.flatnonzero(ds.labels == lab) for lab in Label]
    exact = np.array([g.size * fraction for g in groups])
    take = np.floor(exact).astype(int)
    short = int(round(len(ds) * fraction)) - take.sum()
    for c in np.argsort(-(exact - take), kind="stable")[:max(short, 0)]:
        take[c] += 1
    train, val = [], []
    for g, t in zip(groups, take):
        p = rng.permutation(g)
        train.append(p[:t])
        val.append(p[t:])
    tr, va = np.sort(np.concatenate(train)), np.sort(np.concatenate(val))
    return ds.subset(tr), ds.subset(va)


# ---------------------------------------------------------------- interop export

def write_pgm(path, codes: np.ndarray, comment: str | None = None):
    codes = np.asarray(codes, dtype=np.uint8)
    h, w = codes.shape
    note = "".join(f"# {line}\n" for line in comment.splitlines()) if comment else ""
    Path(path).write_bytes(f"P5\n{note}{w} {h}\n255\n".encode() + codes.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.find(b"\n", pos) + 1 or len(raw)
            continue
        end = pos
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        if end == pos:
            raise DatasetFormatError(f"{path}: truncated graymap header at byte {pos}")
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise DatasetFormatError(f"{path}: not a binary graymap")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise DatasetFormatError(f"{path}: only 8-bit graymaps are supported")
    data = raw[pos + 1:pos + 1 + w * h]
    if len(data) != w * h:
        raise DatasetFormatError(f"{path}: expected {w * h} pixel bytes at offset {pos + 1}, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


def export_directory(ds: Dataset, out_dir, comment: str | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "labels.csv", "w", newline="") as fh:
        if comment:
            fh.write("".join(f"# {line}\n" for line in comment.splitlines()))
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["file", "label", "provenance"])
        for i in range(len(ds)):
            name = f"{i:06d}.pgm"
            write_pgm(out / name, ds.codes[i], comment)
            wr.writerow([name, Label(ds.labels[i]).name, Provenance(ds.provenance[i]).name])
    return out
