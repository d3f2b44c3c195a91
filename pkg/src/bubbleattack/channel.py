"""Simulated print-scan channel.

A 200 dpi letter page (1700 x 2200) holds a grid of 40 x 50 bubble crops.
Printing upsamples 6x to 1200 dpi, applies dot gain and halftones to one
bit per dot. Scanning box-averages back to 200 dpi, adds sensor noise and a
sub-pixel registration shift, then quantizes to 8 bits.

Rasters carry darkness (1 = ink), pages carry intensity (1 = white).
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from . import kernels
from .data import Provenance, write_pgm
from .models import IMAGE_SHAPE

PAGE_W, PAGE_H = 1700, 2200  # 8.5 x 11 in at 200 dpi
UPSAMPLE = 6                 # 200 -> 1200 dpi
CROP_H, CROP_W = IMAGE_SHAPE
GAP = 100                    # half an inch between neighbouring crops
PITCH = CROP_W + GAP         # same pitch both ways keeps the grid square
GRID_COLS, GRID_ROWS = 11, 14
MARGIN_X = (PAGE_W - (GRID_COLS - 1) * PITCH - CROP_W) // 2
MARGIN_Y = 100
CAPACITY = GRID_COLS * GRID_ROWS
STRIP = 64                   # page rows per print strip

BAYER8 = np.array([
    [0, 32, 8, 40, 2, 34, 10, 42],
    [48, 16, 56, 24, 50, 18, 58, 26],
    [12, 44, 4, 36, 14, 46, 6, 38],
    [60, 28, 52, 20, 62, 30, 54, 22],
    [3, 35, 11, 43, 1, 33, 9, 41],
    [51, 19, 59, 27, 49, 17, 57, 25],
    [15, 47, 7, 39, 13, 45, 5, 37],
    [63, 31, 55, 23, 61, 29, 53, 21],
])
BAYER_THRESH = (BAYER8 + 0.5) / 64.0


class Dither(str, enum.Enum):
    OrderedBayer8 = "bayer8"
    ErrorDiffusion = "error_diffusion"


class CapacityError(ValueError):
    pass


class ChannelDimensionError(ValueError):
    pass


@dataclass
class ChannelConfig:
    dither: Dither | None = Dither.OrderedBayer8
    dot_gain: float = 0.3
    noise_sigma: float = 0.03
    jitter_px: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.dither is not None:
            self.dither = Dither(self.dither)
        for name in ("dot_gain", "noise_sigma", "jitter_px"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @classmethod
    def identity(cls, seed: int = 0) -> "ChannelConfig":
        return cls(dither=None, dot_gain=0.0, noise_sigma=0.0, jitter_px=0.0, seed=seed)

    def to_dict(self):
        d = asdict(self)
        d["dither"] = None if self.dither is None else self.dither.value
        return d


@dataclass
class Placement:
    index: int
    row: int
    col: int
    height: int = CROP_H
    width: int = CROP_W

    @property
    def rect(self):
        return (self.row, self.col, self.row + self.height, self.col + self.width)


@dataclass
class PageCanvas:
    raster: np.ndarray                       # (2200, 1700) intensity in [0, 1]
    manifest: list[Placement] = field(default_factory=list)

    def manifest_json(self, extra: dict | None = None) -> str:
        return json.dumps({**(extra or {}), "width": PAGE_W, "height": PAGE_H,
                           "placements": [asdict(p) for p in self.manifest]}, indent=2)


@dataclass
class PrintRaster:
    """1200 dpi raster; ``levels`` is 1 for halftoned dots, 255 for contone."""
    data: np.ndarray
    levels: int = 1


def grid_slot(i: int) -> tuple[int, int]:
    r, c = divmod(i, GRID_COLS)
    return MARGIN_Y + r * PITCH, MARGIN_X + c * PITCH


def layout_page(bubbles) -> PageCanvas:
    """Place crops row-major on the grid of a white page."""
    px = np.asarray(getattr(bubbles, "pixels", bubbles), dtype=np.float64)
    if px.ndim == 2:
        px = px[None]
    if px.shape[1:] != IMAGE_SHAPE:
        raise ChannelDimensionError(f"crops must be {CROP_H}x{CROP_W}, got {px.shape[1:]}")
    if len(px) > CAPACITY:
        raise CapacityError(f"{len(px)} crops exceed page capacity of {CAPACITY}")
    page = np.ones((PAGE_H, PAGE_W))
    manifest = []
    for i, crop in enumerate(px):
        r, c = grid_slot(i)
        page[r:r + CROP_H, c:c + CROP_W] = crop
        manifest.append(Placement(i, r, c))
    return PageCanvas(page, manifest)


def apply_dot_gain(darkness: np.ndarray, gain: float) -> np.ndarray:
    """Midtone spread ``d + 4 g d (1 - d)``; paper white and solid ink are fixed points."""
    if gain == 0:
        return darkness
    return np.clip(darkness + 4.0 * gain * darkness * (1.0 - darkness), 0.0, 1.0)


def print_simulate(canvas: PageCanvas | np.ndarray, cfg: ChannelConfig) -> PrintRaster:
    page = canvas.raster if isinstance(canvas, PageCanvas) else np.asarray(canvas, dtype=np.float64)
    h, w = page.shape
    dark = apply_dot_gain(1.0 - page, cfg.dot_gain)
    H, W = h * UPSAMPLE, w * UPSAMPLE
    if cfg.dither is None:
        codes = np.rint(dark * 255.0).astype(np.uint8)
        return PrintRaster(np.repeat(np.repeat(codes, UPSAMPLE, 0), UPSAMPLE, 1), 255)
    out = np.empty((H, W), dtype=np.uint8)
    carry = None
    for r0 in range(0, h, STRIP):
        up = np.repeat(np.repeat(dark[r0:r0 + STRIP], UPSAMPLE, 0), UPSAMPLE, 1)
        R0 = r0 * UPSAMPLE
        if cfg.dither is Dither.OrderedBayer8:
            rows = (np.arange(R0, R0 + up.shape[0]) % 8)[:, None]
            cols = (np.arange(W) % 8)[None, :]
            out[R0:R0 + up.shape[0]] = up > BAYER_THRESH[rows, cols]
        else:
            ink, carry = kernels.error_diffusion(up, carry, R0)
            out[R0:R0 + up.shape[0]] = ink
    return PrintRaster(out, 1)


def _bilinear_shift(img: np.ndarray, dy: float, dx: float) -> np.ndarray:
    """Sample ``img`` at (i + dy, j + dx) with edge replication."""
    h, w = img.shape
    iy, fy = int(np.floor(dy)), dy - np.floor(dy)
    ix, fx = int(np.floor(dx)), dx - np.floor(dx)
    rows = np.clip(np.arange(h) + iy, 0, h - 1)
    rows1 = np.clip(rows + 1, 0, h - 1)
    cols = np.clip(np.arange(w) + ix, 0, w - 1)
    cols1 = np.clip(cols + 1, 0, w - 1)
    top = img[rows][:, cols] * (1 - fx) + img[rows][:, cols1] * fx
    bot = img[rows1][:, cols] * (1 - fx) + img[rows1][:, cols1] * fx
    return top * (1 - fy) + bot * fy


def scan_simulate(raster: PrintRaster | np.ndarray, cfg: ChannelConfig, page_index: int = 0) -> np.ndarray:
    """Returns a 200 dpi intensity page with values k/255."""
    if not isinstance(raster, PrintRaster):
        raster = PrintRaster(np.asarray(raster, dtype=np.uint8), 1)
    H, W = raster.data.shape
    if H % UPSAMPLE or W % UPSAMPLE:
        raise ChannelDimensionError(f"raster {H}x{W} is not divisible by {UPSAMPLE}")
    dark = kernels.box_downsample(raster.data, UPSAMPLE) / raster.levels
    page = 1.0 - dark
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, page_index]))
    if cfg.noise_sigma > 0:
        page = page + rng.normal(0.0, cfg.noise_sigma, page.shape)
    if cfg.jitter_px > 0:
        dy, dx = rng.uniform(-cfg.jitter_px, cfg.jitter_px, size=2)
        page = _bilinear_shift(page, dy, dx)
    return np.rint(np.clip(page, 0.0, 1.0) * 255.0) / 255.0


def segment(page: np.ndarray, manifest: list[Placement]) -> np.ndarray:
    h, w = page.shape
    out = np.empty((len(manifest),) + IMAGE_SHAPE)
    for k, p in enumerate(manifest):
        r0, c0, r1, c1 = p.rect
        if r0 < 0 or c0 < 0 or r1 > h or c1 > w:
            raise ChannelDimensionError(f"placement {p.index} rect {p.rect} outside page {h}x{w}")
        out[k] = page[r0:r1, c0:c1]
    return out


def channel_roundtrip(bubbles, cfg: ChannelConfig, page_hook=None) -> np.ndarray:
    """Layout, print, scan and segment, one page per CAPACITY crops."""
    px = np.asarray(getattr(bubbles, "pixels", bubbles), dtype=np.float64).reshape((-1,) + IMAGE_SHAPE)
    out = np.empty_like(px)
    for k, s in enumerate(range(0, len(px), CAPACITY)):
        canvas = layout_page(px[s:s + CAPACITY])
        raster = print_simulate(canvas, cfg)
        page = scan_simulate(raster, cfg, page_index=k)
        if page_hook:
            page_hook(k, canvas, raster, page)
        out[s:s + CAPACITY] = segment(page, canvas.manifest)
    return out


POST_CHANNEL = Provenance.PostChannel


# ---------------------------------------------------------------- export

def write_pbm(path, bits: np.ndarray, comment: str | None = None):
    """Binary portable bitmap; 1 = black, rows padded to whole bytes."""
    bits = np.asarray(bits, dtype=np.uint8)
    h, w = bits.shape
    packed = np.packbits(bits, axis=1)
    note = "".join(f"# {line}\n" for line in comment.splitlines()) if comment else ""
    Path(path).write_bytes(f"P4\n{note}{w} {h}\n".encode() + packed.tobytes())


def export_page(out_dir, k: int, canvas: PageCanvas, raster: PrintRaster, page: np.ndarray,
                bitmap: bool = False, comment: str | None = None, provenance: dict | None = None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_pgm(out / f"page{k:03d}_scan.pgm", np.rint(page * 255).astype(np.uint8), comment)
    write_pgm(out / f"page{k:03d}_layout.pgm", np.rint(canvas.raster * 255).astype(np.uint8), comment)
    (out / f"page{k:03d}_manifest.json").write_text(canvas.manifest_json(provenance))
    if bitmap and raster.levels == 1:
        write_pbm(out / f"page{k:03d}_print.pbm", raster.data, comment)
