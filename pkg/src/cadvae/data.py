"""Colored-digit datasets with a controllable digit/color correlation.

Digits come from a built-in 5x7 bitmap font placed on an 8x8 canvas and
upsampled (nearest neighbour) to the requested size. Each digit y has a
predefined color ``y % num_colors``; with probability ``bias_rate`` a
training sample takes that color, otherwise one of the other colors
uniformly. Pixels are stored as float32 so that files round-trip exactly.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, UsageError

# RGB anchors, one per color index
PALETTE = np.array([
    [0.90, 0.10, 0.10],  # red
    [0.10, 0.80, 0.10],  # green
    [0.15, 0.25, 0.95],  # blue
    [0.95, 0.90, 0.10],  # yellow
    [0.90, 0.10, 0.85],  # magenta
    [0.10, 0.85, 0.90],  # cyan
    [0.95, 0.55, 0.05],  # orange
    [0.55, 0.20, 0.90],  # violet
    [0.55, 0.95, 0.55],  # mint
    [0.60, 0.60, 0.60],  # grey
])

_FONT = {
    0: ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    1: ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    2: ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    3: ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],
    4: ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    5: ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    6: ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    7: ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    8: ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    9: ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
}

MAGIC = b"CADV"
VERSION = 1
_HEADER = struct.Struct("<4sHIBHHBB")


def glyph(digit: int, size: int = 8) -> np.ndarray:
    """Binary ``size x size`` mask of a digit."""
    canvas = np.zeros((8, 8))
    rows = _FONT[digit]
    for r, line in enumerate(rows):
        for c, ch in enumerate(line):
            canvas[r + 1, c + 1] = ch == "1"
    idx = (np.arange(size) * 8) // size
    return canvas[np.ix_(idx, idx)]


@dataclass(frozen=True)
class BiasSpec:
    num_classes: int = 10
    num_colors: int = 10
    bias_rate: float = 0.7
    jitter_std: float = 0.05
    image_size: int = 16
    seed: int = 0
    # shape variability; zero keeps the fixed glyph of each digit
    max_shift: int = 0
    stroke_dropout: float = 0.0

    def validate(self):
        if not 0.0 <= self.bias_rate <= 1.0:
            raise ConfigError(f"bias_rate must be in [0, 1], got {self.bias_rate}")
        if self.image_size not in (8, 16, 28):
            raise ConfigError(f"image_size must be 8, 16 or 28, got {self.image_size}")
        if self.num_classes != 10 or not 2 <= self.num_colors <= len(PALETTE):
            raise ConfigError("num_classes must be 10 and num_colors in [2, 10]")
        if self.jitter_std < 0:
            raise ConfigError("jitter_std must be >= 0")
        if self.max_shift < 0 or not 0.0 <= self.stroke_dropout < 1.0:
            raise ConfigError("max_shift must be >= 0 and stroke_dropout in [0, 1)")
        return self


@dataclass
class LabeledDataset:
    images: np.ndarray  # float32 [N, C, H, W] in [0, 1]
    y: np.ndarray
    s: np.ndarray
    n_y: int = 10
    n_s: int = 10

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.s = np.asarray(self.s, dtype=np.int64)
        n = len(self.images)
        if self.images.ndim != 4 or len(self.y) != n or len(self.s) != n:
            raise ValueError("images, y and s must have matching lengths")
        if n and (self.y.min() < 0 or self.y.max() >= self.n_y or self.s.min() < 0 or self.s.max() >= self.n_s):
            raise ValueError("labels out of range")
        if n and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixels must lie in [0, 1]")

    def __len__(self):
        return len(self.y)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx)
        return LabeledDataset(self.images[idx], self.y[idx], self.s[idx], self.n_y, self.n_s)

    def bias_rate(self) -> float:
        """Fraction of samples whose color is their digit's predefined color."""
        return float(np.mean(self.s == self.y % self.n_s))


def _shapes(y, spec: BiasSpec, rng):
    size = spec.image_size
    bank = np.stack([glyph(d, size) for d in range(spec.num_classes)])
    masks = bank[y]
    if spec.max_shift:
        k = spec.max_shift
        shifts = rng.integers(-k, k + 1, size=(len(y), 2))
        padded = np.pad(masks, ((0, 0), (k, k), (k, k)))
        masks = np.stack([
            padded[i, k + dy:k + dy + size, k + dx:k + dx + size]
            for i, (dy, dx) in enumerate(shifts)
        ])
    if spec.stroke_dropout:
        masks = masks * (rng.random(masks.shape) >= spec.stroke_dropout)
    return masks


def _colorize(masks, colors, spec: BiasSpec, rng):
    rgb = PALETTE[colors] + rng.normal(0.0, spec.jitter_std, size=(len(colors), 3))
    rgb = np.clip(rgb, 0.0, 1.0)
    images = masks[:, None, :, :] * rgb[:, :, None, None]
    return np.clip(images, 0.0, 1.0).astype(np.float32)


def generate_colored_digits(n: int, spec: BiasSpec, unbiased=False) -> LabeledDataset:
    if n < 1:
        raise ConfigError("n must be >= 1")
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    y = rng.integers(0, spec.num_classes, size=n)
    home = y % spec.num_colors
    if unbiased:
        s = rng.integers(0, spec.num_colors, size=n)
    else:
        keep = rng.random(n) < spec.bias_rate
        other = (home + 1 + rng.integers(0, spec.num_colors - 1, size=n)) % spec.num_colors
        s = np.where(keep, home, other)
    images = _colorize(_shapes(y, spec, rng), s, spec, rng)
    return LabeledDataset(images, y, s, spec.num_classes, spec.num_colors)


def generate_unbiased_test(n: int, spec: BiasSpec) -> LabeledDataset:
    return generate_colored_digits(n, spec, unbiased=True)


def colorize_grayscale(gray: np.ndarray, y, spec: BiasSpec, unbiased=False) -> LabeledDataset:
    """Apply the bias mechanism to real grayscale digits (e.g. MNIST from IDX files)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    y = np.asarray(y, dtype=np.int64)
    n = len(y)
    home = y % spec.num_colors
    if unbiased:
        s = rng.integers(0, spec.num_colors, size=n)
    else:
        keep = rng.random(n) < spec.bias_rate
        other = (home + 1 + rng.integers(0, spec.num_colors - 1, size=n)) % spec.num_colors
        s = np.where(keep, home, other)
    gray = np.asarray(gray, dtype=np.float64)
    if gray.max() > 1.0:
        gray = gray / 255.0
    return LabeledDataset(_colorize(gray, s, spec, rng), y, s, spec.num_classes, spec.num_colors)


# ---------------------------------------------------------------------------
# persistence


def dataset_bytes(ds: LabeledDataset) -> bytes:
    n, c, h, w = ds.images.shape
    header = _HEADER.pack(MAGIC, VERSION, n, c, h, w, ds.n_y, ds.n_s)
    return b"".join([
        header,
        ds.images.astype("<f4").tobytes(),
        ds.y.astype(np.uint8).tobytes(),
        ds.s.astype(np.uint8).tobytes(),
    ])


def save_dataset(path, ds: LabeledDataset):
    with open(path, "wb") as fh:
        fh.write(dataset_bytes(ds))


def parse_dataset(buf: bytes) -> LabeledDataset:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header", offset=len(buf))
    magic, version, n, c, h, w, n_y, n_s = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    off = _HEADER.size
    n_pix = n * c * h * w
    need = off + 4 * n_pix + 2 * n
    if len(buf) < need:
        raise FormatError(f"truncated payload: need {need} bytes, have {len(buf)}", offset=len(buf))
    if len(buf) > need:
        raise FormatError(f"{len(buf) - need} trailing bytes", offset=need)
    pixels = np.frombuffer(buf, dtype="<f4", count=n_pix, offset=off).reshape(n, c, h, w)
    off += 4 * n_pix
    y = np.frombuffer(buf, dtype=np.uint8, count=n, offset=off)
    s = np.frombuffer(buf, dtype=np.uint8, count=n, offset=off + n)
    try:
        return LabeledDataset(pixels.astype(np.float32), y, s, n_y, n_s)
    except ValueError as exc:
        raise FormatError(f"invalid dataset contents: {exc}", offset=_HEADER.size) from exc


def load_dataset(path) -> LabeledDataset:
    with open(path, "rb") as fh:
        return parse_dataset(fh.read())


def read_idx(path) -> np.ndarray:
    """Read an MNIST IDX file (images 0x00000803 or labels 0x00000801)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 8:
        raise FormatError("truncated IDX header", offset=len(buf))
    magic = struct.unpack_from(">I", buf, 0)[0]
    if magic == 0x00000801:
        dims = struct.unpack_from(">I", buf, 4)
        off = 8
    elif magic == 0x00000803:
        if len(buf) < 16:
            raise FormatError("truncated IDX header", offset=len(buf))
        dims = struct.unpack_from(">III", buf, 4)
        off = 16
    else:
        raise FormatError(f"unknown IDX magic 0x{magic:08x}", offset=0)
    count = int(np.prod(dims))
    if len(buf) < off + count:
        raise FormatError("truncated IDX payload", offset=len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=off).reshape(dims)


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    x: np.ndarray  # float64 [B, C, H, W]
    y: np.ndarray
    s: np.ndarray
    index: np.ndarray  # dataset rows
    groups_y: dict = field(default_factory=dict)
    groups_s: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.y)


def _groups(labels):
    return {int(v): np.flatnonzero(labels == v) for v in np.unique(labels)}


def make_batch(ds: LabeledDataset, idx) -> Batch:
    idx = np.asarray(idx)
    y, s = ds.y[idx], ds.s[idx]
    return Batch(ds.images[idx].astype(np.float64), y, s, idx, _groups(y), _groups(s))


def batch_iter(ds: LabeledDataset, batch_size: int, epoch_seed):
    """Shuffled, drop-last batches with per-label index groups."""
    if batch_size < 2:
        raise UsageError("batch_size must be >= 2")
    if batch_size > len(ds):
        raise UsageError(f"batch_size {batch_size} exceeds dataset size {len(ds)}")
    order = np.random.default_rng(epoch_seed).permutation(len(ds))
    for b in range(len(ds) // batch_size):
        yield make_batch(ds, order[b * batch_size:(b + 1) * batch_size])
