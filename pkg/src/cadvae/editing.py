"""Counterfactual swaps, latent traversals and PPM grid rendering.

Every edit works on posterior means and decodes each cell as its own
batch of one, so a cell whose latent equals a plain reconstruction is
bit-identical to it.

Grid layout: cells are placed row-major, each ``H x W``, separated and
framed by 2-pixel white borders. Files are named
``counterfactual_<tag>.ppm`` and ``traverse_<mode>_<tag>.ppm``.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import DimensionError, FormatError, RangeError
from .latent import COMPONENTS, LatentPartition, interpolate_codes, swap_codes

DEFAULT_MASKS = ({"X"}, {"Y"}, {"S"}, {"S", "R"})
DEFAULT_LAMBDA_Y = (0.0, 0.33, 0.66, 1.0)
DEFAULT_LAMBDA_S = (0.0, 0.33, 0.66, 1.0)
DEFAULT_LAMBDA_R = (0.0, 0.5, 1.0)
SEPARATOR = 2


@dataclass
class EditGrid:
    rows: int
    cols: int
    images: list
    row_labels: list = field(default_factory=list)
    col_labels: list = field(default_factory=list)

    def __post_init__(self):
        if self.rows * self.cols != len(self.images):
            raise DimensionError(f"{self.rows}x{self.cols} grid needs {self.rows * self.cols} images, got {len(self.images)}")

    def cell(self, r, c) -> np.ndarray:
        return self.images[r * self.cols + c]


def _as_image(model, img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 4 and img.shape[0] == 1:
        img = img[0]
    expected = tuple(model.spec.image_shape)
    if img.shape != expected:
        raise DimensionError(f"image of shape {img.shape} does not match model input {expected}")
    return img


def encode_mean(model, image) -> LatentPartition:
    mu = model.posterior_means(_as_image(model, image)[None])
    return LatentPartition.from_tensor(Tensor(mu), model.layout)


def decode_one(model, z: LatentPartition) -> np.ndarray:
    return model.reconstruct_means(z.joined().data)[0]


def reconstruct(model, image) -> np.ndarray:
    return decode_one(model, encode_mean(model, image))


def _mask_label(mask):
    return "{" + ",".join(c for c in COMPONENTS if c in mask) + "}" if mask else "{}"


def counterfactual(model, source_image, reference_image, masks=DEFAULT_MASKS) -> EditGrid:
    """Row 0 holds the source and reference reconstructions. Each following
    row applies one mask: column 0 takes the masked components from the
    reference into the source code, column 1 does the reverse."""
    z_src = encode_mean(model, source_image)
    z_ref = encode_mean(model, reference_image)
    images = [decode_one(model, z_src), decode_one(model, z_ref)]
    labels = ["reconstruction"]
    for mask in masks:
        images.append(decode_one(model, swap_codes(z_src, z_ref, mask)))
        images.append(decode_one(model, swap_codes(z_ref, z_src, mask)))
        labels.append(_mask_label(mask))
    return EditGrid(len(labels), 2, images, labels, ["source", "reference"])


def _check_lambdas(name, values):
    values = tuple(float(v) for v in values)
    if not values:
        raise RangeError(f"{name} is empty")
    for v in values:
        if not 0.0 <= v <= 1.0:
            raise RangeError(f"{name} value {v} outside [0, 1]")
    return values


def traversal_grid(model, source, reference, lambda_y=DEFAULT_LAMBDA_Y, lambda_s=DEFAULT_LAMBDA_S,
                   lambda_r=DEFAULT_LAMBDA_R, s_replaced=False) -> EditGrid:
    """Interpolate latent components from ``source`` towards ``reference``.

    Rows vary lambda_Y. Columns vary lambda_S (blue mode), or, with
    ``s_replaced``, z_S is taken from the reference and columns vary
    lambda_R (red mode). z_X always stays at the source value.
    """
    ly = _check_lambdas("lambda_y", lambda_y)
    ls = _check_lambdas("lambda_s", lambda_s)
    lr = _check_lambdas("lambda_r", lambda_r)
    z_src = encode_mean(model, source)
    z_ref = encode_mean(model, reference)
    cols = lr if s_replaced else ls
    images = []
    for a in ly:
        for b in cols:
            lam = {"Y": a, "S": 1.0, "R": b} if s_replaced else {"Y": a, "S": b, "R": 0.0}
            images.append(decode_one(model, interpolate_codes(z_src, z_ref, lam)))
    col_name = "lambda_R" if s_replaced else "lambda_S"
    return EditGrid(len(ly), len(cols), images, [f"lambda_Y={a:g}" for a in ly], [f"{col_name}={b:g}" for b in cols])


# ---------------------------------------------------------------------------
# PPM output


def quantize(img) -> np.ndarray:
    """[C, H, W] floats in [0, 1] to [H, W, 3] bytes, rounding half up."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    if img.shape[0] != 3:
        raise DimensionError(f"cannot render {img.shape[0]}-channel image")
    q = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5)
    return q.astype(np.uint8).transpose(1, 2, 0)


def grid_pixels(grid: EditGrid) -> np.ndarray:
    first = quantize(grid.images[0])
    h, w = first.shape[:2]
    sep = SEPARATOR
    canvas = np.full((grid.rows * h + (grid.rows + 1) * sep, grid.cols * w + (grid.cols + 1) * sep, 3), 255, np.uint8)
    for r in range(grid.rows):
        for c in range(grid.cols):
            cell = quantize(grid.cell(r, c))
            if cell.shape[:2] != (h, w):
                raise DimensionError("all grid cells must share one size")
            top = sep + r * (h + sep)
            left = sep + c * (w + sep)
            canvas[top:top + h, left:left + w] = cell
    return canvas


def ppm_bytes(pixels: np.ndarray) -> bytes:
    h, w, _ = pixels.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def render_grid(grid: EditGrid, path):
    data = ppm_bytes(grid_pixels(grid))
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write grid: {exc.strerror}", os.fspath(path)) from exc


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 file with maxval 255 into ``[H, W, 3]`` bytes."""
    with open(path, "rb") as fh:
        buf = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header", offset=pos)
        tokens.append(buf[start:pos])
    pos += 1
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise FormatError("only P6 with maxval 255 is supported", offset=0)
    w, h = int(tokens[1]), int(tokens[2])
    if len(buf) - pos != w * h * 3:
        raise FormatError(f"expected {w * h * 3} pixel bytes, found {len(buf) - pos}", offset=pos)
    return np.frombuffer(buf, dtype=np.uint8, offset=pos).reshape(h, w, 3)


def grid_filename(kind, tag, mode=None) -> str:
    if kind == "counterfactual":
        return f"counterfactual_{tag}.ppm"
    if kind == "traverse":
        return f"traverse_{mode}_{tag}.ppm"
    raise ValueError(f"unknown grid kind {kind!r}")
