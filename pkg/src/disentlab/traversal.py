"""Latent traversal grids.

Codes enumerate the Cartesian product of per-dimension values in nested-loop
order (last dimension fastest). Grids are written as binary PGM with 2px
gray gutters between 64px tiles.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import dsprites

GUTTER = 2
GUTTER_VALUE = 128
# Column counts for the two published traversal sizes; ceil(sqrt(n)) gives both.
_FIXED_COLUMNS = {729: 27, 1024: 32}


@dataclass
class TraversalSpec:
    code_dim: int
    lo: float = -2.0
    hi: float = 2.0
    step: float = 0.5
    inclusive: bool = True
    noise: np.ndarray | None = None  # fixed generator noise, shared by every tile

    def values(self) -> np.ndarray:
        if self.step <= 0:
            raise ValueError("traversal step must be positive")
        if self.hi < self.lo:
            raise ValueError("traversal range has hi < lo")
        ratio = (self.hi - self.lo) / self.step
        # tolerance keeps e.g. 4 / 0.5 from flooring to 7.999...
        if self.inclusive:
            count = math.floor(ratio + 1e-9) + 1
        else:
            count = max(math.ceil(ratio - 1e-9), 0)
        return self.lo + self.step * np.arange(count, dtype=np.float64)

    @property
    def count(self) -> int:
        return len(self.values()) ** self.code_dim


def traversal_codes(spec: TraversalSpec) -> np.ndarray:
    vals = spec.values()
    if spec.code_dim < 1:
        raise ValueError("code_dim must be >= 1")
    return np.array(list(itertools.product(vals, repeat=spec.code_dim)), dtype=np.float64).reshape(-1, spec.code_dim)


def grid_columns(count: int) -> int:
    return _FIXED_COLUMNS.get(count, max(1, math.ceil(math.sqrt(count))))


@dataclass
class TraversalGrid:
    images: np.ndarray  # (n, H, W) in [0, 1]
    codes: np.ndarray   # (n, code_dim)
    rows: int
    cols: int

    def tile_position(self, i: int) -> tuple[int, int]:
        return divmod(i, self.cols)

    def assemble(self) -> np.ndarray:
        """Full canvas as float values; gutters hold 128/255, blank cells 0."""
        n, h, w = self.images.shape
        height = self.rows * h + (self.rows - 1) * GUTTER
        width = self.cols * w + (self.cols - 1) * GUTTER
        canvas = np.full((height, width), GUTTER_VALUE / 255.0)
        for r in range(self.rows):
            for c in range(self.cols):
                i = r * self.cols + c
                y, x = r * (h + GUTTER), c * (w + GUTTER)
                canvas[y:y + h, x:x + w] = self.images[i] if i < n else 0.0
        return canvas


def render_traversal(model, spec: TraversalSpec) -> TraversalGrid:
    """Generate one image per traversal code.

    ``model`` is any object with ``code_dim`` and ``images(codes, noise)``
    returning (N, 1, H, W), e.g. a VaeModel (decoder mode, ``spec.noise`` must
    be None) or an IdGanModel (generator mode, ``spec.noise`` required).
    """
    if model.code_dim != spec.code_dim:
        raise ValueError(f"traversal code_dim {spec.code_dim} does not match model code_dim {model.code_dim}")
    codes = traversal_codes(spec)
    imgs = np.asarray(model.images(codes, noise=spec.noise))
    imgs = imgs.reshape(len(codes), imgs.shape[-2], imgs.shape[-1])
    cols = grid_columns(len(codes))
    return TraversalGrid(imgs, codes, math.ceil(len(codes) / cols), cols)


# ---------------------------------------------------------------- files


def write_pgm(canvas: np.ndarray, path):
    pix = np.clip(np.rint(255.0 * np.asarray(canvas, dtype=np.float64)), 0, 255).astype(np.uint8)
    h, w = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(pix.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P5" or int(fields[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = int(fields[1]), int(fields[2])
    pix = np.frombuffer(data[pos + 1:pos + 1 + w * h], dtype=np.uint8)
    if pix.size != w * h:
        raise ValueError(f"{path}: truncated PGM")
    return pix.reshape(h, w)


def write_grid(grid: TraversalGrid, path):
    write_pgm(grid.assemble(), path)


def write_codes_csv(grid: TraversalGrid, path, header_comment: str | None = None):
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh)
        w.writerow(["row", "col"] + [f"code_{j}" for j in range(grid.codes.shape[1])])
        for i, code in enumerate(grid.codes):
            r, c = grid.tile_position(i)
            w.writerow([r, c] + [repr(float(v)) for v in code])


# ---------------------------------------------------------------- generalization


@dataclass
class GeneralizationReport:
    threshold: int
    band_start_px: float | None   # centroid x above which images count as unseen positions
    total_images: int
    blank_images: int
    in_excluded_band: int

    @property
    def fraction_in_band(self) -> float:
        scored = self.total_images - self.blank_images
        return self.in_excluded_band / scored if scored else 0.0

    def as_text(self) -> str:
        return (f"threshold={self.threshold}\nband_start_px={self.band_start_px}\n"
                f"total_images={self.total_images}\nblank_images={self.blank_images}\n"
                f"in_excluded_band={self.in_excluded_band}\nfraction_in_band={self.fraction_in_band}\n")


def excluded_band_start(threshold: int) -> float | None:
    """Pixel x halfway between label ``threshold`` and the next; None if nothing is excluded."""
    if threshold >= dsprites.FACTOR_SIZES[3] - 1:
        return None
    return dsprites.position_to_pixel(threshold + 0.5)


def generalization_probe(model, spec: TraversalSpec, threshold: int,
                         grid: TraversalGrid | None = None) -> GeneralizationReport:
    """Count traversal images whose foreground centroid lies at x positions never trained on."""
    grid = grid if grid is not None else render_traversal(model, spec)
    band = excluded_band_start(threshold)
    blank = inside = 0
    for img in grid.images:
        c = dsprites.centroid(img)
        if c is None:
            blank += 1
        elif band is not None and c[0] > band:
            inside += 1
    return GeneralizationReport(threshold, band, len(grid.images), blank, inside)
