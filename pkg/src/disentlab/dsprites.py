"""Procedural dSprites lattice: factor indexing, rendering, subsets and batching.

Lattice order is (shape, scale, orientation, pos_x, pos_y) with pos_y fastest.
Shapes: 0 square, 1 ellipse, 2 heart.

Geometry (pixel centres at ``j + 0.5``, x = column, y = row):

* extent ``30 * (0.5 + 0.1 * scale)`` pixels across the shape's unit box;
* rotation angle ``2 * pi * orientation / 40``;
* centre ``16 + 32 * pos / 31`` pixels on each axis.
"""

from __future__ import annotations

import functools
import struct
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Sequence

import numpy as np

FACTOR_NAMES = ("shape", "scale", "orientation", "pos_x", "pos_y")
FACTOR_SIZES = (3, 6, 40, 32, 32)
FACTOR_STRIDES = (245760, 40960, 1024, 32, 1)
LATTICE_SIZE = 737280
IMAGE_SIZE = 64

SHAPE_NAMES = ("square", "ellipse", "heart")
BASE_EXTENT = 30.0
POS_LO, POS_HI = 16.0, 48.0
HEART_SCALE = 1.236  # max |coordinate| of the sextic heart around its origin
ELLIPSE_MINOR = 0.5

CACHE_MAGIC = b"DSPR"
CACHE_VERSION = 1


class FactorTuple(NamedTuple):
    shape: int
    scale: int
    orientation: int
    pos_x: int
    pos_y: int


def _check_factors(f: Sequence[int]):
    if len(f) != 5:
        raise ValueError(f"expected 5 factor labels, got {len(f)}")
    for name, size, v in zip(FACTOR_NAMES, FACTOR_SIZES, f):
        if not 0 <= int(v) < size:
            raise ValueError(f"factor {name}={v} outside [0, {size})")


def factor_to_index(f: Sequence[int]) -> int:
    _check_factors(f)
    return int(sum(int(v) * s for v, s in zip(f, FACTOR_STRIDES)))


def index_to_factor(i: int) -> FactorTuple:
    i = int(i)
    if not 0 <= i < LATTICE_SIZE:
        raise ValueError(f"lattice index {i} outside [0, {LATTICE_SIZE})")
    out = []
    for s in FACTOR_STRIDES:
        out.append(i // s)
        i %= s
    return FactorTuple(*out)


def indices_to_factors(indices: np.ndarray) -> np.ndarray:
    """Vectorised :func:`index_to_factor`; returns an (N, 5) int array."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= LATTICE_SIZE):
        raise ValueError("lattice index out of range")
    return np.stack([(indices // s) % n for s, n in zip(FACTOR_STRIDES, FACTOR_SIZES)], axis=1)


def factors_to_indices(factors: np.ndarray) -> np.ndarray:
    factors = np.asarray(factors, dtype=np.int64).reshape(-1, 5)
    for k, (name, size) in enumerate(zip(FACTOR_NAMES, FACTOR_SIZES)):
        col = factors[:, k]
        if col.size and (col.min() < 0 or col.max() >= size):
            raise ValueError(f"factor {name} outside [0, {size})")
    return factors @ np.array(FACTOR_STRIDES, dtype=np.int64)


# ---------------------------------------------------------------- rendering

_centres = np.arange(IMAGE_SIZE, dtype=np.float64) + 0.5


def position_to_pixel(label: float) -> float:
    return POS_LO + (POS_HI - POS_LO) * label / (FACTOR_SIZES[3] - 1)


def pixel_to_position(px: float) -> float:
    return (px - POS_LO) * (FACTOR_SIZES[3] - 1) / (POS_HI - POS_LO)


def _inside(shape: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    if shape == 0:
        return (np.abs(u) <= 1) & (np.abs(v) <= 1)
    if shape == 1:
        return u * u + (v / ELLIPSE_MINOR) ** 2 <= 1
    x, y = u * HEART_SCALE, -v * HEART_SCALE  # curve is y-up, image rows are y-down
    return (x * x + y * y - 1) ** 3 - x * x * y ** 3 <= 0


@functools.lru_cache(maxsize=4096)
def _render_cached(f: FactorTuple) -> np.ndarray:
    half = BASE_EXTENT * (0.5 + 0.1 * f.scale) / 2
    theta = 2 * np.pi * f.orientation / FACTOR_SIZES[2]
    dx = (_centres - position_to_pixel(f.pos_x))[None, :]
    dy = (_centres - position_to_pixel(f.pos_y))[:, None]
    c, s = np.cos(theta), np.sin(theta)
    u = (c * dx + s * dy) / half
    v = (-s * dx + c * dy) / half
    img = _inside(f.shape, u, v).astype(np.float32)
    img.setflags(write=False)
    return img


def render(f: Sequence[int]) -> np.ndarray:
    """Binary 64x64 float32 image for one lattice point (read-only array)."""
    _check_factors(f)
    return _render_cached(FactorTuple(*(int(v) for v in f)))


def render_indices(indices: Sequence[int]) -> np.ndarray:
    """Stack of images (N, 1, 64, 64) for lattice indices."""
    indices = np.asarray(indices, dtype=np.int64)
    out = np.empty((len(indices), 1, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
    for n, f in enumerate(indices_to_factors(indices)):
        out[n, 0] = _render_cached(FactorTuple(*(int(v) for v in f)))
    return out


def centroid(img: np.ndarray) -> tuple[float, float] | None:
    """Foreground (>0.5) centroid as (x, y) pixel coordinates, or None if blank."""
    img = np.asarray(img).reshape(IMAGE_SIZE, IMAGE_SIZE)
    rows, cols = np.nonzero(img > 0.5)
    if rows.size == 0:
        return None
    return float(cols.mean() + 0.5), float(rows.mean() + 0.5)


# ---------------------------------------------------------------- views


@dataclass
class DatasetView:
    indices: np.ndarray
    position_threshold: int | None = None
    shuffle_seed: int = 0
    _images: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)

    def __len__(self):
        return len(self.indices)

    def factors(self) -> np.ndarray:
        return indices_to_factors(self.indices)

    def images(self, positions: np.ndarray | None = None) -> np.ndarray:
        """Images for view positions (all if None). Small views are memoised."""
        if self._images is None and len(self) <= 65536:
            self._images = render_indices(self.indices)
        if self._images is not None:
            return self._images if positions is None else self._images[positions]
        idx = self.indices if positions is None else self.indices[positions]
        return render_indices(idx)

    def with_seed(self, seed: int) -> "DatasetView":
        return DatasetView(self.indices, self.position_threshold, seed, self._images)


@dataclass(frozen=True)
class Selection:
    """Per-factor label lists; a reduced lattice is their Cartesian product."""
    values: tuple

    @classmethod
    def full(cls) -> "Selection":
        return cls(tuple(tuple(range(n)) for n in FACTOR_SIZES))

    @classmethod
    def parse(cls, text: str) -> "Selection":
        """Parse ``"shape=0; scale=3; pos_x=0:32:2"``.

        Values are ``all``, an int, ``a:b[:step]`` (half-open) or a comma list.
        ``full`` or an empty string selects everything."""
        chosen = {name: tuple(range(n)) for name, n in zip(FACTOR_NAMES, FACTOR_SIZES)}
        text = text.strip()
        if text in ("", "full", "all"):
            return cls(tuple(chosen.values()))
        for token in text.replace(";", " ").split():
            if "=" not in token:
                raise ValueError(f"malformed selection token {token!r}")
            key, val = token.split("=", 1)
            key = key.strip()
            if key not in chosen:
                raise ValueError(f"unknown factor {key!r} in selection")
            size = FACTOR_SIZES[FACTOR_NAMES.index(key)]
            chosen[key] = _parse_values(key, val.strip(), size)
        return cls(tuple(chosen.values()))

    def counts(self) -> tuple:
        return tuple(len(v) for v in self.values)

    def __str__(self):
        parts = []
        for name, vals, size in zip(FACTOR_NAMES, self.values, FACTOR_SIZES):
            if tuple(vals) != tuple(range(size)):
                parts.append(f"{name}={','.join(str(v) for v in vals)}")
        return "; ".join(parts) or "full"


def _parse_values(key: str, val: str, size: int) -> tuple:
    if val == "all":
        out = tuple(range(size))
    elif ":" in val:
        parts = [int(p) if p else None for p in val.split(":")]
        out = tuple(range(size)[slice(*parts)])
    else:
        out = tuple(int(p) for p in val.split(",") if p)
    if not out:
        raise ValueError(f"selection for {key!r} is empty")
    for v in out:
        if not 0 <= v < size:
            raise ValueError(f"factor {key}={v} outside [0, {size})")
    return tuple(sorted(set(out)))


def reduced_lattice(selection: Selection | str, shuffle_seed: int = 0) -> DatasetView:
    if isinstance(selection, str):
        selection = Selection.parse(selection)
    if any(len(v) == 0 for v in selection.values):
        raise ValueError("empty selection")
    idx = np.zeros(1, dtype=np.int64)
    for vals, stride in zip(selection.values, FACTOR_STRIDES):
        idx = (idx[:, None] + np.asarray(vals, dtype=np.int64)[None, :] * stride).reshape(-1)
    return DatasetView(idx, None, shuffle_seed)


def full_lattice(shuffle_seed: int = 0) -> DatasetView:
    return DatasetView(np.arange(LATTICE_SIZE, dtype=np.int64), None, shuffle_seed)


def filter_by_threshold(t: int, view: DatasetView | None = None) -> DatasetView:
    """Keep points whose 0-based pos_x label is <= t (inclusive)."""
    if not 0 <= t <= FACTOR_SIZES[3]:
        raise ValueError(f"position threshold {t} outside [0, {FACTOR_SIZES[3]}]")
    base = full_lattice() if view is None else view
    keep = (base.indices // FACTOR_STRIDES[3]) % FACTOR_SIZES[3] <= t
    seed = base.shuffle_seed
    return DatasetView(base.indices[keep], t, seed)


def batches(view: DatasetView, batch_size: int, epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (images, factor labels) over a seeded per-epoch permutation."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(view) == 0:
        raise ValueError("cannot batch an empty dataset view")
    order = np.random.Generator(np.random.PCG64([view.shuffle_seed, epoch])).permutation(len(view))
    for start in range(0, len(order), batch_size):
        pos = order[start:start + batch_size]
        yield view.images(pos), indices_to_factors(view.indices[pos])


# ---------------------------------------------------------------- cache file
# "DSPR", u32 version, u32 count, then per record 512 bytes of MSB-first
# row-major bitmap followed by five u8 labels.


def write_cache(view: DatasetView, path) -> int:
    factors = view.factors().astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC + struct.pack("<II", CACHE_VERSION, len(view)))
        chunk = 4096
        for start in range(0, len(view), chunk):
            imgs = render_indices(view.indices[start:start + chunk]).reshape(-1, IMAGE_SIZE * IMAGE_SIZE)
            bits = np.packbits(imgs > 0.5, axis=1, bitorder="big")
            fh.write(np.concatenate([bits, factors[start:start + chunk]], axis=1).tobytes())
    return len(view)


def read_cache(path) -> tuple[np.ndarray, np.ndarray]:
    """Return (images (N,1,64,64) float32, factors (N,5) int64)."""
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) < 12 or head[:4] != CACHE_MAGIC:
            raise ValueError(f"{path}: not a dataset cache file")
        version, count = struct.unpack("<II", head[4:])
        if version != CACHE_VERSION:
            raise ValueError(f"{path}: unsupported cache version {version}")
        rec = IMAGE_SIZE * IMAGE_SIZE // 8 + 5
        raw = fh.read()
    if len(raw) != count * rec:
        raise ValueError(f"{path}: truncated cache ({len(raw)} bytes for {count} records)")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(count, rec)
    imgs = np.unpackbits(arr[:, :-5], axis=1, bitorder="big").astype(np.float32)
    return imgs.reshape(count, 1, IMAGE_SIZE, IMAGE_SIZE), arr[:, -5:].astype(np.int64)
