"""Pixel rasters, rectangular region grids, and mask algebra.

Images are float rasters in [0, 1] with shape (height, width, channels).
A RegionGrid partitions an image into disjoint rectangular cells; a
RegionMask selects a subset of those cells. Deletion, insertion, and
compositing are the three masking primitives everything else builds on.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimensionMismatchError, FormatError, UnsupportedVersionError

TENSOR_MAGIC = b"SSCA"
TENSOR_VERSION = 1
_DTYPE_F32 = 1


@dataclass(eq=False)
class Image:
    """A (height, width, channels) float64 raster with values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise DimensionMismatchError(f"image data must be 3-d (h, w, c), got shape {arr.shape}")
        if arr.shape[2] not in (1, 3):
            raise DimensionMismatchError(f"channel count must be 1 or 3, got {arr.shape[2]}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DimensionMismatchError(f"image must have nonzero area, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("image intensities must be finite")
        lo, hi = float(arr.min()), float(arr.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"image intensities must lie in [0, 1], got range [{lo}, {hi}]")
        self.data = arr

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    def copy(self) -> "Image":
        return Image(self.data.copy())


@dataclass(frozen=True)
class RegionGrid:
    """Disjoint rectangular cells tiling an image exactly.

    Cells are (top, left, bottom, right) with exclusive bottom/right,
    id-indexed row-major: id = row * gw + col.
    """

    gh: int
    gw: int
    image_height: int
    image_width: int
    cells: tuple[tuple[int, int, int, int], ...]

    @property
    def num_regions(self) -> int:
        return self.gh * self.gw

    @property
    def image_area(self) -> int:
        return self.image_height * self.image_width

    def cell_area(self, region_id: int) -> int:
        t, l, b, r = self.cells[region_id]
        return (b - t) * (r - l)


@dataclass(frozen=True)
class RegionMask:
    """A subset of grid cells, stored as a set of region ids."""

    grid: RegionGrid
    selected: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        object.__setattr__(self, "selected", frozenset(self.selected))
        m = self.grid.num_regions
        bad = [i for i in self.selected if not (0 <= i < m)]
        if bad:
            raise ValueError(f"region ids {sorted(bad)} out of range for grid with {m} cells")

    def bool_array(self) -> np.ndarray:
        """Pixel-level boolean mask, True inside selected cells."""
        out = np.zeros((self.grid.image_height, self.grid.image_width), dtype=bool)
        for rid in self.selected:
            t, l, b, r = self.grid.cells[rid]
            out[t:b, l:r] = True
        return out


def _axis_edges(extent: int, parts: int) -> list[int]:
    # remainder pixels widen the trailing cells, one pixel each
    base, rem = divmod(extent, parts)
    sizes = [base] * (parts - rem) + [base + 1] * rem
    edges = [0]
    for s in sizes:
        edges.append(edges[-1] + s)
    return edges


def partition_grid(h: int, w: int, gh: int, gw: int) -> RegionGrid:
    """Tile an h-by-w image into gh-by-gw disjoint rectangular cells."""
    if gh < 1 or gw < 1:
        raise DimensionMismatchError(f"grid shape must be positive, got ({gh}, {gw})")
    if gh > h or gw > w:
        raise DimensionMismatchError(f"grid ({gh}, {gw}) exceeds image dims ({h}, {w})")
    rows = _axis_edges(h, gh)
    cols = _axis_edges(w, gw)
    cells = tuple(
        (rows[i], cols[j], rows[i + 1], cols[j + 1])
        for i in range(gh)
        for j in range(gw)
    )
    return RegionGrid(gh=gh, gw=gw, image_height=h, image_width=w, cells=cells)


def _baseline_vector(baseline: float | Sequence[float], channels: int) -> np.ndarray:
    vec = np.atleast_1d(np.asarray(baseline, dtype=np.float64))
    if vec.size == 1:
        vec = np.full(channels, float(vec[0]))
    if vec.shape != (channels,):
        raise DimensionMismatchError(
            f"baseline must be scalar or length-{channels}, got shape {vec.shape}"
        )
    if (vec < 0.0).any() or (vec > 1.0).any():
        raise ValueError("baseline intensities must lie in [0, 1]")
    return vec


def _check_grid_matches(image: Image, mask: RegionMask) -> None:
    g = mask.grid
    if (g.image_height, g.image_width) != (image.height, image.width):
        raise DimensionMismatchError(
            f"mask grid is {g.image_height}x{g.image_width} "
            f"but image is {image.height}x{image.width}"
        )


def render_pixel_mask(mask: RegionMask) -> Image:
    """Render a mask as a 1-channel {0, 1} raster."""
    return Image(mask.bool_array().astype(np.float64)[:, :, None])


def mask_delete(image: Image, mask: RegionMask, baseline: float | Sequence[float] = 0.0) -> Image:
    """Replace pixels inside the selected cells with the baseline fill."""
    _check_grid_matches(image, mask)
    vec = _baseline_vector(baseline, image.channels)
    out = image.data.copy()
    for rid in mask.selected:
        t, l, b, r = mask.grid.cells[rid]
        out[t:b, l:r, :] = vec
    return Image(out)


def mask_insert(image: Image, mask: RegionMask, baseline: float | Sequence[float] = 0.0) -> Image:
    """Keep pixels inside the selected cells; fill everything else with baseline."""
    _check_grid_matches(image, mask)
    vec = _baseline_vector(baseline, image.channels)
    out = np.broadcast_to(vec, image.shape).copy()
    for rid in mask.selected:
        t, l, b, r = mask.grid.cells[rid]
        out[t:b, l:r, :] = image.data[t:b, l:r, :]
    return Image(out)


def composite(image: Image, donor: Image, mask: RegionMask) -> Image:
    """Splice donor content into the selected cells of the base image."""
    if image.shape != donor.shape:
        raise DimensionMismatchError(f"image {image.shape} and donor {donor.shape} dims differ")
    _check_grid_matches(image, mask)
    out = image.data.copy()
    for rid in mask.selected:
        t, l, b, r = mask.grid.cells[rid]
        out[t:b, l:r, :] = donor.data[t:b, l:r, :]
    return Image(out)


def area_fraction(grid: RegionGrid, mask: RegionMask) -> float:
    """Fraction of total image area covered by the selected cells."""
    if mask.grid is not grid and mask.grid != grid:
        raise DimensionMismatchError("mask was built on a different grid")
    total = sum(grid.cell_area(rid) for rid in mask.selected)
    return total / grid.image_area


# ---------------------------------------------------------------------------
# Tensor and PPM file formats
# ---------------------------------------------------------------------------

def write_tensor(path: str | Path, array: np.ndarray) -> None:
    """Write an array in the SSCA-TENSOR v1 format (f32, little-endian)."""
    arr = np.ascontiguousarray(array, dtype=np.float32)
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<BB", TENSOR_VERSION, _DTYPE_F32))
        fh.write(struct.pack("<I", arr.ndim))
        for d in arr.shape:
            fh.write(struct.pack("<I", d))
        fh.write(arr.astype("<f4").tobytes(order="C"))


def read_tensor(path: str | Path) -> np.ndarray:
    """Read an SSCA-TENSOR v1 file back into a float64 array."""
    raw = Path(path).read_bytes()
    if len(raw) < 10:
        raise FormatError(f"{path}: truncated tensor file")
    if raw[:4] != TENSOR_MAGIC:
        raise FormatError(f"{path}: bad magic bytes {raw[:4]!r}")
    version, dtype_code = struct.unpack_from("<BB", raw, 4)
    if version != TENSOR_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported tensor version {version}")
    if dtype_code != _DTYPE_F32:
        raise FormatError(f"{path}: unsupported dtype code {dtype_code}")
    (ndim,) = struct.unpack_from("<I", raw, 6)
    header_end = 10 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError(f"{path}: truncated dims header")
    dims = struct.unpack_from(f"<{ndim}I", raw, 10)
    count = int(np.prod(dims)) if ndim else 1
    payload = raw[header_end:]
    if len(payload) != 4 * count:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {4 * count}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(dims)
    return arr.astype(np.float64)


def write_image_tensor(path: str | Path, image: Image) -> None:
    write_tensor(path, image.data)


def read_image_tensor(path: str | Path) -> Image:
    arr = read_tensor(path)
    if arr.ndim != 3:
        raise FormatError(f"{path}: expected a 3-d image tensor, got shape {arr.shape}")
    return Image(np.clip(arr, 0.0, 1.0))


def write_ppm(path: str | Path, image: Image, comment: str | None = None) -> None:
    """Export an image as binary 8-bit PPM (P6); grayscale is replicated to RGB."""
    data = image.data
    if image.channels == 1:
        data = np.repeat(data, 3, axis=2)
    rgb = np.clip(np.round(data * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P6\n")
        if comment:
            fh.write(f"# {comment}\n".encode("ascii", errors="replace"))
        fh.write(f"{image.width} {image.height}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes(order="C"))
