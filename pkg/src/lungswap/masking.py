"""Mask-guided sampling: rotated patch crops restricted to the lung or its
complement, and feature-grid location sampling for the contrastive loss.

Geometry contract for patches: patch pixel (i, j) of a side-`s` patch
samples the image at ``center + R(rotation) @ (i - (s-1)/2, j - (s-1)/2)``
where ``R`` rotates (row, col) offsets by `rotation` degrees. Images are
sampled bilinearly, masks nearest-neighbor. The sampled footprint (the
enlarged, rotated window) always lies fully inside the image, so there are
no padding artifacts.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import InsufficientPositions, NoValidRegion, ShapeMismatch

Region = Literal["in", "out"]

# side range ([16, 64] at 256x256, scaled proportionally elsewhere)
BASE_RESOLUTION = 256
BASE_SIDE_RANGE = (16, 64)
ROTATION_LIMIT_DEG = 60.0
DEFAULT_COVERAGE = 0.75
ATTEMPT_CAP = 1000


@dataclass
class PatchSample:
    pixels: np.ndarray  # (side, side) float32
    side: int
    rotation: float  # degrees in [-60, 60]
    center: tuple[int, int]  # (row, col)
    region: Region
    coverage: float


@dataclass
class LocationSet:
    layer_index: int
    positions: np.ndarray  # (count, 2) int rows/cols on the feature grid
    count: int


def side_range_for(resolution: int) -> tuple[int, int]:
    lo = max(2, round(BASE_SIDE_RANGE[0] * resolution / BASE_RESOLUTION))
    hi = max(lo, round(BASE_SIDE_RANGE[1] * resolution / BASE_RESOLUTION))
    return lo, hi


def _rotated_grid(side: int, rotation_deg: float) -> tuple[np.ndarray, np.ndarray]:
    offs = np.arange(side, dtype=np.float64) - (side - 1) / 2.0
    dr, dc = np.meshgrid(offs, offs, indexing="ij")
    t = np.deg2rad(rotation_deg)
    cos, sin = np.cos(t), np.sin(t)
    return dr * cos - dc * sin, dr * sin + dc * cos


def _bilinear(image: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr, fc = rows - r0, cols - c0
    h, w = image.shape
    r0c = np.clip(r0, 0, h - 1)
    r1c = np.clip(r0 + 1, 0, h - 1)
    c0c = np.clip(c0, 0, w - 1)
    c1c = np.clip(c0 + 1, 0, w - 1)
    top = image[r0c, c0c] * (1 - fc) + image[r0c, c1c] * fc
    bot = image[r1c, c0c] * (1 - fc) + image[r1c, c1c] * fc
    return top * (1 - fr) + bot * fr


def sample_patch(
    image: np.ndarray,
    mask: np.ndarray,
    region: Region,
    rng: np.random.Generator,
    coverage_threshold: float = DEFAULT_COVERAGE,
    attempt_cap: int = ATTEMPT_CAP,
    side_range: tuple[int, int] | None = None,
) -> PatchSample:
    """Draw one rotated square patch whose pixels lie mostly in `region`.

    Side is uniform over the resolution-scaled range (or an explicit
    `side_range`), rotation uniform in [-60, 60] degrees. Centers are
    rejection-sampled until the fraction of patch pixels whose mask bit
    matches the requested region reaches `coverage_threshold`, up to
    `attempt_cap` attempts.
    """
    if image.shape != mask.shape:
        raise ShapeMismatch(f"image {image.shape} vs mask {mask.shape}")
    res = image.shape[0]
    lo, hi = side_range if side_range is not None else side_range_for(res)
    want_in = region == "in"
    mask_b = mask.astype(bool)

    for _ in range(attempt_cap):
        side = int(rng.integers(lo, hi + 1))
        rotation = float(rng.uniform(-ROTATION_LIMIT_DEG, ROTATION_LIMIT_DEG))
        # the rotated footprint must fit fully inside the image
        extent = side * np.sqrt(2.0) / 2.0
        c_lo, c_hi = int(np.ceil(extent)), int(np.floor(res - 1 - extent))
        if c_hi < c_lo:
            continue
        center = (int(rng.integers(c_lo, c_hi + 1)), int(rng.integers(c_lo, c_hi + 1)))
        dr, dc = _rotated_grid(side, rotation)
        rows, cols = center[0] + dr, center[1] + dc
        bits = mask_b[np.clip(np.rint(rows), 0, res - 1).astype(np.int64),
                      np.clip(np.rint(cols), 0, res - 1).astype(np.int64)]
        coverage = float(np.mean(bits == want_in))
        if coverage >= coverage_threshold:
            pixels = _bilinear(image.astype(np.float64), rows, cols).astype(np.float32)
            return PatchSample(pixels, side, rotation, center, region, coverage)
    raise NoValidRegion(
        f"no {region}-region patch with coverage >= {coverage_threshold} "
        f"after {attempt_cap} attempts"
    )


def grid_region_cells(feature_shape: tuple[int, int], mask: np.ndarray, region: Region) -> np.ndarray:
    """(k, 2) array of feature-grid cells whose center pixel matches `region`.

    The mask is reduced to the grid by nearest-neighbor: cell (i, j) is
    in-lung iff the mask pixel under its center is.
    """
    gh, gw = feature_shape
    h, w = mask.shape
    rows = np.minimum((np.floor((np.arange(gh) + 0.5) * h / gh)).astype(np.int64), h - 1)
    cols = np.minimum((np.floor((np.arange(gw) + 0.5) * w / gw)).astype(np.int64), w - 1)
    grid = mask.astype(bool)[np.ix_(rows, cols)]
    want = grid if region == "in" else ~grid
    return np.argwhere(want)


def sample_locations(
    feature_shape: tuple[int, int],
    mask: np.ndarray,
    region: Region,
    n: int,
    rng: np.random.Generator,
    layer_index: int = 0,
) -> LocationSet:
    """Draw `n` distinct grid positions matching `region`, uniformly."""
    cells = grid_region_cells(feature_shape, mask, region)
    if n > len(cells):
        raise InsufficientPositions(
            f"requested {n} {region}-region positions but grid "
            f"{feature_shape} has only {len(cells)}"
        )
    chosen = rng.choice(len(cells), size=n, replace=False)
    return LocationSet(layer_index=layer_index, positions=cells[chosen], count=n)
