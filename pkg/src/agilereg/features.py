"""Descriptor pyramid from the network taps, and the Harris corner gate."""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ShapeError
from .imgio import ImageBuffer, to_grayscale

CELL = 16  # input pixels per pool-4 cell

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T


def gaussian_kernel(size: int = 5, sigma: float = 1.0) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


@dataclass(frozen=True, eq=False)
class DescriptorPyramid:
    """Raw channel vectors of taps 4/5/6, one row per grid cell (row-major)."""

    f1: np.ndarray
    f2: np.ndarray
    f3: np.ndarray
    grid: tuple[int, int]
    source_size: tuple[int, int] | None = None  # original (width, height)

    @property
    def n_cells(self) -> int:
        return self.grid[0] * self.grid[1]

    def parent2(self) -> np.ndarray:
        """Row index into f2 for every f1 cell."""
        return _parent_index(self.grid, 2)

    def parent3(self) -> np.ndarray:
        return _parent_index(self.grid, 4)

    def cell_centers(self) -> np.ndarray:
        return cell_centers(self.grid)


def _parent_index(grid: tuple[int, int], factor: int) -> np.ndarray:
    rows, cols = grid
    i, j = np.divmod(np.arange(rows * cols), cols)
    return (i // factor) * (cols // factor) + j // factor


def cell_centers(grid: tuple[int, int]) -> np.ndarray:
    """(x, y) pixel coordinates of each cell center, pixel k centred on k."""
    rows, cols = grid
    i, j = np.divmod(np.arange(rows * cols), cols)
    return np.stack([j * CELL + (CELL - 1) / 2, i * CELL + (CELL - 1) / 2], axis=1)


def build_pyramid(taps: dict, source_size=None) -> DescriptorPyramid:
    t1, t2, t3 = taps[4], taps[5], taps[6]
    _, h1, w1 = t1.shape
    for name, t, f in (("pool5", t2, 2), ("pool6", t3, 4)):
        if t.shape[1:] != (h1 // f, w1 // f) or h1 % f or w1 % f:
            raise ShapeError(f"{name} tap {t.shape} inconsistent with pool4 tap {t1.shape}")

    def flat(t):
        return np.ascontiguousarray(t.reshape(t.shape[0], -1).T)

    return DescriptorPyramid(flat(t1), flat(t2), flat(t3), (h1, w1), source_size)


# ---------------------------------------------------------------------------
# Harris


@dataclass(frozen=True, eq=False)
class CornerGate:
    mask: np.ndarray  # bool, one entry per grid cell
    corner_points: np.ndarray  # (N, 2) integer (x, y) in the resized frame
    grid: tuple[int, int]

    @property
    def count(self) -> int:
        return int(self.mask.sum())

    @classmethod
    def from_points(cls, points, grid) -> "CornerGate":
        pts = np.asarray(points, dtype=np.int64).reshape(-1, 2)
        mask = np.zeros(grid[0] * grid[1], dtype=bool)
        if len(pts):
            mask[(pts[:, 1] // CELL) * grid[1] + pts[:, 0] // CELL] = True
        return cls(mask, pts, grid)

    @classmethod
    def full(cls, grid) -> "CornerGate":
        return cls(np.ones(grid[0] * grid[1], dtype=bool), np.zeros((0, 2), np.int64), grid)


def harris_response(gray: np.ndarray, k: float = 0.04) -> np.ndarray:
    gray = np.asarray(gray, dtype=np.float64)
    ix = ndimage.correlate(gray, SOBEL_X, mode="nearest")
    iy = ndimage.correlate(gray, SOBEL_Y, mode="nearest")
    g = gaussian_kernel(5, 1.0)
    sxx = ndimage.correlate(ix * ix, g, mode="nearest")
    syy = ndimage.correlate(iy * iy, g, mode="nearest")
    sxy = ndimage.correlate(ix * iy, g, mode="nearest")
    return (sxx * syy - sxy * sxy) - k * (sxx + syy) ** 2


def nms_points(response: np.ndarray, threshold: float, radius: int) -> np.ndarray:
    """Greedy non-maximum suppression; strongest first, ties by (y, x)."""
    peak = ndimage.maximum_filter(response, size=2 * radius + 1, mode="constant", cval=-np.inf)
    ys, xs = np.nonzero((response == peak) & (response >= threshold) & (response > 0))
    order = np.lexsort((xs, ys, -response[ys, xs]))
    taken = np.zeros(response.shape, dtype=bool)
    keep = []
    h, w = response.shape
    for idx in order:
        y, x = ys[idx], xs[idx]
        if taken[y, x]:
            continue
        keep.append((x, y))
        taken[max(0, y - radius) : min(h, y + radius + 1), max(0, x - radius) : min(w, x + radius + 1)] = True
    return np.array(keep, dtype=np.int64).reshape(-1, 2)


def harris_corners(img, k: float = 0.04, threshold_rel: float = 0.01, nms_radius: int = 4,
                   frame: int = 448) -> CornerGate:
    """Detect Harris corners on the resized frame and mark the grid cells holding them."""
    if isinstance(img, ImageBuffer):
        gray = to_grayscale(img).data[:, :, 0]
    else:
        gray = np.asarray(img, dtype=np.float64)
    if gray.shape != (frame, frame):
        raise ShapeError(f"Harris input must be {frame}x{frame}, got {gray.shape[1]}x{gray.shape[0]}")
    if not 0.02 <= k <= 0.1:
        raise ValueError(f"harris k must lie in [0.02, 0.1], got {k}")
    if not 0 < threshold_rel < 1:
        raise ValueError(f"threshold_rel must lie in (0, 1), got {threshold_rel}")
    r = harris_response(gray, k)
    rmax = r.max()
    grid = (frame // CELL, frame // CELL)
    if rmax <= 0:
        return CornerGate.from_points(np.zeros((0, 2)), grid)
    pts = nms_points(r, threshold_rel * rmax, nms_radius)
    return CornerGate.from_points(pts, grid)


# ---------------------------------------------------------------------------
# debug dump


def _b64(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f4").tobytes()).decode("ascii")


def dump_debug(pyr: DescriptorPyramid, gate: CornerGate) -> str:
    doc = {
        "grid": list(pyr.grid),
        "f1": {"shape": list(pyr.f1.shape), "data": _b64(pyr.f1)},
        "f2": {"shape": list(pyr.f2.shape), "data": _b64(pyr.f2)},
        "f3": {"shape": list(pyr.f3.shape), "data": _b64(pyr.f3)},
        "gate": [int(i) for i in np.flatnonzero(gate.mask)],
        "corners": gate.corner_points.tolist(),
    }
    return json.dumps(doc)


def load_debug(text: str) -> tuple[DescriptorPyramid, CornerGate]:
    doc = json.loads(text)

    def arr(d):
        return np.frombuffer(base64.b64decode(d["data"]), "<f4").reshape(d["shape"]).astype(np.float64)

    grid = tuple(doc["grid"])
    gate = CornerGate.from_points(doc["corners"], grid)
    mask = np.zeros(grid[0] * grid[1], dtype=bool)
    mask[doc["gate"]] = True
    gate = CornerGate(mask, gate.corner_points, grid)
    return DescriptorPyramid(arr(doc["f1"]), arr(doc["f2"]), arr(doc["f3"]), grid), gate
