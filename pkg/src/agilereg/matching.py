"""Fused, corner-gated distance matrix and ratio-threshold matching."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .errors import EmptyMatchError, ShapeError
from .features import CornerGate, DescriptorPyramid, cell_centers

RATIO_EPS = 1e-12


@dataclass(frozen=True)
class DistanceWeights:
    w1: float = 2.0
    w2: float = math.sqrt(2.0)
    w3: float = 1.0

    def __post_init__(self):
        if min(self.w1, self.w2, self.w3) <= 0:
            raise ValueError(f"distance weights must be positive, got {self}")


@dataclass(frozen=True, eq=False)
class FusedDistanceMatrix:
    values: np.ndarray  # (n_src, n_dst), +inf where gated out
    gate_src: CornerGate
    gate_dst: CornerGate

    @property
    def T(self) -> "FusedDistanceMatrix":
        return FusedDistanceMatrix(self.values.T, self.gate_dst, self.gate_src)


@dataclass(frozen=True, eq=False)
class MatchSet:
    src: np.ndarray
    dst: np.ndarray
    distance: np.ndarray
    theta: np.ndarray
    theta_max_used: float
    direction: str  # "x->y", "y->x" or "intersected"

    def __len__(self):
        return len(self.src)

    def pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.src.tolist(), self.dst.tolist()))

    def reversed(self) -> "MatchSet":
        flip = {"x->y": "y->x", "y->x": "x->y"}.get(self.direction, self.direction)
        return MatchSet(self.dst, self.src, self.distance, self.theta, self.theta_max_used, flip)

    def to_jsonl(self, grid_src, grid_dst) -> str:
        cs, cd = cell_centers(grid_src), cell_centers(grid_dst)
        lines = []
        for s, d, dist, th in zip(self.src, self.dst, self.distance, self.theta):
            lines.append(json.dumps({
                "src_cell": int(s), "dst_cell": int(d),
                "src_xy": cs[s].tolist(), "dst_xy": cd[d].tolist(),
                "distance": float(dist), "theta": float(th),
            }))
        return "\n".join(lines) + ("\n" if lines else "")


def fused_distance(px: DescriptorPyramid, py: DescriptorPyramid, gx: CornerGate, gy: CornerGate,
                   w: DistanceWeights = DistanceWeights()) -> FusedDistanceMatrix:
    """Weighted sum of per-level Euclidean distances between gated cells.

    Rows index cells of ``px``; coarser levels are compared through each
    cell's parent, so neighbouring cells share their f2/f3 terms.
    """
    if px.grid != py.grid:
        raise ShapeError(f"pyramid grids differ: {px.grid} vs {py.grid}")
    n = px.n_cells
    if gx.mask.shape != (n,) or gy.mask.shape != (n,):
        raise ShapeError(f"gate sizes {gx.mask.shape}/{gy.mask.shape} do not match {n} cells")
    rows, cols = np.flatnonzero(gx.mask), np.flatnonzero(gy.mask)
    out = np.full((n, n), np.inf)
    if len(rows) == 0 or len(cols) == 0:
        return FusedDistanceMatrix(out, gx, gy)
    p2, p3 = px.parent2(), px.parent3()
    d1 = cdist(px.f1[rows], py.f1[cols])
    d2 = cdist(px.f2, py.f2)[np.ix_(p2[rows], p2[cols])]
    d3 = cdist(px.f3, py.f3)[np.ix_(p3[rows], p3[cols])]
    out[np.ix_(rows, cols)] = w.w1 * d1 + w.w2 * d2 + w.w3 * d3
    return FusedDistanceMatrix(out, gx, gy)


def _ratio_candidates(values: np.ndarray):
    finite = np.isfinite(values)
    rows = np.flatnonzero(finite.sum(axis=1) >= 2)
    if len(rows) == 0:
        raise EmptyMatchError("no source cell has two or more gated-in destination cells")
    sub = values[rows]
    best = np.argmin(sub, axis=1)  # first index wins ties
    two = np.partition(sub, 1, axis=1)[:, :2]
    dis1, dis2 = two[:, 0], two[:, 1]
    theta = dis2 / np.maximum(dis1, RATIO_EPS)
    return rows, best, dis1, theta


def threshold_steps(theta: np.ndarray, target_count: int, theta_step: float) -> int:
    """Number of decrements the lowering loop performs before it stops.

    The loop starts at max(theta), lowers the cut by ``theta_step`` per
    iteration and stops once more than ``target_count - 1`` ratios exceed it
    or the cut reaches 1.0. The cut after ``n`` steps is ``max - n * step``;
    the stop predicate is monotone in ``n`` so the first stopping ``n`` is
    found by bisection instead of stepping.
    """
    top = float(theta.max())

    def stops(n):
        cut = top - n * theta_step
        return cut <= 1.0 or int(np.count_nonzero(theta > cut)) >= target_count

    hi = max(1, math.ceil((top - 1.0) / theta_step))
    while not stops(hi):
        hi *= 2
    lo = 1
    while lo < hi:
        mid = (lo + hi) // 2
        if stops(mid):
            hi = mid
        else:
            lo = mid + 1
    return lo


def match_oneway(dm: FusedDistanceMatrix, target_count: int = 128, theta_step: float = 0.01,
                 direction: str = "x->y") -> MatchSet:
    if target_count < 1 or theta_step <= 0:
        raise ValueError("target_count must be >= 1 and theta_step > 0")
    rows, best, dis1, theta = _ratio_candidates(dm.values)
    n = threshold_steps(theta, target_count, theta_step)
    # a ratio of 1 carries no distinctiveness, so the cut never drops below it
    cut = max(float(theta.max()) - n * theta_step, 1.0)
    keep = theta > cut
    return MatchSet(rows[keep], best[keep], dis1[keep], theta[keep], cut, direction)


def intersect(forward: MatchSet, backward: MatchSet) -> MatchSet:
    back = dict(zip(backward.src.tolist(), backward.dst.tolist()))
    keep = np.array([back.get(d) == s for s, d in zip(forward.src.tolist(), forward.dst.tolist())], dtype=bool)
    keep = keep.reshape(-1)
    return MatchSet(forward.src[keep], forward.dst[keep], forward.distance[keep], forward.theta[keep],
                    forward.theta_max_used, "intersected")


def match_bidirectional(dm_xy: FusedDistanceMatrix, dm_yx: FusedDistanceMatrix | None = None,
                        target_count: int = 128, theta_step: float = 0.01) -> MatchSet:
    """Keep pairs found in both search directions."""
    if dm_yx is None:
        dm_yx = dm_xy.T
    fwd = match_oneway(dm_xy, target_count, theta_step, "x->y")
    bwd = match_oneway(dm_yx, target_count, theta_step, "y->x")
    return intersect(fwd, bwd)
