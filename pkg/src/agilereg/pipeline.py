"""End-to-end registration of a narrow-field image into a wide-field one."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import features, geometry, matching, nnet
from .errors import AgileRegError, EmptyMatchError, NoConsensusError, UnderdeterminedError
from .imgio import ImageBuffer, resize_bilinear

STAGES = ("resize", "forward", "harris", "distance", "match", "ransac", "total")


@dataclass(frozen=True)
class PipelineConfig:
    input_size: int = 448
    harris_k: float = 0.04
    harris_threshold: float = 0.01
    nms_radius: int = 4
    target_count: int = 128
    theta_step: float = 0.01
    ransac_iters: int = 2000
    ransac_px: float = 3.0
    ransac_seed: int = 0
    weights: matching.DistanceWeights = field(default_factory=matching.DistanceWeights)

    def __post_init__(self):
        if not 0.02 <= self.harris_k <= 0.1:
            raise ValueError(f"harris_k must lie in [0.02, 0.1], got {self.harris_k}")
        if not 0 < self.harris_threshold < 1:
            raise ValueError(f"harris_threshold must lie in (0, 1), got {self.harris_threshold}")
        if self.target_count < 1 or self.ransac_iters < 1:
            raise ValueError("target_count and ransac_iters must be >= 1")
        if self.theta_step <= 0 or self.ransac_px <= 0:
            raise ValueError("theta_step and ransac_px must be > 0")


def frame_to_resized(width: int, height: int, size: int) -> np.ndarray:
    """Original pixel coords -> resized-frame pixel coords (half-pixel centers)."""
    sx, sy = size / width, size / height
    return np.array([[sx, 0, 0.5 * sx - 0.5], [0, sy, 0.5 * sy - 0.5], [0, 0, 1.0]])


def frame_corners(width: int, height: int) -> np.ndarray:
    return np.array([[-0.5, -0.5], [width - 0.5, -0.5], [width - 0.5, height - 0.5], [-0.5, height - 0.5]])


@dataclass(frozen=True, eq=False)
class RegistrationResult:
    homography: geometry.Homography  # iy resized frame -> ix resized frame
    corners: np.ndarray  # iy frame corners in ix original pixels
    center: tuple[float, float]  # coordinate Y
    matches: matching.MatchSet
    src_points: np.ndarray  # matched cell centers, iy resized frame
    dst_points: np.ndarray  # matched cell centers, ix resized frame
    ix_size: tuple[int, int]
    iy_size: tuple[int, int]
    timings: dict
    frame_size: int = 448
    ok: bool = True

    @property
    def match_count(self) -> int:
        return len(self.matches)

    def original_homography(self) -> np.ndarray:
        """iy original pixels -> ix original pixels."""
        tx = frame_to_resized(*self.ix_size, self.frame_size)
        ty = frame_to_resized(*self.iy_size, self.frame_size)
        h = np.linalg.inv(tx) @ self.homography.h @ ty
        return h / h[2, 2]

    def to_report(self, timings: bool = True) -> dict:
        return {
            "status": "ok",
            "homography": self.homography.tolist(),
            "roi": {"corners": self.corners.tolist(), "center": list(self.center)},
            "matches": self.match_count,
            "inliers": int(len(self.homography.inliers)),
            "timings_ms": _timings(self.timings, timings),
        }


@dataclass(frozen=True, eq=False)
class RegistrationFailure:
    stage: str
    reason: str
    timings: dict
    match_count: int = 0
    ok: bool = False

    def to_report(self, timings: bool = True) -> dict:
        return {
            "status": "failed",
            "stage": self.stage,
            "reason": self.reason,
            "matches": self.match_count,
            "timings_ms": _timings(self.timings, timings),
        }


def _timings(t: dict, keep: bool) -> dict:
    return {k: (round(t.get(k, 0.0), 3) if keep else 0.0) for k in STAGES}


def report_json(result, timings: bool = True) -> str:
    return json.dumps(result.to_report(timings), indent=2, sort_keys=False) + "\n"


class Registrar:
    """Immutable pipeline: network weights plus configuration."""

    def __init__(self, weights: nnet.WeightBundle, config: PipelineConfig | None = None,
                 spec: nnet.NetworkSpec | None = None):
        self.config = config or PipelineConfig()
        self.spec = spec or nnet.NetworkSpec(input_size=self.config.input_size)
        weights.check(self.spec)
        self.weights = weights

    def describe(self, img: ImageBuffer):
        """Resize, run the network and Harris; returns (pyramid, gate, timings)."""
        cfg, size = self.config, self.config.input_size
        t = {}
        t0 = time.perf_counter()
        small = resize_bilinear(_as_rgb(img), size, size)
        t["resize"] = _ms(t0)
        t0 = time.perf_counter()
        taps = nnet.forward_taps(small, self.spec, self.weights)
        pyr = features.build_pyramid(taps, (img.width, img.height))
        t["forward"] = _ms(t0)
        t0 = time.perf_counter()
        gate = features.harris_corners(small, cfg.harris_k, cfg.harris_threshold, cfg.nms_radius, size)
        t["harris"] = _ms(t0)
        return pyr, gate, t

    def register(self, ix: ImageBuffer, iy: ImageBuffer, ix_desc=None):
        """``ix_desc`` may carry a cached ``describe(ix)`` for a fixed wide-field frame."""
        return register(ix, iy, self.weights, self.config, self, ix_desc)


def _as_rgb(img: ImageBuffer) -> ImageBuffer:
    if img.channels == 3:
        return img
    return ImageBuffer(np.repeat(img.data, 3, axis=2))


def _ms(t0: float) -> float:
    return (time.perf_counter() - t0) * 1000.0


def register(ix: ImageBuffer, iy: ImageBuffer, weights: nnet.WeightBundle,
             cfg: PipelineConfig | None = None, registrar: Registrar | None = None, ix_desc=None):
    """Locate the narrow-field image ``iy`` inside the wide-field image ``ix``.

    Returns a RegistrationResult, or a RegistrationFailure naming the stage
    that could not proceed.
    """
    cfg = cfg or PipelineConfig()
    reg = registrar or Registrar(weights, cfg)
    size = cfg.input_size
    for name, img in (("ix", ix), ("iy", iy)):
        if img.width < 64 or img.height < 64:
            raise ValueError(f"{name} is {img.width}x{img.height}; both images must be at least 64x64")
    t_start = time.perf_counter()
    timings = {k: 0.0 for k in STAGES}
    px, gx, tx = ix_desc if ix_desc is not None else reg.describe(ix)
    py, gy, ty = reg.describe(iy)
    for k in ("resize", "forward", "harris"):
        timings[k] = tx[k] + ty[k]

    def fail(stage, reason, n=0):
        timings["total"] = _ms(t_start)
        return RegistrationFailure(stage, reason, timings, n)

    if gx.count == 0 or gy.count == 0:
        which = "wide-field" if gx.count == 0 else "narrow-field"
        return fail("harris", f"no corner cells in the {which} image")

    t0 = time.perf_counter()
    # rows: iy cells, columns: ix cells
    dm = matching.fused_distance(py, px, gy, gx, cfg.weights)
    timings["distance"] = _ms(t0)

    t0 = time.perf_counter()
    try:
        ms = matching.match_bidirectional(dm, None, cfg.target_count, cfg.theta_step)
    except EmptyMatchError as exc:
        timings["match"] = _ms(t0)
        return fail("match", str(exc))
    timings["match"] = _ms(t0)
    if len(ms) < 4:
        return fail("match", f"only {len(ms)} bidirectional matches (need 4)", len(ms))

    centers = features.cell_centers(px.grid)
    src, dst = centers[ms.src], centers[ms.dst]
    t0 = time.perf_counter()
    try:
        h = geometry.ransac_homography(src, dst, cfg.ransac_iters, cfg.ransac_px, cfg.ransac_seed)
    except (NoConsensusError, UnderdeterminedError) as exc:
        timings["ransac"] = _ms(t0)
        return fail("ransac", str(exc), len(ms))
    timings["ransac"] = _ms(t0)

    to_ix = np.linalg.inv(frame_to_resized(ix.width, ix.height, size))
    corners448 = geometry.map_points(h, frame_corners(size, size))
    corners = geometry.map_points(to_ix, corners448)
    try:
        c448 = geometry.map_point(h, ((size - 1) / 2, (size - 1) / 2))
    except AgileRegError as exc:
        return fail("ransac", str(exc), len(ms))
    cx, cy = geometry.map_point(to_ix, c448)
    timings["total"] = _ms(t_start)
    return RegistrationResult(h, corners, (float(cx), float(cy)), ms, src, dst,
                              (ix.width, ix.height), (iy.width, iy.height), timings, size)
