"""Homography estimation (normalized DLT + RANSAC), point mapping and warping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateError, NoConsensusError, PointAtInfinityError, UnderdeterminedError
from .imgio import ImageBuffer

RANK_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class Homography:
    h: np.ndarray
    inliers: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))
    mean_reproj_error: float = 0.0

    def __post_init__(self):
        h = np.asarray(self.h, dtype=np.float64).reshape(3, 3)
        if h[2, 2] != 0:
            h = h / h[2, 2]
        object.__setattr__(self, "h", h)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.h))

    def compose(self, other: "Homography") -> "Homography":
        """self after other."""
        return Homography(self.h @ other.h)

    def tolist(self) -> list[float]:
        return [float(v) for v in self.h.ravel()]


def normalize_points(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Similarity taking points to centroid 0 and RMS radius sqrt(2)."""
    c = pts.mean(axis=0)
    rms = np.sqrt(((pts - c) ** 2).sum(axis=1).mean())
    if rms == 0:
        raise DegenerateError("all points coincide")
    s = np.sqrt(2.0) / rms
    t = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])
    return (pts - c) * s, t


def _dlt_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """2N x 9 design matrix for q ~ H p; works on leading batch dims."""
    x, y = p[..., 0], p[..., 1]
    u, v = q[..., 0], q[..., 1]
    one, zero = np.ones_like(x), np.zeros_like(x)
    r1 = np.stack([x, y, one, zero, zero, zero, -u * x, -u * y, -u], axis=-1)
    r2 = np.stack([zero, zero, zero, x, y, one, -v * x, -v * y, -v], axis=-1)
    return np.concatenate([r1, r2], axis=-2)


def _collinear(pts: np.ndarray) -> bool:
    s = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)
    return s[-1] <= RANK_TOL * max(s[0], 1.0)


def estimate_dlt(src, dst) -> Homography:
    """Least-squares homography mapping ``src`` onto ``dst`` (Hartley-normalized DLT)."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if len(src) != len(dst):
        raise ValueError(f"{len(src)} source points vs {len(dst)} destination points")
    if len(src) < 4:
        raise UnderdeterminedError(f"homography needs at least 4 correspondences, got {len(src)}")
    pn, tp = normalize_points(src)
    qn, tq = normalize_points(dst)
    if _collinear(pn) or _collinear(qn):
        raise DegenerateError("correspondences are collinear")
    a = _dlt_rows(pn, qn)
    _, s, vt = np.linalg.svd(a)
    if len(s) < 8 or s[7] <= RANK_TOL * s[0]:
        raise DegenerateError("DLT system has rank < 8")
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.inv(tq) @ hn @ tp
    if h[2, 2] == 0 or abs(np.linalg.det(h)) < 1e-300:
        raise DegenerateError("estimated homography is singular")
    return Homography(h)


def map_points(h, pts) -> np.ndarray:
    """Projective map of an (N, 2) array; no denominator check."""
    hm = h.h if isinstance(h, Homography) else np.asarray(h, dtype=np.float64)
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    w = hm[2, 0] * pts[:, 0] + hm[2, 1] * pts[:, 1] + hm[2, 2]
    x = (hm[0, 0] * pts[:, 0] + hm[0, 1] * pts[:, 1] + hm[0, 2]) / w
    y = (hm[1, 0] * pts[:, 0] + hm[1, 1] * pts[:, 1] + hm[1, 2]) / w
    return np.stack([x, y], axis=1)


def map_point(h, p) -> tuple[float, float]:
    hm = h.h if isinstance(h, Homography) else np.asarray(h, dtype=np.float64)
    x, y = float(p[0]), float(p[1])
    w = hm[2, 0] * x + hm[2, 1] * y + hm[2, 2]
    scale = abs(hm[2, 0] * x) + abs(hm[2, 1] * y) + abs(hm[2, 2])
    if abs(w) <= 1e-12 * max(scale, 1e-300):
        raise PointAtInfinityError(f"point ({x}, {y}) maps to infinity")
    return (
        (hm[0, 0] * x + hm[0, 1] * y + hm[0, 2]) / w,
        (hm[1, 0] * x + hm[1, 1] * y + hm[1, 2]) / w,
    )


def transfer_error(h, src, dst) -> np.ndarray:
    """Forward transfer distance |H src - dst| per correspondence."""
    with np.errstate(divide="ignore", invalid="ignore"):
        err = np.linalg.norm(map_points(h, src) - np.asarray(dst, dtype=np.float64), axis=1)
    return np.where(np.isfinite(err), err, np.inf)


def _minimal_models(src: np.ndarray, dst: np.ndarray, samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batch-fit a homography to every 4-point sample; returns (models, ok)."""
    p, q = src[samples], dst[samples]  # (k, 4, 2)
    cp, cq = p.mean(axis=1, keepdims=True), q.mean(axis=1, keepdims=True)
    rp = np.sqrt(((p - cp) ** 2).sum(axis=2).mean(axis=1))
    rq = np.sqrt(((q - cq) ** 2).sum(axis=2).mean(axis=1))
    ok = (rp > 0) & (rq > 0)
    sp = np.where(ok, np.sqrt(2.0) / np.where(rp > 0, rp, 1.0), 1.0)
    sq = np.where(ok, np.sqrt(2.0) / np.where(rq > 0, rq, 1.0), 1.0)
    pn = (p - cp) * sp[:, None, None]
    qn = (q - cq) * sq[:, None, None]
    _, s, vt = np.linalg.svd(_dlt_rows(pn, qn))
    ok &= s[:, 7] > 1e-8 * s[:, 0]
    hn = vt[:, -1].reshape(-1, 3, 3)
    k = len(samples)
    tp = np.zeros((k, 3, 3))
    tp[:, 0, 0] = tp[:, 1, 1] = sp
    tp[:, :2, 2] = -cp[:, 0] * sp[:, None]
    tp[:, 2, 2] = 1
    tq_inv = np.zeros((k, 3, 3))
    tq_inv[:, 0, 0] = tq_inv[:, 1, 1] = 1 / sq
    tq_inv[:, :2, 2] = cq[:, 0]
    tq_inv[:, 2, 2] = 1
    h = tq_inv @ hn @ tp
    det = np.linalg.det(h)
    ok &= np.isfinite(det) & (np.abs(det) > 1e-12 * np.abs(h).max(axis=(1, 2)) ** 3)
    return h, ok


def ransac_homography(src, dst, iters: int = 2000, inlier_px: float = 3.0, seed: int = 0,
                      batch: int = 500) -> Homography:
    """Seeded RANSAC over minimal 4-point samples, refit on the best consensus.

    Ties on consensus size keep the lowest iteration index.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    n = len(src)
    if n < 4:
        raise UnderdeterminedError(f"RANSAC needs at least 4 correspondences, got {n}")
    rng = np.random.default_rng(seed)
    best_count, best_mask = 0, None
    done = 0
    while done < iters:
        k = min(batch, iters - done)
        samples = np.argsort(rng.random((k, n)), axis=1)[:, :4]
        models, ok = _minimal_models(src, dst, samples)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            w = models[:, 2, 0, None] * src[:, 0] + models[:, 2, 1, None] * src[:, 1] + models[:, 2, 2, None]
            x = (models[:, 0, 0, None] * src[:, 0] + models[:, 0, 1, None] * src[:, 1] + models[:, 0, 2, None]) / w
            y = (models[:, 1, 0, None] * src[:, 0] + models[:, 1, 1, None] * src[:, 1] + models[:, 1, 2, None]) / w
            err = np.hypot(x - dst[:, 0], y - dst[:, 1])
        inl = (err < inlier_px) & ok[:, None]
        counts = inl.sum(axis=1)
        i = int(np.argmax(counts))
        if counts[i] > best_count:
            best_count, best_mask = int(counts[i]), inl[i]
        done += k
    if best_count < 4:
        raise NoConsensusError(f"no model reached 4 inliers (best {best_count}) in {iters} iterations")
    idx = np.flatnonzero(best_mask)
    try:
        refit = estimate_dlt(src[idx], dst[idx])
    except (DegenerateError, UnderdeterminedError) as exc:
        raise NoConsensusError(f"consensus set is degenerate: {exc}") from exc
    err = transfer_error(refit, src, dst)
    refit_idx = np.flatnonzero(err < inlier_px)
    if len(refit_idx) >= 4:
        idx = refit_idx
    return Homography(refit.h, idx, float(err[idx].mean()))


def warp_image(img: ImageBuffer, h, out_w: int, out_h: int) -> ImageBuffer:
    """Inverse-mapping bilinear warp; ``h`` maps input pixels to output pixels."""
    hm = h.h if isinstance(h, Homography) else np.asarray(h, dtype=np.float64)
    hinv = np.linalg.inv(hm)
    ys, xs = np.mgrid[0:out_h, 0:out_w]
    src = map_points(hinv, np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64))
    sx, sy = src[:, 0], src[:, 1]
    eps = 1e-9
    valid = (sx >= -eps) & (sx <= img.width - 1 + eps) & (sy >= -eps) & (sy <= img.height - 1 + eps)
    sx = np.clip(np.where(valid, sx, 0.0), 0, img.width - 1)
    sy = np.clip(np.where(valid, sy, 0.0), 0, img.height - 1)
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    x1 = np.minimum(x0 + 1, img.width - 1)
    y1 = np.minimum(y0 + 1, img.height - 1)
    fx = (sx - x0)[:, None]
    fy = (sy - y0)[:, None]
    d = img.data
    top = d[y0, x0] + (d[y0, x1] - d[y0, x0]) * fx
    bot = d[y1, x0] + (d[y1, x1] - d[y1, x0]) * fx
    out = top + (bot - top) * fy
    out[~valid] = 0.0
    return ImageBuffer(out.reshape(out_h, out_w, img.channels))


def zoom_factor(h, at=(0.0, 0.0)) -> float:
    """Linear magnification of the source frame relative to the destination.

    For a homography taking a narrow-field image into a wide-field one this
    is the scale difference (about 4 for a 4x crop), read from the local
    Jacobian at source point ``at``.
    """
    hm = h.h if isinstance(h, Homography) else np.asarray(h, dtype=np.float64)
    p = np.asarray(at, dtype=np.float64)
    w = hm[2, :2] @ p + hm[2, 2]
    q = (hm[:2, :2] @ p + hm[:2, 2]) / w
    jac = (hm[:2, :2] - np.outer(q, hm[2, :2])) / w
    return float(1.0 / np.sqrt(abs(np.linalg.det(jac))))
