"""Multiscale / white-balance benchmark: pair synthesis, TPR scoring, reports."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry
from .errors import ConfigError
from .imgio import ImageBuffer, apply_channel_transform, downscale_area, load_image
from .pipeline import PipelineConfig, Registrar, frame_to_resized

SCALE_RATIOS = (16, 64, 256)
WB_MODES = ("none", "gain", "sep0", "sep1", "sep2")
GAIN_RANGE = (0.5, 1.5)
CSV_HEADER = ["pair", "scale", "wb", "TPR", "TP", "FP", "time_ms"]


PAIR_MODES = ("copy", "crop")


@dataclass(frozen=True)
class PairSpec:
    """One benchmark pair.

    mode="copy": iy and ix cover equal-size windows of the source, ix
    downscaled by f, with iy's window offset by ``shift_cells`` whole grid
    cells so that matching a cell to the same-index cell is wrong.
    mode="crop": iy is the central 1/f crop at full resolution, as a
    narrow-field camera would see it.
    """

    source: str | None
    scale_ratio: int
    wb: str = "none"
    seed: int = 0
    mode: str = "copy"
    shift_cells: int = 2

    @property
    def factor(self) -> int:
        f = math.isqrt(self.scale_ratio)
        if f * f != self.scale_ratio or f < 1:
            raise ValueError(f"scale_ratio must be a perfect square, got {self.scale_ratio}")
        return f


@dataclass(frozen=True, eq=False)
class SyntheticPair:
    ix: ImageBuffer
    iy: ImageBuffer
    gt: geometry.Homography  # iy original pixels -> ix original pixels
    gains: tuple | None = None


def wb_transform(img: ImageBuffer, mode: str, seed: int):
    """Apply a white-balance mode; returns (image, gains or None)."""
    if mode == "none":
        return img, None
    if mode == "gain":
        rng = np.random.default_rng([seed, 0xB1A5])
        gains = tuple(float(g) for g in rng.uniform(*GAIN_RANGE, 3))
        return apply_channel_transform(img, gains, "gain"), gains
    if mode in ("sep0", "sep1", "sep2"):
        return apply_channel_transform(img, mode="separate", channel=int(mode[-1])), None
    raise ValueError(f"unknown white-balance mode {mode!r}; expected one of {WB_MODES}")


def synthesize_pair(spec: PairSpec, source: ImageBuffer | None = None) -> SyntheticPair:
    """Build (wide-field ix, narrow-field iy, ground truth) from one source image.

    ix is always the whole source box-downscaled by f. iy is the full-res
    source ("copy") or its central 1/f x 1/f crop ("crop"); either way the
    pixel-count ratio over the shared region is f**2 = scale_ratio.
    """
    if spec.mode not in PAIR_MODES:
        raise ValueError(f"pair mode must be one of {PAIR_MODES}, got {spec.mode!r}")
    f = spec.factor
    if source is None:
        source = load_image(spec.source)
    if source.channels == 1:
        source = ImageBuffer(np.repeat(source.data, 3, axis=2))
    if spec.mode == "crop":
        w, h = (source.width // f) * f, (source.height // f) * f
        cw, ch = w // f, h // f
        if cw < 64 or ch < 64:
            raise ValueError(
                f"source {source.width}x{source.height} too small for scale ratio {spec.scale_ratio}: "
                f"need at least {64 * f}x{64 * f}"
            )
        src = ImageBuffer(source.data[:h, :w])
        x0, y0 = (w - cw) // 2, (h - ch) // 2
        iy = ImageBuffer(src.data[y0 : y0 + ch, x0 : x0 + cw])
        ix = downscale_area(src, f)
    else:
        (lx, x0), (ly, y0) = (_copy_window(n, f, spec.shift_cells) for n in (source.width, source.height))
        if lx // f < 64 or ly // f < 64:
            need = _copy_min_size(f, spec.shift_cells)
            raise ValueError(
                f"source {source.width}x{source.height} too small for scale ratio {spec.scale_ratio} "
                f"with a {spec.shift_cells}-cell shift: need at least {need}x{need}"
            )
        iy = ImageBuffer(source.data[y0 : y0 + ly, x0 : x0 + lx])
        ix = downscale_area(ImageBuffer(source.data[:ly, :lx]), f)
    iy, gains = wb_transform(iy, spec.wb, spec.seed)
    # iy pixel u -> source x0 + u -> ix (s + 0.5) / f - 0.5
    gt = np.array([[1 / f, 0, (x0 + 0.5) / f - 0.5], [0, 1 / f, (y0 + 0.5) / f - 0.5], [0, 0, 1.0]])
    return SyntheticPair(ix, iy, geometry.Homography(gt), gains)


def _copy_window(n: int, f: int, shift_cells: int, grid: int = 28) -> tuple[int, int]:
    """Largest window side L (a multiple of f and of the grid) with a shift of
    ``shift_cells`` cells, i.e. shift_cells * L / grid source pixels, still inside n."""
    unit = math.lcm(f, grid) if shift_cells else f
    side = (n * grid // (grid + shift_cells)) // unit * unit
    return side, shift_cells * side // grid


def _copy_min_size(f: int, shift_cells: int, grid: int = 28) -> int:
    n = 64 * f
    while _copy_window(n, f, shift_cells, grid)[0] // f < 64:
        n += 1
    return n


def score_matches(src_pts, dst_pts, gt, tol_px: float = 3.0) -> tuple[int, int]:
    """Count pairs whose destination lies within ``tol_px`` of gt(source)."""
    src_pts = np.asarray(src_pts, dtype=np.float64).reshape(-1, 2)
    if len(src_pts) == 0:
        return 0, 0
    err = geometry.transfer_error(gt, src_pts, dst_pts)
    tp = int(np.count_nonzero(err <= tol_px))
    return tp, len(src_pts) - tp


def tpr(tp: int, fp: int) -> float:
    return tp / (tp + fp) if tp + fp else 0.0


def result_points_original(result) -> tuple[np.ndarray, np.ndarray]:
    """Matched cell centers mapped back to each image's original pixel frame."""
    size = result.frame_size
    to_y = np.linalg.inv(frame_to_resized(*result.iy_size, size))
    to_x = np.linalg.inv(frame_to_resized(*result.ix_size, size))
    return geometry.map_points(to_y, result.src_points), geometry.map_points(to_x, result.dst_points)


@dataclass
class PairRow:
    pair: int
    image: str
    scale: int
    wb: str
    seed: int
    status: str  # ok | failed | error
    tp: int = 0
    fp: int = 0
    time_ms: float = 0.0
    stage: str = ""
    error: str = ""

    @property
    def tpr(self) -> float | None:
        if self.status == "error":
            return None
        return tpr(self.tp, self.fp)


def evaluate_pair(pair: SyntheticPair, registrar: Registrar, tol_px: float = 3.0):
    """Register one synthetic pair; returns (tp, fp, time_ms, result)."""
    t0 = time.perf_counter()
    res = registrar.register(pair.ix, pair.iy)
    elapsed = (time.perf_counter() - t0) * 1000.0
    if not res.ok:
        return 0, 0, elapsed, res
    src, dst = result_points_original(res)
    tp, fp = score_matches(src, dst, pair.gt, tol_px)
    return tp, fp, elapsed, res


@dataclass(frozen=True)
class Manifest:
    images: list
    scales: list = field(default_factory=lambda: list(SCALE_RATIOS))
    wb_modes: list = field(default_factory=lambda: ["none"])
    seeds: list = field(default_factory=lambda: [0])
    tol_px: float = 3.0
    mode: str = "copy"
    shift_cells: int = 2

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except OSError as exc:
            raise OSError(f"cannot read manifest {path}: {exc.strerror or exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"manifest {path} is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"manifest {path} must be a JSON object")
        unknown = set(doc) - {"images", "scales", "wb_modes", "seeds", "tol_px", "mode", "shift_cells"}
        if unknown:
            raise ConfigError(f"manifest has unknown fields: {sorted(unknown)}")
        images = doc.get("images") or []
        if not images:
            raise ConfigError("empty manifest: 'images' lists no files")
        base = path.parent
        images = [str(p if Path(p).is_absolute() else base / p) for p in images]
        m = cls(images, list(doc.get("scales", SCALE_RATIOS)), list(doc.get("wb_modes", ["none"])),
                list(doc.get("seeds", [0])), float(doc.get("tol_px", 3.0)), doc.get("mode", "copy"),
                doc.get("shift_cells", 2))
        m.validate()
        return m

    def validate(self) -> None:
        if not self.images:
            raise ConfigError("empty manifest: 'images' lists no files")
        for s in self.scales:
            if not isinstance(s, int) or s < 1 or math.isqrt(s) ** 2 != s:
                raise ConfigError(f"manifest scale {s!r} is not a perfect-square pixel-count ratio")
        for m in self.wb_modes:
            if m not in WB_MODES:
                raise ConfigError(f"manifest wb mode {m!r} not in {WB_MODES}")
        if not self.seeds or not all(isinstance(s, int) for s in self.seeds):
            raise ConfigError("manifest 'seeds' must be a non-empty list of integers")
        if self.mode not in PAIR_MODES:
            raise ConfigError(f"manifest mode {self.mode!r} not in {PAIR_MODES}")
        if not isinstance(self.shift_cells, int) or self.shift_cells < 0:
            raise ConfigError(f"manifest shift_cells must be a non-negative integer, got {self.shift_cells!r}")
        if self.tol_px <= 0:
            raise ConfigError(f"manifest tol_px must be positive, got {self.tol_px}")

    def pairs(self):
        """(index, PairSpec) in manifest order: image, scale, wb mode, seed."""
        k = 0
        for img in self.images:
            for s in self.scales:
                for wb in self.wb_modes:
                    for seed in self.seeds:
                        yield k, PairSpec(img, s, wb, seed, self.mode, self.shift_cells)
                        k += 1


@dataclass
class EvalReport:
    rows: list

    def aggregates(self) -> list[dict]:
        """Per (scale, wb) condition: TP-pooled TPR, mean per-pair TPR, mean time."""
        groups: dict = {}
        for r in self.rows:
            if r.status == "error":
                continue
            groups.setdefault((r.scale, r.wb), []).append(r)
        out = []
        for (scale, wb), rows in sorted(groups.items()):
            tp = sum(r.tp for r in rows)
            fp = sum(r.fp for r in rows)
            out.append({
                "scale": scale, "wb": wb, "pairs": len(rows),
                "TPR": tpr(tp, fp),
                "mean_TPR": float(np.mean([r.tpr for r in rows])),
                "mean_time_ms": float(np.mean([r.time_ms for r in rows])),
                "failed": sum(r.status != "ok" for r in rows),
            })
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            t = r.tpr
            w.writerow([r.pair, r.scale, r.wb, "" if t is None else f"{t:.6f}",
                        r.tp, r.fp, f"{r.time_ms:.3f}"])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "rows": [
                {"pair": r.pair, "image": r.image, "scale": r.scale, "wb": r.wb, "seed": r.seed,
                 "status": r.status, "TPR": r.tpr, "TP": r.tp, "FP": r.fp,
                 "time_ms": round(r.time_ms, 3), "stage": r.stage, "error": r.error}
                for r in self.rows
            ],
            "conditions": self.aggregates(),
        }
        return json.dumps(doc, indent=2) + "\n"


def run_benchmark(manifest, weights, out=None, config: PipelineConfig | None = None,
                  timings: bool = True, sources: dict | None = None) -> EvalReport:
    """Run every manifest pair through the pipeline.

    ``out`` is a path stem: ``<out>.csv`` and ``<out>.json`` are written.
    ``timings=False`` zeroes wall-clock fields so reruns are byte-identical.
    ``sources`` may pre-supply decoded images keyed by path.
    """
    if not isinstance(manifest, Manifest):
        manifest = Manifest.load(manifest)
    manifest.validate()
    registrar = Registrar(weights, config)
    cache = dict(sources or {})
    rows = []
    for k, spec in manifest.pairs():
        row = PairRow(k, spec.source, spec.scale_ratio, spec.wb, spec.seed, "ok")
        try:
            if spec.source not in cache:
                cache[spec.source] = load_image(spec.source)
            pair = synthesize_pair(spec, cache[spec.source])
        except (OSError, ValueError) as exc:
            row.status, row.error = "error", str(exc)
            rows.append(row)
            continue
        tp, fp, ms, res = evaluate_pair(pair, registrar, manifest.tol_px)
        row.tp, row.fp, row.time_ms = tp, fp, (ms if timings else 0.0)
        if not res.ok:
            row.status, row.stage, row.error = "failed", res.stage, res.reason
        rows.append(row)
    report = EvalReport(rows)
    if out is not None:
        out = Path(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        Path(f"{out}.csv").write_text(report.to_csv())
        Path(f"{out}.json").write_text(report.to_json())
    return report
