"""Closed-loop tracking simulator.

A static wide-field reference camera sees the whole scene at low resolution;
a gimbal-mounted high-resolution (HR) camera sees a small window at native
resolution. Each step the HR frame is registered into the reference frame and
the observed centre Y drives a proportional correction of the aim.

Units: scene pixels coincide with HR pixels. Reference pixels are scene
pixels scaled by ref_size / scene width (half-pixel centres).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import geometry
from .errors import ConfigError
from .imgio import ImageBuffer, downscale_area, load_image, resize_bilinear

IFOV = 0.45e-3  # radians per HR pixel
TRAJECTORY_KINDS = ("static", "linear", "sine")
CSV_HEADER = ["step", "target_x", "target_y", "aim_x", "aim_y", "y_x", "y_y",
              "error_px", "aim_error_px", "lost", "in_fov"]


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class Trajectory:
    kind: str = "static"
    params: dict = field(default_factory=dict)

    def __call__(self, t: int, center: tuple[float, float]) -> tuple[float, float]:
        p = self.params
        x0, y0 = p.get("x0", p.get("x", center[0])), p.get("y0", p.get("y", center[1]))
        if self.kind == "static":
            return float(x0), float(y0)
        if self.kind == "linear":
            return x0 + p.get("vx", 0.0) * t, y0 + p.get("vy", 0.0) * t
        ph = 2 * math.pi * t / p["period"]
        return x0 + p.get("ax", 0.0) * math.sin(ph), y0 + p.get("ay", 0.0) * math.sin(ph)


@dataclass(frozen=True)
class ScenarioConfig:
    scene: str | dict
    trajectory: Trajectory = field(default_factory=Trajectory)
    vibration_sigma: float = 0.0
    miscalibration: tuple[float, float] = (0.0, 0.0)
    gain: float = 0.7
    steps: int = 100
    seed: int = 0
    hr_size: int = 448
    ref_size: int = 448
    registrar: str = "oracle"
    weights: str | None = None
    weights_seed: int | None = None
    converge_px: float = 1.0
    settle_steps: int = 20

    @classmethod
    def from_dict(cls, doc: dict, base: Path | None = None) -> "ScenarioConfig":
        if not isinstance(doc, dict):
            raise ConfigError("scenario must be a JSON object")
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"scenario has unknown fields: {sorted(unknown)}")
        if "scene" not in doc:
            raise ConfigError("field 'scene': required")
        kw = dict(doc)
        scene = kw["scene"]
        if isinstance(scene, str) and base is not None and not Path(scene).is_absolute():
            kw["scene"] = str(base / scene)
        if isinstance(kw.get("weights"), str) and base is not None and not Path(kw["weights"]).is_absolute():
            kw["weights"] = str(base / kw["weights"])
        traj = kw.get("trajectory", {"kind": "static", "params": {}})
        if not isinstance(traj, dict):
            raise ConfigError("field 'trajectory': must be an object {kind, params}")
        kw["trajectory"] = Trajectory(traj.get("kind", "static"), dict(traj.get("params", {})))
        if "miscalibration" in kw:
            m = kw["miscalibration"]
            if not (isinstance(m, (list, tuple)) and len(m) == 2):
                raise ConfigError("field 'miscalibration': must be [dx, dy]")
            kw["miscalibration"] = (float(m[0]), float(m[1]))
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read scenario {path}: {exc.strerror or exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"scenario {path} is not valid JSON: {exc}") from None
        return cls.from_dict(doc, path.parent)

    def validate(self) -> None:
        """Field-level checks that do not need the scene pixels."""
        if not isinstance(self.scene, (str, dict)):
            raise ConfigError("field 'scene': must be a path or a synthetic scene object")
        if isinstance(self.scene, dict):
            if set(self.scene) - {"kind", "size", "seed"} or self.scene.get("kind", "dead_leaves") != "dead_leaves":
                raise ConfigError("field 'scene': synthetic scenes take {kind: dead_leaves, size, seed}")
            if int(self.scene.get("size", 0)) < self.hr_size:
                raise ConfigError(f"field 'scene.size': must be >= hr_size {self.hr_size}")
        if self.trajectory.kind not in TRAJECTORY_KINDS:
            raise ConfigError(f"field 'trajectory.kind': {self.trajectory.kind!r} not in {TRAJECTORY_KINDS}")
        allowed = {"static": {"x", "y", "x0", "y0"}, "linear": {"x0", "y0", "vx", "vy"},
                   "sine": {"x0", "y0", "ax", "ay", "period"}}[self.trajectory.kind]
        bad = set(self.trajectory.params) - allowed
        if bad:
            raise ConfigError(f"field 'trajectory.params': unknown {sorted(bad)} for kind {self.trajectory.kind!r}")
        if self.trajectory.kind == "sine" and not self.trajectory.params.get("period", 0) > 0:
            raise ConfigError("field 'trajectory.params.period': must be > 0")
        if not 0 < self.gain <= 1:
            raise ConfigError(f"field 'gain': must lie in (0, 1], got {self.gain}")
        if self.vibration_sigma < 0:
            raise ConfigError(f"field 'vibration_sigma': must be >= 0, got {self.vibration_sigma}")
        if not isinstance(self.steps, int) or self.steps < 1:
            raise ConfigError(f"field 'steps': must be a positive integer, got {self.steps!r}")
        if not isinstance(self.seed, int):
            raise ConfigError(f"field 'seed': must be an integer, got {self.seed!r}")
        if self.hr_size < 64 or self.ref_size < 64:
            raise ConfigError("fields 'hr_size' and 'ref_size': must be >= 64")
        if self.registrar not in ("oracle", "pipeline"):
            raise ConfigError(f"field 'registrar': must be 'oracle' or 'pipeline', got {self.registrar!r}")
        if self.converge_px <= 0 or self.settle_steps < 0:
            raise ConfigError("fields 'converge_px' > 0 and 'settle_steps' >= 0 required")


# ---------------------------------------------------------------------------
# scene and gimbal


@dataclass(frozen=True, eq=False)
class SceneModel:
    scene: ImageBuffer
    target_trajectory: Callable[[int], tuple[float, float]]
    vibration_sigma: float = 0.0

    @property
    def size(self) -> tuple[int, int]:
        return self.scene.width, self.scene.height

    def check_trajectory(self, steps: int, hr_size: int) -> None:
        """Every target point must keep a full HR window inside the scene."""
        w, h = self.size
        half = hr_size / 2
        for t in range(steps):
            x, y = self.target_trajectory(t)
            if not (half - 0.5 <= x <= w - half - 0.5 and half - 0.5 <= y <= h - half - 0.5):
                raise ConfigError(
                    f"field 'trajectory': step {t} target ({x:.1f}, {y:.1f}) is closer than "
                    f"{half:g} px to the edge of the {w}x{h} scene")


class Camera:
    """Pixel mapping between the scene and the reference frame."""

    def __init__(self, scene_size: tuple[int, int], ref_size: int):
        self.w, self.h = scene_size
        self.ref_size = ref_size
        self.sx, self.sy = self.w / ref_size, self.h / ref_size

    def to_ref(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        return (p + 0.5) / np.array([self.sx, self.sy]) - 0.5

    def to_scene(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=np.float64)
        return (r + 0.5) * np.array([self.sx, self.sy]) - 0.5


def render_reference(scene: ImageBuffer, ref_size: int) -> ImageBuffer:
    """Wide-field frame: box-integrate by the largest common integer factor, then resample."""
    d = max(1, min(scene.width, scene.height) // ref_size)
    while d > 1 and (scene.width % d or scene.height % d):
        d -= 1
    return resize_bilinear(downscale_area(scene, d), ref_size, ref_size)


def render_hr(scene: ImageBuffer, center, size: int) -> ImageBuffer:
    """Native-resolution window centred on a sub-pixel scene point.

    ``center`` must already be clamped so the window lies inside the scene.
    """
    o = np.asarray(center, dtype=np.float64) - (size - 1) / 2
    xs = o[0] + np.arange(size)
    ys = o[1] + np.arange(size)
    x0 = np.clip(np.floor(xs).astype(np.intp), 0, scene.width - 1)
    y0 = np.clip(np.floor(ys).astype(np.intp), 0, scene.height - 1)
    x1 = np.minimum(x0 + 1, scene.width - 1)
    y1 = np.minimum(y0 + 1, scene.height - 1)
    fx = (xs - x0)[None, :, None]
    fy = (ys - y0)[:, None, None]
    d = scene.data
    r0, r1 = d[y0], d[y1]
    top = r0[:, x0] + (r0[:, x1] - r0[:, x0]) * fx
    bot = r1[:, x0] + (r1[:, x1] - r1[:, x0]) * fx
    return ImageBuffer(top + (bot - top) * fy)


@dataclass
class GimbalState:
    """Pointing in angles relative to the scene centre.

    The calibrated conversion is an affine map reference pixels -> angles;
    ``miscalibration`` (HR px) is the part of the true mapping it misses and
    ``correction`` (reference px) is what the feedback loop has learned.
    """

    conversion: np.ndarray  # 2x3 affine, reference px -> radians
    miscalibration: np.ndarray
    gain: float
    limits: np.ndarray  # [[pan_min, pan_max], [tilt_min, tilt_max]]
    pan: float = 0.0
    tilt: float = 0.0
    correction: np.ndarray = field(default_factory=lambda: np.zeros(2))
    lost: int = 0

    def __post_init__(self):
        if abs(np.linalg.det(self.conversion[:, :2])) == 0:
            raise ConfigError("coordinate conversion is not invertible")

    def command(self, aim_ref) -> np.ndarray:
        return self.conversion[:, :2] @ np.asarray(aim_ref, dtype=np.float64) + self.conversion[:, 2]

    def point(self, angles) -> None:
        self.pan = float(np.clip(angles[0], *self.limits[0]))
        self.tilt = float(np.clip(angles[1], *self.limits[1]))


def calibrated_conversion(cam: Camera, ifov: float = IFOV) -> np.ndarray:
    cx, cy = (cam.w - 1) / 2, (cam.h - 1) / 2
    return np.array([[cam.sx * ifov, 0, (0.5 * cam.sx - 0.5 - cx) * ifov],
                     [0, cam.sy * ifov, (0.5 * cam.sy - 0.5 - cy) * ifov]])


# ---------------------------------------------------------------------------
# registrars


class OracleRegistrar:
    """Reads the true HR centre; separates loop dynamics from registration accuracy."""

    def __call__(self, reference, hr_frame, truth_ref, predicted_ref):
        return np.asarray(truth_ref, dtype=np.float64), ""


class PipelineRegistrar:
    """Real registration, accepted only when the result is physically plausible.

    Checks: enough RANSAC inliers, recovered zoom within ``zoom_tol`` of the
    known camera ratio, and Y within ``gate_px`` (reference px) of the point
    the gimbal was commanded to.
    """

    def __init__(self, registrar, expected_zoom: float, gate_px: float,
                 min_inliers: int = 8, zoom_tol: float = 0.3):
        self.registrar = registrar
        self.expected_zoom = expected_zoom
        self.gate_px = gate_px
        self.min_inliers = min_inliers
        self.zoom_tol = zoom_tol
        self._ref_id = None
        self._ref_desc = None

    def __call__(self, reference, hr_frame, truth_ref, predicted_ref):
        if self._ref_id is not id(reference):
            self._ref_id, self._ref_desc = id(reference), self.registrar.describe(reference)
        res = self.registrar.register(reference, hr_frame(), ix_desc=self._ref_desc)
        if not res.ok:
            return None, f"{res.stage}: {res.reason}"
        if len(res.homography.inliers) < self.min_inliers:
            return None, f"only {len(res.homography.inliers)} inliers"
        try:
            size = res.frame_size
            z = geometry.zoom_factor(res.homography, ((size - 1) / 2, (size - 1) / 2))
        except (ArithmeticError, np.linalg.LinAlgError):
            return None, "degenerate homography"
        if not abs(z / self.expected_zoom - 1) <= self.zoom_tol:
            return None, f"zoom {z:.2f} vs expected {self.expected_zoom:.2f}"
        y = np.asarray(res.center)
        if np.hypot(*(y - predicted_ref)) > self.gate_px:
            return None, "innovation outside gate"
        return y, ""


# ---------------------------------------------------------------------------
# loop


@dataclass(frozen=True)
class FrameRecord:
    step: int
    target: tuple[float, float]  # scene px
    aim: tuple[float, float]  # reference px
    y: tuple[float, float] | None  # observed centre, reference px
    actual: tuple[float, float]  # HR centre, scene px
    error_px: float  # |actual - target|, HR px
    aim_error: tuple[float, float]  # pointing error without this step's vibration, HR px
    lost: bool
    in_fov: bool
    reason: str = ""

    @property
    def aim_error_px(self) -> float:
        return float(np.hypot(*self.aim_error))


@dataclass
class SimState:
    config: ScenarioConfig
    model: SceneModel
    camera: Camera
    gimbal: GimbalState
    reference: ImageBuffer
    rng: np.random.Generator
    t: int = 0


def make_state(cfg: ScenarioConfig, scene: ImageBuffer | None = None) -> SimState:
    """Load the scene, check the trajectory against it and build the initial state."""
    cfg.validate()
    if scene is None:
        scene = load_scene(cfg.scene)
    if scene.width < cfg.hr_size or scene.height < cfg.hr_size:
        raise ConfigError(f"field 'scene': {scene.width}x{scene.height} is smaller than the {cfg.hr_size} px HR window")
    cam = Camera((scene.width, scene.height), cfg.ref_size)
    center = ((scene.width - 1) / 2, (scene.height - 1) / 2)
    model = SceneModel(scene, lambda t: cfg.trajectory(t, center), cfg.vibration_sigma)
    model.check_trajectory(cfg.steps, cfg.hr_size)
    half = (cfg.hr_size - 1) / 2
    # mechanical limits: the HR window may not leave the scene
    limits = np.array([[half - center[0], scene.width - 1 - half - center[0]],
                       [half - center[1], scene.height - 1 - half - center[1]]]) * IFOV
    gimbal = GimbalState(calibrated_conversion(cam), np.asarray(cfg.miscalibration, dtype=np.float64),
                         cfg.gain, limits)
    return SimState(cfg, model, cam, gimbal, render_reference(scene, cfg.ref_size),
                    np.random.default_rng(cfg.seed))


def load_scene(scene) -> ImageBuffer:
    if isinstance(scene, dict):
        from .scenes import dead_leaves

        return dead_leaves(int(scene["size"]), int(scene.get("seed", 0)))
    path = Path(scene)
    if not path.is_file():
        raise ConfigError(f"field 'scene': file not found: {path}")
    try:
        img = load_image(path)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"field 'scene': cannot load {path}: {exc}") from None
    if img.channels == 1:
        img = ImageBuffer(np.repeat(img.data, 3, axis=2))
    return img


def step(state: SimState, registrar) -> FrameRecord:
    """Advance the loop by one frame."""
    cfg, cam, g = state.config, state.camera, state.gimbal
    t = state.t
    target = np.asarray(state.model.target_trajectory(t), dtype=np.float64)
    target_ref = cam.to_ref(target)
    aim = target_ref + g.correction
    noise = state.rng.normal(0.0, 1.0, 2) * state.model.vibration_sigma
    nominal = g.command(aim) + g.miscalibration * IFOV
    g.point(nominal + noise * IFOV)
    center = np.array([(cam.w - 1) / 2, (cam.h - 1) / 2])
    actual = center + np.array([g.pan, g.tilt]) / IFOV
    pointed = center + np.clip(nominal, g.limits[:, 0], g.limits[:, 1]) / IFOV

    def hr_frame():
        return render_hr(state.model.scene, actual, cfg.hr_size)

    y, reason = registrar(state.reference, hr_frame, cam.to_ref(actual), aim)
    lost = y is None
    if lost:
        g.lost += 1
    else:
        g.correction = g.correction + g.gain * (target_ref - y)
    err = actual - target
    state.t += 1
    return FrameRecord(
        t, tuple(target), tuple(aim), None if lost else (float(y[0]), float(y[1])),
        tuple(actual), float(np.hypot(*err)), tuple(pointed - target), lost,
        bool(np.all(np.abs(err) < cfg.hr_size / 2)), reason)


# ---------------------------------------------------------------------------
# reports


@dataclass
class TrajectoryReport:
    records: list
    config: ScenarioConfig

    def summary(self) -> dict:
        err = np.array([r.error_px for r in self.records])
        below = err < self.config.converge_px
        # first step after which every error stays below the threshold
        conv = None
        if below[-1]:
            bad = np.flatnonzero(~below)
            conv = int(bad[-1] + 1) if len(bad) else 0
        settle = min(self.config.settle_steps, len(self.records) - 1)
        ae = np.array([r.aim_error for r in self.records[settle:]])
        return {
            "steps": len(self.records),
            "mean_error_px": float(err.mean()),
            "max_error_px": float(err.max()),
            "final_error_px": float(err[-1]),
            "fraction_in_fov": float(np.mean([r.in_fov for r in self.records])),
            "convergence_step": conv,
            "lost_frames": int(sum(r.lost for r in self.records)),
            "steady_state_aim_rms_px": [float(v) for v in np.sqrt((ae**2).mean(axis=0))],
            "registrar": self.config.registrar,
            "gain": self.config.gain,
            "seed": self.config.seed,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.records:
            y = ("", "") if r.y is None else (f"{r.y[0]:.6f}", f"{r.y[1]:.6f}")
            w.writerow([r.step, f"{r.target[0]:.6f}", f"{r.target[1]:.6f}", f"{r.aim[0]:.6f}",
                        f"{r.aim[1]:.6f}", *y, f"{r.error_px:.6f}", f"{r.aim_error_px:.6f}",
                        int(r.lost), int(r.in_fov)])
        return buf.getvalue()

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=2) + "\n"


def predicted_aim_rms(sigma: float, gain: float) -> float:
    """Stationary per-axis std of u' = (1-K) u - K n with n ~ N(0, sigma^2)."""
    return sigma * gain / math.sqrt(2 * gain - gain * gain)


def build_registrar(cfg: ScenarioConfig, state: SimState, weights=None):
    if cfg.registrar == "oracle":
        return OracleRegistrar()
    from . import nnet
    from .pipeline import Registrar

    if weights is None:
        if cfg.weights is not None:
            weights = nnet.load_weights(cfg.weights)
        elif cfg.weights_seed is not None:
            weights = nnet.init_weights_seeded(nnet.NetworkSpec(), cfg.weights_seed)
        else:
            raise ConfigError("field 'weights': the pipeline registrar needs 'weights' or 'weights_seed'")
    # HR pixels per reference pixel
    zoom = state.camera.sx
    gate = (cfg.hr_size / 2) / state.camera.sx
    return PipelineRegistrar(Registrar(weights), zoom, gate)


def run_scenario(config, registrar=None, out=None, scene: ImageBuffer | None = None,
                 weights=None) -> TrajectoryReport:
    """Run all steps; ``out`` is a path stem for ``<out>.csv`` and ``<out>_summary.json``."""
    cfg = config if isinstance(config, ScenarioConfig) else ScenarioConfig.load(config)
    state = make_state(cfg, scene)
    registrar = registrar or build_registrar(cfg, state, weights)
    records = [step(state, registrar) for _ in range(cfg.steps)]
    report = TrajectoryReport(records, cfg)
    if out is not None:
        out = Path(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        Path(f"{out}.csv").write_text(report.to_csv())
        Path(f"{out}_summary.json").write_text(report.summary_json())
    return report
