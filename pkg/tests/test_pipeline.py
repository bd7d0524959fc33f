import json

import numpy as np
import pytest

from agilereg import geometry, pipeline
from agilereg.imgio import ImageBuffer, resize_bilinear
from agilereg.scenes import dead_leaves


def _mean_reprojection(h, h_true, w, hgt, n=16):
    xs, ys = np.meshgrid(np.linspace(0, w - 1, n), np.linspace(0, hgt - 1, n))
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1)
    return float(np.linalg.norm(geometry.map_points(h, pts) - geometry.map_points(h_true, pts), axis=1).mean())


def test_frame_to_resized_maps_corners_to_corners():
    t = pipeline.frame_to_resized(1000, 500, 448)
    got = geometry.map_points(t, pipeline.frame_corners(1000, 500))
    assert np.allclose(got, pipeline.frame_corners(448, 448))


def test_self_registration(registrar42, scene512):
    res = registrar42.register(scene512, scene512)
    assert res.ok
    assert np.abs(res.original_homography() - np.eye(3)).max() < 1e-3
    assert res.match_count >= 32
    assert np.array_equal(res.src_points, res.dst_points)


def test_roi_is_image_of_frame_corners(registrar42, scene512):
    res = registrar42.register(scene512, scene512)
    want = geometry.map_points(res.original_homography(), pipeline.frame_corners(512, 512))
    assert np.allclose(res.corners, want, atol=1e-6)
    assert res.center == pytest.approx((255.5, 255.5), abs=1e-3)


def test_constant_image_fails_at_harris(registrar42, scene512):
    flat = ImageBuffer(np.full((300, 300, 3), 0.5))
    res = registrar42.register(scene512, flat)
    assert not res.ok and res.stage == "harris"
    assert res.to_report()["status"] == "failed"


def test_small_images_rejected(registrar42, scene512):
    with pytest.raises(ValueError, match="64x64"):
        registrar42.register(scene512, ImageBuffer(np.zeros((63, 100, 3))))


def test_determinism(weights42, scene512):
    iy = ImageBuffer(scene512.data[100:400, 50:450])
    a = pipeline.register(scene512, iy, weights42)
    b = pipeline.register(scene512, iy, weights42)
    assert a.ok == b.ok
    if a.ok:
        assert np.array_equal(a.homography.h, b.homography.h)
        assert a.matches.pairs() == b.matches.pairs()
    assert pipeline.report_json(a, timings=False) == pipeline.report_json(b, timings=False)


def test_report_schema(registrar42, scene512):
    doc = json.loads(pipeline.report_json(registrar42.register(scene512, scene512)))
    assert set(doc) >= {"homography", "roi", "matches", "timings_ms"}
    assert len(doc["homography"]) == 9
    assert len(doc["roi"]["corners"]) == 4 and len(doc["roi"]["center"]) == 2
    assert set(doc["timings_ms"]) == set(pipeline.STAGES)
    assert doc["timings_ms"]["total"] > 0


@pytest.mark.parametrize("kw", [{"harris_k": 0.5}, {"target_count": 0}, {"theta_step": 0}])
def test_config_ranges(kw):
    with pytest.raises(ValueError):
        pipeline.PipelineConfig(**kw)


# The two analytic-ground-truth examples below need scale and rotation
# invariance that seeded (untrained) weights do not have. They are kept as
# faithful checks and are expected to fail; see the decisions ledger.


def test_center_crop_upscaled_recovers_scale_two(registrar42):
    ix = dead_leaves(512, 3)
    iy = resize_bilinear(ImageBuffer(ix.data[128:384, 128:384]), 512, 512)
    res = registrar42.register(ix, iy)
    assert res.ok
    z = geometry.zoom_factor(res.original_homography(), (255.5, 255.5))
    assert z == pytest.approx(2.0, rel=0.02)
    assert np.hypot(res.center[0] - 255.5, res.center[1] - 255.5) <= 3.0


def test_rotation_180_matches_point_reflection(registrar42):
    ix = dead_leaves(448, 5)
    iy = ImageBuffer(ix.data[::-1, ::-1].copy())
    res = registrar42.register(ix, iy)
    assert res.ok
    reflect = np.array([[-1, 0, 447.0], [0, -1, 447.0], [0, 0, 1]])
    assert _mean_reprojection(res.original_homography(), reflect, 448, 448) <= 2.0
