import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from agilereg import evalharness as eh
from agilereg import geometry
from agilereg.errors import ConfigError
from agilereg.imgio import ImageBuffer, downscale_area, save_image
from agilereg.scenes import dead_leaves

from oracles import tpr_scalar


def _corners(w, h):
    return np.array([[-0.5, -0.5], [w - 0.5, -0.5], [w - 0.5, h - 0.5], [-0.5, h - 0.5]])


# --- synthesis ------------------------------------------------------------


def test_crop_scale16_fraction_and_gt():
    src = dead_leaves(512, 1)
    pair = eh.synthesize_pair(eh.PairSpec(None, 16, mode="crop"), src)
    assert pair.iy.shape[:2] == (128, 128) and pair.ix.shape[:2] == (128, 128)
    assert geometry.zoom_factor(pair.gt, (63.5, 63.5)) == pytest.approx(4.0)
    # crop corners land where the crop sits in the downscaled frame
    assert np.allclose(geometry.map_points(pair.gt, _corners(128, 128)),
                       [[47.5, 47.5], [79.5, 47.5], [79.5, 79.5], [47.5, 79.5]])
    assert np.array_equal(pair.iy.data, src.data[192:320, 192:320])


@pytest.mark.parametrize("mode", eh.PAIR_MODES)
@pytest.mark.parametrize("scale", eh.SCALE_RATIOS)
def test_gt_is_consistent_with_source(mode, scale):
    # gt composed with the downscale map (s -> (s + .5)/f - .5) must send iy
    # pixel u to source pixel x0 + u, and iy must be exactly that window
    f = int(np.sqrt(scale))
    n = eh._copy_min_size(f, 2) + 8 if mode == "copy" else 64 * f + 8
    src = dead_leaves(n, scale)
    pair = eh.synthesize_pair(eh.PairSpec(None, scale, mode=mode), src)
    x0, y0 = ((np.array(geometry.map_point(pair.gt, (0, 0))) + 0.5) * f - 0.5)
    assert abs(x0 - round(x0)) < 1e-9 and abs(y0 - round(y0)) < 1e-9
    x0, y0 = int(round(x0)), int(round(y0))
    h, w = pair.iy.shape[:2]
    assert np.array_equal(pair.iy.data, src.data[y0 : y0 + h, x0 : x0 + w])
    ih, iw = pair.ix.shape[:2]
    assert np.allclose(pair.ix.data, downscale_area(ImageBuffer(src.data[: ih * f, : iw * f]), f).data)
    corners = geometry.map_points(pair.gt, _corners(w, h))
    assert corners.min() >= -0.5 - 1e-9
    if mode == "crop":
        assert corners[:, 0].max() <= iw - 0.5 + 1e-9 and corners[:, 1].max() <= ih - 0.5 + 1e-9
    else:
        # the shifted window overhangs ix by exactly two of its 28 cells per axis
        assert corners[:, 0].max() + 0.5 == pytest.approx(iw * 30 / 28)
        assert corners[:, 1].max() + 0.5 == pytest.approx(ih * 30 / 28)
    assert geometry.zoom_factor(pair.gt, ((w - 1) / 2, (h - 1) / 2)) == pytest.approx(f)


def test_copy_mode_shift_is_whole_cells():
    src = dead_leaves(1280, 0)
    pair = eh.synthesize_pair(eh.PairSpec(None, 16, shift_cells=2), src)
    off = geometry.map_point(pair.gt, (-0.5, -0.5))
    cell = pair.ix.width / 28
    assert off[0] + 0.5 == pytest.approx(2 * cell) and off[1] + 0.5 == pytest.approx(2 * cell)


def test_constant_image_identity_wb():
    pair = eh.synthesize_pair(eh.PairSpec(None, 16, mode="crop"), ImageBuffer(np.full((512, 512, 3), 0.3)))
    assert np.all(pair.iy.data == 0.3)


def test_sep0_copies_red():
    src = dead_leaves(512, 2)
    pair = eh.synthesize_pair(eh.PairSpec(None, 16, "sep0", mode="crop"), src)
    d = pair.iy.data
    assert np.array_equal(d[..., 0], d[..., 1]) and np.array_equal(d[..., 0], d[..., 2])
    assert np.array_equal(d[..., 0], src.data[192:320, 192:320, 0])


def test_gain_mode_is_seeded_and_in_range():
    src = dead_leaves(512, 2)
    a = eh.synthesize_pair(eh.PairSpec(None, 16, "gain", 5, mode="crop"), src)
    b = eh.synthesize_pair(eh.PairSpec(None, 16, "gain", 5, mode="crop"), src)
    assert a.gains == b.gains and all(0.5 <= g <= 1.5 for g in a.gains)


def test_too_small_source_names_minimum():
    with pytest.raises(ValueError, match="1024x1024"):
        eh.synthesize_pair(eh.PairSpec(None, 256, mode="crop"), dead_leaves(600, 0))
    with pytest.raises(ValueError, match="need at least"):
        eh.synthesize_pair(eh.PairSpec(None, 64), dead_leaves(520, 0))


def test_scale_must_be_square():
    with pytest.raises(ValueError):
        eh.PairSpec(None, 15).factor


# --- scoring --------------------------------------------------------------


def _gt():
    return np.array([[0.25, 0, 10.0], [0, 0.25, -3.0], [0, 0, 1]])


def test_exact_pairs_score_one(rng):
    src = rng.uniform(0, 400, (40, 2))
    tp, fp = eh.score_matches(src, geometry.map_points(_gt(), src), _gt())
    assert (tp, fp) == (40, 0) and eh.tpr(tp, fp) == 1.0


def test_half_perturbed_scores_half(rng):
    src = rng.uniform(0, 400, (40, 2))
    dst = geometry.map_points(_gt(), src)
    dst[::2] += [50.0, 0.0]
    assert eh.tpr(*eh.score_matches(src, dst, _gt())) == 0.5


@given(st.integers(0, 2**32 - 1))
def test_scoring_matches_scalar_oracle(seed):
    r = np.random.default_rng(seed)
    src = r.uniform(0, 400, (30, 2))
    dst = geometry.map_points(_gt(), src) + r.normal(0, 1, (30, 2)) * r.choice([0.5, 2.0, 10.0], (30, 1))
    got = eh.tpr(*eh.score_matches(src, dst, _gt()))
    assert got == tpr_scalar(src.tolist(), dst.tolist(), _gt().tolist(), 3.0)


@given(st.integers(1, 50), st.integers(0, 50))
def test_injected_bad_pairs(n, k):
    r = np.random.default_rng(n * 100 + k)
    src = r.uniform(0, 400, (n + k, 2))
    dst = geometry.map_points(_gt(), src)
    dst[n:] += 100.0
    tp, fp = eh.score_matches(src, dst, _gt())
    assert eh.tpr(tp, fp) == n / (n + k)


def test_empty_scores_zero():
    assert eh.score_matches(np.zeros((0, 2)), np.zeros((0, 2)), np.eye(3)) == (0, 0)
    assert eh.tpr(0, 0) == 0.0


def test_aggregate_is_tp_pooled():
    rows = [eh.PairRow(0, "a", 16, "none", 0, "ok", 3, 1), eh.PairRow(1, "b", 16, "none", 0, "ok", 1, 3),
            eh.PairRow(2, "c", 16, "none", 0, "failed")]
    (agg,) = eh.EvalReport(rows).aggregates()
    assert agg["TPR"] == 4 / 8
    assert agg["mean_TPR"] == pytest.approx((0.75 + 0.25 + 0.0) / 3)
    assert agg["failed"] == 1


# --- manifest and benchmark -----------------------------------------------


def _write(tmp_path, doc):
    p = tmp_path / "m.json"
    p.write_text(json.dumps(doc))
    return p


@pytest.mark.parametrize("doc,msg", [
    ({"images": []}, "empty manifest"),
    ({"images": ["a.png"], "scales": [15]}, "perfect-square"),
    ({"images": ["a.png"], "wb_modes": ["sepia"]}, "wb mode"),
    ({"images": ["a.png"], "colour": 1}, "unknown fields"),
    ({"images": ["a.png"], "mode": "tile"}, "mode"),
])
def test_manifest_errors(tmp_path, doc, msg):
    with pytest.raises(ConfigError, match=msg):
        eh.Manifest.load(_write(tmp_path, doc))


def test_manifest_pair_order(tmp_path):
    m = eh.Manifest.load(_write(tmp_path, {"images": ["a.png", "b.png"], "scales": [16, 64], "seeds": [0, 1]}))
    specs = [s for _, s in m.pairs()]
    assert len(specs) == 8
    assert [(s.source.endswith("a.png"), s.scale_ratio, s.seed) for s in specs[:4]] == \
        [(True, 16, 0), (True, 16, 1), (True, 64, 0), (True, 64, 1)]


@pytest.fixture(scope="module")
def bench_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("bench")
    save_image(dead_leaves(4096, 11), d / "scene.png")
    (d / "m.json").write_text(json.dumps({"images": ["scene.png", "missing.png"]}))
    return d


def test_run_benchmark_rows_and_determinism(bench_dir, weights42):
    a = eh.run_benchmark(bench_dir / "m.json", weights42, out=bench_dir / "r1", timings=False)
    ok = [r for r in a.rows if r.status != "error"]
    assert len(ok) == 3 and sorted(r.scale for r in ok) == [16, 64, 256]
    assert all(0.0 <= r.tpr <= 1.0 for r in ok)
    errs = [r for r in a.rows if r.status == "error"]
    assert len(errs) == 3 and all("missing.png" in r.error for r in errs)
    eh.run_benchmark(bench_dir / "m.json", weights42, out=bench_dir / "r2", timings=False)
    assert (bench_dir / "r1.csv").read_bytes() == (bench_dir / "r2.csv").read_bytes()
    assert (bench_dir / "r1.json").read_bytes() == (bench_dir / "r2.json").read_bytes()
    assert (bench_dir / "r1.csv").read_text().splitlines()[0] == ",".join(eh.CSV_HEADER)


def test_run_benchmark_records_time(bench_dir, weights42):
    rep = eh.run_benchmark(eh.Manifest([str(bench_dir / "scene.png")], [16]), weights42)
    assert rep.rows[0].time_ms > 0
