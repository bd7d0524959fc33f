import math

import numpy as np
import pytest
from hypothesis import example, given
from hypothesis import strategies as st

from agilereg import matching
from agilereg.errors import EmptyMatchError, ShapeError
from agilereg.features import CornerGate, DescriptorPyramid

from oracles import fused_distance_naive, ratio_match_literal

GRID = (28, 28)


def _pyr(rng, scale=1.0):
    return DescriptorPyramid(rng.random((784, 128)) * scale, rng.random((196, 256)) * scale,
                             rng.random((49, 512)) * scale, GRID)


def _gate(rng, n):
    mask = np.zeros(784, bool)
    mask[rng.choice(784, n, replace=False)] = True
    return CornerGate(mask, np.zeros((0, 2), np.int64), GRID)


def _dm(values):
    n = values.shape[0]
    g = CornerGate(np.ones(n, bool), np.zeros((0, 2), np.int64), (1, n))
    return matching.FusedDistanceMatrix(np.asarray(values, dtype=np.float64), g, g)


# --- fused distance -------------------------------------------------------


def test_self_distance_is_zero(rng):
    p, g = _pyr(rng), _gate(rng, 30)
    dm = matching.fused_distance(p, p, g, g)
    idx = np.flatnonzero(g.mask)
    assert np.all(dm.values[idx, idx] == 0)


def test_unit_component_distances():
    z = np.zeros
    px = DescriptorPyramid(z((784, 128)), z((196, 256)), z((49, 512)), GRID)
    e = lambda n, d: np.eye(1, d).repeat(n, 0)  # noqa: E731
    py = DescriptorPyramid(e(784, 128), e(196, 256), e(49, 512), GRID)
    full = CornerGate.full(GRID)
    dm = matching.fused_distance(px, py, full, full)
    assert abs(dm.values[0, 0] - (2 + math.sqrt(2) + 1)) < 1e-9
    assert np.allclose(dm.values, 2 + math.sqrt(2) + 1, atol=1e-9)


def test_gated_matrix_matches_naive_oracle(rng):
    px, py = _pyr(rng), _pyr(rng)
    gx, gy = _gate(rng, 10), _gate(rng, 10)
    dm = matching.fused_distance(px, py, gx, gy)
    want = fused_distance_naive(px.f1, px.f2, px.f3, py.f1, py.f2, py.f3, gx.mask, gy.mask)
    fin = np.isfinite(want)
    assert np.array_equal(np.isfinite(dm.values), fin)
    assert np.abs(dm.values[fin] - want[fin]).max() < 1e-5
    assert np.all(dm.values[fin] >= 0)


def test_symmetry_exact(rng):
    px, py = _pyr(rng), _pyr(rng)
    gx, gy = _gate(rng, 40), _gate(rng, 50)
    a = matching.fused_distance(px, py, gx, gy).values
    b = matching.fused_distance(py, px, gy, gx).values
    assert np.array_equal(a.T, b)


def test_gate_size_mismatch(rng):
    p = _pyr(rng)
    bad = CornerGate(np.ones(10, bool), np.zeros((0, 2)), GRID)
    with pytest.raises(ShapeError):
        matching.fused_distance(p, p, bad, bad)


# --- one-way matching -----------------------------------------------------


def _theta_matrix(thetas):
    """Rows with dis1 = 1 and dis2 = theta, distinct argmin columns."""
    n = len(thetas)
    v = np.full((n, n + 1), 1000.0)
    for i, t in enumerate(thetas):
        v[i, i] = 1.0
        v[i, n] = t
    g = CornerGate(np.ones(n, bool), np.zeros((0, 2)), (1, n))
    gd = CornerGate(np.ones(n + 1, bool), np.zeros((0, 2)), (1, n + 1))
    return matching.FusedDistanceMatrix(v, g, gd)


def test_hand_trace_three_candidates():
    ms = matching.match_oneway(_theta_matrix([5.0, 3.0, 1.2]), target_count=2)
    assert sorted(ms.theta.tolist()) == [3.0, 5.0]
    assert ms.src.tolist() == [0, 1] and ms.dst.tolist() == [0, 1]
    assert np.all(ms.theta > ms.theta_max_used)


def test_exhaustion_stops_at_theta_floor():
    ms = matching.match_oneway(_theta_matrix([5.0, 3.0, 1.2, 1.0]), target_count=128)
    assert ms.theta_max_used == 1.0
    assert sorted(ms.theta.tolist()) == [1.2, 3.0, 5.0]


def test_self_match_with_guarded_ratio(rng):
    p, g = _pyr(rng), _gate(rng, 60)
    ms = matching.match_oneway(matching.fused_distance(p, p, g, g), target_count=128)
    assert np.array_equal(ms.src, ms.dst)
    assert set(ms.src.tolist()) == set(np.flatnonzero(g.mask).tolist())


def test_empty_match_error():
    with pytest.raises(EmptyMatchError):
        matching.match_oneway(_dm(np.full((3, 3), np.inf)))


@given(st.integers(0, 2**32 - 1), st.integers(1, 40), st.sampled_from([0.01, 0.05, 0.3]))
@example(seed=5, target=2, step=0.01)  # max theta ~4.4e4: millions of literal decrements
def test_oneway_matches_literal_loop(seed, target, step):
    r = np.random.default_rng(seed)
    v = r.random((30, 25)) * 10
    v[r.random(v.shape) < 0.3] = np.inf
    try:
        want, cut = ratio_match_literal(v, target, step)
    except ValueError:
        with pytest.raises(EmptyMatchError):
            matching.match_oneway(_dm(v), target, step)
        return
    ms = matching.match_oneway(_dm(v), target, step)
    assert dict(zip(ms.src.tolist(), ms.dst.tolist())) == {k: d for k, (d, _) in want.items()}
    # the literal loop accumulates one rounding error per decrement; a tiny
    # nearest distance can push max theta to ~1e4 and the step count to ~1e6
    top = max(t for _, t in want.values())
    steps = (top - cut) / step + 1
    assert ms.theta_max_used == pytest.approx(cut, abs=1e-9 + 4 * steps * np.finfo(float).eps * top)


@given(st.integers(0, 2**32 - 1))
def test_monotone_in_target_count(seed):
    r = np.random.default_rng(seed)
    dm = _dm(r.random((40, 40)))
    small = set(matching.match_oneway(dm, 5).pairs())
    large = set(matching.match_oneway(dm, 20).pairs())
    assert small <= large


def test_threshold_steps_closed_form_agrees_with_counting(rng):
    theta = 1 + rng.random(200) * 3
    n = matching.threshold_steps(theta, 50, 0.01)
    cut = theta.max() - n * 0.01
    assert np.count_nonzero(theta > cut) >= 50
    assert np.count_nonzero(theta > theta.max() - (n - 1) * 0.01) < 50


# --- bidirectional --------------------------------------------------------


def test_intersection_semantics():
    mk = lambda pairs, d: matching.MatchSet(  # noqa: E731
        np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs]),
        np.zeros(len(pairs)), np.full(len(pairs), 2.0), 1.5, d)
    a, b, c, dd, e, f = range(6)
    out = matching.intersect(mk([(a, b), (c, dd)], "x->y"), mk([(b, a), (e, f)], "y->x"))
    assert out.pairs() == [(a, b)] and out.direction == "intersected"


def test_identical_pyramids_self_match(rng):
    p, g = _pyr(rng), _gate(rng, 50)
    ms = matching.match_bidirectional(matching.fused_distance(p, p, g, g))
    assert np.array_equal(ms.src, ms.dst) and len(ms) == 50


@given(st.integers(0, 2**32 - 1))
def test_bidirectional_subset_and_swap_invariance(seed):
    r = np.random.default_rng(seed)
    px, py = _pyr(r), _pyr(r)
    gx, gy = _gate(r, 60), _gate(r, 60)
    dm = matching.fused_distance(px, py, gx, gy)
    both = matching.match_bidirectional(dm, target_count=20)
    fwd = matching.match_oneway(dm, 20)
    bwd = matching.match_oneway(dm.T, 20)
    assert set(both.pairs()) <= set(fwd.pairs())
    assert set(both.reversed().pairs()) <= set(bwd.pairs())
    swapped = matching.match_bidirectional(matching.fused_distance(py, px, gy, gx), target_count=20)
    assert set(swapped.reversed().pairs()) == set(both.pairs())
    assert all(gx.mask[s] and gy.mask[d] for s, d in both.pairs())


def test_jsonl_serialization(rng):
    import json

    p, g = _pyr(rng), _gate(rng, 5)
    ms = matching.match_bidirectional(matching.fused_distance(p, p, g, g))
    recs = [json.loads(line) for line in ms.to_jsonl(GRID, GRID).splitlines()]
    assert len(recs) == len(ms)
    assert set(recs[0]) == {"src_cell", "dst_cell", "src_xy", "dst_xy", "distance", "theta"}
