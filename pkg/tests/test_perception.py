import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lanekeep.imagecore import BinaryImage
from lanekeep.perception import (EvenKernel, InsufficientPoints, LanePixelCluster, LanePolynomial, LanesSeen,
                                 NoLanesVisible, PerceptionConfig, RibbonConfig, Side, Split, box_kernel,
                                 column_histogram, convolve_histogram, extract_feedback, find_base_points,
                                 fit_polynomial, ideal_path, process_frame, ribbon_step, sliding_window_track,
                                 track_lane, track_lanes)


def brute_histogram(data, fraction):
    h, w = data.shape
    rows = math.ceil(fraction * h)
    out = [0] * w
    for y in range(h - rows, h):
        for x in range(w):
            out[x] += int(data[y, x])
    return out


def brute_convolve(h, k):
    half = len(k) // 2
    out = []
    for i in range(len(h)):
        acc = 0.0
        for j in range(len(k)):
            idx = i + j - half
            if 0 <= idx < len(h):
                acc += h[idx] * k[j]
        out.append(acc)
    return out


def brute_region_argmax(h, lo, hi):
    best, arg = 0, None
    for i in range(lo, hi):
        if h[i] > best:
            best, arg = h[i], i
    return arg


# --- histogram and convolution -------------------------------------------------

def test_histogram_single_column():
    data = np.zeros((90, 20), dtype=bool)
    data[:, 5] = True
    hist = column_histogram(BinaryImage(data), 1 / 3)
    assert hist[5] == 30 and hist.sum() == 30


def test_histogram_ignores_upper_rows():
    data = np.zeros((90, 20), dtype=bool)
    data[10, 3] = True
    assert not column_histogram(BinaryImage(data)).any()


def test_histogram_random_matches_loop():
    rng = np.random.default_rng(0)
    data = rng.random((90, 120)) < 0.2
    assert column_histogram(BinaryImage(data), 1 / 3).tolist() == brute_histogram(data, 1 / 3)


def test_histogram_rejects_bad_fraction():
    with pytest.raises(ValueError):
        column_histogram(BinaryImage.blank(4, 4), 0.0)


def test_convolve_delta_box():
    h = np.zeros(9)
    h[4] = 1
    assert convolve_histogram(h, [1, 1, 1]).tolist() == [0, 0, 0, 1, 1, 1, 0, 0, 0]


def test_convolve_zero():
    assert not convolve_histogram(np.zeros(12), box_kernel(5)).any()


def test_convolve_even_kernel():
    with pytest.raises(EvenKernel):
        convolve_histogram(np.ones(5), [1, 1])
    with pytest.raises(EvenKernel):
        box_kernel(4)


def test_convolve_gaussian_matches_loop():
    rng = np.random.default_rng(1)
    h = rng.integers(0, 50, 60).astype(float)
    k = np.exp(-0.5 * ((np.arange(9) - 4) / 2.0) ** 2)
    assert np.allclose(convolve_histogram(h, k), brute_convolve(h, k), atol=1e-9)


def test_convolve_asymmetric_kernel_orientation():
    h = np.zeros(7)
    h[3] = 1
    # output[i] = sum_j h[i + j - k] kernel[j]
    assert convolve_histogram(h, [1, 2, 3]).tolist() == [0, 0, 3, 2, 1, 0, 0]


# --- base points ---------------------------------------------------------------

def test_base_points_two_peaks():
    h = np.zeros(400)
    h[100] = h[300] = 30
    bp = find_base_points(h, Split.AT_MIDPOINT)
    assert (bp.left, bp.right) == (100, 300)


def test_base_points_single_peak():
    h = np.zeros(400)
    h[100] = 30
    bp = find_base_points(h, Split.AT_MIDPOINT)
    assert bp.left == 100 and bp.right is None


def test_base_points_global_peak_split():
    h = np.zeros(400)
    h[100], h[200], h[300] = 10, 50, 20
    bp = find_base_points(h, Split.AT_GLOBAL_PEAK)
    assert (bp.left, bp.right) == (100, 300)


def test_base_points_ties_lowest_index():
    h = np.zeros(10)
    h[1] = h[3] = 5
    assert find_base_points(h, Split.AT_MIDPOINT).left == 1


def test_base_points_empty_histogram():
    with pytest.raises(ValueError):
        find_base_points(np.zeros(0))


def test_base_points_random_match_oracle():
    rng = np.random.default_rng(2)
    for _ in range(300):
        w = int(rng.integers(2, 80))
        h = rng.integers(0, 6, w).astype(float)
        h[rng.random(w) < 0.4] = 0
        for split in Split:
            bp = find_base_points(h, split)
            s = (brute_region_argmax(h, 0, w) or 0) if split is Split.AT_GLOBAL_PEAK else w // 2
            if split is Split.AT_GLOBAL_PEAK:
                peak = max(h)
                s = min(i for i in range(w) if h[i] == peak)
                right_lo = s + 1
            else:
                right_lo = s
            assert bp.left == brute_region_argmax(h, 0, s)
            assert bp.right == brute_region_argmax(h, right_lo, w)
            if bp.left is not None and bp.right is not None:
                assert bp.left < s <= bp.right


# --- ribbon tracker ------------------------------------------------------------

def _vertical_line(width=60, height=80, x=30, thickness=3):
    data = np.zeros((height, width), dtype=bool)
    data[:, x - thickness // 2:x + thickness // 2 + 1] = True
    return data


def test_ribbon_config_invariants():
    with pytest.raises(ValueError):
        RibbonConfig(square_half_width=10, back_radius=9)
    with pytest.raises(ValueError):
        RibbonConfig(forward_weight=0.5)
    with pytest.raises(ValueError):
        RibbonConfig(lateral_radius=25)
    with pytest.raises(ValueError):
        RibbonConfig(max_iterations=0)


def test_ribbon_step_vertical_symmetric():
    res = ribbon_step(BinaryImage(_vertical_line()), (30.0, 50.0), RibbonConfig())
    nx, ny = res.next_center
    assert nx == pytest.approx(30.0, abs=1e-12)
    assert ny < 50.0
    assert len(res.captured) == 3 * 13


def test_ribbon_step_blank_terminates():
    res = ribbon_step(BinaryImage.blank(40, 40), (20.0, 20.0), RibbonConfig())
    assert res.next_center is None and len(res.captured) == 0


def _oracle_step(data, center, cfg):
    # exhaustive scan of every pixel
    cx, cy = center
    sw = sx = sy = 0.0
    n = 0
    for y in range(data.shape[0]):
        for x in range(data.shape[1]):
            if not data[y, x]:
                continue
            dx, dy = x - cx, y - cy
            if abs(dx) <= cfg.square_half_width and abs(dy) <= cfg.square_half_width:
                continue
            r = cfg.front_radius if dy < 0 else cfg.back_radius
            if (dx / cfg.lateral_radius) ** 2 + (dy / r) ** 2 > 1:
                continue
            w = cfg.forward_weight if dy < 0 else 1.0
            sw += w
            sx += w * x
            sy += w * y
            n += 1
    if n < cfg.min_ribbon_pixels:
        return None
    mx, my = sx / sw - cx, sy / sw - cy
    d = math.hypot(mx, my)
    if d > cfg.step_cap:
        mx, my = mx * cfg.step_cap / d, my * cfg.step_cap / d
    return cx + mx, cy + my


def test_ribbon_step_curving_right_matches_oracle():
    h, w = 80, 80
    data = np.zeros((h, w), dtype=bool)
    for y in range(h):
        x = 30 + 0.012 * (60 - y) ** 2 if y < 60 else 30
        data[y, int(round(x)) - 1:int(round(x)) + 2] = True
    cfg = RibbonConfig()
    res = ribbon_step(BinaryImage(data), (30.0, 60.0), cfg)
    assert res.next_center[0] > 30.0
    assert res.next_center == pytest.approx(_oracle_step(data, (30.0, 60.0), cfg), abs=1e-9)


def test_ribbon_step_random_matches_oracle():
    rng = np.random.default_rng(4)
    cfg = RibbonConfig(step_cap=5.0)
    for _ in range(40):
        data = rng.random((50, 50)) < 0.1
        c = (float(rng.uniform(5, 45)), float(rng.uniform(5, 45)))
        got = ribbon_step(BinaryImage(data), c, cfg).next_center
        want = _oracle_step(data, c, cfg)
        assert (got is None) == (want is None)
        if got is not None:
            assert got == pytest.approx(want, abs=1e-9)


def test_track_vertical_line_coverage():
    data = _vertical_line(width=100, height=240, x=50)
    cluster = track_lane(BinaryImage(data), 50, RibbonConfig())
    assert len(cluster) >= 0.95 * data.sum()


def test_track_blank_is_empty():
    assert len(track_lane(BinaryImage.blank(50, 50), 25, RibbonConfig())) == 0


def test_track_base_out_of_range():
    with pytest.raises(ValueError):
        track_lane(BinaryImage.blank(50, 50), 50, RibbonConfig())


@settings(max_examples=40, deadline=None)
@given(arrays(bool, (60, 70), elements=st.booleans()), st.integers(0, 69))
def test_track_terminates_and_points_are_true(data, base):
    cfg = RibbonConfig(max_iterations=15)
    cluster = track_lane(BinaryImage(data), base, cfg)
    pts = cluster.points
    assert np.all(data[pts[:, 1], pts[:, 0]]) if len(pts) else True
    assert len(np.unique(pts, axis=0)) == len(pts)


def test_track_lanes_disjoint_with_claim_mask():
    data = np.zeros((120, 60), dtype=bool)
    data[:, 28:33] = True  # one line that both bases sit next to
    img = BinaryImage(data)
    from lanekeep.perception import BasePoints
    left, right = track_lanes(img, BasePoints(29, 31), RibbonConfig())
    lset = {tuple(p) for p in left.points}
    rset = {tuple(p) for p in right.points}
    assert lset and not (lset & rset)


# --- sliding window ------------------------------------------------------------

def test_sliding_vertical_line():
    data = _vertical_line(width=100, height=90, x=50)
    cluster = sliding_window_track(BinaryImage(data), 50, (30, 10), 9)
    assert len(cluster) == data.sum()


def test_sliding_exits_side_captures_nothing_above():
    h, w = 90, 100
    data = np.zeros((h, w), dtype=bool)
    for y in range(45, h):
        x = 50 + (90 - y) * 2
        if x < w:
            data[y, x - 1:x + 2] = True
    # above row 45 the line has left the image: nothing to take
    cluster = sliding_window_track(BinaryImage(data), 50, (20, 10), 9)
    assert np.all(cluster.points[:, 1] >= 45)


def _window_oracle(data, base, win_w, n):
    h, w = data.shape
    strip = -(-h // n)
    xc = float(base)
    taken = set()
    for i in range(n):
        y_hi = h - i * strip
        y_lo = max(0, y_hi - strip)
        if y_hi <= 0:
            break
        x_lo = max(0, math.ceil(xc - win_w / 2))
        x_hi = min(w, math.ceil(xc + win_w / 2))
        got = [(x, y) for y in range(y_lo, y_hi) for x in range(x_lo, x_hi) if data[y, x]]
        if got:
            taken.update(got)
            xc = sum(p[0] for p in got) / len(got)
    return taken


def test_sliding_s_curve_matches_recurrence():
    h, w = 120, 120
    data = np.zeros((h, w), dtype=bool)
    for y in range(h):
        x = int(round(60 + 15 * math.sin(y / 25.0)))
        data[y, x - 1:x + 2] = True
    cluster = sliding_window_track(BinaryImage(data), 60, (24, 12), 10)
    assert {tuple(p) for p in cluster.points.tolist()} == _window_oracle(data, 60, 24, 10)


# --- fitting -------------------------------------------------------------------

def _cluster(xs, ys, side=Side.LEFT):
    return LanePixelCluster(np.column_stack([xs, ys]), side)


def test_fit_exact_quadratic():
    ys = np.arange(0, 200, 7, dtype=float)
    xs = 0.001 * ys ** 2 + 0.2 * ys + 50
    # float points: fit through unrounded samples
    poly = fit_polynomial(LanePixelCluster(np.column_stack([xs, ys]), Side.LEFT))
    assert poly.coefficients == pytest.approx((50, 0.2, 0.001), abs=1e-9)


def test_fit_insufficient():
    with pytest.raises(InsufficientPoints):
        fit_polynomial(_cluster([1, 2], [3, 4]))
    with pytest.raises(InsufficientPoints):
        fit_polynomial(_cluster([1, 2, 3, 4], [3, 3, 4, 4]))


def test_fit_matches_normal_equations_and_is_local_min():
    rng = np.random.default_rng(6)
    ys = rng.integers(0, 240, 200).astype(float)
    xs = 0.002 * (ys - 100) ** 2 + 120 + rng.normal(0, 3, 200)
    poly = fit_polynomial(LanePixelCluster(np.column_stack([xs, ys]), Side.RIGHT))
    a = np.column_stack([np.ones_like(ys), ys, ys ** 2])
    coef = np.linalg.solve(a.T @ a, a.T @ xs)

    def rss(c):
        return float(np.sum((a @ np.asarray(c) - xs) ** 2))

    assert rss(poly.coefficients) == pytest.approx(rss(coef), rel=1e-6)
    base = rss(poly.coefficients)
    for _ in range(100):
        pert = np.asarray(poly.coefficients) + rng.normal(0, 1e-3, 3) * np.array([1, 1e-2, 1e-4])
        assert rss(pert) >= base - 1e-9


# --- ideal path and feedback ---------------------------------------------------

def test_ideal_mean_and_bias():
    left = LanePolynomial((100.0, 0.0, 0.0), (0.0, 239.0))
    right = LanePolynomial((300.0, 0.0, 0.0), (0.0, 239.0))
    assert ideal_path(left, right, 200)(50) == pytest.approx(200)
    assert ideal_path(left, None, 200)(50) == pytest.approx(200)
    assert ideal_path(None, right, 200)(50) == pytest.approx(200)
    with pytest.raises(NoLanesVisible):
        ideal_path(None, None, 200)


def test_ideal_linearity_random():
    rng = np.random.default_rng(7)
    for _ in range(100):
        lc = tuple(rng.normal(0, [50, 1, 0.01]) + [100, 0, 0])
        rc = tuple(rng.normal(0, [50, 1, 0.01]) + [300, 0, 0])
        left, right = LanePolynomial(lc, (0.0, 239.0)), LanePolynomial(rc, (0.0, 239.0))
        ideal = ideal_path(left, right, 160)
        for y in np.linspace(0, 239, 13):
            assert ideal(y) == pytest.approx((left(y) + right(y)) / 2, abs=1e-9)


def test_feedback_centered_straight():
    fb = extract_feedback(LanePolynomial((200.0, 0.0, 0.0), (0.0, 239.0)), 400)
    assert fb.distance_error == 0 and fb.angle_error_alpha == 0


def test_feedback_slope_minus_45():
    # x(y) = y shifted so the bottom point sits at the frame center
    fb = extract_feedback(LanePolynomial((200.0 - 239.0, 1.0, 0.0), (0.0, 239.0)), 400)
    assert fb.distance_error == pytest.approx(0.0)
    assert fb.angle_error_alpha == pytest.approx(-45.0)


def test_feedback_random_finite_difference():
    rng = np.random.default_rng(8)
    for _ in range(200):
        c = (float(rng.uniform(0, 400)), float(rng.normal(0, 0.5)), float(rng.normal(0, 0.004)))
        poly = LanePolynomial(c, (0.0, 239.0))
        fb = extract_feedback(poly, 400)
        yb, hstep = 239.0, 0.01
        fd = (poly(yb + hstep) - poly(yb - hstep)) / (2 * hstep)
        assert poly.slope(yb) == pytest.approx(fd, abs=1e-4)
        want = max(-85.0, min(85.0, math.degrees(math.atan(-fd))))
        assert fb.angle_error_alpha == pytest.approx(want, abs=1e-4)
        assert abs(fb.angle_error_alpha) <= 85.0


def test_feedback_alpha_clamped():
    fb = extract_feedback(LanePolynomial((0.0, -1e6, 0.0), (0.0, 239.0)), 400)
    assert fb.angle_error_alpha == pytest.approx(85.0)


def test_polynomial_validation():
    with pytest.raises(ValueError):
        LanePolynomial((math.nan, 0.0, 0.0), (0.0, 1.0))
    with pytest.raises(ValueError):
        LanePolynomial((0.0, 0.0, 0.0), (5.0, 1.0))


# --- full pipeline -------------------------------------------------------------

def _two_lane_frame(left=120, right=280, width=400, height=240):
    data = np.zeros((height, width), dtype=bool)
    data[:, left - 4:left + 5] = True
    data[:, right - 4:right + 5] = True
    return BinaryImage(data)


def test_process_frame_centered():
    res = process_frame(_two_lane_frame())
    assert res.feedback.lanes_seen is LanesSeen.BOTH
    assert abs(res.feedback.distance_error) <= 1.0
    assert abs(res.feedback.angle_error_alpha) <= 1.0
    assert res.ideal.valid_y_range[1] == 239.0


def test_process_frame_one_lane():
    data = _two_lane_frame().data.copy()
    data[:, 200:] = False
    res = process_frame(BinaryImage(data), PerceptionConfig(lane_width_px=160))
    assert res.feedback.lanes_seen is LanesSeen.LEFT_ONLY
    assert abs(res.feedback.distance_error) <= 1.0


def test_process_frame_blank():
    with pytest.raises(NoLanesVisible):
        process_frame(BinaryImage.blank(400, 240))


def test_process_frame_clusters_are_true_pixels():
    rng = np.random.default_rng(9)
    data = _two_lane_frame().data | (rng.random((240, 400)) < 0.01)
    res = process_frame(BinaryImage(data))
    for c in (res.left, res.right):
        assert np.all(data[c.points[:, 1], c.points[:, 0]])
