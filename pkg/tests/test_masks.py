import math

import mpmath
import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

import oracles
from helpers import blob_mask, masks, norm_boxes, random_mask
from xplan.masks import (
    EmptyGroundTruth,
    EmptyMask,
    box_iou,
    box_pixel_rect,
    box_to_mask,
    dilate_mask,
    dilation_radius,
    enlarge_small_box,
    full_mask,
    load_mask,
    mask_overlap_metrics,
    mask_to_box,
    save_mask,
    union_masks,
)
from xplan.plan_ir import BinaryMask, DimensionError, DimensionMismatch, NormBox


def _bits(m):
    return m.bits.tolist()


def test_square_dilation_frozen():
    bits = np.zeros((32, 32), bool)
    bits[12:20, 12:20] = True
    # area 64: d_eq = 9.03, 0.1 * d_eq rounds to 1, so a plus-shaped disc
    grown = dilate_mask(BinaryMask(bits), 0.20)
    assert dilation_radius(64, 0.20) == 1
    assert grown.area == 96
    assert _bits(grown) == oracles.dilate(bits.tolist(), 1)


@pytest.mark.parametrize("area", [1, 10, 64, 100, 500, 2000, 4096])
@pytest.mark.parametrize("percent", [0.05, 0.2, 0.5, 1.0])
def test_radius_matches_high_precision(area, percent):
    assert dilation_radius(area, percent) == oracles.radius_for(area, percent)


def test_dilation_matches_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(30):
        w, h = int(rng.integers(4, 40)), int(rng.integers(4, 40))
        m = blob_mask(rng, w, h) if rng.random() < 0.6 else random_mask(rng, w, h, 0.05)
        pct = float(rng.choice([0.1, 0.2, 0.35]))
        r = oracles.radius_for(m.area, pct)
        assert _bits(dilate_mask(m, pct)) == oracles.dilate(_bits(m), r)


def test_dilate_empty_is_empty():
    e = BinaryMask.empty(5, 4)
    assert dilate_mask(e) == e


@settings(max_examples=60, deadline=None)
@given(masks(max_side=20, nonempty=True), st.floats(0.0, 1.0))
def test_dilation_is_extensive(m, pct):
    assert m.issubset(dilate_mask(m, pct))


@settings(max_examples=60, deadline=None)
@given(masks(max_side=20, nonempty=True), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_dilation_monotone_in_percent(m, p, q):
    lo, hi = sorted((p, q))
    assert dilate_mask(m, lo).issubset(dilate_mask(m, hi))


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_union_laws(data):
    a = data.draw(masks(max_side=12))
    b = BinaryMask(np.random.default_rng(data.draw(st.integers(0, 999))).random(a.bits.shape) < 0.4)
    c = BinaryMask(np.random.default_rng(data.draw(st.integers(0, 999))).random(a.bits.shape) < 0.4)
    assert union_masks(a, b) == union_masks(b, a)
    assert union_masks(union_masks(a, b), c) == union_masks(a, union_masks(b, c))
    assert union_masks(a, a) == a
    assert a.issubset(union_masks(a, b)) and b.issubset(union_masks(a, b))


def test_union_dims_checked():
    with pytest.raises(DimensionMismatch):
        union_masks(BinaryMask.empty(3, 3), BinaryMask.empty(4, 3))


def test_full_mask():
    assert full_mask(7, 3).area == 21
    with pytest.raises(DimensionError):
        full_mask(0, 3)


def test_rasterization_matches_exact_rationals():
    rng = np.random.default_rng(11)
    for _ in range(300):
        w, h = int(rng.integers(1, 40)), int(rng.integers(1, 40))
        xs = np.sort(rng.uniform(0, 1, 2))
        ys = np.sort(rng.uniform(0, 1, 2))
        if rng.random() < 0.3:
            xs, ys = np.round(xs * 8) / 8, np.round(ys * 8) / 8
        if xs[1] <= xs[0] or ys[1] <= ys[0]:
            continue
        box = NormBox(xs[0], ys[0], xs[1], ys[1])
        assert _bits(box_to_mask(box, w, h)) == oracles.raster_box(box.as_list(), w, h)


def test_aligned_halves_partition():
    left = box_to_mask(NormBox(0, 0, 0.5, 1), 9, 5)
    right = box_to_mask(NormBox(0.5, 0, 1, 1), 9, 5)
    assert not (left.bits & right.bits).any()
    assert union_masks(left, right) == full_mask(9, 5)


def test_degenerate_box_gets_a_pixel():
    assert box_pixel_rect(NormBox(0.999, 0.999, 1.0, 1.0), 10, 10) == (9, 9, 10, 10)
    assert box_to_mask(NormBox(0.41, 0.41, 0.42, 0.42), 10, 10).area == 1


def test_mask_to_box_round_trip():
    bits = np.zeros((10, 20), bool)
    bits[2:5, 4:15] = True
    box = mask_to_box(BinaryMask(bits))
    assert box == NormBox(0.2, 0.2, 0.75, 0.5)
    assert box_to_mask(box, 20, 10) == BinaryMask(bits)
    with pytest.raises(EmptyMask):
        mask_to_box(BinaryMask.empty(3, 3))


# -- enlargement ---------------------------------------------------------------


def test_enlarge_frozen_example():
    out = enlarge_small_box(NormBox(0.4, 0.4, 0.5, 0.5))
    shift = 0.05 * (math.sqrt(5) - 1)
    assert out.x1 == pytest.approx(0.4 - shift, abs=1e-15)
    assert out.x2 == pytest.approx(0.5 + shift, abs=1e-15)
    assert out.area == pytest.approx(0.05, rel=1e-12)


def test_enlarge_corner_box_slides_inside():
    out = enlarge_small_box(NormBox(0.0, 0.0, 0.01, 0.01))
    assert out.x1 == 0.0 and out.y1 == 0.0
    assert out.area <= 0.05 * (1 + 1e-12)
    assert out.area == pytest.approx(0.05, rel=1e-9)


def test_enlarge_thin_box_cut_to_frame():
    out = enlarge_small_box(NormBox(0.0, 0.45, 1.0, 0.46))
    assert (out.x1, out.x2) == (0.0, 1.0)
    assert out.area == pytest.approx(0.05, rel=1e-12)


def test_enlarge_matches_high_precision():
    rng = np.random.default_rng(5)
    checked = 0
    while checked < 300:
        cx, cy = rng.uniform(0.2, 0.8, 2)
        bw, bh = rng.uniform(0.01, 0.2, 2)
        box = NormBox(cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2)
        if box.area >= 0.05:
            continue
        ref, clamped = oracles.enlarge(box.as_list())
        if clamped:
            continue
        out = enlarge_small_box(box)
        for got, want in zip(out.as_list(), ref):
            assert abs(mpmath.mpf(got) - want) < 1e-14
        checked += 1


@settings(max_examples=300, deadline=None)
@given(norm_boxes(min_side=1e-4))
def test_enlarge_properties(box):
    out = enlarge_small_box(box)
    if box.area >= 0.05:
        assert out == box
        return
    assert out.area == pytest.approx(0.05, abs=1e-9)
    assert enlarge_small_box(out) == out
    # the grown box is never smaller than the input in either direction
    assert out.width >= box.width - 1e-15 and out.height >= box.height - 1e-15


def test_enlarge_argument_checked():
    with pytest.raises(ValueError):
        enlarge_small_box(NormBox(0, 0, 0.1, 0.1), 0.0)


# -- overlap metrics -------------------------------------------------------------


def test_overlap_matches_brute_force():
    rng = np.random.default_rng(9)
    for _ in range(200):
        w, h = int(rng.integers(1, 33)), int(rng.integers(1, 33))
        gt = random_mask(rng, w, h, rng.uniform(0.05, 0.6))
        pred = random_mask(rng, w, h, rng.uniform(0.0, 0.6), nonempty=False)
        got = mask_overlap_metrics(pred, gt)
        iou, prec, rec = oracles.overlap(_bits(pred), _bits(gt))
        assert abs(got.iou - iou) <= 1e-12
        assert abs(got.precision - prec) <= 1e-12
        assert abs(got.recall - rec) <= 1e-12
        assert got.empty_prediction == (pred.area == 0)


def test_overlap_edge_cases():
    gt = full_mask(4, 4)
    m = mask_overlap_metrics(BinaryMask.empty(4, 4), gt)
    assert (m.iou, m.precision, m.recall, m.empty_prediction) == (0.0, 1.0, 0.0, True)
    assert mask_overlap_metrics(gt, gt).iou == 1.0
    with pytest.raises(EmptyGroundTruth):
        mask_overlap_metrics(gt, BinaryMask.empty(4, 4))
    with pytest.raises(DimensionMismatch):
        mask_overlap_metrics(gt, full_mask(4, 5))


@settings(max_examples=200, deadline=None)
@given(norm_boxes(), norm_boxes())
def test_box_iou_properties(a, b):
    v = box_iou(a, b)
    assert 0.0 <= v <= 1.0 + 1e-12
    assert v == pytest.approx(box_iou(b, a), abs=1e-15)
    assert box_iou(a, a) == pytest.approx(1.0)


def test_box_iou_grid_oracle():
    rng = np.random.default_rng(2)
    from helpers import random_box

    for _ in range(300):
        a, b = random_box(rng, 1e-3), random_box(rng, 1e-3)
        assert abs(box_iou(a, b) - float(oracles.box_iou_grid(a.as_list(), b.as_list()))) <= 1e-12


def test_png_round_trip(tmp_path):
    m = random_mask(np.random.default_rng(1), 13, 7)
    save_mask(m, tmp_path / "m.png")
    assert load_mask(tmp_path / "m.png") == m


@given(st.integers(1, 30), st.integers(1, 30))
def test_box_raster_inside_frame(w, h):
    assume(w * h > 0)
    assert box_to_mask(NormBox(0, 0, 1, 1), w, h) == full_mask(w, h)
