import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from helpers import random_box, random_image
from xplan.backends import BackendError, MockEditor, MockEmbedder, MockSegmenter, MockVerifier, OutOfRange
from xplan.evaluation import (
    AllRowsFailed,
    BenchmarkCase,
    EmptyList,
    InsufficientPredictions,
    LocalizationConfig,
    LocalizationSample,
    MetricsConfig,
    box_localization_at_k,
    embedding_similarity,
    normalize_mllm_score,
    pixel_distance,
    run_benchmark,
)
from xplan.orchestrator import Backends, PipelineConfig
from xplan.parser import parse_plan
from xplan.plan_ir import DimensionMismatch, ImageBuffer, NormBox


def test_pixel_distance_examples():
    z = ImageBuffer(np.zeros((4, 6, 3), np.uint8))
    f = ImageBuffer(np.full((4, 6, 3), 255, np.uint8))
    assert pixel_distance(z, z) == pixel_distance(f, f)
    assert (pixel_distance(z, z).l1, pixel_distance(z, z).l2) == (0.0, 0.0)
    assert (pixel_distance(z, f).l1, pixel_distance(z, f).l2) == (1.0, 1.0)
    half = np.zeros((4, 6, 3), np.uint8)
    half[:2] = 255
    d = pixel_distance(z, ImageBuffer(half))
    assert (d.l1, d.l2) == (0.5, 0.5)
    with pytest.raises(DimensionMismatch):
        pixel_distance(z, ImageBuffer(np.zeros((4, 5, 3), np.uint8)))


def test_pixel_distance_counting_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, b = random_image(rng, 7, 5), random_image(rng, 7, 5)
        total = sum(abs(int(x) - int(y)) for x, y in zip(a.data.ravel(), b.data.ravel()))
        assert pixel_distance(a, b).l1 == pytest.approx(total / 255 / a.data.size, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 12), st.integers(1, 12))
def test_pixel_distance_metric_like(seed, w, h):
    rng = np.random.default_rng(seed)
    a, b, c = (random_image(rng, w, h) for _ in range(3))
    ab = pixel_distance(a, b).l1
    assert ab == pixel_distance(b, a).l1
    assert 0.0 <= ab <= 1.0
    assert (ab == 0.0) == (a == b)
    assert ab <= pixel_distance(a, c).l1 + pixel_distance(c, b).l1 + 1e-12


def test_cosine_examples():
    v = np.array([0.3, -1.0, 2.0])
    assert embedding_similarity(v, v).value == pytest.approx(1.0)
    assert embedding_similarity(v, -v).value == pytest.approx(-1.0)
    assert embedding_similarity([1, 0], [0, 1]).value == 0.0
    z = embedding_similarity([0, 0], [1, 0])
    assert (z.value, z.degenerate) == (0.0, True)
    with pytest.raises(DimensionMismatch):
        embedding_similarity([1, 0], [1, 0, 0])


@pytest.mark.parametrize(
    "scores, want", [([4, 4, 4], 1.0), ([4], 1.0), ([0], 0.0), ([2, 3], 0.625), ([1, 2, 3, 4], 0.625)]
)
def test_mllm_normalization(scores, want):
    assert normalize_mllm_score(scores) == want


@pytest.mark.parametrize("bad", [[5], [-1], [2.5], [True]])
def test_mllm_out_of_range(bad):
    with pytest.raises(OutOfRange):
        normalize_mllm_score(bad)


def test_mllm_empty():
    with pytest.raises(EmptyList):
        normalize_mllm_score([])


def test_localization_examples():
    gt = NormBox(0.1, 0.1, 0.5, 0.5)
    same = [LocalizationSample(gt, (gt,) * 3)] * 4
    for k in (1, 3):
        r = box_localization_at_k(same, LocalizationConfig(k))
        assert (r.iou_at_k, r.ap50_at_k) == (1.0, 1.0)
    far = [LocalizationSample(gt, (NormBox(0.6, 0.6, 0.9, 0.9),) * 3)]
    r = box_localization_at_k(far, LocalizationConfig(3))
    assert (r.iou_at_k, r.ap50_at_k) == (0.0, 0.0)
    with pytest.raises(InsufficientPredictions) as exc:
        box_localization_at_k([LocalizationSample(gt, (gt,), "s0")], LocalizationConfig(3))
    assert exc.value.sample_id == "s0"
    with pytest.raises(ValueError):
        LocalizationConfig(0)


def test_localization_half_hits():
    gt = NormBox(0.0, 0.0, 1.0, 0.5)
    # IoU 0.6 and 0.2 boxes sharing the gt's top edge: heights 0.3 and 0.1
    hit = NormBox(0.0, 0.0, 1.0, 0.3)
    miss = NormBox(0.0, 0.0, 1.0, 0.1)
    samples = [LocalizationSample(gt, (miss, hit, miss)), LocalizationSample(gt, (miss, miss, miss))] * 5
    r = box_localization_at_k(samples, LocalizationConfig(3))
    assert r.ap50_at_k == 0.5
    assert r.iou_at_k == pytest.approx(0.4)


def test_localization_matches_oracle():
    rng = np.random.default_rng(1)
    for _ in range(50):
        samples = [
            LocalizationSample(random_box(rng, 1e-3), tuple(random_box(rng, 1e-3) for _ in range(5)))
            for _ in range(int(rng.integers(1, 8)))
        ]
        for k in (1, 3, 5):
            got = box_localization_at_k(samples, LocalizationConfig(k))
            iou, ap = oracles.localization_at_k([(s.gt.as_list(), [p.as_list() for p in s.preds]) for s in samples], k)
            assert abs(got.iou_at_k - float(iou)) <= 1e-12 and abs(got.ap50_at_k - float(ap)) <= 1e-12


# -- benchmark runs ------------------------------------------------------------------------


def _cases(n, seed=0):
    rng = np.random.default_rng(seed)
    plan = parse_plan("[remove] Remove the <cup>\n[local color change] Make the <vase> red", "tidy up")
    return [BenchmarkCase(f"case{i}", random_image(rng, 24, 24), plan) for i in range(n)]


def _backends():
    ed = MockEditor()
    return Backends({"default": ed, "inpaint": ed, "global": ed}, MockSegmenter())


def test_benchmark_report_is_deterministic():
    cases = _cases(10)
    metrics = MetricsConfig(embedder=MockEmbedder(), dino_embedder=MockEmbedder(2), judge=MockVerifier())
    r1 = run_benchmark(cases, PipelineConfig(), _backends(), metrics)
    r2 = run_benchmark(cases, PipelineConfig(), _backends(), metrics, jobs=4)
    assert len(r1.rows) == 10
    assert [r.output_digest for r in r1.rows] == [r.output_digest for r in r2.rows]
    assert r1.fingerprint == r2.fingerprint
    agg = r1.aggregate()
    assert agg["l1"] == pytest.approx(math.fsum(r.l1 for r in r1.rows) / 10)
    assert agg["mllm_ti"] == 1.0 and agg["sim_out"] is None
    doc = json.loads(r1.to_json())
    assert doc["schema"] == "report_v1" and doc["n_rows"] == 10
    text = r1.to_text()
    for col in ("L1", "CLIP_im", "CLIP_out", "DINO", "MLLM_ti", "MLLM_im"):
        assert col in text


def test_refined_beats_full_region():
    cases = _cases(10, seed=1)
    refined = run_benchmark(cases, PipelineConfig(), _backends())
    full = run_benchmark(cases, PipelineConfig(region_mode="full"), _backends())
    for a, b in zip(refined.rows, full.rows):
        assert a.l1 < b.l1


class DeadEmbedder:
    def embed(self, image):
        raise BackendError("embedder unreachable")


def test_missing_metric_flagged():
    rep = run_benchmark(_cases(3), PipelineConfig(), _backends(), MetricsConfig(embedder=DeadEmbedder()))
    assert all(r.sim_im is None and r.missing == ["sim_im"] and r.l1 is not None for r in rep.rows)


def test_row_failures():
    good = _cases(2)
    bad = BenchmarkCase("bad", good[0].image, parse_plan("[remove] Remove the <ghost>"))
    ed = MockEditor()
    b = Backends({"default": ed, "inpaint": ed, "global": ed}, MockSegmenter(absent=["ghost"]))
    rep = run_benchmark(good + [bad], PipelineConfig(), b)
    assert [r.failed for r in rep.rows] == [False, False, True]
    assert "MissingMask" in rep.rows[2].error
    with pytest.raises(AllRowsFailed):
        run_benchmark([bad], PipelineConfig(), b)
    with pytest.raises(EmptyList):
        run_benchmark([], PipelineConfig(), b)
