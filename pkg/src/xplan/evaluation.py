"""Evaluation: pixel distances, embedding similarity, MLLM score
normalization, box localization at K and benchmark reports."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from xplan.backends import BackendError, Embedder, OutOfRange, Verifier
from xplan.masks import box_iou
from xplan.orchestrator import Backends, PipelineConfig, StepFailed, execute_plan
from xplan.plan_ir import DimensionMismatch, ImageBuffer, NormBox, Plan

logger = logging.getLogger(__name__)

REPORT_SCHEMA = "report_v1"
METRIC_COLUMNS = ("l1", "sim_im", "sim_out", "dino_like", "mllm_ti", "mllm_im")
COLUMN_TITLES = {
    "l1": "L1",
    "sim_im": "CLIP_im",
    "sim_out": "CLIP_out",
    "dino_like": "DINO",
    "mllm_ti": "MLLM_ti",
    "mllm_im": "MLLM_im",
}


class EmptyList(ValueError):
    pass


class InsufficientPredictions(ValueError):
    def __init__(self, sample_id):
        self.sample_id = sample_id
        super().__init__(f"sample {sample_id!r} has fewer predictions than K")


class AllRowsFailed(RuntimeError):
    pass


# float IoU of an exact 0.5 overlap can land a few ulps low; treat it as a hit
_IOU_TIE_EPS = 1e-12


@dataclass(frozen=True)
class PixelDistance:
    l1: float
    l2: float


def pixel_distance(a: ImageBuffer, b: ImageBuffer) -> PixelDistance:
    """Mean absolute and mean squared difference over every channel sample,
    with samples scaled to [0, 1]."""
    if a.dims != b.dims:
        raise DimensionMismatch(f"{a.dims} vs {b.dims}")
    diff = (a.data.astype(np.float64) - b.data.astype(np.float64)) / 255.0
    return PixelDistance(float(np.mean(np.abs(diff))), float(np.mean(diff * diff)))


@dataclass(frozen=True)
class Cosine:
    value: float
    degenerate: bool = False


def embedding_similarity(va, vb) -> Cosine:
    """Cosine similarity; a zero vector on either side gives 0 and is flagged."""
    va = np.asarray(va, dtype=np.float64)
    vb = np.asarray(vb, dtype=np.float64)
    if va.shape != vb.shape:
        raise DimensionMismatch(f"embedding shapes differ: {va.shape} vs {vb.shape}")
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        return Cosine(0.0, degenerate=True)
    return Cosine(float(np.clip(np.dot(va, vb) / (na * nb), -1.0, 1.0)))


def normalize_mllm_score(scores: Sequence[int]) -> float:
    """Mean of 0..4 judge scores as a fraction of the maximum score 4."""
    if len(scores) == 0:
        raise EmptyList("no scores to normalize")
    for s in scores:
        if isinstance(s, bool) or int(s) != s or not 0 <= s <= 4:
            raise OutOfRange(f"score {s!r} outside 0..4")
    return sum(scores) / (4 * len(scores))


# -- localization -------------------------------------------------------------------


@dataclass(frozen=True)
class LocalizationConfig:
    k: int = 1
    iou_threshold: float = 0.5

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"K must be >= 1, got {self.k}")
        if not 0.0 < self.iou_threshold < 1.0:
            raise ValueError(f"IoU threshold must lie in (0, 1), got {self.iou_threshold}")


@dataclass(frozen=True)
class LocalizationSample:
    gt: NormBox
    preds: tuple[NormBox, ...]
    sample_id: object = None


@dataclass(frozen=True)
class LocalizationResult:
    iou_at_k: float
    ap50_at_k: float
    k: int
    n_samples: int


def box_localization_at_k(
    samples: Sequence[LocalizationSample], cfg: LocalizationConfig = LocalizationConfig()
) -> LocalizationResult:
    """Best-of-K IoU per sample over the first K predictions; mean IoU and
    hit rate at the IoU threshold.  Predictions carry no confidence, so the
    hit rate stands in for AP."""
    if not samples:
        raise EmptyList("no localization samples")
    best = []
    for i, s in enumerate(samples):
        if len(s.preds) < cfg.k:
            raise InsufficientPredictions(s.sample_id if s.sample_id is not None else i)
        best.append(max(box_iou(p, s.gt) for p in s.preds[: cfg.k]))
    hits = sum(1 for b in best if b >= cfg.iou_threshold - _IOU_TIE_EPS)
    return LocalizationResult(math.fsum(best) / len(best), hits / len(best), cfg.k, len(best))


# -- benchmark ----------------------------------------------------------------------


@dataclass(frozen=True)
class BenchmarkCase:
    case_id: str
    image: ImageBuffer
    plan: Plan


@dataclass
class MetricsConfig:
    """Optional metric services; a missing service leaves its column null."""

    embedder: Optional[Embedder] = None
    dino_embedder: Optional[Embedder] = None
    text_image_scorer: Optional[Callable[[ImageBuffer, str], float]] = None
    judge: Optional[Verifier] = None
    image_judge_instruction: str = "Keep the image identical to the source."

    def describe(self) -> dict:
        return {
            "embedder": type(self.embedder).__name__ if self.embedder else None,
            "dino_embedder": type(self.dino_embedder).__name__ if self.dino_embedder else None,
            "text_image_scorer": bool(self.text_image_scorer),
            "judge": type(self.judge).__name__ if self.judge else None,
            "image_judge_instruction": self.image_judge_instruction,
        }


@dataclass
class MetricRow:
    case_id: str
    l1: Optional[float] = None
    l2: Optional[float] = None
    sim_im: Optional[float] = None
    sim_out: Optional[float] = None
    dino_like: Optional[float] = None
    mllm_ti: Optional[float] = None
    mllm_im: Optional[float] = None
    output_digest: Optional[str] = None
    trace_digest: Optional[str] = None
    missing: list[str] = field(default_factory=list)
    error: Optional[str] = None

    @property
    def failed(self) -> bool:
        return self.error is not None


@dataclass
class MetricReport:
    rows: list[MetricRow]
    fingerprint: str
    config: dict

    def aggregate(self) -> dict[str, Optional[float]]:
        """Arithmetic mean of each metric over rows where it is present."""
        out = {}
        for name in ("l1", "l2", *METRIC_COLUMNS[1:]):
            vals = [getattr(r, name) for r in self.rows if getattr(r, name) is not None]
            out[name] = math.fsum(vals) / len(vals) if vals else None
        return out

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "fingerprint": self.fingerprint,
            "config": self.config,
            "rows": [asdict(r) for r in self.rows],
            "aggregate": self.aggregate(),
            "n_rows": len(self.rows),
            "n_failed": sum(r.failed for r in self.rows),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        agg = self.aggregate()
        titles = [COLUMN_TITLES[c] for c in METRIC_COLUMNS]
        cells = ["-" if agg[c] is None else f"{agg[c]:.4f}" for c in METRIC_COLUMNS]
        widths = [max(len(t), len(c)) for t, c in zip(titles, cells)]
        line = lambda parts: " | ".join(p.rjust(w) for p, w in zip(parts, widths))
        sep = "-+-".join("-" * w for w in widths)
        failed = sum(r.failed for r in self.rows)
        return "\n".join(
            [
                line(titles),
                sep,
                line(cells),
                f"rows: {len(self.rows)}  failed: {failed}  fingerprint: {self.fingerprint[:16]}",
            ]
        )


def config_fingerprint(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def _score_row(case: BenchmarkCase, edited: ImageBuffer, metrics: MetricsConfig, row: MetricRow) -> None:
    dist = pixel_distance(case.image, edited)
    row.l1, row.l2 = dist.l1, dist.l2
    src_instruction = case.plan.source_instruction or " ".join(s.plain_text for s in case.plan.subs)

    def attempt(name, fn):
        try:
            setattr(row, name, fn())
        except (BackendError, OSError, ValueError) as exc:
            logger.warning("%s: metric %s unavailable: %s", case.case_id, name, exc)
            row.missing.append(name)

    if metrics.embedder is not None:
        attempt("sim_im", lambda: embedding_similarity(
            metrics.embedder.embed(case.image), metrics.embedder.embed(edited)).value)
    if metrics.dino_embedder is not None:
        attempt("dino_like", lambda: embedding_similarity(
            metrics.dino_embedder.embed(case.image), metrics.dino_embedder.embed(edited)).value)
    if metrics.text_image_scorer is not None:
        attempt("sim_out", lambda: float(metrics.text_image_scorer(edited, src_instruction)))
    if metrics.judge is not None:
        attempt("mllm_ti", lambda: normalize_mllm_score(
            [metrics.judge.score(case.image, edited, src_instruction).score]))
        attempt("mllm_im", lambda: normalize_mllm_score(
            [metrics.judge.score(case.image, edited, metrics.image_judge_instruction).score]))


def case_seed(seed0: int, case_id: str) -> int:
    h = hashlib.sha256(f"{seed0}:{case_id}".encode()).digest()
    return int.from_bytes(h[:8], "little")


def run_benchmark(
    cases: Sequence[BenchmarkCase],
    pipeline: PipelineConfig,
    backends: Backends,
    metrics: MetricsConfig = MetricsConfig(),
    *,
    jobs: int = 1,
) -> MetricReport:
    """Execute each case's plan and score the result against its source.

    A failing case becomes a row with ``error`` set; the run only aborts when
    every row fails.
    """
    if not cases:
        raise EmptyList("benchmark dataset is empty")
    config = {
        "pipeline": pipeline.describe(),
        "metrics": metrics.describe(),
        "pixel_normalization": "mean over all channel samples of |a-b|/255",
        "localization": "best-of-K over first K draws; AP50 as per-sample hit rate",
    }
    fingerprint = config_fingerprint(config)

    def run_one(case: BenchmarkCase) -> MetricRow:
        row = MetricRow(case.case_id)
        try:
            edited, trace = execute_plan(
                case.image, case.plan, pipeline.policy, pipeline.routing,
                case_seed(pipeline.seed0, case.case_id), backends,
                dilation=pipeline.dilation, min_box_area=pipeline.min_box_area,
                region_mode=pipeline.region_mode,
            )
        except (StepFailed, BackendError, OSError, ValueError, LookupError) as exc:
            row.error = f"{type(exc).__name__}: {exc}"
            return row
        row.output_digest = edited.digest()
        row.trace_digest = trace.digest()
        _score_row(case, edited, metrics, row)
        return row

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(run_one, cases))
    else:
        rows = [run_one(c) for c in cases]
    if all(r.failed for r in rows):
        raise AllRowsFailed(f"all {len(rows)} benchmark rows failed; first: {rows[0].error}")
    return MetricReport(rows, fingerprint, config)
