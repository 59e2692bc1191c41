"""Score edits and box proposals.

Part one compares refined control regions against whole-frame regions on the
same plans: the refined run should leave far more of the source untouched.
Part two computes IoU@K and AP50@K for a batch of noisy box proposals.

    python demos/evaluate.py
"""

import numpy as np

from xplan.backends import MockEditor, MockEmbedder, MockSegmenter, MockVerifier
from xplan.evaluation import (
    BenchmarkCase,
    LocalizationConfig,
    LocalizationSample,
    MetricsConfig,
    box_localization_at_k,
    run_benchmark,
)
from xplan.orchestrator import Backends, PipelineConfig
from xplan.parser import parse_plan
from xplan.plan_ir import ImageBuffer, NormBox

rng = np.random.default_rng(3)
plan = parse_plan("[remove] Remove the <cup>\n[local color change] Make the <vase> red", "tidy and brighten")
cases = [
    BenchmarkCase(f"case{i:02d}", ImageBuffer(rng.integers(0, 256, (64, 64, 3), dtype=np.uint8)), plan)
    for i in range(8)
]
editor = MockEditor()
backends = Backends({"default": editor, "inpaint": editor, "global": editor}, MockSegmenter())
metrics = MetricsConfig(embedder=MockEmbedder(), dino_embedder=MockEmbedder(2), judge=MockVerifier())

refined = run_benchmark(cases, PipelineConfig(), backends, metrics, jobs=4)
full = run_benchmark(cases, PipelineConfig(region_mode="full"), backends, metrics, jobs=4)
print("refined regions")
print(refined.to_text())
print("\nwhole-frame regions")
print(full.to_text())


def jitter(box: NormBox, scale: float) -> NormBox:
    x1, y1, x2, y2 = np.clip(np.array(box.as_list()) + rng.normal(0, scale, 4), 0, 0.99)
    x1, x2 = sorted((x1, x2))
    y1, y2 = sorted((y1, y2))
    return NormBox(float(x1), float(y1), float(max(x2, x1 + 0.01)), float(max(y2, y1 + 0.01)))


samples = []
for i in range(200):
    x, y = rng.uniform(0, 0.6, 2)
    gt = NormBox(x, y, x + rng.uniform(0.1, 0.4), y + rng.uniform(0.1, 0.4))
    # one good guess hidden among sloppier ones, in random order
    preds = [jitter(gt, s) for s in (0.02, 0.12, 0.2, 0.3, 0.4)]
    preds = tuple(preds[j] for j in rng.permutation(5))
    samples.append(LocalizationSample(gt, preds, f"s{i}"))

print("\nbox proposals over 200 targets")
for k in (1, 3, 5):
    r = box_localization_at_k(samples, LocalizationConfig(k))
    print(f"  K={k}: IoU@K={r.iou_at_k:.3f}  AP50@K={r.ap50_at_k:.3f}")
