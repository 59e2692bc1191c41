"""Build a small annotated instruction set and look at its distributions.

Level 1 asks a generator for complex/simple pairs, level 2 attaches anchor
masks, level 3 fills in boxes for insertions. The mock generator and
segmenter stand in for real services.

    python demos/annotate_and_sample.py [out_dir]
"""

import sys
import tempfile
from collections import Counter
from dataclasses import replace
from pathlib import Path

import numpy as np

from xplan.annotate import (
    DEFAULT_SIMPLE_FRACTIONS,
    DEFAULT_WEIGHTS,
    annotate_records,
    benchmark_mix_report,
    build_level1_prompt,
    dataset_stats,
    level1_records,
    mix_simple_pairs,
    read_records,
    sample_instruction_kinds,
    sample_sources,
)
from xplan.backends import MockPlanner, MockSegmenter, save_image
from xplan.plan_ir import ImageBuffer

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="xplan-annotate-"))
out.mkdir(parents=True, exist_ok=True)
rng = np.random.default_rng(0)

print("source weights:", dict(DEFAULT_WEIGHTS.entries))
drawn = Counter(sample_sources(DEFAULT_WEIGHTS, rng, 44_000))
print("44k draws, per 1000:", {k: round(v / 44) for k, v in sorted(drawn.items())})

print("\nfirst lines of the level-1 prompt:")
print("\n".join(build_level1_prompt({"image_caption": "a kitchen with a kettle"}).splitlines()[:6]))

planner, segmenter = MockPlanner(), MockSegmenter()
images = {}
level1 = []
for i, tag in enumerate(sample_sources(DEFAULT_WEIGHTS, rng, 12)):
    ref = f"img_{i}.png"
    images[ref] = ImageBuffer(rng.integers(0, 256, (48, 64, 3), dtype=np.uint8))
    save_image(images[ref], out / ref)
    level1 += level1_records({"source_tag": tag, "image_ref": ref, "caption": f"scene {i}"}, images[ref], planner)
print(f"\nlevel 1: {len(level1)} pairs from 12 images")

mixed = mix_simple_pairs(level1, DEFAULT_SIMPLE_FRACTIONS, rng)
print("pair kinds after mixing:", dict(Counter(r.pair_kind for r in mixed)))

summary = annotate_records(mixed, out, images.__getitem__, segmenter=segmenter, planner=planner)
print(f"levels 2+3: written={summary.written} quarantined={summary.quarantined} -> {out / 'records.jsonl'}")

records = list(read_records(out / "records.jsonl"))
print()
print(dataset_stats(records).to_text())

kinds = sample_instruction_kinds(rng, len(records))
print("benchmark kind mix target vs drawn:")
tagged = [replace(r, instruction_kind=k) for r, k in zip(records, kinds)]
for kind, row in benchmark_mix_report(tagged).items():
    print(f"  {kind:<12} target {row['target_percent']:>4}%  drawn {row['percent']:.1f}%")
