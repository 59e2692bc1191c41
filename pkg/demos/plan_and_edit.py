"""Walk one complex instruction through parsing, region refinement, routing and execution.

Everything runs against the deterministic mock backends, so the printed
digests are identical on every machine.

    python demos/plan_and_edit.py
"""

import numpy as np

from xplan.backends import MockEditor, MockPlanner, MockSegmenter, MockVerifier
from xplan.masks import dilate_mask
from xplan.orchestrator import Backends, VerifyPolicy, execute_plan, segment_anchors
from xplan.parser import parse_plan, serialize_plan
from xplan.plan_ir import ImageBuffer, NormBox
from xplan.refine import refine_control
from xplan.router import BAG_OF_MODELS, route_edit

rng = np.random.default_rng(7)
image = ImageBuffer(rng.integers(0, 256, (96, 128, 3), dtype=np.uint8))

# A planner turns the free-form request into tagged steps. Here we write the
# plan by hand so the example is readable; MockPlanner().plan returns text in the same format.
text = """\
[remove] Remove the <cup> from the table
[insertion]<0.62,0.10,0.70,0.18> Add a <lamp> on the shelf
[local color change] Make the <sofa> dark green
[style] Make image 1950's style"""
plan = parse_plan(text, source_instruction="tidy the room, add a lamp, recolour the sofa, vintage look")
print("parsed plan:")
print(serialize_plan(plan))
print("planner on a style-only request ->", MockPlanner().plan(image, "Make it 1950's").strip())

segmenter = MockSegmenter({"cup": NormBox(0.30, 0.55, 0.40, 0.70), "sofa": NormBox(0.05, 0.40, 0.55, 0.90)})
print("\ncontrol regions (pixels out of", 128 * 96, "):")
for sub in plan.subs:
    masks = segment_anchors(image, sub, segmenter)
    control = refine_control(sub, masks, image.dims)
    raw = sum(m.area for m in masks.masks)
    box = control.box.as_list() if control.box else None
    print(f"  {sub.edit_type.label:<20} raw={raw:<5} region={control.region.area:<5} box={box}")
    print(f"  {'':<20} routed to {route_edit(sub.edit_type, BAG_OF_MODELS)!r}")

# the 0.08 x 0.08 lamp box was below the minimum area, so it was grown around its centre
print("\nsingle dilation of the cup mask grows", segmenter.segment(image, "cup").area,
      "->", dilate_mask(segmenter.segment(image, "cup"), 0.2).area, "pixels")

editor = MockEditor()
backends = Backends({"default": editor, "inpaint": editor, "global": editor}, segmenter,
                    MockVerifier(script=[4, 1, 2, 4]))
policy = VerifyPolicy(enabled=True, threshold=3, max_retries=2)
out, trace = execute_plan(image, plan, policy, BAG_OF_MODELS, seed0=42, backends=backends)

print("\nexecution trace:")
for step in trace.steps:
    scores = [a.score for a in step.attempts]
    print(f"  step {step.sub.index}: backend={step.backend_id:<8} scores={scores} accepted={step.accepted_attempt}")
print("pixels changed:", int((out.data != image.data).any(axis=2).sum()))
print("final digest:", trace.final_image_digest)
print("trace digest:", trace.digest())
