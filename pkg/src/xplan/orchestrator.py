"""Sequential plan execution with a verify-and-retry loop per step."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

from xplan.backends import BackendError, Editor, EditRequest, Segmenter, Verifier
from xplan.masks import DEFAULT_DILATION, DEFAULT_MIN_BOX_AREA, full_mask
from xplan.parser import serialize_line
from xplan.plan_ir import EditType, ImageBuffer, InvalidPlan, Plan, SubInstruction, validate_plan
from xplan.refine import AnchorMasks, ControlInput, refine_control
from xplan.router import RoutingTable, route_edit

logger = logging.getLogger(__name__)

TRACE_SCHEMA = "trace_v1"


@dataclass(frozen=True)
class VerifyPolicy:
    enabled: bool = False
    threshold: int = 3
    max_retries: int = 1

    def __post_init__(self):
        if not 0 <= self.threshold <= 4:
            raise ValueError(f"threshold must lie in 0..4, got {self.threshold}")
        if self.max_retries < 0:
            raise ValueError(f"max_retries must be >= 0, got {self.max_retries}")

    @property
    def max_attempts(self) -> int:
        return 1 + self.max_retries if self.enabled else 1


@dataclass
class Backends:
    editors: Mapping[str, Editor]
    segmenter: Segmenter
    verifier: Optional[Verifier] = None


@dataclass(frozen=True)
class Attempt:
    seed: int
    score: Optional[int] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class StepTrace:
    sub: SubInstruction
    control: ControlInput
    backend_id: str
    attempts: list[Attempt]
    accepted_attempt: int
    output_digest: str
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        box = self.control.box
        return {
            "index": self.sub.index,
            "line": serialize_line(self.sub),
            "edit_type": self.sub.edit_type.value,
            "backend_id": self.backend_id,
            "region_area": self.control.region.area,
            "region_digest": hashlib.sha256(self.control.region.bits.tobytes()).hexdigest(),
            "box": box.as_list() if box is not None else None,
            "attempts": [
                {"seed": a.seed, "score": a.score, "error": a.error} for a in self.attempts
            ],
            "accepted_attempt": self.accepted_attempt,
            "output_digest": self.output_digest,
        }


@dataclass
class ExecutionTrace:
    plan: Plan
    source_digest: str
    seed0: int
    policy: VerifyPolicy
    routing: dict
    steps: list[StepTrace] = field(default_factory=list)
    final_image_digest: Optional[str] = None

    @property
    def complete(self) -> bool:
        return len(self.steps) == len(self.plan.subs) and self.final_image_digest is not None

    @property
    def wall_times(self) -> list[float]:
        return [s.wall_time for s in self.steps]

    def to_dict(self, include_timing: bool = True) -> dict:
        doc = {
            "schema": TRACE_SCHEMA,
            "source_instruction": self.plan.source_instruction,
            "source_digest": self.source_digest,
            "seed0": self.seed0,
            "policy": {
                "enabled": self.policy.enabled,
                "threshold": self.policy.threshold,
                "max_retries": self.policy.max_retries,
            },
            "routing": self.routing,
            "steps": [s.to_dict() for s in self.steps],
            "final_image_digest": self.final_image_digest,
            "complete": self.complete,
        }
        if include_timing:
            doc["wall_times"] = self.wall_times
        return doc

    def to_json(self, include_timing: bool = True) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True)

    def digest(self) -> str:
        """Hash of the trace content, timing excluded."""
        return hashlib.sha256(self.to_json(include_timing=False).encode()).hexdigest()


class StepFailed(RuntimeError):
    def __init__(self, index: int, cause: Optional[BaseException], trace: Optional[ExecutionTrace] = None):
        self.index = index
        self.cause = cause
        self.trace = trace
        super().__init__(f"step {index} failed: {cause}")


def derive_seed(seed0: int, step: int, attempt: int) -> int:
    """Seed for attempt ``attempt`` of step ``step``: first 8 bytes (LE) of
    sha256 over the packed triple."""
    payload = (
        (seed0 & ((1 << 64) - 1)).to_bytes(8, "little")
        + step.to_bytes(4, "little")
        + attempt.to_bytes(4, "little")
    )
    return int.from_bytes(hashlib.sha256(b"xplan-seed:" + payload).digest()[:8], "little")


def execute_step_with_verification(
    image: ImageBuffer,
    sub: SubInstruction,
    control: ControlInput,
    backend_id: str,
    policy: VerifyPolicy,
    seeds: Sequence[int],
    backends: Backends,
) -> tuple[ImageBuffer, StepTrace]:
    """Edit, score, and retry below threshold; keep the best attempt when
    retries run out (ties go to the earliest)."""
    if len(seeds) < policy.max_attempts:
        raise ValueError(f"need {policy.max_attempts} seeds, got {len(seeds)}")
    if policy.enabled and backends.verifier is None:
        raise ValueError("verification enabled but no verifier configured")
    editor = backends.editors[backend_id]
    instruction = sub.plain_text
    started = time.perf_counter()

    attempts: list[Attempt] = []
    outputs: list[Optional[ImageBuffer]] = []
    accepted: Optional[int] = None
    last_error: Optional[BaseException] = None

    for k in range(policy.max_attempts):
        seed = seeds[k]
        try:
            out = editor.edit(EditRequest(image, instruction, control, seed, backend_id))
            score = None
            if policy.enabled:
                score = backends.verifier.score(image, out, instruction).score
        except (BackendError, OSError) as exc:
            logger.warning("step %d attempt %d failed: %s", sub.index, k, exc)
            last_error = exc
            attempts.append(Attempt(seed, None, f"{type(exc).__name__}: {exc}"))
            outputs.append(None)
            continue
        attempts.append(Attempt(seed, score))
        outputs.append(out)
        if not policy.enabled or score >= policy.threshold:
            accepted = k
            break

    if accepted is None:
        scored = [(a.score, -k) for k, a in enumerate(attempts) if a.ok and a.score is not None]
        if not scored:
            raise StepFailed(sub.index, last_error)
        accepted = -max(scored)[1]

    result = outputs[accepted]
    trace = StepTrace(
        sub=sub,
        control=control,
        backend_id=backend_id,
        attempts=attempts,
        accepted_attempt=accepted,
        output_digest=result.digest(),
        wall_time=time.perf_counter() - started,
    )
    return result, trace


def segment_anchors(image: ImageBuffer, sub: SubInstruction, segmenter: Segmenter) -> AnchorMasks:
    if sub.edit_type is EditType.STYLE:
        return AnchorMasks(())
    return AnchorMasks(tuple(segmenter.segment(image, a) for a in sub.anchors))


def execute_plan(
    image: ImageBuffer,
    plan: Plan,
    policy: VerifyPolicy,
    table: RoutingTable,
    seed0: int,
    backends: Backends,
    *,
    dilation: float = DEFAULT_DILATION,
    min_box_area: float = DEFAULT_MIN_BOX_AREA,
    region_mode: str = "refined",
) -> tuple[ImageBuffer, ExecutionTrace]:
    """Run every step of ``plan`` in order, each on the previous output.

    Anchors are segmented on the current intermediate image.  ``region_mode``
    ``"full"`` widens every control region to the whole frame (ablation).
    """
    violations = validate_plan(plan)
    if violations:
        raise InvalidPlan(violations)
    if region_mode not in ("refined", "full"):
        raise ValueError(f"unknown region_mode {region_mode!r}")
    routes = [route_edit(s.edit_type, table, backends.editors.keys()) for s in plan.subs]

    trace = ExecutionTrace(plan, image.digest(), seed0, policy, table.to_dict())
    current = image
    for i, (sub, backend_id) in enumerate(zip(plan.subs, routes)):
        try:
            masks = segment_anchors(current, sub, backends.segmenter)
        except (BackendError, OSError) as exc:
            raise StepFailed(i, exc, trace) from exc
        control = refine_control(
            sub, masks, current.dims, dilation=dilation, min_box_area=min_box_area
        )
        if region_mode == "full":
            whole = full_mask(*current.dims)
            control = ControlInput(control.mask, whole, control.box)
        seeds = [derive_seed(seed0, i, k) for k in range(policy.max_attempts)]
        try:
            current, step = execute_step_with_verification(
                current, sub, control, backend_id, policy, seeds, backends
            )
        except StepFailed as exc:
            exc.trace = trace
            raise
        trace.steps.append(step)
    trace.final_image_digest = current.digest()
    return current, trace


@dataclass(frozen=True)
class PipelineConfig:
    policy: VerifyPolicy = VerifyPolicy()
    routing: RoutingTable = RoutingTable()
    seed0: int = 0
    dilation: float = DEFAULT_DILATION
    min_box_area: float = DEFAULT_MIN_BOX_AREA
    region_mode: str = "refined"

    def describe(self) -> dict:
        return {
            "verify": {
                "enabled": self.policy.enabled,
                "threshold": self.policy.threshold,
                "max_retries": self.policy.max_retries,
            },
            "routing": self.routing.to_dict(),
            "seed0": self.seed0,
            "dilation": self.dilation,
            "min_box_area": self.min_box_area,
            "region_mode": self.region_mode,
        }
