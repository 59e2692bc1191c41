"""Plan compiler and execution engine for complex instruction-based image editing."""

from xplan.plan_ir import (
    BinaryMask,
    EditType,
    ImageBuffer,
    NormBox,
    Plan,
    SubInstruction,
    validate_plan,
)
from xplan.parser import parse_control_token, parse_plan, serialize_plan
from xplan.masks import (
    box_iou,
    box_to_mask,
    dilate_mask,
    enlarge_small_box,
    full_mask,
    mask_overlap_metrics,
    mask_to_box,
    union_masks,
)
from xplan.refine import AnchorMasks, ControlInput, refine_control
from xplan.router import BAG_OF_MODELS, SINGLE_MODEL, RoutingTable, route_edit
from xplan.orchestrator import Backends, VerifyPolicy, execute_plan

__version__ = "0.1.0"

__all__ = [
    "BinaryMask",
    "EditType",
    "ImageBuffer",
    "NormBox",
    "Plan",
    "SubInstruction",
    "validate_plan",
    "parse_control_token",
    "parse_plan",
    "serialize_plan",
    "box_iou",
    "box_to_mask",
    "dilate_mask",
    "enlarge_small_box",
    "full_mask",
    "mask_overlap_metrics",
    "mask_to_box",
    "union_masks",
    "AnchorMasks",
    "ControlInput",
    "refine_control",
    "BAG_OF_MODELS",
    "SINGLE_MODEL",
    "RoutingTable",
    "route_edit",
    "Backends",
    "VerifyPolicy",
    "execute_plan",
]
