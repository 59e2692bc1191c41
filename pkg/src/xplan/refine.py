"""Edit-type specific control regions.

Given a sub-instruction and the raw segmentation of its anchors, decide which
pixels the editor may touch:

================================  =========================================
edit type                          region
================================  =========================================
local texture / color, background  anchor mask as segmented
shape change, remove               anchor mask dilated by 20%
replace                            before ∪ after masks, else dilated before
style                              whole image
insertion                          anchor mask ∪ enlarged box raster
================================  =========================================
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from xplan.masks import (
    DEFAULT_DILATION,
    DEFAULT_MIN_BOX_AREA,
    box_to_mask,
    dilate_mask,
    enlarge_small_box,
    full_mask,
    union_masks,
)
from xplan.plan_ir import BinaryMask, DimensionMismatch, EditType, NormBox, SubInstruction


class MissingMask(ValueError):
    def __init__(self, message: str, sub_index: Optional[int] = None):
        self.sub_index = sub_index
        super().__init__(message)


class MissingBox(ValueError):
    def __init__(self, message: str, sub_index: Optional[int] = None):
        self.sub_index = sub_index
        super().__init__(message)


@dataclass(frozen=True)
class ControlInput:
    mask: BinaryMask
    region: BinaryMask
    box: Optional[NormBox] = None

    def __post_init__(self):
        # non-emptiness is refine_control's guarantee, not the type's: an empty
        # region is a legitimate "touch nothing" request
        if self.mask.dims != self.region.dims:
            raise DimensionMismatch("mask and region dims differ")

    @property
    def dims(self) -> tuple[int, int]:
        return self.region.dims

    @classmethod
    def from_mask(cls, mask: BinaryMask, box: Optional[NormBox] = None) -> "ControlInput":
        region = mask if box is None else union_masks(mask, box_to_mask(box, *mask.dims))
        return cls(mask, region, box)


@dataclass(frozen=True)
class AnchorMasks:
    """Stage-1 masks, one per anchor, plus the post-edit mask for replace
    edits when an edited image exists."""

    masks: tuple[BinaryMask, ...] = ()
    post_edit: Optional[BinaryMask] = None

    def __post_init__(self):
        object.__setattr__(self, "masks", tuple(self.masks))


_AS_SEGMENTED = {EditType.LOCAL_TEXTURE, EditType.LOCAL_COLOR_CHANGE, EditType.BACKGROUND}
_DILATED = {EditType.SHAPE_CHANGE, EditType.REMOVE}


def refine_control(
    sub: SubInstruction,
    masks: AnchorMasks,
    dims: tuple[int, int],
    *,
    dilation: float = DEFAULT_DILATION,
    min_box_area: float = DEFAULT_MIN_BOX_AREA,
) -> ControlInput:
    w, h = dims
    et = sub.edit_type

    if et is EditType.STYLE:
        whole = full_mask(w, h)
        return ControlInput(whole, whole)

    if len(masks.masks) != len(sub.anchors):
        raise ValueError(
            f"sub {sub.index}: {len(masks.masks)} masks for {len(sub.anchors)} anchors"
        )
    for m in (*masks.masks, masks.post_edit):
        if m is not None and m.dims != (w, h):
            raise DimensionMismatch(f"mask dims {m.dims} != image dims {(w, h)}")
    if not masks.masks or masks.masks[0].area == 0:
        raise MissingMask(f"sub {sub.index}: empty stage-1 mask for {et.label}", sub.index)
    base = masks.masks[0]

    if et in _AS_SEGMENTED:
        return ControlInput(base, base)
    if et in _DILATED:
        grown = dilate_mask(base, dilation)
        return ControlInput(grown, grown)
    if et is EditType.REPLACE:
        if masks.post_edit is not None:
            merged = union_masks(base, masks.post_edit)
        else:
            merged = dilate_mask(base, dilation)
        return ControlInput(merged, merged)
    if et is EditType.INSERTION:
        if sub.box is None:
            raise MissingBox(f"sub {sub.index}: insertion without a box", sub.index)
        return ControlInput.from_mask(base, enlarge_small_box(sub.box, min_box_area))
    raise AssertionError(f"unhandled edit type {et}")
