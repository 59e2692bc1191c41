"""Binary mask and box geometry: morphology, set operations, rasterization
and overlap metrics.

Pixel rasterization rounds half up on scaled coordinates and uses half-open
pixel intervals, so aligned halves partition the grid exactly.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image
from scipy import ndimage

from xplan.plan_ir import BinaryMask, DimensionError, DimensionMismatch, NormBox

DEFAULT_DILATION = 0.20
DEFAULT_MIN_BOX_AREA = 0.05

# relative slack when deciding a box already meets the area floor, so that
# re-enlarging an enlarged box is a no-op despite float rounding
_AREA_RTOL = 1e-9


class EmptyMask(ValueError):
    pass


class EmptyGroundTruth(ValueError):
    pass


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _check_dims(width: int, height: int) -> None:
    if int(width) < 1 or int(height) < 1:
        raise DimensionError(f"mask dims must be >= 1, got {width}x{height}")


def _same_dims(a: BinaryMask, b: BinaryMask) -> None:
    if a.dims != b.dims:
        raise DimensionMismatch(f"mask dims differ: {a.dims} vs {b.dims}")


@dataclass(frozen=True)
class StructuringElement:
    """Disc of integer radius, as a boolean footprint of side 2r+1."""

    radius_px: int

    def __post_init__(self):
        if self.radius_px < 1:
            raise ValueError(f"radius must be >= 1, got {self.radius_px}")

    def footprint(self) -> np.ndarray:
        r = self.radius_px
        yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
        return xx * xx + yy * yy <= r * r


def dilation_radius(area: int, percent: float) -> int:
    """Disc radius growing the mask's equivalent diameter by ``percent``.

    r = max(1, round(percent / 2 * d_eq)) with d_eq = 2 * sqrt(area / pi).
    """
    d_eq = 2.0 * math.sqrt(area / math.pi)
    return max(1, round_half_up(percent / 2.0 * d_eq))


def dilate_mask(mask: BinaryMask, percent: float = DEFAULT_DILATION) -> BinaryMask:
    if not 0.0 <= percent <= 1.0:
        raise ValueError(f"percent must lie in [0, 1], got {percent}")
    area = mask.area
    if area == 0:
        return mask
    se = StructuringElement(dilation_radius(area, percent))
    grown = ndimage.binary_dilation(mask.bits, structure=se.footprint())
    return BinaryMask(grown)


def union_masks(a: BinaryMask, b: BinaryMask) -> BinaryMask:
    _same_dims(a, b)
    return BinaryMask(a.bits | b.bits)


def full_mask(width: int, height: int) -> BinaryMask:
    _check_dims(width, height)
    return BinaryMask(np.ones((int(height), int(width)), dtype=bool))


def box_pixel_rect(box: NormBox, width: int, height: int) -> tuple[int, int, int, int]:
    """Half-open pixel rectangle (px1, py1, px2, py2) covered by ``box``.

    Never empty: a side that rounds to zero pixels is widened to one.
    """
    _check_dims(width, height)

    def span(lo: float, hi: float, n: int) -> tuple[int, int]:
        p1 = min(max(round_half_up(lo * n), 0), n)
        p2 = min(max(round_half_up(hi * n), 0), n)
        if p2 <= p1:
            if p1 >= n:
                p1 = n - 1
            p2 = p1 + 1
        return p1, p2

    px1, px2 = span(box.x1, box.x2, width)
    py1, py2 = span(box.y1, box.y2, height)
    return px1, py1, px2, py2


def box_to_mask(box: NormBox, width: int, height: int) -> BinaryMask:
    px1, py1, px2, py2 = box_pixel_rect(box, width, height)
    bits = np.zeros((height, width), dtype=bool)
    bits[py1:py2, px1:px2] = True
    return BinaryMask(bits)


def mask_to_box(mask: BinaryMask) -> NormBox:
    """Tight normalized box around the set pixels."""
    rows = np.flatnonzero(mask.bits.any(axis=1))
    cols = np.flatnonzero(mask.bits.any(axis=0))
    if rows.size == 0:
        raise EmptyMask("cannot box an empty mask")
    w, h = mask.dims
    return NormBox(
        cols[0] / w,
        rows[0] / h,
        (cols[-1] + 1) / w,
        (rows[-1] + 1) / h,
    )


def enlarge_small_box(box: NormBox, min_area_frac: float = DEFAULT_MIN_BOX_AREA) -> NormBox:
    """Grow a box smaller than ``min_area_frac`` to exactly that area.

    Width and height scale about the center by sqrt(min_area_frac / area).
    When the grown box leaves the frame it is slid back inside (the center
    moves); a side longer than the frame is cut to 1 and the other side is
    lengthened so the area target still holds.  Every output therefore meets
    the threshold, which makes the operation idempotent.
    """
    if not 0.0 < min_area_frac <= 1.0:
        raise ValueError(f"min_area_frac must lie in (0, 1], got {min_area_frac}")
    area = box.area
    if area >= min_area_frac * (1.0 - _AREA_RTOL):
        return box
    s = math.sqrt(min_area_frac / area)
    w, h = box.width * s, box.height * s
    if w > 1.0:
        w, h = 1.0, min_area_frac
    elif h > 1.0:
        w, h = min_area_frac, 1.0
    cx, cy = box.center
    x1, x2 = _fit_span(cx, w)
    y1, y2 = _fit_span(cy, h)
    return NormBox(x1, y1, x2, y2)


def _fit_span(center: float, length: float) -> tuple[float, float]:
    lo = center - length / 2.0
    hi = center + length / 2.0
    if lo < 0.0:
        lo, hi = 0.0, length
    elif hi > 1.0:
        lo, hi = 1.0 - length, 1.0
    return max(lo, 0.0), min(hi, 1.0)


@dataclass(frozen=True)
class OverlapMetrics:
    iou: float
    precision: float
    recall: float
    empty_prediction: bool = False


def mask_overlap_metrics(pred: BinaryMask, gt: BinaryMask) -> OverlapMetrics:
    """IoU, precision and recall of ``pred`` against ``gt``.

    An empty prediction has precision 1.0 by convention and is flagged.
    """
    _same_dims(pred, gt)
    gt_area = gt.area
    if gt_area == 0:
        raise EmptyGroundTruth("ground-truth mask is empty")
    inter = int(np.count_nonzero(pred.bits & gt.bits))
    union = int(np.count_nonzero(pred.bits | gt.bits))
    pred_area = pred.area
    if pred_area == 0:
        return OverlapMetrics(0.0, 1.0, 0.0, empty_prediction=True)
    return OverlapMetrics(inter / union, inter / pred_area, inter / gt_area)


def box_iou(a: NormBox, b: NormBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


# -- PNG I/O --------------------------------------------------------------------


def mask_to_png_bytes(mask: BinaryMask) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(mask.bits.astype(np.uint8) * 255, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def mask_from_png_bytes(data: bytes) -> BinaryMask:
    with Image.open(io.BytesIO(data)) as im:
        arr = np.asarray(im.convert("L"))
    return BinaryMask(arr >= 128)


def save_mask(mask: BinaryMask, path: Union[str, Path]) -> None:
    Path(path).write_bytes(mask_to_png_bytes(mask))


def load_mask(path: Union[str, Path]) -> BinaryMask:
    return mask_from_png_bytes(Path(path).read_bytes())
