"""Core value types: edit types, plans, normalized boxes, masks and images.

Everything here is immutable once constructed.  Masks and images wrap numpy
arrays that are flagged read-only, so they can be shared between threads.
"""

from __future__ import annotations

import enum
import hashlib
import re
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

import numpy as np

MAX_SUBS = 5

_ANCHOR_RE = re.compile(r"<([^<>]*)>")


class EditType(str, enum.Enum):
    INSERTION = "insertion"
    REMOVE = "remove"
    REPLACE = "replace"
    LOCAL_TEXTURE = "local_texture"
    LOCAL_COLOR_CHANGE = "local_color_change"
    SHAPE_CHANGE = "shape_change"
    BACKGROUND = "background"
    STYLE = "style"

    @property
    def label(self) -> str:
        """Human spelling used in planner text, e.g. ``local texture``."""
        return self.value.replace("_", " ")

    @classmethod
    def parse(cls, name: str) -> "EditType":
        key = re.sub(r"[\s_\-]+", "_", name.strip().lower())
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown edit type: {name!r}") from None


def anchor_arity(edit_type: EditType) -> tuple[int, ...]:
    """Admissible anchor counts for an edit type."""
    if edit_type is EditType.REPLACE:
        return (2,)
    if edit_type is EditType.STYLE:
        return (0, 1)
    return (1,)


def extract_anchors(text: str) -> list[str]:
    """Anchor phrases marked as ``<phrase>`` in an instruction, in order."""
    return [m.group(1).strip() for m in _ANCHOR_RE.finditer(text)]


def strip_anchor_markers(text: str) -> str:
    return _ANCHOR_RE.sub(lambda m: m.group(1).strip(), text)


@dataclass(frozen=True)
class NormBox:
    """Axis-aligned box in fractions of image width/height."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(np.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates {coords}")
        if not (0.0 <= self.x1 < self.x2 <= 1.0 and 0.0 <= self.y1 < self.y2 <= 1.0):
            raise ValueError(f"invalid normalized box {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


class DimensionError(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Binary pixel grid, stored as a (height, width) boolean array."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2:
            raise DimensionError(f"mask must be 2-D, got shape {bits.shape}")
        if bits.shape[0] < 1 or bits.shape[1] < 1:
            raise DimensionError(f"zero-sized mask grid {bits.shape}")
        object.__setattr__(self, "bits", _frozen(bits.astype(bool, copy=True)))

    @classmethod
    def empty(cls, width: int, height: int) -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=bool))

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def dims(self) -> tuple[int, int]:
        return (self.width, self.height)

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.bits))

    def issubset(self, other: "BinaryMask") -> bool:
        if self.dims != other.dims:
            raise DimensionMismatch(f"{self.dims} vs {other.dims}")
        return not np.any(self.bits & ~other.bits)

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(self.bits, other.bits)

    def __hash__(self):
        return hash((self.dims, self.bits.tobytes()))

    def __repr__(self):
        return f"BinaryMask({self.width}x{self.height}, area={self.area})"


@dataclass(frozen=True, eq=False)
class ImageBuffer:
    """8-bit RGB image, stored as a (height, width, 3) uint8 array."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or data.shape[2] != 3:
            raise DimensionError(f"image must be HxWx3, got shape {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise DimensionError(f"zero-sized image {data.shape}")
        if data.dtype != np.uint8:
            raise TypeError(f"image samples must be uint8, got {data.dtype}")
        object.__setattr__(self, "data", _frozen(data.copy()))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> tuple[int, int]:
        return (self.width, self.height)

    def digest(self) -> str:
        """Content hash over dims and samples."""
        h = hashlib.sha256()
        h.update(f"{self.width}x{self.height}x3:".encode())
        h.update(self.data.tobytes())
        return h.hexdigest()

    def __eq__(self, other):
        if not isinstance(other, ImageBuffer):
            return NotImplemented
        return np.array_equal(self.data, other.data)

    def __hash__(self):
        return hash(self.digest())

    def __repr__(self):
        return f"ImageBuffer({self.width}x{self.height})"


@dataclass(frozen=True)
class SubInstruction:
    """One atomic edit.

    ``text`` keeps the planner's inline ``<anchor>`` markers; ``anchors`` must
    list them in the same order (checked by :func:`validate_plan`).
    """

    edit_type: EditType
    text: str
    anchors: tuple[str, ...] = ()
    box: Optional[NormBox] = None
    index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "edit_type", EditType(self.edit_type))
        object.__setattr__(self, "anchors", tuple(self.anchors))

    @property
    def plain_text(self) -> str:
        """Instruction with anchor markers removed, as fed to editors."""
        return strip_anchor_markers(self.text).strip()


@dataclass(frozen=True)
class Plan:
    subs: tuple[SubInstruction, ...]
    source_instruction: str = ""

    def __post_init__(self):
        object.__setattr__(self, "subs", tuple(self.subs))

    @classmethod
    def from_subs(cls, subs: Iterable[SubInstruction], source_instruction: str = "") -> "Plan":
        """Build a plan, renumbering indices to 0..n-1."""
        return cls(
            tuple(replace(s, index=i) for i, s in enumerate(subs)),
            source_instruction,
        )

    def __len__(self):
        return len(self.subs)


# -- validation ---------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    """Base class for plan constraint violations."""

    def describe(self) -> str:
        return repr(self)


@dataclass(frozen=True)
class EmptySubs(Violation):
    def describe(self) -> str:
        return "plan has no sub-instructions"


@dataclass(frozen=True)
class TooManySubs(Violation):
    count: int

    def describe(self) -> str:
        return f"plan has {self.count} sub-instructions (max {MAX_SUBS})"


@dataclass(frozen=True)
class AnchorArity(Violation):
    edit_type: EditType
    got: int
    want: int
    sub_index: int = 0

    def describe(self) -> str:
        return (
            f"sub {self.sub_index}: {self.edit_type.label} needs {self.want} "
            f"anchor(s), got {self.got}"
        )


@dataclass(frozen=True)
class AnchorMismatch(Violation):
    sub_index: int
    in_text: tuple[str, ...]
    anchors: tuple[str, ...]

    def describe(self) -> str:
        return f"sub {self.sub_index}: text marks {list(self.in_text)} but anchors are {list(self.anchors)}"


@dataclass(frozen=True)
class EmptyAnchor(Violation):
    sub_index: int

    def describe(self) -> str:
        return f"sub {self.sub_index}: blank anchor phrase"


@dataclass(frozen=True)
class EmptyText(Violation):
    sub_index: int

    def describe(self) -> str:
        return f"sub {self.sub_index}: empty instruction text"


@dataclass(frozen=True)
class MultiLineText(Violation):
    sub_index: int

    def describe(self) -> str:
        return f"sub {self.sub_index}: instruction text spans several lines"


@dataclass(frozen=True)
class UnexpectedBox(Violation):
    sub_index: int
    edit_type: EditType

    def describe(self) -> str:
        return f"sub {self.sub_index}: box given for {self.edit_type.label} edit"


@dataclass(frozen=True)
class MalformedBox(Violation):
    sub_index: int

    def describe(self) -> str:
        return f"sub {self.sub_index}: box is not a valid normalized box"


@dataclass(frozen=True)
class BadIndex(Violation):
    position: int
    index: int

    def describe(self) -> str:
        return f"sub at position {self.position} has index {self.index}"


def validate_plan(plan: Plan) -> list[Violation]:
    """Collect every well-formedness violation of ``plan``; [] means admissible."""
    out: list[Violation] = []
    n = len(plan.subs)
    if n == 0:
        out.append(EmptySubs())
    elif n > MAX_SUBS:
        out.append(TooManySubs(n))
    for pos, sub in enumerate(plan.subs):
        if sub.index != pos:
            out.append(BadIndex(pos, sub.index))
        if not sub.text.strip():
            out.append(EmptyText(pos))
        elif "\n" in sub.text or "\r" in sub.text:
            out.append(MultiLineText(pos))
        wanted = anchor_arity(sub.edit_type)
        if len(sub.anchors) not in wanted:
            out.append(AnchorArity(sub.edit_type, len(sub.anchors), wanted[0], pos))
        if any(not a.strip() for a in sub.anchors):
            out.append(EmptyAnchor(pos))
        marked = tuple(extract_anchors(sub.text))
        if marked != sub.anchors:
            out.append(AnchorMismatch(pos, marked, sub.anchors))
        if sub.box is not None and sub.edit_type is not EditType.INSERTION:
            out.append(UnexpectedBox(pos, sub.edit_type))
        if sub.box is not None and not isinstance(sub.box, NormBox):
            out.append(MalformedBox(pos))
    return out


class InvalidPlan(ValueError):
    def __init__(self, violations: Sequence[Violation]):
        self.violations = list(violations)
        super().__init__("; ".join(v.describe() for v in self.violations))
