"""Reader and writer for planner text.

Two line syntaxes are accepted::

    [insertion]<0.59,0.71,0.95,0.93> Add Christmas ornaments around the <cat>
    local texture: Make <tree> to be in cyberpunk

Anchors are ``<phrase>`` tokens embedded in the instruction.  A token whose
body is four comma separated decimals is a box instead, and may only appear
directly after the edit-type header.  The writer always emits the bracket
form, so ``parse_plan(serialize_plan(p))`` reproduces ``p``.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Union

import numpy as np

from xplan.plan_ir import (
    EditType,
    InvalidPlan,
    NormBox,
    Plan,
    SubInstruction,
    extract_anchors,
    validate_plan,
)

logger = logging.getLogger(__name__)

# planners occasionally overshoot the frame by a little; such coordinates are
# clamped, anything further out is not read as a box at all
BOX_OVERSHOOT = 0.05

_DECIMAL_RE = re.compile(r"^[+-]?(?:\d+(?:\.\d*)?|\.\d+)$")
_LIST_PREFIX_RE = re.compile(r"^(?:\d+[.)]|[-*•])\s+")


class PlanParseError(ValueError):
    pass


class EmptyPlan(PlanParseError):
    def __init__(self):
        super().__init__("no parseable plan lines")


class LineError(PlanParseError):
    def __init__(self, line_no: int, reason: str):
        self.line_no = line_no
        self.reason = reason
        super().__init__(f"line {line_no}: {reason}")


class ValidationError(InvalidPlan):
    """Parsed plan violates plan constraints."""


@dataclass(frozen=True)
class BoxToken:
    """Raw four-number token; ordering is not checked until :meth:`to_box`."""

    coords: tuple[float, float, float, float]

    def to_box(self) -> NormBox:
        clamped = tuple(min(1.0, max(0.0, c)) for c in self.coords)
        if clamped != self.coords:
            logger.warning("box %s clamped to the unit square", self.coords)
        return NormBox(*clamped)


@dataclass(frozen=True)
class Anchor:
    phrase: str


def parse_control_token(token: str) -> Union[BoxToken, Anchor]:
    """Classify a ``<...>`` token as a box or an anchor phrase.

    Total: anything that is not four in-range decimals is an anchor.
    """
    inner = token.strip()
    if inner.startswith("<") and inner.endswith(">"):
        inner = inner[1:-1]
    parts = [p.strip() for p in inner.split(",")]
    if len(parts) == 4 and all(_DECIMAL_RE.match(p) for p in parts):
        vals = tuple(float(p) for p in parts)
        if all(-BOX_OVERSHOOT <= v <= 1.0 + BOX_OVERSHOOT for v in vals):
            return BoxToken(vals)
    return Anchor(inner.strip())


def _check_brackets(text: str) -> bool:
    depth = 0
    for ch in text:
        if ch == "<":
            depth += 1
            if depth > 1:
                return False
        elif ch == ">":
            depth -= 1
            if depth < 0:
                return False
    return depth == 0


def _split_header(line: str, line_no: int) -> tuple[str, str]:
    if line.startswith("["):
        end = line.find("]")
        if end < 0:
            raise LineError(line_no, "unterminated '[' in edit-type header")
        return line[1:end], line[end + 1 :]
    head, sep, rest = line.partition(":")
    if not sep:
        raise LineError(line_no, "expected '[edit type]' or 'edit type:' header")
    return head, rest


def _parse_line(line: str, line_no: int, index: int) -> SubInstruction:
    line = _LIST_PREFIX_RE.sub("", line, count=1)
    head, rest = _split_header(line, line_no)
    try:
        edit_type = EditType.parse(head)
    except ValueError:
        raise LineError(line_no, f"unknown edit type {head.strip()!r}") from None

    rest = rest.lstrip()
    box = None
    if rest.startswith("<"):
        end = rest.find(">")
        if end < 0:
            raise LineError(line_no, "unbalanced angle brackets")
        token = parse_control_token(rest[: end + 1])
        if isinstance(token, BoxToken):
            try:
                box = token.to_box()
            except ValueError as exc:
                raise LineError(line_no, f"malformed box token: {exc}") from None
            rest = rest[end + 1 :]

    text = rest.strip()
    if not _check_brackets(text):
        raise LineError(line_no, "unbalanced angle brackets")
    anchors = extract_anchors(text)
    for phrase in anchors:
        if isinstance(parse_control_token(phrase), BoxToken):
            raise LineError(line_no, "box token must directly follow the edit type")
    return SubInstruction(edit_type, text, tuple(anchors), box, index)


def parse_plan(text: str, source_instruction: str = "") -> Plan:
    """Parse planner output into a validated :class:`Plan`.

    Raises EmptyPlan, LineError (1-based line numbers) or ValidationError.
    """
    subs = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        subs.append(_parse_line(line, line_no, len(subs)))
    if not subs:
        raise EmptyPlan()
    plan = Plan(tuple(subs), source_instruction)
    violations = validate_plan(plan)
    if violations:
        raise ValidationError(violations)
    return plan


def format_coord(v: float) -> str:
    # shortest positional form that reads back to the same float
    return np.format_float_positional(float(v), trim="-")


def format_box(box: NormBox) -> str:
    return "<" + ",".join(format_coord(c) for c in box.as_list()) + ">"


def serialize_line(sub: SubInstruction) -> str:
    box = format_box(sub.box) if sub.box is not None else ""
    return f"[{sub.edit_type.label}]{box} {sub.text.strip()}"


def serialize_plan(plan: Plan) -> str:
    """Canonical bracket-syntax text for ``plan``, one line per sub."""
    violations = validate_plan(plan)
    if violations:
        raise InvalidPlan(violations)
    return "\n".join(serialize_line(s) for s in plan.subs) + "\n"
