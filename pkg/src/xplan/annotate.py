"""Three-level annotation pipeline for complex/simple instruction records.

Level 1 prompts a generator for complex instructions with their
decompositions and validates the answer, Level 2 turns anchors into refined
masks, Level 3 pseudo-labels boxes for insertions.  Records are written as
JSON lines next to a ``masks/`` directory of PNGs.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import string
import threading
from collections import Counter
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Optional, Sequence, Union

import numpy as np

from xplan.backends import Planner, Segmenter
from xplan.masks import DEFAULT_DILATION, DEFAULT_MIN_BOX_AREA, enlarge_small_box, save_mask
from xplan.parser import BoxToken, PlanParseError, parse_control_token, parse_plan, serialize_plan
from xplan.plan_ir import (
    MAX_SUBS,
    EditType,
    ImageBuffer,
    InvalidPlan,
    NormBox,
    Plan,
    SubInstruction,
    strip_anchor_markers,
    validate_plan,
)
from xplan.refine import AnchorMasks, MissingMask, refine_control

logger = logging.getLogger(__name__)

RECORD_SCHEMA = "compie_record_v1"
PAIRS_PER_IMAGE = 4

# GLaMM grounding sets followed by the four instruction corpora; the tenth
# weight has no dataset named next to it, hence the placeholder tag
DEFAULT_SOURCE_RATIO = (
    ("semantic_segm", 1),
    ("refcoco_gcg", 3),
    ("psg_gcg", 3),
    ("flickr_gcg", 3),
    ("grandf_gcg", 1),
    ("instructpix2pix_gcg", 3),
    ("unnamed_gcg", 3),
    ("ultraedit_gcg", 9),
    ("seedx_gcg", 9),
    ("mulan_gcg", 9),
)

# keyed by source tag; every other source contributes complex pairs only
DEFAULT_SIMPLE_FRACTIONS = {"instructpix2pix_gcg": 0.40, "mulan_gcg": 1.0}

BENCHMARK_TYPE_MIX = (
    ("general", 50),
    ("indirect", 30),
    ("multi_object", 15),
    ("multi_task", 5),
)

INSTRUCTION_KINDS = ("indirect", "multi_object", "multi_task")


class TemplateError(ValueError):
    pass


class NoPairsFound(ValueError):
    def __init__(self, rejections: Sequence["Rejection"] = ()):
        self.rejections = list(rejections)
        super().__init__(f"no valid complex/simple pairs ({len(self.rejections)} rejected)")


class BoxParseError(ValueError):
    pass


class LevelOrderError(RuntimeError):
    pass


# -- records -----------------------------------------------------------------------


@dataclass(frozen=True)
class SubRecord:
    edit_type: EditType
    text: str
    anchors: tuple[str, ...] = ()
    mask_ref: Optional[str] = None
    box: Optional[NormBox] = None

    def __post_init__(self):
        object.__setattr__(self, "edit_type", EditType(self.edit_type))
        object.__setattr__(self, "anchors", tuple(self.anchors))

    def to_dict(self) -> dict:
        return {
            "edit_type": self.edit_type.value,
            "text": self.text,
            "anchors": list(self.anchors),
            "mask_ref": self.mask_ref,
            "box": self.box.as_list() if self.box is not None else None,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SubRecord":
        box = d.get("box")
        return cls(
            EditType.parse(d["edit_type"]),
            d["text"],
            tuple(d.get("anchors", ())),
            d.get("mask_ref"),
            NormBox(*box) if box else None,
        )

    @classmethod
    def from_sub(cls, sub: SubInstruction) -> "SubRecord":
        return cls(sub.edit_type, sub.text, sub.anchors, None, sub.box)


@dataclass(frozen=True)
class DatasetRecord:
    record_id: str
    source_tag: str
    image_ref: str
    complex_instruction: str
    subs: tuple[SubRecord, ...]
    pair_kind: str = "complex_simple"
    split: str = "train"
    level: int = 1
    approved: bool = False
    instruction_kind: Optional[str] = None
    post_image_ref: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "subs", tuple(self.subs))
        if self.pair_kind not in ("complex_simple", "simple_simple"):
            raise ValueError(f"unknown pair kind {self.pair_kind!r}")
        if self.split not in ("train", "val"):
            raise ValueError(f"unknown split {self.split!r}")

    def to_plan(self) -> Plan:
        return Plan.from_subs(
            (SubInstruction(s.edit_type, s.text, s.anchors, s.box) for s in self.subs),
            self.complex_instruction,
        )

    def to_dict(self) -> dict:
        d = {
            "schema": RECORD_SCHEMA,
            "record_id": self.record_id,
            "source_tag": self.source_tag,
            "image_ref": self.image_ref,
            "complex_instruction": self.complex_instruction,
            "subs": [s.to_dict() for s in self.subs],
            "pair_kind": self.pair_kind,
            "split": self.split,
            "level": self.level,
            "approved": self.approved,
            "instruction_kind": self.instruction_kind,
            "post_image_ref": self.post_image_ref,
        }
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "DatasetRecord":
        schema = d.get("schema", RECORD_SCHEMA)
        if schema != RECORD_SCHEMA:
            raise ValueError(f"unsupported record schema {schema!r}")
        return cls(
            record_id=d["record_id"],
            source_tag=d["source_tag"],
            image_ref=d["image_ref"],
            complex_instruction=d["complex_instruction"],
            subs=tuple(SubRecord.from_dict(s) for s in d["subs"]),
            pair_kind=d.get("pair_kind", "complex_simple"),
            split=d.get("split", "train"),
            level=int(d.get("level", 1)),
            approved=bool(d.get("approved", False)),
            instruction_kind=d.get("instruction_kind"),
            post_image_ref=d.get("post_image_ref"),
        )


def content_id(source_tag: str, image_ref: str, complex_instruction: str, plan: Plan) -> str:
    h = hashlib.sha256()
    for part in (source_tag, image_ref, complex_instruction, serialize_plan(plan)):
        h.update(part.encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()[:20]


def make_record(
    source_tag: str,
    image_ref: str,
    complex_instruction: str,
    plan: Plan,
    **extra,
) -> DatasetRecord:
    return DatasetRecord(
        record_id=content_id(source_tag, image_ref, complex_instruction, plan),
        source_tag=source_tag,
        image_ref=image_ref,
        complex_instruction=complex_instruction,
        subs=tuple(SubRecord.from_sub(s) for s in plan.subs),
        **extra,
    )


def record_problems(record: DatasetRecord, require_level: int = 3) -> list[str]:
    """Reasons a record may not be emitted; empty when it is complete."""
    problems = [v.describe() for v in validate_plan(record.to_plan())]
    if require_level >= 2:
        problems += [f"sub {i}: no mask" for i, s in enumerate(record.subs) if not s.mask_ref]
    if require_level >= 3:
        problems += [
            f"sub {i}: insertion without box"
            for i, s in enumerate(record.subs)
            if s.edit_type is EditType.INSERTION and s.box is None
        ]
    return problems


def read_records(path: Union[str, Path]) -> Iterator[DatasetRecord]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield DatasetRecord.from_dict(json.loads(line))


class RecordWriter:
    """Append-only JSONL writer that skips ids already on disk."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self.seen: set[str] = set()
        if self.path.exists():
            self.seen = {r.record_id for r in read_records(self.path)}

    def write(self, record: DatasetRecord) -> bool:
        with self._lock:
            if record.record_id in self.seen:
                return False
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
            self.seen.add(record.record_id)
            return True


# -- Level 1 -------------------------------------------------------------------------


@dataclass(frozen=True)
class InContextExample:
    kind: str
    complex_instruction: str
    decomposition: str


DEFAULT_IN_CONTEXT_EXAMPLES = (
    InContextExample(
        "indirect",
        "Make it look like the season when ice cream is a daily essential",
        "[background] Change the <background> to a sunny summer beach\n"
        "[local color change] Make the <trees> bright green",
    ),
    InContextExample(
        "multi_object",
        "Dress the cat and the dog for a party",
        "[insertion] Add a party hat on the <cat>\n[insertion] Add a bow tie on the <dog>",
    ),
    InContextExample(
        "multi_task",
        "Swap the cat for a fox and make the whole picture look like a 1950's photo",
        "[replace] Replace the <cat> with a <fox>\n[style] Make image 1950's style",
    ),
)

DEFAULT_LEVEL1_TEMPLATE = """\
You write image-editing instructions.  The image shows: {image_caption}

Write {num_pairs} complex editing instructions for this image.  Mix indirect
instructions, instructions touching several objects, and instructions that
combine several kinds of edit.  Decompose each one into 1 to {max_subs} simple
sub-instructions, one per line, written as

    [edit type] instruction text with the edited object marked as <anchor>

The edit type is one of: {edit_types}.
Every sub-instruction marks exactly one <anchor>, except replace, which marks
two (the object before and the object after), and style, which may mark none.

Answer in this layout, once per instruction:

Complex: <the complex instruction>
Decomposition:
<one sub-instruction per line>

Examples:
{examples}
"""


def _format_examples(examples: Sequence[InContextExample]) -> str:
    return "\n\n".join(
        f"Complex: {ex.complex_instruction}\nDecomposition:\n{ex.decomposition}" for ex in examples
    )


def build_level1_prompt(
    image_meta: Mapping[str, object],
    template: str = DEFAULT_LEVEL1_TEMPLATE,
    in_context_examples: Sequence[InContextExample] = DEFAULT_IN_CONTEXT_EXAMPLES,
) -> str:
    """Fill the Level-1 template.

    Placeholders come from ``image_meta`` plus ``edit_types``, ``examples``,
    ``num_pairs`` and ``max_subs``; an unfilled placeholder is a TemplateError.
    """
    if not template.strip():
        raise TemplateError("empty template")
    kinds = {ex.kind for ex in in_context_examples}
    missing_kinds = set(INSTRUCTION_KINDS) - kinds
    if missing_kinds:
        raise TemplateError(f"in-context examples lack kinds {sorted(missing_kinds)}")
    values = {
        "edit_types": ", ".join(et.label for et in EditType),
        "examples": _format_examples(in_context_examples),
        "num_pairs": PAIRS_PER_IMAGE,
        "max_subs": MAX_SUBS,
        **image_meta,
    }
    wanted = {name for _, name, _, _ in string.Formatter().parse(template) if name is not None}
    unresolved = sorted(n for n in wanted if n.split(".")[0].split("[")[0] not in values)
    if unresolved:
        raise TemplateError(f"unresolved placeholders: {unresolved}")
    try:
        return template.format(**values)
    except (KeyError, IndexError, ValueError) as exc:
        raise TemplateError(str(exc)) from None


_COMPLEX_RE = re.compile(
    r"^\s*(?:(?:pair|instruction)\s*\d+\s*[:.)-]?\s*)?complex(?:\s+instruction)?\s*:\s*(.*)$",
    re.IGNORECASE,
)
_SKIP_RE = re.compile(
    r"^\s*(?:(?:pair|instruction)\s*\d+\s*[:.)]?|decomposition\s*:?|simple(?:\s+instructions?)?\s*:?)\s*$",
    re.IGNORECASE,
)


@dataclass(frozen=True)
class Level1Candidate:
    complex_instruction: str
    plan: Plan


@dataclass(frozen=True)
class Rejection:
    complex_instruction: str
    reason: str


def parse_level1_response(
    text: str,
    rejections: Optional[list[Rejection]] = None,
    max_pairs: int = PAIRS_PER_IMAGE,
) -> list[Level1Candidate]:
    """Extract up to ``max_pairs`` validated (complex, plan) pairs.

    Invalid pairs are dropped, logged, and appended to ``rejections`` when a
    list is given.
    """
    blocks: list[tuple[str, list[str]]] = []
    for line in text.splitlines():
        m = _COMPLEX_RE.match(line)
        if m:
            blocks.append((m.group(1).strip(), []))
        elif blocks and line.strip() and not _SKIP_RE.match(line):
            blocks[-1][1].append(line)

    dropped: list[Rejection] = []
    out: list[Level1Candidate] = []
    for complex_instruction, lines in blocks[:max_pairs]:
        reason = None
        if not complex_instruction:
            reason = "empty complex instruction"
        else:
            try:
                plan = parse_plan("\n".join(lines), complex_instruction)
            except InvalidPlan as exc:
                reason = "; ".join(type(v).__name__ + ": " + v.describe() for v in exc.violations)
            except PlanParseError as exc:
                reason = f"{type(exc).__name__}: {exc}"
        if reason is None:
            out.append(Level1Candidate(complex_instruction, plan))
        else:
            logger.info("dropping Level-1 pair %r: %s", complex_instruction, reason)
            dropped.append(Rejection(complex_instruction, reason))
    if rejections is not None:
        rejections.extend(dropped)
    if not out:
        raise NoPairsFound(dropped)
    return out


# -- Level 2 ---------------------------------------------------------------------------


def annotate_level2(
    record: DatasetRecord,
    segmenter: Segmenter,
    image: ImageBuffer,
    mask_dir: Union[str, Path],
    *,
    post_image: Optional[ImageBuffer] = None,
    dilation: float = DEFAULT_DILATION,
    min_box_area: float = DEFAULT_MIN_BOX_AREA,
    mask_prefix: str = "masks",
) -> DatasetRecord:
    """Segment every anchor, refine by edit type and persist the masks.

    Insertions keep their anchor mask here; their box is Level 3's job.
    Raises MissingMask (with ``sub_index``) when an anchor segments to nothing.
    """
    violations = validate_plan(record.to_plan())
    if violations:
        raise InvalidPlan(violations)
    mask_dir = Path(mask_dir)
    mask_dir.mkdir(parents=True, exist_ok=True)
    plan = record.to_plan()
    new_subs = []
    for sub, srec in zip(plan.subs, record.subs):
        if sub.edit_type is EditType.STYLE:
            masks = AnchorMasks(())
        else:
            masks = AnchorMasks(tuple(segmenter.segment(image, a) for a in sub.anchors))
            if sub.edit_type is EditType.REPLACE and post_image is not None:
                masks = replace(masks, post_edit=segmenter.segment(post_image, sub.anchors[1]))
        if sub.edit_type is EditType.INSERTION and sub.box is None:
            if not masks.masks or masks.masks[0].area == 0:
                raise MissingMask(f"sub {sub.index}: empty stage-1 mask for insertion", sub.index)
            mask = masks.masks[0]
        else:
            control = refine_control(
                sub, masks, image.dims, dilation=dilation, min_box_area=min_box_area
            )
            mask = control.mask
        name = f"{record.record_id}_{sub.index}.png"
        save_mask(mask, mask_dir / name)
        new_subs.append(replace(srec, mask_ref=f"{mask_prefix}/{name}"))
    return replace(record, subs=tuple(new_subs), level=max(record.level, 2))


# -- Level 3 ---------------------------------------------------------------------------


def parse_box_response(text: str) -> NormBox:
    m = re.search(r"<[^<>]*>", text)
    if not m:
        raise BoxParseError(f"no box token in {text!r}")
    token = parse_control_token(m.group(0))
    if not isinstance(token, BoxToken):
        raise BoxParseError(f"not a box: {m.group(0)!r}")
    try:
        return token.to_box()
    except ValueError as exc:
        raise BoxParseError(f"malformed box {m.group(0)!r}: {exc}") from None


def pseudolabel_level3(
    record: DatasetRecord,
    planner: Planner,
    image: ImageBuffer,
    *,
    min_box_area: float = DEFAULT_MIN_BOX_AREA,
) -> DatasetRecord:
    """Ask the box-capable planner for a box per unboxed insertion and
    enlarge small ones.  Subs that already carry a box are left alone."""
    if record.level < 2 or any(not s.mask_ref for s in record.subs):
        raise LevelOrderError(f"record {record.record_id} has not completed Level 2")
    new_subs = []
    for s in record.subs:
        if s.edit_type is EditType.INSERTION and s.box is None:
            box = parse_box_response(planner.propose_box(image, s.text))
            s = replace(s, box=enlarge_small_box(box, min_box_area))
        new_subs.append(s)
    return replace(record, subs=tuple(new_subs), level=3)


# -- sampling and mixing ---------------------------------------------------------------


@dataclass(frozen=True)
class SourceWeights:
    entries: tuple[tuple[str, int], ...]

    def __post_init__(self):
        entries = tuple((str(t), int(w)) for t, w in self.entries)
        if not entries:
            raise ValueError("no sources")
        if any(w <= 0 for _, w in entries):
            raise ValueError("source weights must be positive")
        if len({t for t, _ in entries}) != len(entries):
            raise ValueError("duplicate source tags")
        object.__setattr__(self, "entries", entries)

    @property
    def tags(self) -> list[str]:
        return [t for t, _ in self.entries]

    def probabilities(self) -> np.ndarray:
        w = np.array([w for _, w in self.entries], dtype=np.float64)
        return w / w.sum()


DEFAULT_WEIGHTS = SourceWeights(DEFAULT_SOURCE_RATIO)


def sample_sources(weights: SourceWeights, rng: np.random.Generator, size: int) -> list[str]:
    idx = rng.choice(len(weights.entries), size=size, p=weights.probabilities())
    tags = weights.tags
    return [tags[i] for i in idx]


def sample_source(weights: SourceWeights, rng: np.random.Generator) -> str:
    """One categorical draw proportional to the weights."""
    return sample_sources(weights, rng, 1)[0]


def as_simple_pair(record: DatasetRecord) -> DatasetRecord:
    """Single-step record whose input instruction is its own decomposition."""
    first = record.subs[0]
    simple = strip_anchor_markers(first.text).strip()
    plan = Plan.from_subs([SubInstruction(first.edit_type, first.text, first.anchors, first.box)], simple)
    return replace(
        record,
        record_id=content_id(record.source_tag, record.image_ref, simple, plan),
        complex_instruction=simple,
        subs=(first,),
        pair_kind="simple_simple",
    )


def mix_simple_pairs(
    records: Iterable[DatasetRecord],
    simple_fraction: Union[float, Mapping[str, float]],
    rng: np.random.Generator,
) -> list[DatasetRecord]:
    """Turn each record into a simple/simple pair with probability
    ``simple_fraction`` (a number, or a per-source mapping defaulting to 0)."""

    def fraction_for(tag: str) -> float:
        f = simple_fraction.get(tag, 0.0) if isinstance(simple_fraction, Mapping) else simple_fraction
        if not 0.0 <= f <= 1.0:
            raise ValueError(f"simple fraction {f} outside [0, 1]")
        return f

    out = []
    for rec in records:
        # draw for every record so the stream stays aligned across configs
        u = rng.random()
        if u < fraction_for(rec.source_tag):
            out.append(as_simple_pair(rec))
        else:
            out.append(replace(rec, pair_kind="complex_simple"))
    return out


# -- statistics ------------------------------------------------------------------------


def _pct_table(counts: Counter, keys: Sequence) -> dict:
    total = sum(counts.values())
    return {
        str(k): {"count": counts.get(k, 0), "percent": 100.0 * counts.get(k, 0) / total if total else 0.0}
        for k in keys
    }


@dataclass
class DatasetStats:
    n_records: int
    n_subs: int
    per_source: dict
    per_edit_type: dict
    subs_histogram: dict
    pair_kinds: dict

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"records: {self.n_records}   sub-instructions: {self.n_subs}", ""]
        for title, table in (
            ("source", self.per_source),
            ("edit type", self.per_edit_type),
            ("subs per record", self.subs_histogram),
            ("pair kind", self.pair_kinds),
        ):
            width = max([len(title)] + [len(k) for k in table])
            lines.append(f"{title.ljust(width)}  {'count':>8}  {'percent':>8}")
            for k, v in table.items():
                lines.append(f"{k.ljust(width)}  {v['count']:>8}  {v['percent']:>7.1f}%")
            lines.append("")
        return "\n".join(lines).rstrip() + "\n"


def dataset_stats(records: Iterable[DatasetRecord]) -> DatasetStats:
    sources: Counter = Counter()
    types: Counter = Counter()
    hist: Counter = Counter()
    kinds: Counter = Counter()
    n = 0
    for rec in records:
        n += 1
        sources[rec.source_tag] += 1
        hist[len(rec.subs)] += 1
        kinds[rec.pair_kind] += 1
        types.update(s.edit_type.value for s in rec.subs)
    return DatasetStats(
        n_records=n,
        n_subs=sum(types.values()),
        per_source=_pct_table(sources, sorted(sources)),
        per_edit_type=_pct_table(types, [et.value for et in EditType]),
        subs_histogram=_pct_table(hist, list(range(1, MAX_SUBS + 1))),
        pair_kinds=_pct_table(kinds, ["complex_simple", "simple_simple"]),
    )


def benchmark_mix_report(records: Iterable[DatasetRecord]) -> dict:
    """Observed instruction-kind shares next to the benchmark targets."""
    counts = Counter(r.instruction_kind for r in records)
    total = sum(counts.values())
    target_total = sum(w for _, w in BENCHMARK_TYPE_MIX)
    return {
        kind: {
            "target_percent": 100.0 * w / target_total,
            "count": counts.get(kind, 0),
            "percent": 100.0 * counts.get(kind, 0) / total if total else 0.0,
        }
        for kind, w in BENCHMARK_TYPE_MIX
    }


def sample_instruction_kinds(rng: np.random.Generator, size: int) -> list[str]:
    w = SourceWeights(BENCHMARK_TYPE_MIX)
    return sample_sources(w, rng, size)


# -- corpus runner ---------------------------------------------------------------------


@dataclass
class AnnotationSummary:
    written: int = 0
    skipped: int = 0
    quarantined: int = 0
    rejected_pairs: int = 0


class Quarantine:
    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self._lock = threading.Lock()

    def add(self, item: Mapping, reason: str) -> None:
        with self._lock:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps({"reason": reason, "item": item}, sort_keys=True) + "\n")


def level1_records(
    item: Mapping,
    image: ImageBuffer,
    planner: Optional[Planner],
    rejections: Optional[list[Rejection]] = None,
    template: str = DEFAULT_LEVEL1_TEMPLATE,
) -> list[DatasetRecord]:
    """Level-1 records for one corpus item.

    The generator answer is taken from ``item["response"]`` when present,
    otherwise requested from ``planner.generate``.
    """
    response = item.get("response")
    if response is None:
        if planner is None:
            raise ValueError("corpus item has no response and no generator is configured")
        meta = {"image_caption": item.get("caption", "an image")}
        response = planner.generate(image, build_level1_prompt(meta, template))
    candidates = parse_level1_response(response, rejections)
    return [
        make_record(
            item["source_tag"],
            item["image_ref"],
            c.complex_instruction,
            c.plan,
            instruction_kind=item.get("instruction_kind"),
            post_image_ref=item.get("post_image_ref"),
            split=item.get("split", "train"),
        )
        for c in candidates
    ]


def annotate_records(
    records: Iterable[DatasetRecord],
    out_dir: Union[str, Path],
    load_image,
    *,
    segmenter: Optional[Segmenter] = None,
    planner: Optional[Planner] = None,
    levels: Sequence[int] = (2, 3),
    dilation: float = DEFAULT_DILATION,
    min_box_area: float = DEFAULT_MIN_BOX_AREA,
    summary: Optional[AnnotationSummary] = None,
) -> AnnotationSummary:
    """Run Levels 2 and/or 3 over records and append complete ones to
    ``out_dir/records.jsonl``.  Failing records go to ``quarantine.jsonl``;
    records whose id is already in the output are skipped."""
    out_dir = Path(out_dir)
    writer = RecordWriter(out_dir / "records.jsonl")
    quarantine = Quarantine(out_dir / "quarantine.jsonl")
    summary = summary or AnnotationSummary()
    target = max(levels)
    for rec in records:
        if rec.record_id in writer.seen:
            summary.skipped += 1
            continue
        try:
            image = load_image(rec.image_ref)
            if 2 in levels:
                post = load_image(rec.post_image_ref) if rec.post_image_ref else None
                rec = annotate_level2(
                    rec, segmenter, image, out_dir / "masks",
                    post_image=post, dilation=dilation, min_box_area=min_box_area,
                )
            if 3 in levels:
                rec = pseudolabel_level3(rec, planner, image, min_box_area=min_box_area)
            problems = record_problems(rec, require_level=target)
            if problems:
                raise ValueError("; ".join(problems))
        except Exception as exc:  # quarantine, never drop silently
            logger.warning("quarantining %s: %s", rec.record_id, exc)
            quarantine.add(rec.to_dict(), f"{type(exc).__name__}: {exc}")
            summary.quarantined += 1
            continue
        if writer.write(rec):
            summary.written += 1
        else:
            summary.skipped += 1
    return summary
