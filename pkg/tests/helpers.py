"""Random generators shared by the unit, property and acceptance tests."""

from __future__ import annotations

import numpy as np
from hypothesis import strategies as st

from xplan.parser import serialize_line
from xplan.plan_ir import BinaryMask, EditType, ImageBuffer, NormBox, Plan, SubInstruction

WORDS = ("cat", "dog", "red vase", "tree", "old car", "the sky", "cushion", "wooden table", "lamp")
VERBS = ("Make", "Turn", "Add", "Change", "Put", "Give")
TAILS = ("look older", "shine", "to be in cyberpunk", "bigger", "bright blue", "near the window")


def random_box(rng: np.random.Generator, grid: float | None = None) -> NormBox:
    while True:
        xs = np.sort(rng.uniform(0, 1, 2))
        ys = np.sort(rng.uniform(0, 1, 2))
        if grid:
            xs = np.round(xs / grid) * grid
            ys = np.round(ys / grid) * grid
        if xs[1] > xs[0] and ys[1] > ys[0]:
            return NormBox(float(xs[0]), float(ys[0]), float(xs[1]), float(ys[1]))


def random_sub(
    rng: np.random.Generator,
    index: int = 0,
    edit_type: EditType | None = None,
    executable: bool = False,
) -> SubInstruction:
    """A valid sub; ``executable`` guarantees insertions carry a box."""
    et = edit_type or list(EditType)[rng.integers(len(EditType))]
    pick = lambda seq: seq[rng.integers(len(seq))]
    if et is EditType.REPLACE:
        a, b = pick(WORDS), pick(WORDS)
        return SubInstruction(et, f"Replace the <{a}> with a <{b}>", (a, b), None, index)
    if et is EditType.STYLE:
        if rng.random() < 0.5:
            return SubInstruction(et, f"{pick(VERBS)} the image {pick(TAILS)}", (), None, index)
        a = pick(WORDS)
        return SubInstruction(et, f"Render <{a}> as an oil painting", (a,), None, index)
    a = pick(WORDS)
    box = None
    if et is EditType.INSERTION and (executable or rng.random() < 0.7):
        box = random_box(rng)
    return SubInstruction(et, f"{pick(VERBS)} the <{a}> {pick(TAILS)}", (a,), box, index)


def random_plan(rng: np.random.Generator, n: int | None = None, executable: bool = False) -> Plan:
    n = n or int(rng.integers(1, 6))
    subs = tuple(random_sub(rng, i, executable=executable) for i in range(n))
    return Plan(subs, "random complex instruction")


def random_image(rng: np.random.Generator, w: int, h: int) -> ImageBuffer:
    return ImageBuffer(rng.integers(0, 256, (h, w, 3), dtype=np.uint8))


def random_mask(rng: np.random.Generator, w: int, h: int, p: float = 0.3, nonempty: bool = True) -> BinaryMask:
    bits = rng.random((h, w)) < p
    if nonempty and not bits.any():
        bits[rng.integers(h), rng.integers(w)] = True
    return BinaryMask(bits)


def blob_mask(rng: np.random.Generator, w: int, h: int) -> BinaryMask:
    """A filled rectangle or ellipse, closer to real segmentations than noise."""
    yy, xx = np.mgrid[0:h, 0:w]
    cx, cy = rng.uniform(0, w), rng.uniform(0, h)
    rx, ry = rng.uniform(1, w / 3 + 1), rng.uniform(1, h / 3 + 1)
    if rng.random() < 0.5:
        bits = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    else:
        bits = (abs(xx - cx) <= rx) & (abs(yy - cy) <= ry)
    if not bits.any():
        bits[min(int(cy), h - 1), min(int(cx), w - 1)] = True
    return BinaryMask(bits)


# -- hypothesis strategies -------------------------------------------------------

coords = st.floats(min_value=0.0, max_value=1.0, allow_nan=False)


@st.composite
def norm_boxes(draw, min_side: float = 1e-6):
    x1 = draw(st.floats(0.0, 1.0 - min_side))
    y1 = draw(st.floats(0.0, 1.0 - min_side))
    x2 = draw(st.floats(x1 + min_side, 1.0))
    y2 = draw(st.floats(y1 + min_side, 1.0))
    return NormBox(x1, y1, x2, y2)


@st.composite
def masks(draw, max_side: int = 24, nonempty: bool = False):
    w = draw(st.integers(1, max_side))
    h = draw(st.integers(1, max_side))
    seed = draw(st.integers(0, 2**32 - 1))
    p = draw(st.floats(0.0, 1.0))
    return random_mask(np.random.default_rng(seed), w, h, p, nonempty=nonempty)


@st.composite
def plans(draw):
    seed = draw(st.integers(0, 2**32 - 1))
    return random_plan(np.random.default_rng(seed))


# -- Level-1 adversarial corpus -------------------------------------------------------


def _valid_line(rng, et):
    return serialize_line(random_sub(rng, 0, et))


def adversarial_level1_corpus(rng: np.random.Generator, n: int = 50):
    """Generator answers that must be rejected, each with the violation name
    the rejection reason has to mention.

    Half exceed the sub-instruction cap (6..9 lines), half carry a replace
    line whose anchor count is not two.  Valid lines are shuffled around the
    offending content so position gives nothing away.
    """
    ets = [e for e in EditType if e is not EditType.REPLACE]
    cases = []
    for i in range(n):
        if i % 2 == 0:
            k = int(rng.integers(6, 10))
            lines = [_valid_line(rng, ets[rng.integers(len(ets))]) for _ in range(k)]
            want = "TooManySubs"
        else:
            a, b, c = (WORDS[j] for j in rng.choice(len(WORDS), 3, replace=False))
            bad = [
                f"[replace] Replace the <{a}> with a {b}",
                f"[replace] Replace the {a} with a {b}",
                f"[replace] Replace the <{a}> and <{b}> with a <{c}>",
                f"replace: Swap <{a}> for something nicer",
            ][i // 2 % 4]
            lines = [_valid_line(rng, ets[rng.integers(len(ets))]) for _ in range(int(rng.integers(0, 4)))]
            lines.insert(int(rng.integers(len(lines) + 1)), bad)
            want = "AnchorArity"
        text = f"Complex: adversarial case {i}\nDecomposition:\n" + "\n".join(lines)
        cases.append((text, want))
    return cases


def valid_level1_corpus(rng: np.random.Generator, n: int = 50):
    """Answers that must be accepted: 1..5 subs, replace lines with two anchors."""
    out = []
    for i in range(n):
        k = int(rng.integers(1, 6))
        lines = [_valid_line(rng, list(EditType)[rng.integers(len(EditType))]) for _ in range(k)]
        out.append(f"Complex: control case {i}\nDecomposition:\n" + "\n".join(lines))
    return out
