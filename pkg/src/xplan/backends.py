"""Model-service contracts, HTTP clients and deterministic mocks.

Five services sit behind the pipeline: a planner, one or more editors, a
segmenter, a verifier and an embedder.  Over the wire every call is a POST of
a UTF-8 JSON body; images and masks travel as base64 PNG.

=========  ==============================================  ===================
endpoint   request fields                                  response fields
=========  ==============================================  ===================
/plan      image_png_b64, instruction,                     text
           task ("plan" | "box" | "generate")
/edit      image_png_b64, mask_png_b64, box, instruction,  image_png_b64
           seed, backend_id
/segment   image_png_b64, anchor                           mask_png_b64
/score     image_png_b64, edited_png_b64, instruction,     score, rationale
           prompt
/embed     image_png_b64                                   embedding
=========  ==============================================  ===================
"""

from __future__ import annotations

import base64
import io
import json
import logging
import socket
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Callable, Mapping, Optional, Protocol, Sequence, Union

import numpy as np
from PIL import Image

from xplan.masks import box_to_mask, mask_from_png_bytes, mask_to_png_bytes
from xplan.plan_ir import BinaryMask, DimensionMismatch, ImageBuffer, NormBox
from xplan.refine import ControlInput

logger = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3

TRANSPORT_RETRIES = 3
BACKOFF_BASE_S = 0.2

VERIFIER_PROMPT = (
    "You are judging one step of an image edit.  Compare the source image and "
    "the edited image and rate how well the edited image carries out this "
    "instruction: {instruction!r}.  Consider shape, color and texture.  Answer "
    "with a single integer from 0 (very poor) to 4 (excellent)."
)


# -- errors -----------------------------------------------------------------


class BackendError(RuntimeError):
    pass


class TransportError(BackendError):
    def __init__(self, message: str, status: Optional[int] = None):
        self.status = status
        super().__init__(message)


class BackendTimeout(TransportError):
    pass


class BackendRejected(BackendError):
    pass


class DimsMismatch(BackendError):
    pass


class OutOfRange(BackendError):
    pass


class DimDrift(BackendError):
    pass


class EmptyAnchor(ValueError):
    pass


# -- request / response types ---------------------------------------------------


@dataclass(frozen=True)
class EditRequest:
    image: ImageBuffer
    instruction: str
    control: ControlInput
    seed: int
    backend_id: str = "default"

    def __post_init__(self):
        if self.control.dims != self.image.dims:
            raise DimensionMismatch(
                f"control region {self.control.dims} does not match image {self.image.dims}"
            )
        if not 0 <= self.seed <= MASK64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {self.seed}")


@dataclass(frozen=True)
class VerifierScore:
    score: int
    rationale: Optional[str] = None

    def __post_init__(self):
        if isinstance(self.score, bool) or not isinstance(self.score, int) or not 0 <= self.score <= 4:
            raise OutOfRange(f"verifier score {self.score!r} outside 0..4")


class Planner(Protocol):
    def plan(self, image: ImageBuffer, instruction: str) -> str: ...

    def propose_box(self, image: ImageBuffer, instruction: str) -> str: ...

    def generate(self, image: ImageBuffer, prompt: str) -> str: ...


class Editor(Protocol):
    def edit(self, req: EditRequest) -> ImageBuffer: ...


class Segmenter(Protocol):
    def segment(self, image: ImageBuffer, anchor: str) -> BinaryMask: ...


class Verifier(Protocol):
    def score(self, source: ImageBuffer, edited: ImageBuffer, instruction: str) -> VerifierScore: ...


class Embedder(Protocol):
    def embed(self, image: ImageBuffer) -> np.ndarray: ...


# -- PNG / base64 helpers -----------------------------------------------------------


def image_to_png_bytes(image: ImageBuffer) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(image.data), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def image_from_png_bytes(data: bytes) -> ImageBuffer:
    with Image.open(io.BytesIO(data)) as im:
        return ImageBuffer(np.asarray(im.convert("RGB"), dtype=np.uint8))


def load_image(path: Union[str, Path]) -> ImageBuffer:
    return image_from_png_bytes(Path(path).read_bytes())


def save_image(image: ImageBuffer, path: Union[str, Path]) -> None:
    Path(path).write_bytes(image_to_png_bytes(image))


def b64_image(image: ImageBuffer) -> str:
    return base64.b64encode(image_to_png_bytes(image)).decode("ascii")


def image_from_b64(text: str) -> ImageBuffer:
    return image_from_png_bytes(base64.b64decode(text))


def b64_mask(mask: BinaryMask) -> str:
    return base64.b64encode(mask_to_png_bytes(mask)).decode("ascii")


def mask_from_b64(text: str) -> BinaryMask:
    return mask_from_png_bytes(base64.b64decode(text))


def edit_request_payload(req: EditRequest) -> dict:
    box = req.control.box
    return {
        "image_png_b64": b64_image(req.image),
        "mask_png_b64": b64_mask(req.control.region),
        "box": box.as_list() if box is not None else None,
        "instruction": req.instruction,
        "seed": req.seed,
        "backend_id": req.backend_id,
    }


def edit_request_from_payload(payload: Mapping) -> EditRequest:
    image = image_from_b64(payload["image_png_b64"])
    region = mask_from_b64(payload["mask_png_b64"])
    box = NormBox(*payload["box"]) if payload.get("box") else None
    return EditRequest(
        image,
        payload["instruction"],
        ControlInput(region, region, box),
        int(payload["seed"]),
        payload.get("backend_id", "default"),
    )


# -- deterministic hashing ------------------------------------------------------------


def splitmix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _fnv1a(state: int, data: bytes) -> int:
    for byte in data:
        state = ((state ^ byte) * FNV_PRIME) & MASK64
    return state


def _hash_prefix(instruction: str, seed: int) -> int:
    state = _fnv1a(FNV_OFFSET, instruction.encode("utf-8") + b"\x00")
    return _fnv1a(state, (seed & MASK64).to_bytes(8, "little"))


def pixel_hash(instruction: str, seed: int, x: int, y: int) -> int:
    """64-bit hash of (instruction, seed, x, y).

    FNV-1a over ``utf8(instruction) 0x00 seed:u64le x:u32le y:u32le`` followed
    by the splitmix64 finalizer.  Pure integer arithmetic, so identical on
    every platform.
    """
    state = _hash_prefix(instruction, seed)
    state = _fnv1a(state, int(x).to_bytes(4, "little") + int(y).to_bytes(4, "little"))
    return splitmix64(state)


def pixel_hash_grid(instruction: str, seed: int, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Vectorized :func:`pixel_hash` over coordinate arrays (uint64 result)."""
    xs = np.asarray(xs, dtype=np.uint64)
    ys = np.asarray(ys, dtype=np.uint64)
    state = np.full(xs.shape, _hash_prefix(instruction, seed), dtype=np.uint64)
    prime = np.uint64(FNV_PRIME)
    for coord in (xs, ys):
        for k in range(4):
            byte = (coord >> np.uint64(8 * k)) & np.uint64(0xFF)
            state = (state ^ byte) * prime
    z = state
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


# -- mocks -------------------------------------------------------------------------------


def mock_edit(req: EditRequest) -> ImageBuffer:
    """Deterministic stand-in editor.

    Pixels outside the control region are copied; inside it, channel c takes
    byte c of ``pixel_hash(instruction, seed, x, y)``.
    """
    out = np.array(req.image.data)
    ys, xs = np.nonzero(req.control.region.bits)
    if xs.size:
        h = pixel_hash_grid(req.instruction, req.seed, xs, ys)
        for c in range(3):
            out[ys, xs, c] = ((h >> np.uint64(8 * c)) & np.uint64(0xFF)).astype(np.uint8)
    return ImageBuffer(out)


class MockEditor:
    def __init__(self):
        self.calls = 0
        self._lock = threading.Lock()

    def edit(self, req: EditRequest) -> ImageBuffer:
        with self._lock:
            self.calls += 1
        return mock_edit(req)


def hashed_box(text: str, salt: int = 0, min_side: float = 0.15, max_side: float = 0.5) -> NormBox:
    """Deterministic pseudo-random box derived from ``text``."""
    h = pixel_hash(text, salt, 0, 0)
    u = [((h >> (16 * k)) & 0xFFFF) / 0xFFFF for k in range(4)]
    bw = min_side + (max_side - min_side) * u[0]
    bh = min_side + (max_side - min_side) * u[1]
    x1 = (1.0 - bw) * u[2]
    y1 = (1.0 - bh) * u[3]
    return NormBox(x1, y1, min(1.0, x1 + bw), min(1.0, y1 + bh))


class MockSegmenter:
    """Segmenter double.

    ``fixtures`` maps anchor phrases to a mask (must match the image) or a
    normalized box (rasterized at the image size).  Anchors listed in
    ``absent`` segment to an empty mask; anything else gets a box derived from
    a hash of the phrase.
    """

    def __init__(
        self,
        fixtures: Optional[Mapping[str, Union[BinaryMask, NormBox]]] = None,
        absent: Sequence[str] = (),
    ):
        self.fixtures = dict(fixtures or {})
        self.absent = set(absent)
        self.calls: list[str] = []
        self._lock = threading.Lock()

    def segment(self, image: ImageBuffer, anchor: str) -> BinaryMask:
        if not anchor.strip():
            raise EmptyAnchor("anchor phrase is blank")
        with self._lock:
            self.calls.append(anchor)
        if anchor in self.absent:
            return BinaryMask.empty(*image.dims)
        found = self.fixtures.get(anchor)
        if isinstance(found, BinaryMask):
            if found.dims != image.dims:
                raise DimsMismatch(f"fixture mask {found.dims} vs image {image.dims}")
            return found
        box = found if isinstance(found, NormBox) else hashed_box(anchor)
        return box_to_mask(box, *image.dims)


class MockVerifier:
    """Returns scripted scores in order, then ``default`` forever."""

    def __init__(self, script: Sequence[int] = (), default: int = 4):
        self.script = list(script)
        self.default = default
        self.calls = 0
        self._lock = threading.Lock()

    def score(self, source: ImageBuffer, edited: ImageBuffer, instruction: str) -> VerifierScore:
        if source.dims != edited.dims:
            raise DimsMismatch(f"{source.dims} vs {edited.dims}")
        with self._lock:
            i = self.calls
            self.calls += 1
        value = self.script[i] if i < len(self.script) else self.default
        return VerifierScore(int(value), "scripted" if i < len(self.script) else "default")


class MockPlanner:
    """Planner double: canned responses per instruction, otherwise a
    single-step style plan carrying the instruction unchanged."""

    def __init__(self, responses: Optional[Mapping[str, str]] = None,
                 boxes: Optional[Mapping[str, str]] = None):
        self.responses = dict(responses or {})
        self.boxes = dict(boxes or {})

    def plan(self, image: ImageBuffer, instruction: str) -> str:
        if instruction in self.responses:
            return self.responses[instruction]
        flat = instruction.replace("<", "").replace(">", "").strip()
        return f"[style] {flat}\n"

    def propose_box(self, image: ImageBuffer, instruction: str) -> str:
        if instruction in self.boxes:
            return self.boxes[instruction]
        b = hashed_box(instruction, salt=1, min_side=0.05, max_side=0.4)
        return "<" + ",".join(f"{c:.4f}" for c in b.as_list()) + ">"

    def generate(self, image: ImageBuffer, prompt: str) -> str:
        """Four canned pairs, rotated by a hash of the prompt."""
        start = pixel_hash(prompt, 2, 0, 0) % len(_CANNED_PAIRS)
        picked = [_CANNED_PAIRS[(start + i) % len(_CANNED_PAIRS)] for i in range(4)]
        return "\n\n".join(f"Complex: {c}\nDecomposition:\n{d}" for c, d in picked)


_CANNED_PAIRS = (
    ("Get the cat ready for Christmas",
     "[insertion] Add Christmas ornaments around the <cat>\n[local color change] Make the <cushion> red"),
    ("Make it feel like a summer holiday",
     "[background] Replace the <background> with a summer beach scene\n"
     "[insertion] Add sunglasses on the <person>"),
    ("Turn the tree into something from a sci-fi movie", "[local texture] Make <tree> to be in cyberpunk"),
    ("Swap the cat for a dog and give the picture an old look",
     "[replace] Replace the <cat> with a <dog>\n[style] Make image 1950's style"),
    ("Tidy up the table and make the vase taller",
     "[remove] Remove the <cup> from the table\n[shape change] Make the <vase> taller"),
    ("Make the image look like a watercolor painting", "[style] Make image watercolor style"),
)


class MockEmbedder:
    """Block-mean colour features: ``grid``×``grid`` cells × 3 channels."""

    def __init__(self, grid: int = 4):
        self.grid = grid

    def embed(self, image: ImageBuffer) -> np.ndarray:
        data = image.data.astype(np.float64) / 255.0
        g = self.grid
        rows = np.array_split(np.arange(image.height), g)
        cols = np.array_split(np.arange(image.width), g)
        feats = []
        for r in rows:
            for c in cols:
                if r.size == 0 or c.size == 0:
                    feats.extend([0.0, 0.0, 0.0])
                else:
                    feats.extend(data[np.ix_(r, c)].mean(axis=(0, 1)).tolist())
        return np.array(feats)


# -- HTTP clients ----------------------------------------------------------------------------


class ServiceClient:
    """JSON-over-HTTP POST with bounded exponential backoff on transient errors."""

    def __init__(
        self,
        base_url: str,
        *,
        timeout: float = 60.0,
        retries: int = TRANSPORT_RETRIES,
        backoff: float = BACKOFF_BASE_S,
        token: Optional[str] = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.token = token
        self._sleep = sleep

    def post(self, path: str, payload: Mapping) -> dict:
        body = json.dumps(payload).encode("utf-8")
        headers = {"Content-Type": "application/json; charset=utf-8"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        url = self.base_url + path
        last: Optional[Exception] = None
        for attempt in range(self.retries + 1):
            if attempt:
                self._sleep(self.backoff * 2 ** (attempt - 1))
            req = urllib.request.Request(url, data=body, headers=headers, method="POST")
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    return json.loads(resp.read().decode("utf-8"))
            except urllib.error.HTTPError as exc:
                detail = exc.read().decode("utf-8", "replace")
                if exc.code >= 500 or exc.code == 429:
                    last = TransportError(f"{url}: HTTP {exc.code} {detail}", exc.code)
                    continue
                raise BackendRejected(f"{url}: HTTP {exc.code} {detail}") from None
            except (socket.timeout, TimeoutError) as exc:
                last = BackendTimeout(f"{url}: timed out after {self.timeout}s")
                last.__cause__ = exc
            except urllib.error.URLError as exc:
                if isinstance(exc.reason, (socket.timeout, TimeoutError)):
                    last = BackendTimeout(f"{url}: timed out after {self.timeout}s")
                else:
                    last = TransportError(f"{url}: {exc.reason}")
            except (ConnectionError, json.JSONDecodeError) as exc:
                last = TransportError(f"{url}: {exc}")
            logger.debug("attempt %d on %s failed: %s", attempt + 1, url, last)
        assert last is not None
        raise last


class HttpPlanner:
    def __init__(self, client: ServiceClient):
        self.client = client

    def plan(self, image: ImageBuffer, instruction: str) -> str:
        resp = self.client.post(
            "/plan", {"image_png_b64": b64_image(image), "instruction": instruction, "task": "plan"}
        )
        return str(resp["text"])

    def propose_box(self, image: ImageBuffer, instruction: str) -> str:
        resp = self.client.post(
            "/plan", {"image_png_b64": b64_image(image), "instruction": instruction, "task": "box"}
        )
        return str(resp["text"])

    def generate(self, image: ImageBuffer, prompt: str) -> str:
        resp = self.client.post(
            "/plan", {"image_png_b64": b64_image(image), "instruction": prompt, "task": "generate"}
        )
        return str(resp["text"])


class HttpEditor:
    def __init__(self, client: ServiceClient):
        self.client = client

    def edit(self, req: EditRequest) -> ImageBuffer:
        resp = self.client.post("/edit", edit_request_payload(req))
        out = image_from_b64(resp["image_png_b64"])
        if out.dims != req.image.dims:
            raise DimsMismatch(f"editor returned {out.dims}, expected {req.image.dims}")
        return out


class HttpSegmenter:
    def __init__(self, client: ServiceClient):
        self.client = client

    def segment(self, image: ImageBuffer, anchor: str) -> BinaryMask:
        if not anchor.strip():
            raise EmptyAnchor("anchor phrase is blank")
        resp = self.client.post("/segment", {"image_png_b64": b64_image(image), "anchor": anchor})
        mask = mask_from_b64(resp["mask_png_b64"])
        if mask.dims != image.dims:
            raise DimsMismatch(f"segmenter returned {mask.dims}, expected {image.dims}")
        return mask


def parse_score(raw) -> int:
    """Coerce a verifier response value to an int in 0..4 or raise OutOfRange."""
    try:
        value = int(str(raw).strip())
    except ValueError:
        raise OutOfRange(f"verifier returned non-integer score {raw!r}") from None
    if not 0 <= value <= 4:
        raise OutOfRange(f"verifier score {value} outside 0..4")
    return value


class HttpVerifier:
    def __init__(self, client: ServiceClient, prompt: str = VERIFIER_PROMPT):
        self.client = client
        self.prompt = prompt

    def score(self, source: ImageBuffer, edited: ImageBuffer, instruction: str) -> VerifierScore:
        if source.dims != edited.dims:
            raise DimsMismatch(f"{source.dims} vs {edited.dims}")
        resp = self.client.post(
            "/score",
            {
                "image_png_b64": b64_image(source),
                "edited_png_b64": b64_image(edited),
                "instruction": instruction,
                "prompt": self.prompt.format(instruction=instruction),
            },
        )
        return VerifierScore(parse_score(resp.get("score")), resp.get("rationale"))


class HttpEmbedder:
    def __init__(self, client: ServiceClient):
        self.client = client
        self.dim: Optional[int] = None

    def embed(self, image: ImageBuffer) -> np.ndarray:
        resp = self.client.post("/embed", {"image_png_b64": b64_image(image)})
        vec = np.asarray(resp["embedding"], dtype=np.float64)
        if vec.ndim != 1 or not np.all(np.isfinite(vec)):
            raise BackendRejected("embedding must be a finite 1-D vector")
        if self.dim is None:
            self.dim = vec.size
        elif vec.size != self.dim:
            raise DimDrift(f"embedding dim changed from {self.dim} to {vec.size}")
        return vec


# -- mock server -----------------------------------------------------------------------------


@dataclass
class MockServices:
    planner: MockPlanner
    editor: MockEditor
    segmenter: MockSegmenter
    verifier: MockVerifier
    embedder: MockEmbedder

    @classmethod
    def default(cls) -> "MockServices":
        return cls(MockPlanner(), MockEditor(), MockSegmenter(), MockVerifier(), MockEmbedder())


_ENDPOINTS = ("/plan", "/edit", "/segment", "/score", "/embed")


def _make_handler(services: MockServices):
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, fmt, *args):
            logger.debug("mock-serve: " + fmt, *args)

        def _reply(self, status: int, payload: dict) -> None:
            body = json.dumps(payload).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json; charset=utf-8")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_POST(self):
            length = int(self.headers.get("Content-Length", 0))
            raw = self.rfile.read(length)
            if self.path not in _ENDPOINTS:
                self._reply(404, {"error": f"no endpoint {self.path}"})
                return
            try:
                payload = json.loads(raw.decode("utf-8"))
                self._reply(200, self._dispatch(self.path, payload))
            except KeyError as exc:
                self._reply(400, {"error": f"missing field {exc}"})
            except (ValueError, BackendError) as exc:
                self._reply(400, {"error": str(exc)})

        def _dispatch(self, path: str, p: dict) -> dict:
            if path == "/plan":
                image = image_from_b64(p["image_png_b64"])
                task = p.get("task", "plan")
                if task == "box":
                    return {"text": services.planner.propose_box(image, p["instruction"])}
                if task == "generate":
                    return {"text": services.planner.generate(image, p["instruction"])}
                return {"text": services.planner.plan(image, p["instruction"])}
            if path == "/edit":
                out = services.editor.edit(edit_request_from_payload(p))
                return {"image_png_b64": b64_image(out)}
            if path == "/segment":
                mask = services.segmenter.segment(image_from_b64(p["image_png_b64"]), p["anchor"])
                return {"mask_png_b64": b64_mask(mask)}
            if path == "/score":
                s = services.verifier.score(
                    image_from_b64(p["image_png_b64"]),
                    image_from_b64(p["edited_png_b64"]),
                    p["instruction"],
                )
                return {"score": s.score, "rationale": s.rationale}
            if path == "/embed":
                vec = services.embedder.embed(image_from_b64(p["image_png_b64"]))
                return {"embedding": vec.tolist()}
            raise AssertionError(path)

    return Handler


class MockServer:
    """All mock services behind one local HTTP server.

    Usable as a context manager; ``url`` is the base URL for every client.
    """

    def __init__(self, services: Optional[MockServices] = None, host: str = "127.0.0.1", port: int = 0):
        self.services = services or MockServices.default()
        self.httpd = ThreadingHTTPServer((host, port), _make_handler(self.services))
        self._thread: Optional[threading.Thread] = None

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "MockServer":
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self.httpd.serve_forever()

    def stop(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
