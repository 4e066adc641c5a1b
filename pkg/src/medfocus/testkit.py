"""Offline stand-ins for the model, editor and refinement services, plus
synthetic chest-radiograph-like data with planted findings.

The mock model ties its log-probabilities to the mean intensity inside one
evidence box, so the region that matters is known by construction.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from .concepts import DEFAULT_VOCABULARY, ConceptVocabulary, ReferencePack
from .core import BBox, VqaSample, WORK_SIZE, as_image, mask_to_bbox
from .services import (EditorClient, LocalTransport, ModelClient, RefinerClient,
                       ScoredSequence, ServiceError, decode_image_b64, decode_mask_b64,
                       encode_image_b64, encode_mask_b64)

__all__ = [
    "ANATOMY_BOXES",
    "MockModelSpec",
    "mock_score",
    "stub_edit",
    "stub_refine",
    "MockModelService",
    "StubEditorService",
    "StubRefinerService",
    "ScriptedModelService",
    "CountingTransport",
    "local_model",
    "local_editor",
    "local_refiner",
    "child_seed",
    "synth_anatomy",
    "synth_reference_pack",
    "SynthSample",
    "synth_sample",
    "LoopbackServer",
]


def child_seed(seed: int, label: str) -> int:
    """Stable 63-bit seed derived from a parent seed and a label."""
    digest = hashlib.sha256(f"{int(seed)}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


# --- mock model --------------------------------------------------------------

@dataclass(frozen=True)
class MockModelSpec:
    """Planted-evidence model.

    Each token's log-probability is ``floor - sensitivity * |mean - baseline|``
    where ``mean`` is the mean intensity inside ``evidence_box``.  The model
    answers ``canned_answer`` while that mean stays at or above ``threshold``,
    and the opposite answer otherwise.
    """

    evidence_box: BBox
    baseline_intensity: float
    sensitivity: float = 0.01
    floor: float = -0.1
    canned_answer: str = "yes"
    threshold: float | None = None

    def __post_init__(self):
        if not self.sensitivity > 0:
            raise ValueError("sensitivity must be positive")
        if self.floor > 0:
            raise ValueError("floor must be <= 0")

    @property
    def answer_threshold(self) -> float:
        return self.baseline_intensity / 2 if self.threshold is None else self.threshold

    def evidence_mean(self, img) -> float:
        b = self.evidence_box
        return float(np.asarray(img)[b.y1:b.y2, b.x1:b.x2].astype(np.float64).mean())

    def to_dict(self) -> dict:
        return {"evidence_box": self.evidence_box.as_list(),
                "baseline_intensity": self.baseline_intensity, "sensitivity": self.sensitivity,
                "floor": self.floor, "canned_answer": self.canned_answer,
                "threshold": self.answer_threshold}

    @classmethod
    def from_dict(cls, d: dict) -> "MockModelSpec":
        return cls(BBox.from_list(d["evidence_box"]), float(d["baseline_intensity"]),
                   float(d.get("sensitivity", 0.01)), float(d.get("floor", -0.1)),
                   d.get("canned_answer", "yes"), d.get("threshold"))


def mock_score(spec: MockModelSpec, img, question: str, forced_text: str) -> ScoredSequence:
    if not forced_text:
        raise ValueError("forced_text must be nonempty")
    tokens = tuple(forced_text.split())
    if not tokens:
        raise ValueError("forced_text has no tokens")
    lp = spec.floor - spec.sensitivity * abs(spec.evidence_mean(img) - spec.baseline_intensity)
    return ScoredSequence(question, forced_text, tokens, (lp,) * len(tokens))


def _flip(answer: str) -> str:
    return "no" if answer == "yes" else "yes"


class MockModelService:
    """JSON handlers for ``/generate`` and ``/score`` backed by a :class:`MockModelSpec`."""

    def __init__(self, spec: MockModelSpec):
        self.spec = spec

    def answer(self, img) -> str:
        above = self.spec.evidence_mean(img) >= self.spec.answer_threshold
        return self.spec.canned_answer if above else _flip(self.spec.canned_answer)

    def generate(self, payload: dict) -> dict:
        img = decode_image_b64(payload["image_b64"])
        word = self.answer(img)
        if payload["mode"] == "reason":
            return {"text": f"The region of interest was inspected step by step. Final answer: {word}"}
        return {"text": word.capitalize() + "."}

    def score(self, payload: dict) -> dict:
        img = decode_image_b64(payload["image_b64"])
        seq = mock_score(self.spec, img, payload["question"], payload["forced_text"])
        return {"tokens": list(seq.tokens), "logprobs": list(seq.logprobs)}

    def handlers(self) -> dict:
        return {"/generate": self.generate, "/score": self.score}


class ScriptedModelService:
    """Answers from a fixed script, keyed by image digest.

    ``script`` maps a stage label to an answer; ``classify(img)`` must map an
    image to one of those labels.  Used to drive the benchmark filter through
    known stage traces.
    """

    def __init__(self, classify, script: dict[str, str], logprob: float = -0.5):
        self.classify = classify
        self.script = script
        self.logprob = logprob
        self.calls: list[str] = []
        self._lock = threading.Lock()

    def generate(self, payload: dict) -> dict:
        stage = self.classify(decode_image_b64(payload["image_b64"]))
        with self._lock:
            self.calls.append(stage)
        return {"text": self.script[stage]}

    def score(self, payload: dict) -> dict:
        tokens = payload["forced_text"].split()
        return {"tokens": tokens, "logprobs": [self.logprob] * len(tokens)}

    def handlers(self) -> dict:
        return {"/generate": self.generate, "/score": self.score}


# --- stub editor and refiner -------------------------------------------------

def stub_edit(img, mask, prompt: str = "", fill: int = 0) -> np.ndarray:
    """Fill masked pixels with a constant."""
    out = np.array(as_image(img))
    out[np.asarray(mask, dtype=bool)] = fill
    return as_image(out)


def stub_refine(img, box: BBox) -> np.ndarray:
    """The box interior as a mask."""
    h, w = np.asarray(img).shape
    box.check_within(w, h)
    mask = np.zeros((h, w), dtype=bool)
    mask[box.y1:box.y2, box.x1:box.x2] = True
    return mask


class StubEditorService:
    def __init__(self, fill: int = 0):
        self.fill = int(fill)

    def edit(self, payload: dict) -> dict:
        img = decode_image_b64(payload["image_b64"])
        mask = decode_mask_b64(payload["mask_b64"])
        return {"image_b64": encode_image_b64(stub_edit(img, mask, payload["prompt"], self.fill))}

    def handlers(self) -> dict:
        return {"/edit": self.edit}


class StubRefinerService:
    def refine(self, payload: dict) -> dict:
        img = decode_image_b64(payload["image_b64"])
        try:
            box = BBox.from_list(payload["box"])
            return {"mask_b64": encode_mask_b64(stub_refine(img, box))}
        except ValueError as exc:
            return {"error": str(exc)}

    def handlers(self) -> dict:
        return {"/refine": self.refine}


class CountingTransport:
    """Wrap a transport and count requests per path."""

    def __init__(self, inner):
        self.inner = inner
        self.counts: dict[str, int] = {}
        self._lock = threading.Lock()

    def __call__(self, path: str, payload: dict) -> dict:
        with self._lock:
            self.counts[path] = self.counts.get(path, 0) + 1
        return self.inner(path, payload)


def local_model(spec: MockModelSpec) -> ModelClient:
    return ModelClient(LocalTransport(MockModelService(spec).handlers()))


def local_editor(fill: int = 0) -> EditorClient:
    return EditorClient(LocalTransport(StubEditorService(fill).handlers()))


def local_refiner() -> RefinerClient:
    return RefinerClient(LocalTransport(StubRefinerService().handlers()))


# --- synthetic anatomy -------------------------------------------------------

#: Concept layout of the synthetic template at 224x224, as ellipse bounding
#: boxes, with the gray level painted for each structure.  Purely schematic.
ANATOMY_BOXES: dict[str, tuple[tuple[int, int, int, int], int]] = {
    "right_lung": ((16, 48, 86, 168), 40),
    "left_lung": ((138, 48, 208, 168), 40),
    "right_costophrenic_angle": ((16, 172, 64, 208), 55),
    "left_costophrenic_angle": ((160, 172, 208, 208), 55),
    "right_hilar_structures": ((86, 84, 104, 124), 135),
    "left_hilar_structures": ((120, 84, 138, 124), 135),
    "mediastinum": ((104, 48, 120, 132), 165),
    "upper_mediastinum": ((100, 12, 124, 40), 150),
    "cardiac_silhouette": ((90, 136, 150, 188), 185),
    "right_clavicle": ((16, 16, 92, 36), 205),
    "left_clavicle": ((132, 16, 208, 36), 205),
}

_BODY_LEVEL = 90


def _ellipse(shape, box, scale=1.0, shift=(0.0, 0.0), center=(112.0, 112.0)):
    x1, y1, x2, y2 = box
    cx = ((x1 + x2) / 2 - center[0]) * scale + center[0] + shift[0]
    cy = ((y1 + y2) / 2 - center[1]) * scale + center[1] + shift[1]
    rx = (x2 - x1) / 2 * scale
    ry = (y2 - y1) / 2 * scale
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    return ((xx + 0.5 - cx) / rx) ** 2 + ((yy + 0.5 - cy) / ry) ** 2 <= 1.0


def synth_anatomy(rng: np.random.Generator, jitter: float = 1.0,
                  size: tuple[int, int] = WORK_SIZE) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Schematic radiograph with masks for every default concept.

    ``jitter`` scales the random global shift (up to 6 px) and zoom (up to 4%).
    """
    h, w = size
    scale = 1.0 + jitter * rng.uniform(-0.04, 0.04)
    shift = tuple(jitter * rng.uniform(-6, 6, size=2))
    yy, xx = np.mgrid[0:h, 0:w]
    phase = rng.uniform(0, 2 * np.pi, size=2)
    img = (_BODY_LEVEL + 10 * np.sin(xx / w * np.pi + phase[0]) * np.cos(yy / h * np.pi + phase[1])
           + 8 * (yy / h - 0.5))
    masks = {}
    for cid, (box, level) in ANATOMY_BOXES.items():
        m = _ellipse((h, w), box, scale, shift)
        masks[cid] = m
        img[m] = level
    img = img + rng.normal(0, 3.0, size=(h, w))
    return as_image(np.clip(np.rint(img), 0, 255)), masks


def synth_reference_pack(seed: int, n: int = 16) -> ReferencePack:
    """``n`` jittered templates with complete concept annotations."""
    images, masks = [], []
    for i in range(n):
        rng = np.random.default_rng(child_seed(seed, f"reference/{i}"))
        img, m = synth_anatomy(rng, jitter=0.0 if i == 0 else 1.0)
        images.append(img)
        masks.append(m)
    return ReferencePack(images, masks, [f"ref{i:02d}" for i in range(n)])


@dataclass(frozen=True)
class SynthSample:
    image: np.ndarray = field(repr=False)
    concept_masks: dict = field(repr=False)
    concept_id: str
    sample: VqaSample
    spec: MockModelSpec
    finding_mask: np.ndarray = field(repr=False)


def synth_sample(seed: int, vocab: ConceptVocabulary = DEFAULT_VOCABULARY,
                 concept_id: str | None = None, image_path: str = "") -> SynthSample:
    """Jittered anatomy with a bright elliptical finding inside one concept."""
    rng = np.random.default_rng(child_seed(seed, "sample"))
    img, masks = synth_anatomy(rng)
    choices = [c for c in vocab.ids if c in masks]
    if concept_id is None:
        concept_id = choices[int(rng.integers(len(choices)))]
    cbox = mask_to_bbox(masks[concept_id])
    # finding: ellipse at the concept's center, 50-80% of its extent
    fx = rng.uniform(0.5, 0.8)
    fy = rng.uniform(0.5, 0.8)
    cx = (cbox.x1 + cbox.x2) / 2 + rng.uniform(-0.08, 0.08) * cbox.width
    cy = (cbox.y1 + cbox.y2) / 2 + rng.uniform(-0.08, 0.08) * cbox.height
    rx = max(2.0, fx * cbox.width / 2)
    ry = max(2.0, fy * cbox.height / 2)
    yy, xx = np.mgrid[0:img.shape[0], 0:img.shape[1]]
    finding = (((xx + 0.5 - cx) / rx) ** 2 + ((yy + 0.5 - cy) / ry) ** 2 <= 1.0) & masks[concept_id]
    out = img.astype(np.int32)
    out[finding] = np.minimum(255, out[finding] + 90)
    out = as_image(out)
    box = mask_to_bbox(finding)
    name = vocab.name_of(concept_id)
    sid = f"synth-{seed:05d}"
    sample = VqaSample(sid, image_path or f"{sid}.pgm", f"finding in the {name}", (box,), "yes", "direct")
    baseline = float(out[box.y1:box.y2, box.x1:box.x2].astype(np.float64).mean())
    spec = MockModelSpec(box, baseline)
    return SynthSample(out, masks, concept_id, sample, spec, finding)


# --- loopback HTTP server ----------------------------------------------------

class LoopbackServer:
    """Serve JSON handlers on 127.0.0.1 for HTTP client tests.

    >>> with LoopbackServer(StubRefinerService().handlers()) as url:
    ...     RefinerClient(url).refine(img, box)
    """

    def __init__(self, handlers: dict, port: int = 0):
        routes = dict(handlers)

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                fn = routes.get(self.path)
                if fn is None:
                    self._reply(404, {"error": f"unknown path {self.path}"})
                    return
                try:
                    length = int(self.headers.get("Content-Length", 0))
                    payload = json.loads(self.rfile.read(length))
                    reply = fn(payload)
                except (ValueError, KeyError, TypeError, ServiceError) as exc:
                    self._reply(400, {"error": str(exc)})
                    return
                self._reply(200, reply)

            def _reply(self, status, body):
                data = json.dumps(body).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self._server = ThreadingHTTPServer(("127.0.0.1", port), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def __enter__(self) -> str:
        self._thread.start()
        return self.url

    def __exit__(self, *exc):
        self._server.shutdown()
        self._server.server_close()
