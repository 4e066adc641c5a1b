"""Clients for the three external services and their JSON wire format.

Model service::

    POST /generate {image_b64, question, mode}        -> {text}
    POST /score    {image_b64, question, forced_text} -> {tokens, logprobs}

Editor service::

    POST /edit     {image_b64, mask_b64, prompt}      -> {image_b64}

Mask-refinement service::

    POST /refine   {image_b64, box}                   -> {mask_b64} | {error}

Images and masks travel as base64-encoded binary PGM (masks use 0/255).
Every client talks through a transport, ``post(path, payload) -> reply``;
:class:`HttpTransport` does real HTTP, :class:`LocalTransport` dispatches
to in-process handlers speaking the same JSON.
"""

from __future__ import annotations

import base64
import binascii
import logging
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .core import BBox, ImageFormatError, as_image, decode_pgm, encode_pgm

log = logging.getLogger(__name__)

__all__ = [
    "ServiceError",
    "RefinementDeclined",
    "ScoredSequence",
    "SCHEMAS",
    "encode_image_b64",
    "decode_image_b64",
    "encode_mask_b64",
    "decode_mask_b64",
    "HttpTransport",
    "LocalTransport",
    "ModelClient",
    "EditorClient",
    "RefinerClient",
]


class ServiceError(RuntimeError):
    """Transport-level failure: unreachable service, timeout, malformed reply."""


class RefinementDeclined(RuntimeError):
    """The refinement service answered with an explicit error."""


@dataclass(frozen=True)
class ScoredSequence:
    """Teacher-forced per-token log-probabilities of ``forced_text``."""

    question: str
    forced_text: str
    tokens: tuple[str, ...]
    logprobs: tuple[float, ...]

    def __post_init__(self):
        if len(self.tokens) == 0:
            raise ValueError("a scored sequence needs at least one token")
        if len(self.tokens) != len(self.logprobs):
            raise ValueError(f"{len(self.tokens)} tokens but {len(self.logprobs)} logprobs")
        if not all(np.isfinite(lp) and lp <= 0 for lp in self.logprobs):
            raise ValueError("logprobs must be finite and <= 0")


_B64 = {"type": "string", "minLength": 1}
_BOX = {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 4, "maxItems": 4}

#: JSON schemas of every request and reply, keyed by (path, direction).
SCHEMAS: dict[tuple[str, str], dict] = {
    ("/generate", "request"): {
        "type": "object", "required": ["image_b64", "question", "mode"],
        "properties": {"image_b64": _B64, "question": {"type": "string"},
                       "mode": {"enum": ["direct", "reason"]}},
        "additionalProperties": False},
    ("/generate", "reply"): {
        "type": "object", "required": ["text"],
        "properties": {"text": {"type": "string"}}, "additionalProperties": False},
    ("/score", "request"): {
        "type": "object", "required": ["image_b64", "question", "forced_text"],
        "properties": {"image_b64": _B64, "question": {"type": "string"},
                       "forced_text": {"type": "string", "minLength": 1}},
        "additionalProperties": False},
    ("/score", "reply"): {
        "type": "object", "required": ["tokens", "logprobs"],
        "properties": {"tokens": {"type": "array", "items": {"type": "string"}},
                       "logprobs": {"type": "array", "items": {"type": "number", "maximum": 0}}},
        "additionalProperties": False},
    ("/edit", "request"): {
        "type": "object", "required": ["image_b64", "mask_b64", "prompt"],
        "properties": {"image_b64": _B64, "mask_b64": _B64, "prompt": {"type": "string"}},
        "additionalProperties": False},
    ("/edit", "reply"): {
        "type": "object", "required": ["image_b64"],
        "properties": {"image_b64": _B64}, "additionalProperties": False},
    ("/refine", "request"): {
        "type": "object", "required": ["image_b64", "box"],
        "properties": {"image_b64": _B64, "box": _BOX}, "additionalProperties": False},
    ("/refine", "reply"): {
        "oneOf": [
            {"type": "object", "required": ["mask_b64"], "properties": {"mask_b64": _B64},
             "additionalProperties": False},
            {"type": "object", "required": ["error"], "properties": {"error": {"type": "string"}},
             "additionalProperties": False},
        ]},
}


def encode_image_b64(img) -> str:
    return base64.b64encode(encode_pgm(img)).decode("ascii")


def decode_image_b64(text: str) -> np.ndarray:
    try:
        return decode_pgm(base64.b64decode(text, validate=True))
    except (binascii.Error, ValueError, ImageFormatError) as exc:
        raise ServiceError(f"undecodable image payload: {exc}") from exc


def encode_mask_b64(mask) -> str:
    return encode_image_b64(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8))


def decode_mask_b64(text: str) -> np.ndarray:
    return decode_image_b64(text) >= 128


# --- transports --------------------------------------------------------------

class HttpTransport:
    def __init__(self, base_url: str, timeout: float = 60.0):
        import httpx

        self.base_url = base_url.rstrip("/")
        self._client = httpx.Client(timeout=timeout)

    def __call__(self, path: str, payload: dict) -> dict:
        import httpx

        url = self.base_url + path
        try:
            resp = self._client.post(url, json=payload)
        except httpx.HTTPError as exc:
            raise ServiceError(f"POST {url} failed: {exc}") from exc
        if resp.status_code != 200:
            # refinement errors may legitimately come back as a JSON error body
            try:
                body = resp.json()
            except ValueError:
                body = None
            if isinstance(body, dict) and set(body) == {"error"}:
                return body
            raise ServiceError(f"POST {url} returned HTTP {resp.status_code}")
        try:
            body = resp.json()
        except ValueError as exc:
            raise ServiceError(f"POST {url} returned non-JSON body") from exc
        if not isinstance(body, dict):
            raise ServiceError(f"POST {url} returned {type(body).__name__}, expected object")
        return body

    def close(self):
        self._client.close()


class LocalTransport:
    """Dispatch requests to in-process handlers ``payload -> reply``."""

    def __init__(self, handlers: Mapping[str, Callable[[dict], dict]]):
        self.handlers = dict(handlers)

    def __call__(self, path: str, payload: dict) -> dict:
        try:
            handler = self.handlers[path]
        except KeyError:
            raise ServiceError(f"no local handler for {path}") from None
        return handler(payload)


def _transport(endpoint) -> Callable[[str, dict], dict]:
    if callable(endpoint):
        return endpoint
    return HttpTransport(str(endpoint))


def _field(reply: dict, key: str, kind, path: str):
    if isinstance(reply, dict) and key not in reply and "error" in reply:
        raise ServiceError(f"{path} failed: {reply['error']}")
    if not isinstance(reply, dict) or key not in reply:
        raise ServiceError(f"{path} reply lacks {key!r}")
    value = reply[key]
    if not isinstance(value, kind):
        raise ServiceError(f"{path} reply field {key!r} has type {type(value).__name__}")
    return value


# --- clients -----------------------------------------------------------------

class ModelClient:
    """Generation and teacher-forced scoring against a vision-language model."""

    def __init__(self, endpoint):
        self._post = _transport(endpoint)

    def generate(self, img, question: str, mode: str = "direct") -> str:
        if mode not in ("direct", "reason"):
            raise ValueError(f"unknown mode {mode!r}")
        reply = self._post("/generate", {"image_b64": encode_image_b64(img),
                                         "question": question, "mode": mode})
        return _field(reply, "text", str, "/generate")

    def score(self, img, question: str, forced_text: str) -> ScoredSequence:
        if not forced_text:
            raise ValueError("forced_text must be nonempty")
        reply = self._post("/score", {"image_b64": encode_image_b64(img), "question": question,
                                      "forced_text": forced_text})
        tokens = _field(reply, "tokens", list, "/score")
        logprobs = _field(reply, "logprobs", list, "/score")
        if len(tokens) != len(logprobs):
            raise ServiceError(f"/score returned {len(tokens)} tokens but {len(logprobs)} logprobs")
        try:
            return ScoredSequence(question, forced_text, tuple(str(t) for t in tokens),
                                  tuple(float(x) for x in logprobs))
        except (TypeError, ValueError) as exc:
            raise ServiceError(f"/score returned an invalid sequence: {exc}") from exc


class EditorClient:
    def __init__(self, endpoint):
        self._post = _transport(endpoint)

    def edit(self, img, mask, prompt: str) -> np.ndarray:
        img = as_image(img)
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != img.shape:
            raise ValueError(f"mask shape {mask.shape} != image shape {img.shape}")
        reply = self._post("/edit", {"image_b64": encode_image_b64(img),
                                     "mask_b64": encode_mask_b64(mask), "prompt": prompt})
        out = decode_image_b64(_field(reply, "image_b64", str, "/edit"))
        if out.shape != img.shape:
            raise ServiceError(f"/edit returned shape {out.shape}, expected {img.shape}")
        return out


class RefinerClient:
    def __init__(self, endpoint):
        self._post = _transport(endpoint)

    def refine(self, img, box: BBox) -> np.ndarray:
        """Mask for ``box``; raises :class:`RefinementDeclined` on a service-side error."""
        img = as_image(img)
        reply = self._post("/refine", {"image_b64": encode_image_b64(img), "box": box.as_list()})
        if isinstance(reply, dict) and "error" in reply and "mask_b64" not in reply:
            raise RefinementDeclined(str(reply["error"]))
        mask = decode_mask_b64(_field(reply, "mask_b64", str, "/refine"))
        if mask.shape != img.shape:
            raise ServiceError(f"/refine returned shape {mask.shape}, expected {img.shape}")
        return mask
