"""Causal concept attribution by box interventions.

Every present concept (and every composite group whose members are all
present) is removed from the image by zero-filling its box.  The model's own
answer is then re-scored under teacher forcing, and the per-token drops in
log-probability are accumulated.  The concept with the largest accumulated
drop wins, unless no concept lowers the answer's probability below ``tau``
times its original value, in which case the whole image is reported.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .concepts import (DEFAULT_VOCABULARY, ConceptRegion, ConceptVocabulary, ReferencePack,
                       refine_regions, transfer_concepts)
from .core import BBox, Counterfactual, as_image, boxes_to_mask
from .services import ScoredSequence, ServiceError
from .transport import UotParams

log = logging.getLogger(__name__)

__all__ = [
    "WHOLE_IMAGE",
    "AlignmentError",
    "ConceptDelta",
    "AttributionConfig",
    "AttributionResult",
    "make_counterfactual",
    "score_sequence",
    "delta",
    "attribute",
    "explain",
]

#: Winner key reported when no concept is causally relevant.
WHOLE_IMAGE = "__whole_image__"

# slack for the inclusive ratio >= tau comparison, in units of machine epsilon
_BOUNDARY_ULPS = 4


class AlignmentError(ValueError):
    def __init__(self, index: int, original: str | None, perturbed: str | None):
        super().__init__(f"token mismatch at index {index}: {original!r} vs {perturbed!r}")
        self.index = index


@dataclass(frozen=True)
class ConceptDelta:
    concept_key: str
    delta: float
    ratio: float
    per_token_drops: tuple[float, ...]
    boxes: tuple[BBox, ...]

    @property
    def hull(self) -> BBox:
        return BBox(min(b.x1 for b in self.boxes), min(b.y1 for b in self.boxes),
                    max(b.x2 for b in self.boxes), max(b.y2 for b in self.boxes))

    def to_dict(self) -> dict:
        return {"concept_key": self.concept_key, "delta": self.delta, "ratio": self.ratio,
                "box": self.hull.as_list(), "boxes": [b.as_list() for b in self.boxes]}


@dataclass(frozen=True)
class AttributionConfig:
    tau: float = 0.75
    include_composites: bool = True
    in_flight: int = 4

    def __post_init__(self):
        if not 0 < self.tau <= 1:
            raise ValueError(f"tau must be in (0, 1], got {self.tau}")
        if self.in_flight < 1:
            raise ValueError("in_flight must be at least 1")

    def to_dict(self) -> dict:
        return {"tau": self.tau, "include_composites": self.include_composites}


@dataclass
class AttributionResult:
    winner: str
    boxes: list[BBox]
    deltas: list[ConceptDelta]
    tokens: tuple[str, ...]
    token_attribution: tuple[float, ...]
    fallback: bool
    reason: str = ""
    original: ScoredSequence | None = field(default=None, repr=False)

    def to_dict(self, sample_id: str = "") -> dict:
        return {
            "sample_id": sample_id,
            "winner": self.winner,
            "fallback": self.fallback,
            "reason": self.reason,
            "boxes": [b.as_list() for b in self.boxes],
            "deltas": [d.to_dict() for d in self.deltas],
            "tokens": list(self.tokens),
            "token_attribution": list(self.token_attribution),
        }


def make_counterfactual(img, boxes, source_id: str = "") -> Counterfactual:
    """Zero every pixel inside the union of ``boxes``."""
    img = as_image(img)
    boxes = tuple(boxes)
    if not boxes:
        raise ValueError("no boxes to remove")
    h, w = img.shape
    removed = boxes_to_mask(boxes, (h, w))
    out = np.where(removed, 0, img).astype(np.uint8)
    return Counterfactual(source_id, boxes, as_image(out))


def score_sequence(model, img, question: str, forced_text: str) -> ScoredSequence:
    if not forced_text:
        raise ValueError("forced_text must be nonempty")
    return model.score(img, question, forced_text)


def delta(original: ScoredSequence, perturbed: ScoredSequence) -> tuple[float, tuple[float, ...]]:
    """Sum of per-token log-probability drops, each clamped at zero."""
    n = min(len(original.tokens), len(perturbed.tokens))
    for t in range(n):
        if original.tokens[t] != perturbed.tokens[t]:
            raise AlignmentError(t, original.tokens[t], perturbed.tokens[t])
    if len(original.tokens) != len(perturbed.tokens):
        o = original.tokens[n] if n < len(original.tokens) else None
        p = perturbed.tokens[n] if n < len(perturbed.tokens) else None
        raise AlignmentError(n, o, p)
    drops = tuple(max(0.0, o - p) for o, p in zip(original.logprobs, perturbed.logprobs))
    return math.fsum(drops), drops


def _interventions(regions: dict[str, ConceptRegion], vocab: ConceptVocabulary,
                   include_composites: bool) -> list[tuple[str, tuple[BBox, ...]]]:
    # singletons in vocabulary order, then composites; this order breaks ties
    out = [(cid, (regions[cid].box,)) for cid in vocab.ids if cid in regions]
    if include_composites:
        for comp in vocab.composites:
            if all(m in regions for m in comp.member_ids):
                out.append((comp.name, tuple(regions[m].box for m in comp.member_ids)))
    return out


def attribute(model, img, question: str, forced_text: str, regions: dict[str, ConceptRegion],
              vocab: ConceptVocabulary, cfg: AttributionConfig = AttributionConfig()) -> AttributionResult:
    """Attribute ``forced_text`` (the model's own answer) to one concept or composite.

    Issues one scoring call for the original image and one per intervention.
    """
    img = as_image(img)
    h, w = img.shape
    full = [BBox.full(w, h)]
    original = score_sequence(model, img, question, forced_text)
    plan = _interventions(regions, vocab, cfg.include_composites)
    if not plan:
        log.warning("no concept regions present; falling back to the whole image")
        return AttributionResult(WHOLE_IMAGE, full, [], original.tokens,
                                 (0.0,) * len(original.tokens), True,
                                 "no concept regions present", original)

    def run(item):
        key, boxes = item
        cf = make_counterfactual(img, boxes, key)
        try:
            perturbed = score_sequence(model, cf.image, question, forced_text)
        except ServiceError as exc:
            raise ServiceError(f"scoring intervention {key!r}: {exc}") from exc
        total, drops = delta(original, perturbed)
        return ConceptDelta(key, total, math.exp(-total), drops, boxes)

    with ThreadPoolExecutor(max_workers=cfg.in_flight) as pool:
        deltas = list(pool.map(run, plan))

    min_ratio = min(d.ratio for d in deltas)
    if min_ratio >= cfg.tau * (1 - _BOUNDARY_ULPS * np.finfo(float).eps):
        return AttributionResult(WHOLE_IMAGE, full, deltas, original.tokens,
                                 (0.0,) * len(original.tokens), True,
                                 f"min ratio {min_ratio:.6g} >= tau {cfg.tau}", original)
    best = max(range(len(deltas)), key=lambda i: (deltas[i].delta, -i))
    win = deltas[best]
    return AttributionResult(win.concept_key, list(win.boxes), deltas, original.tokens,
                             win.per_token_drops, False, "", original)


def explain(model, img, question: str, pack: ReferencePack, vocab: ConceptVocabulary = DEFAULT_VOCABULARY,
            refiner=None, uot: UotParams = UotParams(), cfg: AttributionConfig = AttributionConfig(),
            mode: str = "direct", forced_text: str | None = None,
            regions: dict[str, ConceptRegion] | None = None) -> tuple[AttributionResult, dict]:
    """Transfer concepts, optionally refine them, and attribute the model's answer.

    The model's own generated answer is used as ``forced_text`` unless one is
    given.  Returns the attribution and the concept regions it used.
    """
    img = as_image(img)
    if forced_text is None:
        forced_text = model.generate(img, question, mode)
    if not forced_text.strip():
        raise ServiceError("model returned an empty answer")
    if regions is None:
        regions = transfer_concepts(img, pack, vocab, uot)
        if refiner is not None:
            regions = refine_regions(img, regions, refiner, cfg.in_flight)
    return attribute(model, img, question, forced_text, regions, vocab, cfg), regions
