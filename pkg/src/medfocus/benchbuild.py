"""Causally filtered VQA benchmark construction.

A sample is kept only if the model answers it correctly, flips its answer
when the annotated evidence is edited away, and keeps its answer when
everything except the evidence is edited.
"""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .core import VqaSample, as_image, boxes_to_mask, load_image, read_samples, write_samples
from .services import ServiceError

log = logging.getLogger(__name__)

__all__ = [
    "TEMPLATE",
    "SUFFIXES",
    "GROUPS",
    "UNGRADABLE",
    "FilterVerdict",
    "make_question",
    "parse_answer",
    "causal_filter",
    "build_bench",
    "group_stats",
]

TEMPLATE = "Is there evidence of {attribute} in the image?"
SUFFIXES = {
    "direct": "Answer directly with yes or no without any explanation.",
    "reason": "Think step by step and answer with yes or no.",
}
GROUPS = ("incorrect", "correct_ungrounded", "correct_grounded")
ERROR = "error"
UNGRADABLE = "ungradable"

_LEADING = re.compile(r"^\W*(yes|no)\b", re.IGNORECASE)
_ANY = re.compile(r"\b(yes|no)\b", re.IGNORECASE)


def make_question(attribute: str, mode: str = "direct") -> str:
    if not attribute or not attribute.strip():
        raise ValueError("attribute must be nonempty")
    if mode not in SUFFIXES:
        raise ValueError(f"mode must be one of {sorted(SUFFIXES)}, got {mode!r}")
    return TEMPLATE.format(attribute=attribute) + " " + SUFFIXES[mode]


def parse_answer(text: str, mode: str = "direct") -> str:
    """``yes``, ``no`` or ``ungradable``.

    Direct answers are read from the leading word; reasoning answers from the
    last standalone yes/no in the text.
    """
    if mode == "direct":
        m = _LEADING.match(text)
        return m.group(1).lower() if m else UNGRADABLE
    found = _ANY.findall(text)
    return found[-1].lower() if found else UNGRADABLE


@dataclass
class FilterVerdict:
    sample_id: str
    group: str
    stage_trace: dict = field(default_factory=dict)
    error: str = ""

    def to_dict(self) -> dict:
        d = {"sample_id": self.sample_id, "group": self.group, "stage_trace": self.stage_trace}
        if self.error:
            d["error"] = self.error
        return d


def causal_filter(sample: VqaSample, model, editor, img=None) -> FilterVerdict:
    """Run the correctness, foreground and background checks on one sample.

    ``img`` defaults to the image at ``sample.image_path``.  Service failures
    produce an ``error`` verdict instead of a group.
    """
    trace: dict = {}
    try:
        if img is None:
            img = load_image(sample.image_path)
        img = as_image(img)
        if not sample.gt_boxes:
            raise ValueError("sample has no gt_boxes")
        h, w = img.shape
        fg_mask = boxes_to_mask(sample.gt_boxes, (h, w))
        q = make_question(sample.attribute, sample.mode)

        def ask(image) -> str:
            return parse_answer(model.generate(image, q, sample.mode), sample.mode)

        orig = ask(img)
        trace["original"] = orig
        if orig != sample.answer:
            return FilterVerdict(sample.sample_id, "incorrect", trace)

        fg = ask(editor.edit(img, fg_mask, f"No {sample.attribute}"))
        trace["foreground"] = fg
        if fg == UNGRADABLE or fg == orig:
            return FilterVerdict(sample.sample_id, "correct_ungrounded", trace)

        bg_mask = ~fg_mask
        bg = []
        for prompt in (f"No {sample.attribute}", "No abnormality"):
            bg.append(ask(editor.edit(img, bg_mask, prompt)))
        trace["background"] = bg
        group = "correct_grounded" if all(a == orig for a in bg) else "correct_ungrounded"
        return FilterVerdict(sample.sample_id, group, trace)
    except (ServiceError, OSError, ValueError) as exc:
        log.warning("sample %s: %s", sample.sample_id, exc)
        return FilterVerdict(sample.sample_id, ERROR, trace, str(exc))


def group_stats(verdicts) -> dict:
    """Group counts, and percentages over the samples that did not error."""
    counts = {g: 0 for g in GROUPS}
    errors = 0
    for v in verdicts:
        if v.group == ERROR:
            errors += 1
        else:
            counts[v.group] += 1
    n = sum(counts.values())
    pct = {g: (100.0 * c / n if n else 0.0) for g, c in counts.items()}
    return {"counts": counts, "percentages": pct, "graded": n, "errors": errors}


def _resolve(sample: VqaSample, root: Path | None) -> VqaSample:
    p = Path(sample.image_path)
    if root is None or p.is_absolute():
        return sample
    d = sample.to_dict()
    d["image_path"] = str(root / p)
    return VqaSample.from_dict(d)


def build_bench(samples_path, model, editor, out, stats_out=None, in_flight: int = 4,
                extra: dict | None = None, model_factory=None) -> dict:
    """Filter every sample in ``samples_path`` and write the grounded ones to ``out``.

    Relative image paths resolve against the sample file's directory.  When
    ``model_factory(sample, img)`` is given it supplies a model client per
    sample and ``model`` is ignored.  Retained samples are written sorted by
    sample_id.  Returns the statistics record, also written to ``stats_out``.
    """
    samples = read_samples(samples_path)
    root = Path(samples_path).resolve().parent

    def run(sample):
        sample = _resolve(sample, root)
        try:
            img = load_image(sample.image_path)
        except (OSError, ValueError) as exc:
            log.warning("sample %s: %s", sample.sample_id, exc)
            return FilterVerdict(sample.sample_id, ERROR, {}, str(exc))
        m = model_factory(sample, img) if model_factory is not None else model
        return causal_filter(sample, m, editor, img)

    with ThreadPoolExecutor(max_workers=max(1, in_flight)) as pool:
        verdicts = list(pool.map(run, samples))
    order = sorted(range(len(samples)), key=lambda i: samples[i].sample_id)
    keep = [samples[i] for i in order if verdicts[i].group == "correct_grounded"]
    write_samples(keep, out)
    stats = group_stats(verdicts)
    stats["retained"] = len(keep)
    stats["verdicts"] = [verdicts[i].to_dict() for i in order]
    if extra:
        stats.update(extra)
    if stats_out is not None:
        with open(stats_out, "w") as fh:
            json.dump(stats, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return stats
