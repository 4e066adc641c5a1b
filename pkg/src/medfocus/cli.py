"""Command-line entry point: ``medfocus {attribute,baseline,eval,bench-build,uot-solve}``.

Endpoints are HTTP base URLs, or ``stub:`` to mount the offline testkit
services in-process.  ``stub:`` model services are keyed per sample to the
row's optional ``evidence_box``, else its first ground-truth box, else the
whole image.  The editor stub accepts ``stub:fill=N``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .baselines import PatchGrid, occlusion_map, rise_map, saliency_to_boxes, saliency_to_pgm
from .benchbuild import build_bench, make_question
from .concepts import DEFAULT_VOCABULARY, ConceptVocabulary, ReferencePack
from .core import BBox, VqaSample, as_image, load_image, save_image
from .evaluation import evaluate
from .scoring import AttributionConfig, explain
from .services import EditorClient, LocalTransport, ModelClient, RefinerClient, ServiceError
from .testkit import (MockModelService, MockModelSpec, StubEditorService, StubRefinerService,
                      child_seed, synth_reference_pack)
from .transport import UotParams, build_distribution, solve_uot

log = logging.getLogger("medfocus")

STUB = "stub:"
SYNTH_PACK_SIZE = 16


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    model_url: str = STUB
    editor_url: str = STUB
    refiner_url: str = STUB
    vocab_path: str | None = None
    refpack_path: str | None = None
    uot: UotParams = field(default_factory=UotParams)
    attribution: AttributionConfig = field(default_factory=AttributionConfig)
    in_flight_cap: int = 4
    seed: int | None = None

    def __post_init__(self):
        for name in ("model_url", "editor_url", "refiner_url"):
            url = getattr(self, name)
            if not (url.startswith(STUB) or url.startswith(("http://", "https://"))):
                raise ValueError(f"{name} must be an http(s) URL or 'stub:', got {url!r}")
        if int(self.in_flight_cap) != self.in_flight_cap or self.in_flight_cap < 1:
            raise ValueError("in_flight_cap must be a positive integer")
        if self.attribution.in_flight != self.in_flight_cap:
            self.attribution = replace(self.attribution, in_flight=self.in_flight_cap)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        d = dict(d)
        if "uot" in d:
            d["uot"] = UotParams(**d["uot"])
        if "attribution" in d:
            d["attribution"] = AttributionConfig(**d["attribution"])
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "model_url": self.model_url, "editor_url": self.editor_url,
            "refiner_url": self.refiner_url, "vocab_path": self.vocab_path,
            "refpack_path": self.refpack_path, "uot": self.uot.to_dict(),
            "attribution": self.attribution.to_dict(), "in_flight_cap": self.in_flight_cap,
            "seed": self.seed,
        }


# --- configuration -----------------------------------------------------------

def _load_config(args) -> RunConfig:
    path = getattr(args, "config", None) or os.environ.get("MEDFOCUS_CONFIG")
    base = {}
    if path:
        with open(path) as fh:
            base = json.load(fh)
        if not isinstance(base, dict):
            raise UsageError(f"config {path} must hold a JSON object")
    overrides = {
        "model_url": getattr(args, "model_url", None),
        "editor_url": getattr(args, "editor_url", None),
        "refiner_url": getattr(args, "refiner_url", None),
        "vocab_path": getattr(args, "vocab", None),
        "refpack_path": getattr(args, "refpack", None),
        "in_flight_cap": getattr(args, "in_flight", None),
        "seed": getattr(args, "seed", None),
    }
    base.update({k: v for k, v in overrides.items() if v is not None})
    uot = dict(base.get("uot", {}))
    for key in ("epsilon", "lambda1", "lambda2", "max_iters", "tol"):
        v = getattr(args, key, None)
        if v is not None:
            uot[key] = v
    if uot:
        base["uot"] = uot
    attr = dict(base.get("attribution", {}))
    if getattr(args, "tau", None) is not None:
        attr["tau"] = args.tau
    if getattr(args, "no_composites", False):
        attr["include_composites"] = False
    if attr:
        base["attribution"] = attr
    try:
        return RunConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def _vocab(cfg: RunConfig) -> ConceptVocabulary:
    return ConceptVocabulary.load(cfg.vocab_path) if cfg.vocab_path else DEFAULT_VOCABULARY


def _pack(cfg: RunConfig, vocab: ConceptVocabulary) -> ReferencePack:
    if cfg.refpack_path:
        pack = ReferencePack.load(cfg.refpack_path)
    else:
        pack = synth_reference_pack(child_seed(cfg.seed or 0, "refpack"), SYNTH_PACK_SIZE)
    pack.check_complete(vocab)
    return pack


def _stub_model(img, evidence: BBox | None) -> ModelClient:
    img = as_image(img)
    h, w = img.shape
    box = evidence or BBox.full(w, h)
    box.check_within(w, h)
    baseline = float(img[box.y1:box.y2, box.x1:box.x2].astype(np.float64).mean())
    return ModelClient(LocalTransport(MockModelService(MockModelSpec(box, baseline)).handlers()))


def _model_for(cfg: RunConfig, img, evidence: BBox | None):
    if cfg.model_url.startswith(STUB):
        return _stub_model(img, evidence)
    return ModelClient(cfg.model_url)


def _editor(cfg: RunConfig) -> EditorClient:
    url = cfg.editor_url
    if url.startswith(STUB):
        opt = url[len(STUB):]
        fill = 0
        if opt:
            key, _, val = opt.partition("=")
            if key != "fill" or not val.isdigit() or int(val) > 255:
                raise UsageError(f"bad editor stub option {opt!r}; expected fill=0..255")
            fill = int(val)
        return EditorClient(LocalTransport(StubEditorService(fill).handlers()))
    return EditorClient(url)


def _refiner(cfg: RunConfig) -> RefinerClient:
    if cfg.refiner_url.startswith(STUB):
        return RefinerClient(LocalTransport(StubRefinerService().handlers()))
    return RefinerClient(cfg.refiner_url)


# --- inputs ------------------------------------------------------------------

@dataclass
class _Item:
    sample_id: str
    img: np.ndarray
    question: str
    mode: str
    evidence: BBox | None


def _read_rows(path) -> list[dict]:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    rows.append(json.loads(line))
                except ValueError as exc:
                    raise UsageError(f"{path}:{lineno}: {exc}") from None
    return rows


def _items(args) -> list[_Item]:
    if args.samples:
        root = Path(args.samples).resolve().parent
        items = []
        for row in _read_rows(args.samples):
            try:
                s = VqaSample.from_dict(row)
                ev = row.get("evidence_box")
                evidence = BBox.from_list(ev) if ev else (s.gt_boxes[0] if s.gt_boxes else None)
            except (KeyError, ValueError, TypeError) as exc:
                raise UsageError(f"malformed sample row: {exc}") from None
            p = Path(s.image_path)
            img = load_image(p if p.is_absolute() else root / p)
            items.append(_Item(s.sample_id, img, make_question(s.attribute, s.mode), s.mode, evidence))
        return sorted(items, key=lambda it: it.sample_id)
    if not args.image or not (args.question or args.attribute):
        raise UsageError("give --samples, or --image with --question or --attribute")
    img = load_image(args.image)
    q = args.question or make_question(args.attribute, args.mode)
    ev = BBox.from_list([int(v) for v in args.evidence_box.split(",")]) if args.evidence_box else None
    return [_Item(Path(args.image).stem, img, q, args.mode, ev)]


def _write_json(obj, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _overlay(img, boxes, thickness: int = 2) -> np.ndarray:
    """Darkened copy of ``img`` with ``boxes`` outlined in white."""
    out = (np.asarray(img).astype(np.uint16) * 3 // 4).astype(np.uint8)
    for b in boxes:
        t = min(thickness, b.width, b.height)
        out[b.y1:b.y1 + t, b.x1:b.x2] = 255
        out[b.y2 - t:b.y2, b.x1:b.x2] = 255
        out[b.y1:b.y2, b.x1:b.x1 + t] = 255
        out[b.y1:b.y2, b.x2 - t:b.x2] = 255
    return out


# --- subcommands -------------------------------------------------------------

def cmd_attribute(args) -> int:
    cfg = _load_config(args)
    vocab = _vocab(cfg)
    pack = _pack(cfg, vocab)
    refiner = _refiner(cfg)
    out = Path(args.out)
    (out / "overlays").mkdir(parents=True, exist_ok=True)
    results, predictions = [], []
    for it in _items(args):
        model = _model_for(cfg, it.img, it.evidence)
        res, regions = explain(model, it.img, it.question, pack, vocab, refiner, cfg.uot,
                               cfg.attribution, mode=it.mode)
        row = res.to_dict(it.sample_id)
        row["question"] = it.question
        row["answer_text"] = res.original.forced_text
        row["regions"] = {cid: r.box.as_list() for cid, r in regions.items()}
        results.append(row)
        predictions.append({"sample_id": it.sample_id, "boxes": row["boxes"]})
        save_image(_overlay(it.img, res.boxes), out / "overlays" / f"{it.sample_id}.pgm")
    _write_json({"config": cfg.to_dict(), "results": results}, out / "report.json")
    _write_json(predictions, out / "predictions.json")
    return 0


def cmd_baseline(args) -> int:
    cfg = _load_config(args)
    if args.method == "rise" and cfg.seed is None:
        raise UsageError("rise needs --seed (or a seed in the config file)")
    grid = PatchGrid(args.patch_size)
    out = Path(args.out)
    (out / "maps").mkdir(parents=True, exist_ok=True)
    results, predictions = [], []
    for it in _items(args):
        model = _model_for(cfg, it.img, it.evidence)
        answer = model.generate(it.img, it.question, it.mode)
        if args.method == "occlusion":
            smap = occlusion_map(model, it.img, it.question, answer, grid, cfg.in_flight_cap)
        else:
            smap = rise_map(model, it.img, it.question, answer, grid, args.n_masks,
                            args.mask_fraction, seed=child_seed(cfg.seed, f"rise/{it.sample_id}"),
                            in_flight=cfg.in_flight_cap)
        boxes = [b.as_list() for b in saliency_to_boxes(smap, it.img.shape)]
        save_image(saliency_to_pgm(smap), out / "maps" / f"{it.sample_id}.{args.method}.pgm")
        results.append({"sample_id": it.sample_id, "method": args.method, "answer_text": answer,
                        "map_shape": list(smap.shape), "boxes": boxes})
        predictions.append({"sample_id": it.sample_id, "boxes": boxes})
    params = {"method": args.method, "patch_size": args.patch_size}
    if args.method == "rise":
        params.update(n_masks=args.n_masks, mask_fraction=args.mask_fraction)
    _write_json({"config": cfg.to_dict(), "baseline": params, "results": results},
                out / "report.json")
    _write_json(predictions, out / "predictions.json")
    return 0


def cmd_eval(args) -> int:
    h, w = args.dims
    report = evaluate(args.samples, args.predictions, (h, w))
    d = report.to_dict()
    d["config"] = {"dims": [h, w]}
    _write_json(d, args.out)
    if report.failures:
        print(f"warning: {len(report.failures)} rows failed; see 'failures' in {args.out}",
              file=sys.stderr)
    return 0


def cmd_bench_build(args) -> int:
    cfg = _load_config(args)
    editor = _editor(cfg)
    factory = None
    model = None
    if cfg.model_url.startswith(STUB):
        evidence = {}
        for row in _read_rows(args.samples):
            ev = row.get("evidence_box")
            if ev and "sample_id" in row:
                evidence[str(row["sample_id"])] = BBox.from_list(ev)

        def factory(sample, img):
            ev = evidence.get(sample.sample_id) or (sample.gt_boxes[0] if sample.gt_boxes else None)
            return _stub_model(img, ev)
    else:
        model = ModelClient(cfg.model_url)
    stats = build_bench(args.samples, model, editor, args.out, None, cfg.in_flight_cap,
                        {"config": cfg.to_dict()}, model_factory=factory)
    _write_json(stats, args.stats)
    if stats["errors"] and stats["graded"] == 0:
        print(f"error: all {stats['errors']} samples failed", file=sys.stderr)
        return 1
    return 0


def cmd_uot_solve(args) -> int:
    cfg = _load_config(args)
    a = load_image(args.image_a, expect=None)
    b = load_image(args.image_b, expect=None)
    if args.resolution:
        from .core import resize_bilinear
        size = (args.resolution, args.resolution)
        a, b = resize_bilinear(a, size), resize_bilinear(b, size)
    extent = args.extent
    mu_a = build_distribution(a, extent * max(a.shape) / max(a.shape + b.shape) if extent else None)
    mu_b = build_distribution(b, extent * max(b.shape) / max(a.shape + b.shape) if extent else None)
    plan = solve_uot(mu_a, mu_b, cfg.uot, backend=args.backend)
    row = plan.row_sums()
    col = plan.col_sums()
    report = {
        "config": cfg.to_dict(),
        "total_cost": plan.total_cost,
        "iterations_used": plan.iterations_used,
        "converged": plan.converged,
        "row_sum_error": float(np.abs(row - mu_a.weights).max()),
        "col_sum_error": float(np.abs(col - mu_b.weights).max()),
    }
    if len(mu_a) * len(mu_b) <= 1_000_000:
        report["objective"] = plan.objective()
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


# --- argument parsing --------------------------------------------------------

def _common(p: argparse.ArgumentParser, services: bool = True) -> None:
    g = p.add_argument_group("configuration")
    g.add_argument("--config", help="RunConfig JSON file (default: $MEDFOCUS_CONFIG)")
    g.add_argument("--seed", type=int, help="master seed; subsystems derive child seeds from it")
    g.add_argument("--in-flight", type=int, help="maximum concurrent service requests")
    if services:
        g.add_argument("--model-url", help="model service base URL or 'stub:'")
        g.add_argument("--editor-url", help="editor service base URL or 'stub:[fill=N]'")
        g.add_argument("--refiner-url", help="refinement service base URL or 'stub:'")
        g.add_argument("--vocab", help="concept vocabulary JSON")
        g.add_argument("--refpack", help="reference pack directory (default: synthetic pack)")
        g.add_argument("--tau", type=float, help="whole-image fallback threshold")
        g.add_argument("--no-composites", action="store_true", help="skip composite groups")
    u = p.add_argument_group("transport")
    u.add_argument("--epsilon", type=float, help="entropic regularization")
    u.add_argument("--lambda1", type=float, help="source marginal penalty")
    u.add_argument("--lambda2", type=float, help="target marginal penalty")
    u.add_argument("--max-iters", dest="max_iters", type=int, help="Sinkhorn iteration cap")
    u.add_argument("--tol", type=float, help="potential change tolerance")


def _inputs(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("inputs")
    g.add_argument("--samples", help="JSONL sample file (batch mode)")
    g.add_argument("--image", help="single image (PGM or PNG, 224x224)")
    g.add_argument("--question", help="question for --image")
    g.add_argument("--attribute", help="build the templated question for --image from this attribute")
    g.add_argument("--mode", choices=("direct", "reason"), default="direct")
    g.add_argument("--evidence-box", help="x1,y1,x2,y2 evidence box for the stub model with --image")
    p.add_argument("--out", required=True, help="output directory")


def _dims(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h <= 0 or w <= 0:
        raise argparse.ArgumentTypeError("dimensions must be positive")
    return h, w


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="medfocus", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("attribute", help="transfer concepts and attribute the model's answer")
    _common(p)
    _inputs(p)
    p.set_defaults(func=cmd_attribute)

    p = sub.add_parser("baseline", help="Occlusion or RISE saliency plus box conversion")
    p.add_argument("method", choices=("occlusion", "rise"))
    _common(p)
    _inputs(p)
    p.add_argument("--patch-size", type=int, default=8)
    p.add_argument("--n-masks", type=int, default=64)
    p.add_argument("--mask-fraction", type=float, default=0.5)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("eval", help="score predicted boxes against ground truth")
    p.add_argument("samples", help="JSONL sample file")
    p.add_argument("predictions", help="predictions JSON [{sample_id, boxes}]")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--dims", type=_dims, default=(224, 224), help="HxW raster (default 224x224)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench-build", help="causally filter a VQA sample file")
    p.add_argument("samples", help="JSONL sample file")
    _common(p)
    p.add_argument("--out", required=True, help="retained samples JSONL")
    p.add_argument("--stats", required=True, help="group statistics JSON")
    p.set_defaults(func=cmd_bench_build)

    p = sub.add_parser("uot-solve", help="solve entropic UOT between two images")
    p.add_argument("image_a")
    p.add_argument("image_b")
    _common(p, services=False)
    p.add_argument("--resolution", type=int, help="resize both images to NxN first")
    p.add_argument("--extent", type=float, help="coordinate span of the longer side (default: pixels)")
    p.add_argument("--backend", choices=("auto", "grid", "dense"), default="auto")
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    p.set_defaults(func=cmd_uot_solve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (OSError, ValueError, ServiceError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
