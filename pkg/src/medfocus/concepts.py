"""Concept vocabulary, reference packs, and concept transfer onto a target image."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (BBox, EmptyRegionError, as_image, load_image, mask_to_bbox,
                   resize_bilinear, resize_nearest, save_image)
from .services import RefinementDeclined, ServiceError
from .transport import (EmptyTransferError, UotParams, build_distribution,
                        select_reference, solve_uot, transfer_region)

log = logging.getLogger(__name__)

__all__ = [
    "Concept",
    "Composite",
    "ConceptVocabulary",
    "DEFAULT_VOCABULARY",
    "ReferencePack",
    "ConceptRegion",
    "RefinementError",
    "transfer_concepts",
    "refine_region",
    "refine_regions",
]


@dataclass(frozen=True)
class Concept:
    id: str
    name: str


@dataclass(frozen=True)
class Composite:
    name: str
    member_ids: tuple[str, ...]


@dataclass(frozen=True)
class ConceptVocabulary:
    concepts: tuple[Concept, ...]
    composites: tuple[Composite, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "concepts", tuple(self.concepts))
        object.__setattr__(self, "composites", tuple(
            Composite(c.name, tuple(c.member_ids)) for c in self.composites))
        ids = [c.id for c in self.concepts]
        if len(set(ids)) != len(ids):
            raise ValueError("concept ids must be unique")
        known = set(ids)
        for comp in self.composites:
            if comp.name in known:
                raise ValueError(f"composite name {comp.name!r} collides with a concept id")
            missing = [m for m in comp.member_ids if m not in known]
            if missing:
                raise ValueError(f"composite {comp.name!r} references unknown concepts {missing}")
            if not comp.member_ids:
                raise ValueError(f"composite {comp.name!r} has no members")

    @property
    def ids(self) -> list[str]:
        return [c.id for c in self.concepts]

    def name_of(self, key: str) -> str:
        for c in self.concepts:
            if c.id == key:
                return c.name
        return key

    @classmethod
    def from_dict(cls, data: dict) -> "ConceptVocabulary":
        return cls(
            tuple(Concept(str(c["id"]), str(c.get("name", c["id"]))) for c in data["concepts"]),
            tuple(Composite(str(g["name"]), tuple(g["member_ids"])) for g in data.get("composites", [])),
        )

    @classmethod
    def load(cls, path) -> "ConceptVocabulary":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {
            "concepts": [{"id": c.id, "name": c.name} for c in self.concepts],
            "composites": [{"name": g.name, "member_ids": list(g.member_ids)} for g in self.composites],
        }


DEFAULT_VOCABULARY = ConceptVocabulary(
    concepts=tuple(Concept(name.replace(" ", "_"), name) for name in (
        "cardiac silhouette",
        "left lung",
        "right lung",
        "mediastinum",
        "upper mediastinum",
        "left clavicle",
        "right clavicle",
        "left hilar structures",
        "right hilar structures",
        "left costophrenic angle",
        "right costophrenic angle",
    )),
    composites=(
        Composite("lungs", ("left_lung", "right_lung")),
        Composite("clavicles", ("left_clavicle", "right_clavicle")),
        Composite("hilar_structures", ("left_hilar_structures", "right_hilar_structures")),
        Composite("costophrenic_angles", ("left_costophrenic_angle", "right_costophrenic_angle")),
    ),
)


@dataclass
class ReferencePack:
    """Reference images with a full set of concept masks each.

    On disk: ``manifest.json`` listing image files, the images as PGM, and
    one mask per concept named ``<image stem>.<concept_id>.pgm`` (0/255).
    """

    images: list[np.ndarray] = field(repr=False)
    masks: list[dict[str, np.ndarray]] = field(repr=False)
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.images) != len(self.masks):
            raise ValueError("every reference image needs a mask set")
        if not self.names:
            self.names = [f"ref{i:02d}" for i in range(len(self.images))]
        for img, masks in zip(self.images, self.masks):
            for cid, m in masks.items():
                if m.shape != img.shape:
                    raise ValueError(f"mask {cid!r} shape {m.shape} != image shape {img.shape}")

    def __len__(self) -> int:
        return len(self.images)

    def check_complete(self, vocab: ConceptVocabulary) -> None:
        for name, masks in zip(self.names, self.masks):
            missing = [cid for cid in vocab.ids if cid not in masks]
            if missing:
                raise ValueError(f"reference {name} lacks masks for {missing}")

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        files = []
        for name, img, masks in zip(self.names, self.images, self.masks):
            save_image(img, d / f"{name}.pgm")
            files.append(f"{name}.pgm")
            for cid, m in masks.items():
                save_image(np.where(m, 255, 0).astype(np.uint8), d / f"{name}.{cid}.pgm")
        concepts = sorted({cid for masks in self.masks for cid in masks})
        (d / "manifest.json").write_text(json.dumps({"images": files, "concepts": concepts}, indent=2))

    @classmethod
    def load(cls, directory) -> "ReferencePack":
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text())
        images, masks, names = [], [], []
        for fname in manifest["images"]:
            stem = Path(fname).stem
            img = load_image(d / fname, expect=None)
            mset = {}
            for cid in manifest.get("concepts", []):
                mset[cid] = load_image(d / f"{stem}.{cid}.pgm", expect=None) >= 128
            images.append(img)
            masks.append(mset)
            names.append(stem)
        return cls(images, masks, names)


@dataclass(frozen=True)
class ConceptRegion:
    concept_id: str
    mask: np.ndarray = field(repr=False)
    box: BBox
    source: str = "transferred"

    @classmethod
    def from_mask(cls, concept_id: str, mask, source: str = "transferred") -> "ConceptRegion":
        mask = np.asarray(mask, dtype=bool)
        return cls(concept_id, mask, mask_to_bbox(mask), source)


def _resize_mask(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Downsample a mask through the bilinear image path, threshold at half."""
    return resize_bilinear(np.where(mask, 255, 0).astype(np.uint8), size) >= 128


def transfer_concepts(target, pack: ReferencePack, vocab: ConceptVocabulary = DEFAULT_VOCABULARY,
                      uot: UotParams = UotParams(), work_resolution: tuple[int, int] = (56, 56),
                      selection_resolution: tuple[int, int] = (14, 14), coverage: float = 0.75,
                      extent: float | None = None,
                      reference_index: int | None = None) -> dict[str, ConceptRegion]:
    """Map every vocabulary concept from the best-matching reference onto ``target``.

    Concepts whose transfer is empty are left out of the result.  The result
    keeps vocabulary order.  Coordinates are measured in pixels of the
    transfer grid (``extent = max(work_resolution)``) unless ``extent`` is
    given; the same extent is used for reference selection.
    """
    target = as_image(target)
    if extent is None:
        extent = float(max(work_resolution))
    if len(pack) == 0:
        raise ValueError("reference pack is empty")
    if reference_index is None:
        reference_index, _ = select_reference(pack.images, target, uot, selection_resolution,
                                              extent=extent)
    ref_img = pack.images[reference_index]
    ref_masks = pack.masks[reference_index]

    mu_ref = build_distribution(resize_bilinear(ref_img, work_resolution), extent)
    mu_tgt = build_distribution(resize_bilinear(target, work_resolution), extent)
    plan = solve_uot(mu_ref, mu_tgt, uot)

    regions = {}
    for cid in vocab.ids:
        if cid not in ref_masks:
            log.warning("reference %s has no mask for %s", pack.names[reference_index], cid)
            continue
        src = np.flatnonzero(_resize_mask(ref_masks[cid], work_resolution).ravel())
        if src.size == 0:
            log.info("concept %s vanishes at %s; marked absent", cid, work_resolution)
            continue
        try:
            core = transfer_region(plan, src, coverage, concept_id=cid)
        except EmptyTransferError:
            log.info("concept %s received no mass; marked absent", cid)
            continue
        small = np.zeros(work_resolution[0] * work_resolution[1], dtype=bool)
        small[core.pixel_indices] = True
        full = resize_nearest(small.reshape(work_resolution), target.shape)
        regions[cid] = ConceptRegion.from_mask(cid, full, "transferred")
    return regions


class RefinementError(ServiceError):
    def __init__(self, concept_id: str, cause: Exception):
        super().__init__(f"refining {concept_id}: {cause}")
        self.concept_id = concept_id


def refine_region(target, region: ConceptRegion, refiner) -> ConceptRegion:
    """Replace a region's mask with the refiner's mask for its box.

    A declined request or an empty mask keeps the input region.
    """
    target = as_image(target)
    region.box.check_within(target.shape[1], target.shape[0])
    try:
        mask = refiner.refine(target, region.box)
    except RefinementDeclined as exc:
        log.warning("refiner declined %s (%s); keeping transferred region", region.concept_id, exc)
        return region
    except ServiceError as exc:
        raise RefinementError(region.concept_id, exc) from exc
    try:
        return ConceptRegion.from_mask(region.concept_id, mask, "refined")
    except EmptyRegionError:
        log.warning("refiner returned an empty mask for %s; keeping transferred region",
                    region.concept_id)
        return region


def refine_regions(target, regions: dict[str, ConceptRegion], refiner,
                   in_flight: int = 4) -> dict[str, ConceptRegion]:
    keys = list(regions)
    with ThreadPoolExecutor(max_workers=max(1, in_flight)) as pool:
        refined = list(pool.map(lambda k: refine_region(target, regions[k], refiner), keys))
    return dict(zip(keys, refined))
