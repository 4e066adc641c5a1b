"""Occlusion and RISE saliency over an opaque scoring service, and the
saliency-map to bounding-box conversion used to evaluate any saliency method.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import BBox, as_image, resize_nearest
from .services import ScoredSequence, ServiceError

__all__ = [
    "PatchGrid",
    "occlusion_map",
    "rise_masks",
    "rise_map",
    "saliency_to_boxes",
    "saliency_to_pgm",
]

PERCENTILE = 90.0
MIN_COMPONENT_PIXELS = 16
MAX_BOXES = 10
MEAN_DECIMALS = 12


@dataclass(frozen=True)
class PatchGrid:
    patch_size: int = 8

    def shape(self, img_shape: tuple[int, int]) -> tuple[int, int]:
        h, w = img_shape
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(f"patch size {self.patch_size} does not divide image {w}x{h}")
        return h // self.patch_size, w // self.patch_size

    def black_out(self, img: np.ndarray, cells) -> np.ndarray:
        """Copy of ``img`` with the given (row, col) patches set to 0."""
        out = np.array(img)
        p = self.patch_size
        for r, c in cells:
            out[r * p:(r + 1) * p, c * p:(c + 1) * p] = 0
        return out


def _score_all(model, images, question, forced_text, in_flight, what):
    def run(item):
        i, img = item
        try:
            return model.score(img, question, forced_text)
        except ServiceError as exc:
            raise ServiceError(f"{what(i)}: {exc}") from exc

    with ThreadPoolExecutor(max_workers=max(1, in_flight)) as pool:
        return list(pool.map(run, enumerate(images)))


def _check_aligned(original: ScoredSequence, other: ScoredSequence):
    if other.tokens != original.tokens:
        raise ServiceError("scoring service tokenized forced_text inconsistently")


def occlusion_map(model, img, question: str, forced_text: str, grid: PatchGrid = PatchGrid(),
                  in_flight: int = 4) -> np.ndarray:
    """Per-patch drop in total log-probability when that patch is blacked out.

    Returns a ``(h / patch, w / patch)`` map, clamped at zero.
    """
    if not forced_text:
        raise ValueError("forced_text must be nonempty")
    img = as_image(img)
    gh, gw = grid.shape(img.shape)
    original = model.score(img, question, forced_text)
    cells = [(r, c) for r in range(gh) for c in range(gw)]
    scored = _score_all(model, (grid.black_out(img, [rc]) for rc in cells), question,
                        forced_text, in_flight, lambda i: f"occlusion patch {cells[i]}")
    base = math.fsum(original.logprobs)
    out = np.zeros((gh, gw))
    for (r, c), seq in zip(cells, scored):
        _check_aligned(original, seq)
        out[r, c] = max(0.0, base - math.fsum(seq.logprobs))
    return out


def rise_masks(grid_shape: tuple[int, int], n_masks: int, mask_fraction: float,
               seed: int) -> np.ndarray:
    """``(n_masks, gh, gw)`` boolean keep-masks, each hiding exactly floor(cells * fraction) cells."""
    gh, gw = grid_shape
    n_cells = gh * gw
    n_hidden = int(math.floor(n_cells * mask_fraction))
    rng = np.random.default_rng(seed)
    keep = np.ones((n_masks, n_cells), dtype=bool)
    for i in range(n_masks):
        keep[i, rng.choice(n_cells, size=n_hidden, replace=False)] = False
    return keep.reshape(n_masks, gh, gw)


def rise_map(model, img, question: str, forced_text: str, grid: PatchGrid = PatchGrid(),
             n_masks: int = 64, mask_fraction: float = 0.5, *, seed: int,
             in_flight: int = 4) -> np.ndarray:
    """Randomized-mask saliency at patch resolution.

    Mask ``i`` gets weight ``exp(mean log-probability)`` of the forced text on
    the masked image; a cell's importance is the weighted count of masks that
    kept it, divided by the number of masks that kept it.
    """
    if seed is None:
        raise ValueError("rise_map needs an explicit seed")
    if not forced_text:
        raise ValueError("forced_text must be nonempty")
    img = as_image(img)
    gh, gw = grid.shape(img.shape)
    keep = rise_masks((gh, gw), n_masks, mask_fraction, seed)
    images = (grid.black_out(img, zip(*np.nonzero(~k))) for k in keep)
    scored = _score_all(model, images, question, forced_text, in_flight,
                        lambda i: f"RISE mask {i}")
    tokens = scored[0].tokens if scored else ()
    weights = np.empty(n_masks)
    for i, seq in enumerate(scored):
        if seq.tokens != tokens:
            raise ServiceError("scoring service tokenized forced_text inconsistently")
        weights[i] = math.exp(math.fsum(seq.logprobs) / len(seq.logprobs))
    kept = keep.astype(np.float64)
    num = np.tensordot(weights, kept, axes=1)
    return num / np.maximum(1.0, kept.sum(axis=0))


def saliency_to_boxes(saliency, native: tuple[int, int] = (224, 224)) -> list[BBox]:
    """Convert a saliency map into at most ten boxes at ``native`` (h, w) resolution.

    Min-max normalize, keep values at or above the 90th percentile of the
    non-zero values, upscale the binary mask to native resolution, extract
    8-connected components, drop those under 16 pixels, and return the tight
    boxes of the ten components with the highest mean saliency.
    """
    s = np.asarray(saliency, dtype=np.float64)
    if s.ndim != 2 or s.size == 0:
        raise ValueError("saliency must be a nonempty 2-D map")
    if not np.all(np.isfinite(s)):
        raise ValueError("saliency map has non-finite values")
    lo, hi = s.min(), s.max()
    if hi == lo:
        return []
    norm = (s - lo) / (hi - lo)
    nz = norm[norm > 0]
    thr = np.percentile(nz, PERCENTILE, method="linear")
    binary = resize_nearest(norm >= thr, native)
    values = resize_nearest(norm, native)
    labels, n = ndimage.label(binary, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return []
    cands = []
    for k, (ys, xs) in enumerate(ndimage.find_objects(labels), 1):
        vals = values[ys, xs][labels[ys, xs] == k]
        if vals.size < MIN_COMPONENT_PIXELS:
            continue
        # rounded so that equal-valued components tie instead of differing by summation noise
        mean = round(math.fsum(vals) / vals.size, MEAN_DECIMALS)
        box = BBox(xs.start, ys.start, xs.stop, ys.stop)
        cands.append((-mean, -box.area, box.y1, box.x1, box))
    cands.sort(key=lambda c: c[:4])
    return [c[4] for c in cands[:MAX_BOXES]]


def saliency_to_pgm(saliency) -> np.ndarray:
    """Min-max scale a map to 0-255 (a constant map becomes all zeros)."""
    s = np.asarray(saliency, dtype=np.float64)
    lo, hi = s.min(), s.max()
    if hi == lo:
        return as_image(np.zeros(s.shape, dtype=np.uint8))
    return as_image(np.floor((s - lo) / (hi - lo) * 255 + 0.5))
