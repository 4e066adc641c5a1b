"""Images, masks, boxes and the file formats shared by every other module.

Images are plain ``uint8`` arrays of shape ``(height, width)`` and masks are
``bool`` arrays of the same shape.  Boxes are half-open pixel rectangles
``[x1, x2) x [y1, y2)`` with the origin at the top-left corner.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "WORK_SIZE",
    "BBox",
    "VqaSample",
    "Counterfactual",
    "ImageFormatError",
    "EmptyRegionError",
    "as_image",
    "load_image",
    "save_image",
    "encode_pgm",
    "decode_pgm",
    "resize_bilinear",
    "resize_nearest",
    "mask_to_bbox",
    "boxes_to_mask",
    "union_pixel_count",
    "read_samples",
    "write_samples",
]

#: Working resolution (height, width) of every image exchanged between modules.
WORK_SIZE = (224, 224)


class ImageFormatError(ValueError):
    """Raised for unreadable, unsupported or degenerate image files."""


class EmptyRegionError(ValueError):
    """Raised when a region that must contain pixels is empty."""


@dataclass(frozen=True, order=True)
class BBox:
    """Half-open pixel box ``[x1, x2) x [y1, y2)``."""

    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self):
        for name in ("x1", "y1", "x2", "y2"):
            v = getattr(self, name)
            if isinstance(v, (bool, np.bool_)) or int(v) != v:
                raise ValueError(f"box coordinate {name}={v!r} is not an integer")
            object.__setattr__(self, name, int(v))
        if self.x1 < 0 or self.y1 < 0:
            raise ValueError(f"negative box origin in {self.as_list()}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {self.as_list()}")

    @classmethod
    def from_list(cls, values: Sequence[int]) -> "BBox":
        if len(values) != 4:
            raise ValueError(f"a box needs 4 coordinates, got {list(values)!r}")
        return cls(*values)

    @classmethod
    def full(cls, width: int, height: int) -> "BBox":
        return cls(0, 0, width, height)

    @property
    def width(self) -> int:
        return self.x2 - self.x1

    @property
    def height(self) -> int:
        return self.y2 - self.y1

    @property
    def area(self) -> int:
        return self.width * self.height

    def as_list(self) -> list[int]:
        return [self.x1, self.y1, self.x2, self.y2]

    def fits(self, width: int, height: int) -> bool:
        return self.x2 <= width and self.y2 <= height

    def check_within(self, width: int, height: int) -> "BBox":
        if not self.fits(width, height):
            raise ValueError(f"box {self.as_list()} exceeds image bounds {width}x{height}")
        return self

    def scaled(self, factor: int) -> "BBox":
        return BBox(self.x1 * factor, self.y1 * factor, self.x2 * factor, self.y2 * factor)

    def contains(self, other: "BBox") -> bool:
        return (self.x1 <= other.x1 and self.y1 <= other.y1
                and other.x2 <= self.x2 and other.y2 <= self.y2)


@dataclass(frozen=True)
class VqaSample:
    sample_id: str
    image_path: str
    attribute: str
    gt_boxes: tuple[BBox, ...]
    answer: str
    mode: str = "direct"

    def __post_init__(self):
        if self.answer not in ("yes", "no"):
            raise ValueError(f"answer must be 'yes' or 'no', got {self.answer!r}")
        if self.mode not in ("direct", "reason"):
            raise ValueError(f"mode must be 'direct' or 'reason', got {self.mode!r}")
        if not self.sample_id:
            raise ValueError("sample_id must be nonempty")
        object.__setattr__(self, "gt_boxes", tuple(self.gt_boxes))

    @classmethod
    def from_dict(cls, row: dict) -> "VqaSample":
        return cls(
            sample_id=str(row["sample_id"]),
            image_path=str(row["image_path"]),
            attribute=str(row["attribute"]),
            gt_boxes=tuple(BBox.from_list(b) for b in row["gt_boxes"]),
            answer=row["answer"],
            mode=row.get("mode", "direct"),
        )

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "image_path": self.image_path,
            "attribute": self.attribute,
            "gt_boxes": [b.as_list() for b in self.gt_boxes],
            "answer": self.answer,
            "mode": self.mode,
        }


@dataclass(frozen=True)
class Counterfactual:
    """An image with a region removed, plus a record of what was removed."""

    source_id: str
    removed_region: tuple[BBox, ...]
    image: np.ndarray = field(repr=False)


def as_image(data) -> np.ndarray:
    """Validate and return a read-only ``uint8`` image array."""
    arr = np.asarray(data)
    if arr.ndim != 2:
        raise ImageFormatError(f"expected a 2-D grayscale image, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ImageFormatError("zero-dimension image")
    if arr.dtype != np.uint8:
        if np.issubdtype(arr.dtype, np.floating) and not np.all(np.isfinite(arr)):
            raise ImageFormatError("non-finite pixel values")
        if arr.min() < 0 or arr.max() > 255:
            raise ImageFormatError("pixel values outside [0, 255]")
        arr = arr.astype(np.uint8)
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


# --- PGM ---------------------------------------------------------------------

def _pgm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens, pos, n = [], 0, len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PGM header")
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def decode_pgm(buf: bytes) -> np.ndarray:
    if not buf.startswith(b"P5"):
        raise ImageFormatError("not a binary PGM (P5) file")
    tokens, offset = _pgm_tokens(buf, 4)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ImageFormatError(f"bad PGM header: {exc}") from None
    if width <= 0 or height <= 0:
        raise ImageFormatError("zero-dimension image")
    if maxval != 255:
        raise ImageFormatError(f"only maxval 255 is supported, got {maxval}")
    raster = buf[offset:offset + width * height]
    if len(raster) != width * height:
        raise ImageFormatError("truncated PGM raster")
    return as_image(np.frombuffer(raster, dtype=np.uint8).reshape(height, width))


def encode_pgm(img) -> bytes:
    img = as_image(img)
    h, w = img.shape
    return b"P5\n%d %d\n255\n" % (w, h) + img.tobytes()


def save_image(img, path) -> None:
    """Write ``img`` as a binary PGM."""
    if path is None or str(path) == "":
        raise ValueError("empty output path")
    Path(path).write_bytes(encode_pgm(img))


def load_image(path, expect: tuple[int, int] | None = WORK_SIZE) -> np.ndarray:
    """Load a P5 PGM or 8-bit grayscale PNG, resizing to ``expect`` (h, w) if needed."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise ImageFormatError(f"cannot read {path}: {exc}") from exc
    if buf.startswith(b"P5"):
        img = decode_pgm(buf)
    elif buf.startswith(b"\x89PNG"):
        img = _decode_png(buf)
    else:
        raise ImageFormatError(f"unsupported image format: {path}")
    if expect is not None and img.shape != tuple(expect):
        img = resize_bilinear(img, expect)
    return img


def _decode_png(buf: bytes) -> np.ndarray:
    import io

    from PIL import Image

    with Image.open(io.BytesIO(buf)) as im:
        if im.mode not in ("L", "P", "1"):
            raise ImageFormatError(f"PNG must be 8-bit grayscale, got mode {im.mode}")
        return as_image(np.array(im.convert("L")))


# --- resampling --------------------------------------------------------------

def _bilinear_weights(n_in: int, n_out: int) -> np.ndarray:
    """Dense (n_out, n_in) interpolation matrix with half-pixel centers."""
    centers = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    centers = np.clip(centers, 0.0, n_in - 1)
    lo = np.floor(centers).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = centers - lo
    W = np.zeros((n_out, n_in))
    np.add.at(W, (np.arange(n_out), lo), 1.0 - frac)
    np.add.at(W, (np.arange(n_out), hi), frac)
    return W


def resize_bilinear(img, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize to ``size`` = (h, w), rounding half up."""
    img = as_image(img)
    h, w = size
    if h <= 0 or w <= 0:
        raise ValueError(f"invalid target size {size}")
    if img.shape == (h, w):
        return img
    out = _bilinear_weights(img.shape[0], h) @ img.astype(np.float64) @ _bilinear_weights(img.shape[1], w).T
    # 1e-9 guards against values like 127.49999999 from the matrix products
    return as_image(np.clip(np.floor(out + 0.5 + 1e-9), 0, 255))


def resize_nearest(arr: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor resize of a mask or map to ``size`` = (h, w).

    For an integer upscaling factor ``k`` every cell becomes a ``k x k`` block.
    """
    arr = np.asarray(arr)
    h, w = size
    ys = (np.arange(h) * arr.shape[0]) // h
    xs = (np.arange(w) * arr.shape[1]) // w
    return arr[np.ix_(ys, xs)]


# --- regions -----------------------------------------------------------------

def mask_to_bbox(mask: np.ndarray) -> BBox:
    """Tightest half-open box enclosing every set pixel."""
    mask = np.asarray(mask, dtype=bool)
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        raise EmptyRegionError("mask has no set pixels")
    cols = np.flatnonzero(mask.any(axis=0))
    return BBox(int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


def boxes_to_mask(boxes: Iterable[BBox], dims: tuple[int, int]) -> np.ndarray:
    """Rasterize the union of ``boxes`` into an (h, w) mask."""
    h, w = dims
    mask = np.zeros((h, w), dtype=bool)
    for b in boxes:
        b.check_within(w, h)
        mask[b.y1:b.y2, b.x1:b.x2] = True
    return mask


def union_pixel_count(boxes_a, boxes_b, dims: tuple[int, int]) -> tuple[int, int, int, int]:
    """(intersection, union, area_a, area_b) over the union region of each box list."""
    ma = boxes_to_mask(boxes_a, dims)
    mb = boxes_to_mask(boxes_b, dims)
    return (int(np.count_nonzero(ma & mb)), int(np.count_nonzero(ma | mb)),
            int(np.count_nonzero(ma)), int(np.count_nonzero(mb)))


# --- samples -----------------------------------------------------------------

def read_samples(path) -> list[VqaSample]:
    samples = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                samples.append(VqaSample.from_dict(json.loads(line)))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed sample: {exc}") from exc
    return samples


def write_samples(samples: Iterable[VqaSample], path) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_dict(), sort_keys=True) + "\n")
