"""COCO-style instance annotation ingestion and binary mask materialization.

Accepts instance-annotation JSON (``images`` / ``annotations`` / ``categories``
arrays), decodes polygon and run-length segmentations into boolean masks, and
keeps everything immutable so a parsed set can be shared across worker threads.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

from .errors import AnnotationFormatError, DataError, ReferentialError

__all__ = [
    "AnnotationSet",
    "BinaryMask",
    "CategoryRecord",
    "ImageRecord",
    "RunLengthSegmentation",
    "SegmentationAnnotation",
    "annotation_mask",
    "decode_rle",
    "encode_rle",
    "inflate_compressed_rle",
    "load_annotation_file",
    "mask_area",
    "parse_annotation_file",
    "rasterize_polygon",
]


@dataclass(frozen=True)
class ImageRecord:
    id: int
    width: int
    height: int
    file_name: str


@dataclass(frozen=True)
class CategoryRecord:
    id: int
    name: str


@dataclass(frozen=True)
class RunLengthSegmentation:
    """Uncompressed run-length segmentation: column-major, first run background."""

    size: tuple[int, int]  # (height, width)
    counts: tuple[int, ...]


Polygons = tuple[tuple[float, ...], ...]
Segmentation = Union[Polygons, RunLengthSegmentation]


@dataclass(frozen=True)
class SegmentationAnnotation:
    id: int
    image_id: int
    category_id: int
    segmentation: Segmentation
    bbox: tuple[float, float, float, float]
    area: float

    @property
    def is_rle(self) -> bool:
        return isinstance(self.segmentation, RunLengthSegmentation)


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Row-major boolean grid for one object region.

    ``bits`` has shape (height, width) and is stored read-only; masks are safe
    to share between threads.
    """

    width: int
    height: int
    bits: np.ndarray

    def __post_init__(self):
        arr = np.array(self.bits, dtype=bool, copy=True)
        if arr.shape != (self.height, self.width):
            raise DataError(
                f"mask bits have shape {arr.shape}, expected ({self.height}, {self.width})"
            )
        arr.setflags(write=False)
        object.__setattr__(self, "bits", arr)

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and bool(np.array_equal(self.bits, other.bits))
        )


@dataclass(frozen=True)
class AnnotationSet:
    images: tuple[ImageRecord, ...]
    categories: tuple[CategoryRecord, ...]
    annotations: tuple[SegmentationAnnotation, ...]

    @cached_property
    def _images_by_id(self):
        return {img.id: img for img in self.images}

    @cached_property
    def _categories_by_id(self):
        return {cat.id: cat for cat in self.categories}

    @cached_property
    def _annotations_by_id(self):
        return {ann.id: ann for ann in self.annotations}

    def image(self, image_id: int) -> ImageRecord:
        try:
            return self._images_by_id[image_id]
        except KeyError:
            raise ReferentialError(f"unknown image id {image_id}") from None

    def category(self, category_id: int) -> CategoryRecord:
        try:
            return self._categories_by_id[category_id]
        except KeyError:
            raise ReferentialError(f"unknown category id {category_id}") from None

    def annotation(self, annotation_id: int) -> SegmentationAnnotation:
        try:
            return self._annotations_by_id[annotation_id]
        except KeyError:
            raise ReferentialError(f"unknown annotation id {annotation_id}") from None

    def annotations_for(self, image_id: int) -> tuple[SegmentationAnnotation, ...]:
        return tuple(a for a in self.annotations if a.image_id == image_id)


# ---------- mask operations ----------


def mask_area(mask: BinaryMask) -> int:
    """Exact foreground pixel count."""
    return int(mask.bits.sum())


def decode_rle(size: Sequence[int], counts: Sequence[int]) -> BinaryMask:
    """Decode an uncompressed RLE into a mask.

    ``size`` is (height, width); runs are column-major and alternate starting
    with background, so ``counts[0]`` may be 0 for masks whose first pixel is
    foreground.
    """
    if len(size) != 2:
        raise DataError(f"RLE size must be (height, width), got {tuple(size)}")
    h, w = int(size[0]), int(size[1])
    if h <= 0 or w <= 0:
        raise DataError(f"RLE size must be positive, got ({h}, {w})")
    runs = [int(c) for c in counts]
    if any(c < 0 for c in runs):
        raise DataError("RLE run lengths must be non-negative")
    total = sum(runs)
    if total != h * w:
        raise DataError(f"RLE run lengths sum to {total}, expected {h * w} for size ({h}, {w})")
    values = np.zeros(len(runs), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, runs)
    return BinaryMask(width=w, height=h, bits=flat.reshape((h, w), order="F"))


def encode_rle(mask: BinaryMask) -> tuple[tuple[int, int], tuple[int, ...]]:
    """Inverse of :func:`decode_rle`; first run counts background pixels."""
    flat = mask.bits.flatten(order="F")
    boundaries = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    edges = np.concatenate(([0], boundaries, [flat.size]))
    runs = np.diff(edges).tolist()
    if flat[0]:
        runs = [0] + runs
    return (mask.height, mask.width), tuple(int(r) for r in runs)


def inflate_compressed_rle(data: str) -> tuple[int, ...]:
    """Inflate a compressed RLE counts string to run-length integers.

    Uses the common 6-bit variable-length scheme: each char encodes 5 value
    bits plus a continuation bit, offset by 48; runs from index 3 onward are
    deltas against the run two places back.
    """
    counts: list[int] = []
    pos = 0
    while pos < len(data):
        value = 0
        k = 0
        more = True
        while more:
            if pos >= len(data):
                raise DataError("truncated compressed RLE string")
            chunk = ord(data[pos]) - 48
            if chunk < 0 or chunk > 63:
                raise DataError(f"invalid compressed RLE character at position {pos}")
            value |= (chunk & 0x1F) << (5 * k)
            more = bool(chunk & 0x20)
            pos += 1
            k += 1
            if not more and (chunk & 0x10):
                value |= -1 << (5 * k)
        if len(counts) > 2:
            value += counts[-2]
        counts.append(value)
    if any(c < 0 for c in counts):
        raise DataError("compressed RLE inflated to a negative run length")
    return tuple(counts)


def rasterize_polygon(points: Sequence[float], width: int, height: int) -> BinaryMask:
    """Rasterize one polygon ring with the even-odd rule at pixel centers.

    ``points`` is a flat x,y sequence. A pixel (i, j) is set when its center
    (i + 0.5, j + 0.5) is inside the polygon.
    """
    if width <= 0 or height <= 0:
        raise DataError(f"raster dimensions must be positive, got ({width}, {height})")
    pts = [float(v) for v in points]
    if len(pts) < 6 or len(pts) % 2 != 0:
        raise DataError(
            f"polygon needs an even point list with at least 3 vertices, got {len(pts)} values"
        )
    if not all(math.isfinite(v) for v in pts):
        raise DataError("polygon coordinates must be finite")
    xs = pts[0::2]
    ys = pts[1::2]
    n = len(xs)
    bits = np.zeros((height, width), dtype=bool)
    j_lo = max(0, int(math.floor(min(ys) - 0.5)))
    j_hi = min(height - 1, int(math.ceil(max(ys))))
    for j in range(j_lo, j_hi + 1):
        yc = j + 0.5
        crossings = []
        for k in range(n):
            ax, ay = xs[k], ys[k]
            bx, by = xs[(k + 1) % n], ys[(k + 1) % n]
            if (ay > yc) != (by > yc):
                crossings.append(ax + (yc - ay) * (bx - ax) / (by - ay))
        crossings.sort()
        for k in range(0, len(crossings) - 1, 2):
            lo, hi = crossings[k], crossings[k + 1]
            i0 = max(0, math.ceil(lo - 0.5))
            i1 = min(width - 1, math.ceil(hi - 0.5) - 1)
            if i0 <= i1:
                bits[j, i0 : i1 + 1] = True
    return BinaryMask(width=width, height=height, bits=bits)


def annotation_mask(ann: SegmentationAnnotation, image: ImageRecord) -> BinaryMask:
    """Materialize an annotation's segmentation at the parent image's dimensions."""
    if isinstance(ann.segmentation, RunLengthSegmentation):
        seg = ann.segmentation
        mask = decode_rle(seg.size, seg.counts)
        if (mask.height, mask.width) != (image.height, image.width):
            raise DataError(
                f"annotation {ann.id} RLE size {seg.size} does not match image "
                f"({image.height}, {image.width})"
            )
        return mask
    bits = np.zeros((image.height, image.width), dtype=bool)
    for part in ann.segmentation:
        bits |= rasterize_polygon(part, image.width, image.height).bits
    return BinaryMask(width=image.width, height=image.height, bits=bits)


# ---------- parsing ----------


def load_annotation_file(path) -> AnnotationSet:
    return parse_annotation_file(Path(path).read_bytes())


def parse_annotation_file(data) -> AnnotationSet:
    """Parse instance-annotation JSON (bytes or str) into an AnnotationSet.

    Malformed JSON raises AnnotationFormatError naming the byte offset;
    dangling image/category references raise ReferentialError naming the
    offending annotation id. Unknown fields are ignored.
    """
    if isinstance(data, (bytes, bytearray)):
        try:
            text = bytes(data).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise AnnotationFormatError(f"annotation file is not UTF-8: {exc}") from exc
    else:
        text = data
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        byte_offset = len(text[: exc.pos].encode("utf-8"))
        raise AnnotationFormatError(
            f"malformed JSON at byte offset {byte_offset}: {exc.msg}"
        ) from exc
    if not isinstance(obj, dict):
        raise AnnotationFormatError("annotation file must be a JSON object")

    images = tuple(_parse_image(entry) for entry in _require_array(obj, "images"))
    _require_unique((img.id for img in images), "image")
    categories = tuple(_parse_category(entry) for entry in _require_array(obj, "categories"))
    _require_unique((cat.id for cat in categories), "category")
    images_by_id = {img.id: img for img in images}
    category_ids = {cat.id for cat in categories}

    annotations = []
    seen_ann = set()
    for entry in _require_array(obj, "annotations"):
        ann = _parse_annotation(entry)
        if ann.id in seen_ann:
            raise AnnotationFormatError(f"duplicate annotation id {ann.id}")
        seen_ann.add(ann.id)
        if ann.image_id not in images_by_id:
            raise ReferentialError(
                f"annotation {ann.id} references unknown image {ann.image_id}"
            )
        if ann.category_id not in category_ids:
            raise ReferentialError(
                f"annotation {ann.id} references unknown category {ann.category_id}"
            )
        _check_against_image(ann, images_by_id[ann.image_id])
        annotations.append(ann)
    return AnnotationSet(images=images, categories=categories, annotations=tuple(annotations))


def _require_array(obj: dict, key: str) -> list:
    value = obj.get(key)
    if not isinstance(value, list):
        raise AnnotationFormatError(f"annotation file misses the '{key}' array")
    return value


def _require_unique(ids: Iterable[int], what: str) -> None:
    seen = set()
    for i in ids:
        if i in seen:
            raise AnnotationFormatError(f"duplicate {what} id {i}")
        seen.add(i)


def _field(entry, key, kinds, what):
    if not isinstance(entry, dict):
        raise AnnotationFormatError(f"{what} entry must be a JSON object")
    if key not in entry:
        raise AnnotationFormatError(f"{what} entry misses required field '{key}'")
    value = entry[key]
    if not isinstance(value, kinds) or isinstance(value, bool):
        raise AnnotationFormatError(f"{what} field '{key}' has the wrong type")
    return value


def _parse_image(entry) -> ImageRecord:
    width = _field(entry, "width", (int,), "image")
    height = _field(entry, "height", (int,), "image")
    if width <= 0 or height <= 0:
        raise AnnotationFormatError(
            f"image {entry.get('id')} has non-positive dimensions {width}x{height}"
        )
    return ImageRecord(
        id=_field(entry, "id", (int,), "image"),
        width=width,
        height=height,
        file_name=_field(entry, "file_name", (str,), "image"),
    )


def _parse_category(entry) -> CategoryRecord:
    name = _field(entry, "name", (str,), "category")
    if not name.strip():
        raise AnnotationFormatError(f"category {entry.get('id')} has an empty name")
    return CategoryRecord(id=_field(entry, "id", (int,), "category"), name=name.strip().lower())


def _parse_annotation(entry) -> SegmentationAnnotation:
    ann_id = _field(entry, "id", (int,), "annotation")
    bbox = _field(entry, "bbox", (list,), "annotation")
    if len(bbox) != 4 or not all(isinstance(v, (int, float)) for v in bbox):
        raise AnnotationFormatError(f"annotation {ann_id} has a malformed bbox")
    area = _field(entry, "area", (int, float), "annotation")
    if area <= 0:
        raise AnnotationFormatError(f"annotation {ann_id} has non-positive area {area}")
    return SegmentationAnnotation(
        id=ann_id,
        image_id=_field(entry, "image_id", (int,), "annotation"),
        category_id=_field(entry, "category_id", (int,), "annotation"),
        segmentation=_parse_segmentation(entry.get("segmentation"), ann_id),
        bbox=tuple(float(v) for v in bbox),
        area=float(area),
    )


def _parse_segmentation(seg, ann_id: int) -> Segmentation:
    if isinstance(seg, list):
        if not seg:
            raise AnnotationFormatError(f"annotation {ann_id} has an empty polygon list")
        parts = []
        for part in seg:
            if not isinstance(part, list) or not all(
                isinstance(v, (int, float)) for v in part
            ):
                raise AnnotationFormatError(
                    f"annotation {ann_id} polygon parts must be flat number lists"
                )
            if len(part) < 6 or len(part) % 2 != 0:
                raise DataError(
                    f"annotation {ann_id} polygon part has odd or too-short length {len(part)}"
                )
            parts.append(tuple(float(v) for v in part))
        return tuple(parts)
    if isinstance(seg, dict):
        size = seg.get("size")
        counts = seg.get("counts")
        if (
            not isinstance(size, list)
            or len(size) != 2
            or not all(isinstance(v, int) for v in size)
        ):
            raise AnnotationFormatError(f"annotation {ann_id} RLE misses a valid size")
        if isinstance(counts, str):
            runs = inflate_compressed_rle(counts)
        elif isinstance(counts, list) and all(
            isinstance(v, int) and not isinstance(v, bool) for v in counts
        ):
            runs = tuple(counts)
        else:
            raise AnnotationFormatError(f"annotation {ann_id} RLE misses valid counts")
        return RunLengthSegmentation(size=(size[0], size[1]), counts=runs)
    raise AnnotationFormatError(f"annotation {ann_id} has no usable segmentation")


def _check_against_image(ann: SegmentationAnnotation, image: ImageRecord) -> None:
    x, y, w, h = ann.bbox
    if w <= 0 or h <= 0:
        raise AnnotationFormatError(f"annotation {ann.id} bbox has non-positive extent")
    if x < 0 or y < 0 or x + w > image.width or y + h > image.height:
        raise DataError(
            f"annotation {ann.id} bbox {ann.bbox} exceeds image {image.width}x{image.height}"
        )
    if isinstance(ann.segmentation, RunLengthSegmentation):
        if ann.segmentation.size != (image.height, image.width):
            raise DataError(
                f"annotation {ann.id} RLE size {ann.segmentation.size} does not match "
                f"image ({image.height}, {image.width})"
            )
