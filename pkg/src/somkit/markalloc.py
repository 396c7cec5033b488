"""Numbered-tag allocation: mask selection, anchoring, numbering, rendering.

Anchors sit at the discrete pole of inaccessibility (Chebyshev distance to
the nearest background-or-border pixel, ties broken in raster order), tags are
numbered in raster order of their anchors, and label boxes are nudged along a
fixed spiral when they collide. Rendering uses an embedded 5x7 digit font so
identical inputs produce byte-identical rasters.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .annotations import AnnotationSet, BinaryMask, annotation_mask, mask_area
from .errors import ConfigError, DataError

__all__ = [
    "DEFAULT_AREA_FRACTIONS",
    "GranularityLevel",
    "OverlapResolution",
    "TAG_PALETTE",
    "TagPlacement",
    "TagStyle",
    "TaggedImage",
    "anchor_point",
    "assign_tags",
    "encode_png",
    "label_box_size",
    "load_sidecar",
    "load_tagged_image",
    "render_tags",
    "resolve_overlaps",
    "select_masks",
    "sidecar_payload",
    "tag_image",
    "write_sidecar",
    "write_tagged_png",
]

# Coarse-to-fine minimum area fractions for granularity levels 1..3.
DEFAULT_AREA_FRACTIONS = {1: 0.02, 2: 0.005, 3: 0.001}

# Interior colors cycle through this palette by tag_id mod 8; digits stay white.
TAG_PALETTE = (
    (230, 25, 75),
    (60, 180, 75),
    (0, 130, 200),
    (245, 130, 48),
    (145, 30, 180),
    (70, 180, 240),
    (240, 50, 230),
    (128, 128, 0),
)

# 5x7 digit bitmaps, row strings top to bottom, "1" marks a lit pixel.
_DIGIT_BITMAPS = {
    "0": ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    "1": ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    "2": ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    "3": ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    "4": ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    "5": ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    "6": ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    "7": ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    "8": ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    "9": ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}

_GLYPH_W, _GLYPH_H = 5, 7

# Candidate offsets tried in order when a label box collides, scaled by box height.
_SPIRAL_OFFSETS = ((1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1))


@dataclass(frozen=True)
class GranularityLevel:
    """Mask-selection strictness; smaller fractions admit smaller objects."""

    level: int
    min_area_fraction: float

    def __post_init__(self):
        if self.level not in (1, 2, 3):
            raise ConfigError(f"granularity level must be 1, 2, or 3, got {self.level}")
        if not 0 < self.min_area_fraction <= 1:
            raise ConfigError(
                f"min_area_fraction must be in (0, 1], got {self.min_area_fraction}"
            )

    @classmethod
    def preset(cls, level: int, fractions=None) -> "GranularityLevel":
        table = dict(DEFAULT_AREA_FRACTIONS)
        if fractions:
            table.update({int(k): float(v) for k, v in fractions.items()})
        if level not in table:
            raise ConfigError(f"no area fraction configured for level {level}")
        return cls(level=level, min_area_fraction=table[level])


@dataclass(frozen=True)
class TagStyle:
    """Cosmetics for rendered tags. ``box_fill=None`` selects the palette color."""

    box_fill: tuple[int, int, int] | None = None
    text_color: tuple[int, int, int] = (255, 255, 255)
    glyph_scale: int = 2
    padding: int = 2

    def __post_init__(self):
        if self.glyph_scale < 1:
            raise ConfigError(f"glyph_scale must be >= 1, got {self.glyph_scale}")
        if self.padding < 0:
            raise ConfigError(f"padding must be >= 0, got {self.padding}")


@dataclass(frozen=True)
class TagPlacement:
    tag_id: int
    anchor: tuple[int, int]  # (x, y), a foreground pixel of the source mask
    label_box: tuple[int, int, int, int]  # (x, y, w, h)
    annotation_id: int


@dataclass(frozen=True)
class OverlapResolution:
    placements: tuple[TagPlacement, ...]
    collisions: tuple[tuple[int, int], ...]


@dataclass(frozen=True, eq=False)
class TaggedImage:
    image_id: int
    pixels: np.ndarray  # (h, w, 3) uint8, read-only
    placements: tuple[TagPlacement, ...]
    collisions: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        arr = np.array(self.pixels, dtype=np.uint8, copy=True)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise DataError(f"tagged image pixels must be (h, w, 3), got {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "pixels", arr)
        ordered = tuple(sorted(self.placements, key=lambda p: p.tag_id))
        object.__setattr__(self, "placements", ordered)


def select_masks(
    aset: AnnotationSet, image_id: int, level: GranularityLevel
) -> list[tuple]:
    """Pick the annotations worth tagging on one image.

    Keeps masks whose recomputed area is at least ``min_area_fraction`` of the
    image area; at level 1 only, masks fully contained in another kept mask are
    dropped. The result is ordered the way assign_tags will number it: raster
    order of the anchor points.
    """
    image = aset.image(image_id)
    threshold = level.min_area_fraction * (image.width * image.height)
    candidates = []
    for ann in aset.annotations_for(image_id):
        mask = annotation_mask(ann, image)
        if mask_area(mask) >= threshold:
            candidates.append((ann, mask))
    if level.level == 1:
        candidates = _drop_contained(candidates)
    keyed = []
    for ann, mask in candidates:
        ax, ay = anchor_point(mask)
        keyed.append(((ay, ax, ann.id), ann, mask))
    keyed.sort(key=lambda t: t[0])
    return [(ann, mask) for _, ann, mask in keyed]


def _drop_contained(candidates):
    # Larger masks are kept first so equal masks collapse to the lowest id.
    ordered = sorted(candidates, key=lambda c: (-mask_area(c[1]), c[0].id))
    kept = []
    for ann, mask in ordered:
        contained = any(not np.any(mask.bits & ~other.bits) for _, other in kept)
        if not contained:
            kept.append((ann, mask))
    return kept


def anchor_point(mask: BinaryMask) -> tuple[int, int]:
    """Foreground pixel with maximal Chebyshev distance to background or border.

    Pixels outside the image count as background. Ties break in raster order
    (smallest y, then smallest x). Raises on an empty mask.
    """
    if not mask.bits.any():
        raise DataError("cannot place an anchor on an empty mask")
    padded = np.pad(mask.bits, 1)
    dist = ndimage.distance_transform_cdt(padded, metric="chessboard")[1:-1, 1:-1]
    flat_idx = int(np.argmax(dist))  # first max in row-major scan = raster tie-break
    y, x = divmod(flat_idx, mask.width)
    return (x, y)


def assign_tags(anchors, annotation_ids=None) -> list[TagPlacement]:
    """Number anchors 1..N in raster order (ascending y, then x) of the anchor."""
    if not anchors:
        raise DataError("cannot assign tags without anchors")
    if annotation_ids is None:
        annotation_ids = [-1] * len(anchors)
    if len(annotation_ids) != len(anchors):
        raise DataError("anchors and annotation_ids must align")
    order = sorted(range(len(anchors)), key=lambda i: (anchors[i][1], anchors[i][0]))
    placements = []
    for tag_id, i in enumerate(order, start=1):
        x, y = int(anchors[i][0]), int(anchors[i][1])
        placements.append(
            TagPlacement(
                tag_id=tag_id,
                anchor=(x, y),
                label_box=(x, y, 0, 0),  # sized later by resolve_overlaps
                annotation_id=int(annotation_ids[i]),
            )
        )
    return placements


def label_box_size(tag_id: int, style: TagStyle) -> tuple[int, int]:
    n = len(str(tag_id))
    w = 2 * style.padding + n * _GLYPH_W * style.glyph_scale + (n - 1) * style.glyph_scale
    h = 2 * style.padding + _GLYPH_H * style.glyph_scale
    return w, h


def _boxes_intersect(a, b) -> bool:
    # Touching edges do not count as an intersection.
    return (
        a[0] < b[0] + b[2]
        and b[0] < a[0] + a[2]
        and a[1] < b[1] + b[3]
        and b[1] < a[1] + a[3]
    )


def resolve_overlaps(placements, style: TagStyle, image_size) -> OverlapResolution:
    """Size label boxes and nudge them apart, greedy in tag order.

    Each box starts centered on its anchor (clamped in-bounds) and tries up
    to 8 spiral offsets of one box height. A box that cannot escape stays at
    the anchor and every remaining intersection is reported as a collision
    pair; collisions are metadata, not failures.
    """
    width, height = int(image_size[0]), int(image_size[1])
    done: list[TagPlacement] = []
    collisions: list[tuple[int, int]] = []
    for p in sorted(placements, key=lambda q: q.tag_id):
        bw, bh = label_box_size(p.tag_id, style)
        if bw > width or bh > height:
            raise DataError(
                f"label box {bw}x{bh} for tag {p.tag_id} cannot fit a {width}x{height} image"
            )
        ax, ay = p.anchor
        bx = min(max(ax - bw // 2, 0), width - bw)
        by = min(max(ay - bh // 2, 0), height - bh)
        base = (bx, by, bw, bh)
        chosen = None
        for dx, dy in ((0, 0),) + _SPIRAL_OFFSETS:
            cand = (bx + dx * bh, by + dy * bh, bw, bh)
            if cand[0] < 0 or cand[1] < 0 or cand[0] + bw > width or cand[1] + bh > height:
                continue
            if any(_boxes_intersect(cand, q.label_box) for q in done):
                continue
            chosen = cand
            break
        if chosen is None:
            chosen = base
            collisions.extend(
                (p.tag_id, q.tag_id) for q in done if _boxes_intersect(base, q.label_box)
            )
        done.append(replace(p, label_box=chosen))
    return OverlapResolution(placements=tuple(done), collisions=tuple(collisions))


def _glyph_mask(char: str, scale: int) -> np.ndarray:
    rows = _DIGIT_BITMAPS[char]
    bitmap = np.array([[c == "1" for c in row] for row in rows], dtype=bool)
    return np.kron(bitmap, np.ones((scale, scale), dtype=bool))


def render_tags(image_id, pixels, placements, style: TagStyle, collisions=()) -> TaggedImage:
    """Draw filled label boxes with bitmap digits; the input array is not touched."""
    base = np.array(pixels, dtype=np.uint8, copy=True)
    if base.ndim != 3 or base.shape[2] != 3:
        raise DataError(f"expected (h, w, 3) pixels, got shape {base.shape}")
    height, width = base.shape[:2]
    scale = style.glyph_scale
    for p in sorted(placements, key=lambda q: q.tag_id):
        x, y, bw, bh = p.label_box
        if x < 0 or y < 0 or x + bw > width or y + bh > height:
            raise DataError(
                f"label box {p.label_box} for tag {p.tag_id} lies outside the "
                f"{width}x{height} image"
            )
        fill = style.box_fill if style.box_fill is not None else TAG_PALETTE[p.tag_id % 8]
        base[y : y + bh, x : x + bw] = fill
        gx = x + style.padding
        gy = y + style.padding
        for char in str(p.tag_id):
            glyph = _glyph_mask(char, scale)
            region = base[gy : gy + glyph.shape[0], gx : gx + glyph.shape[1]]
            region[glyph] = style.text_color
            gx += (_GLYPH_W + 1) * scale
    return TaggedImage(
        image_id=image_id,
        pixels=base,
        placements=tuple(placements),
        collisions=tuple(collisions),
    )


def tag_image(
    aset: AnnotationSet,
    image_id: int,
    pixels,
    level: GranularityLevel,
    style: TagStyle = TagStyle(),
) -> TaggedImage:
    """Full pipeline for one image: select, anchor, number, resolve, render.

    An image with no qualifying masks comes back untouched with zero
    placements.
    """
    image = aset.image(image_id)
    arr = np.asarray(pixels)
    if arr.shape[:2] != (image.height, image.width):
        raise DataError(
            f"pixels are {arr.shape[1]}x{arr.shape[0]} but image {image_id} is "
            f"{image.width}x{image.height}"
        )
    selected = select_masks(aset, image_id, level)
    if not selected:
        return TaggedImage(image_id=image_id, pixels=arr, placements=(), collisions=())
    anchors = [anchor_point(mask) for _, mask in selected]
    placements = assign_tags(anchors, [ann.id for ann, _ in selected])
    resolution = resolve_overlaps(placements, style, (image.width, image.height))
    return render_tags(image_id, arr, resolution.placements, style, resolution.collisions)


# ---------- persistence ----------


def encode_png(pixels) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(pixels, dtype=np.uint8)).save(buf, format="PNG")
    return buf.getvalue()


def write_tagged_png(tagged: TaggedImage, path) -> None:
    Path(path).write_bytes(encode_png(tagged.pixels))


def sidecar_payload(tagged: TaggedImage, categories: dict, file_name: str = "") -> dict:
    """JSON-ready sidecar; ``categories`` maps annotation_id -> category name."""
    placements = []
    for p in tagged.placements:
        placements.append(
            {
                "tag_id": p.tag_id,
                "anchor": list(p.anchor),
                "label_box": list(p.label_box),
                "annotation_id": p.annotation_id,
                "category": categories.get(p.annotation_id, ""),
            }
        )
    return {
        "image_id": tagged.image_id,
        "file_name": file_name,
        "placements": placements,
        "collisions": [list(c) for c in tagged.collisions],
    }


def write_sidecar(tagged: TaggedImage, aset: AnnotationSet, path, file_name: str = "") -> None:
    categories = {}
    for p in tagged.placements:
        ann = aset.annotation(p.annotation_id)
        categories[p.annotation_id] = aset.category(ann.category_id).name
    payload = sidecar_payload(tagged, categories, file_name)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", "utf-8")


def load_sidecar(path) -> dict:
    try:
        payload = json.loads(Path(path).read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"sidecar {path} is not valid JSON: {exc.msg}") from exc
    if not isinstance(payload, dict) or "image_id" not in payload or "placements" not in payload:
        raise DataError(f"sidecar {path} misses image_id/placements")
    return payload


def load_tagged_image(png_path, sidecar: dict) -> TaggedImage:
    """Rebuild a TaggedImage from a rendered PNG plus its sidecar payload."""
    pixels = np.asarray(Image.open(png_path).convert("RGB"))
    placements = tuple(
        TagPlacement(
            tag_id=int(p["tag_id"]),
            anchor=tuple(int(v) for v in p["anchor"]),
            label_box=tuple(int(v) for v in p["label_box"]),
            annotation_id=int(p.get("annotation_id", -1)),
        )
        for p in sidecar["placements"]
    )
    collisions = tuple(tuple(int(v) for v in c) for c in sidecar.get("collisions", ()))
    return TaggedImage(
        image_id=int(sidecar["image_id"]),
        pixels=pixels,
        placements=placements,
        collisions=collisions,
    )
