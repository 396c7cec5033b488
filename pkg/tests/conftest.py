"""Shared fixture builders: synthetic annotation sets and images on disk."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image


def rect_segmentation(x, y, w, h):
    return [[x, y, x + w, y, x + w, y + h, x, y + h]]


def rect_annotation(ann_id, image_id, category_id, x, y, w, h):
    return {
        "id": ann_id,
        "image_id": image_id,
        "category_id": category_id,
        "segmentation": rect_segmentation(x, y, w, h),
        "bbox": [x, y, w, h],
        "area": w * h,
    }


def write_solid_image(path, width, height, color=(120, 150, 180)):
    arr = np.full((height, width, 3), color, dtype=np.uint8)
    Image.fromarray(arr).save(path)


def three_object_dataset() -> dict:
    """One 96x96 image with person/cat/dog rectangles stacked top to bottom.

    Raster order of the anchors gives tags 1=person, 2=cat, 3=dog.
    """
    return {
        "images": [{"id": 1, "width": 96, "height": 96, "file_name": "000000000001.png"}],
        "categories": [
            {"id": 1, "name": "person"},
            {"id": 2, "name": "cat"},
            {"id": 3, "name": "dog"},
        ],
        "annotations": [
            rect_annotation(11, 1, 1, 8, 6, 32, 20),
            rect_annotation(12, 1, 2, 12, 34, 32, 20),
            rect_annotation(13, 1, 3, 8, 62, 48, 26),
        ],
    }


def two_image_dataset() -> dict:
    """Two images: one with two objects, one with three."""
    return {
        "images": [
            {"id": 1, "width": 96, "height": 96, "file_name": "000000000001.png"},
            {"id": 2, "width": 128, "height": 80, "file_name": "000000000002.png"},
        ],
        "categories": [
            {"id": 1, "name": "person"},
            {"id": 2, "name": "cat"},
            {"id": 3, "name": "dog"},
        ],
        "annotations": [
            rect_annotation(11, 1, 1, 8, 6, 32, 20),
            rect_annotation(12, 1, 3, 12, 40, 40, 30),
            rect_annotation(21, 2, 1, 6, 4, 30, 24),
            rect_annotation(22, 2, 2, 48, 10, 30, 24),
            rect_annotation(23, 2, 3, 20, 44, 60, 28),
        ],
    }


def materialize_dataset(tmp_path: Path, data: dict, name: str = "instances.json"):
    """Write the annotation JSON plus one solid PNG per image; returns paths."""
    images_dir = tmp_path / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    for idx, img in enumerate(data["images"]):
        color = (90 + 40 * idx, 140, 170)
        write_solid_image(images_dir / img["file_name"], img["width"], img["height"], color)
    ann_path = tmp_path / name
    ann_path.write_text(json.dumps(data), "utf-8")
    return ann_path, images_dir


@pytest.fixture
def three_object_paths(tmp_path):
    return materialize_dataset(tmp_path, three_object_dataset())


@pytest.fixture
def two_image_paths(tmp_path):
    return materialize_dataset(tmp_path, two_image_dataset())
