"""Deterministic mixing of conversation-record datasets.

Sources are concatenated in recipe order (honoring per-source take-counts),
shuffled with a seeded permutation, and written with a manifest carrying
per-source counts plus content digests. The same recipe and seed always
reproduce the same bytes; different seeds permute the same record multiset.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass
from pathlib import Path

from . import listparse
from .errors import DataError, RecipeError
from .recordio import (
    canonical_dumps,
    iter_records,
    read_records,
    sha256_file,
    write_records_json,
    write_records_jsonl,
)

__all__ = ["MixRecipe", "MixSource", "dataset_stats", "load_recipe", "mix"]


@dataclass(frozen=True)
class MixSource:
    label: str
    path: str
    take: int | None = None  # None means take everything

    def __post_init__(self):
        if not self.label:
            raise RecipeError("mix sources need a non-empty label")
        if self.take is not None and self.take < 0:
            raise RecipeError(f"source '{self.label}' has a negative take-count")


@dataclass(frozen=True)
class MixRecipe:
    sources: tuple[MixSource, ...]
    shuffle_seed: int

    def __post_init__(self):
        if not self.sources:
            raise RecipeError("a mix recipe needs at least one source")
        labels = [s.label for s in self.sources]
        if len(set(labels)) != len(labels):
            raise RecipeError(f"duplicate source labels in recipe: {labels}")
        if not 0 <= self.shuffle_seed < 2**64:
            raise RecipeError(f"shuffle_seed must fit in 64 bits, got {self.shuffle_seed}")


def load_recipe(path) -> MixRecipe:
    try:
        obj = json.loads(Path(path).read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise RecipeError(f"recipe {path} is not valid JSON: {exc.msg}") from exc
    if not isinstance(obj, dict) or not isinstance(obj.get("sources"), list):
        raise RecipeError(f"recipe {path} needs a 'sources' array")
    sources = []
    for entry in obj["sources"]:
        if not isinstance(entry, dict) or "label" not in entry or "path" not in entry:
            raise RecipeError(f"recipe {path}: each source needs label and path")
        take = entry.get("take")
        sources.append(
            MixSource(
                label=str(entry["label"]),
                path=str(entry["path"]),
                take=int(take) if take is not None else None,
            )
        )
    seed = obj.get("shuffle_seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise RecipeError(f"recipe {path}: shuffle_seed must be an integer")
    return MixRecipe(sources=tuple(sources), shuffle_seed=seed)


def mix(recipe: MixRecipe, out_path, fmt: str = "jsonl") -> dict:
    """Mix the recipe's sources into one dataset file; returns the manifest.

    The manifest is also written next to the output as
    ``<name>.manifest.json``. ``fmt`` selects JSON Lines or a single JSON
    array.
    """
    if fmt not in ("jsonl", "json"):
        raise RecipeError(f"unknown output format '{fmt}'")
    out_path = Path(out_path)
    combined: list[dict] = []
    source_rows = []
    for src in recipe.sources:
        records = read_records(src.path)  # OSError propagates as an I/O failure
        available = len(records)
        if src.take is not None:
            if src.take > available:
                raise RecipeError(
                    f"source '{src.label}' holds {available} records, "
                    f"take-count {src.take} exceeds it"
                )
            records = records[: src.take]
        combined.extend(records)
        source_rows.append(
            {"label": src.label, "path": src.path, "available": available, "taken": len(records)}
        )

    rng = random.Random(recipe.shuffle_seed)
    rng.shuffle(combined)

    if fmt == "jsonl":
        write_records_jsonl(combined, out_path)
    else:
        write_records_json(combined, out_path)

    sorted_blob = "\n".join(sorted(canonical_dumps(r) for r in combined))
    manifest = {
        "output": out_path.name,
        "format": fmt,
        "seed": recipe.shuffle_seed,
        "total": len(combined),
        "sources": source_rows,
        "content_digest": sha256_file(out_path),
        "sorted_records_digest": hashlib.sha256(sorted_blob.encode("utf-8")).hexdigest(),
    }
    manifest_path = out_path.with_name(out_path.name + ".manifest.json")
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", "utf-8")
    return manifest


def dataset_stats(path) -> dict:
    """Counts for one dataset file: records, turns, image-bearing records, and
    assistant turns whose text reads as a listing."""
    records = turns = images = listing_turns = 0
    for rec in iter_records(path):
        records += 1
        convs = rec.get("conversations", [])
        if not isinstance(convs, list):
            raise DataError(f"{path}: record {records - 1} has malformed conversations")
        turns += len(convs)
        if rec.get("image"):
            images += 1
        for turn in convs:
            if not isinstance(turn, dict):
                raise DataError(f"{path}: record {records - 1} has a malformed turn")
            if turn.get("from") in ("assistant", "gpt") and listparse.detect_listing(
                str(turn.get("value", ""))
            ).has_listing:
                listing_turns += 1
    return {
        "records": records,
        "turns": turns,
        "images": images,
        "listing_turns": listing_turns,
    }
