"""List-wise accuracy: per-image M/N scores kept as exact rationals.

Item i in the gold listing counts as correct when the prediction carries tag
id i and the normalized descriptions match (optionally via a synonym table or
substring containment). Decimals appear only in reports.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from . import listparse
from .errors import DataError
from .recordio import iter_records

__all__ = [
    "ListingScore",
    "MatchPolicy",
    "aggregate_scores",
    "load_gold_listings",
    "load_predictions",
    "score_file",
    "score_listing",
]


def _normalize(text: str) -> str:
    return text.strip().lower()


@dataclass(frozen=True)
class MatchPolicy:
    """How predicted descriptions are compared against gold category names.

    ``synonyms`` maps normalized names to a canonical form and is applied to
    both sides before comparison; with ``substring_match`` on, a gold name
    contained in the prediction also counts.
    """

    synonyms: Mapping[str, str] = field(default_factory=dict)
    substring_match: bool = True

    def canonical(self, text: str) -> str:
        norm = _normalize(text)
        return self.synonyms.get(norm, norm)

    def matches(self, predicted: str, gold: str) -> bool:
        p = self.canonical(predicted)
        g = self.canonical(gold)
        if p == g:
            return True
        return self.substring_match and bool(g) and g in p


@dataclass(frozen=True)
class ListingScore:
    n_total: int
    n_correct: int

    def __post_init__(self):
        if self.n_total <= 0:
            raise DataError("a listing score needs at least one gold item")
        if not 0 <= self.n_correct <= self.n_total:
            raise DataError(
                f"n_correct {self.n_correct} outside [0, {self.n_total}]"
            )

    @property
    def score(self) -> Fraction:
        return Fraction(self.n_correct, self.n_total)


def score_listing(pred_items, gold_items, policy: MatchPolicy = MatchPolicy()) -> ListingScore:
    """Score predicted (tag_id, description) items against the gold listing.

    Duplicate predicted ids keep their first occurrence; gold ids missing from
    the prediction never count. An empty gold listing is an error.
    """
    if isinstance(pred_items, listparse.ParsedListing):
        pred_items = pred_items.items
    gold = list(gold_items)
    if not gold:
        raise DataError("cannot score against an empty gold listing")
    first_seen: dict[int, str] = {}
    for tag_id, desc in pred_items:
        first_seen.setdefault(int(tag_id), str(desc))
    correct = 0
    for tag_id, gold_desc in gold:
        tag_id = int(tag_id)
        if tag_id in first_seen and policy.matches(first_seen[tag_id], str(gold_desc)):
            correct += 1
    return ListingScore(n_total=len(gold), n_correct=correct)


def aggregate_scores(scores: Sequence[ListingScore]) -> Fraction:
    """Unweighted mean of the per-image scores, exact."""
    if not scores:
        raise DataError("cannot aggregate an empty score list")
    return sum((s.score for s in scores), Fraction(0)) / len(scores)


# ---------- file-level scoring ----------


def load_gold_listings(path) -> dict[int, list[tuple[int, str]]]:
    """Gold listings keyed by image id.

    Accepts a directory of ``*.tags.json`` sidecars, a single sidecar file, or
    a JSON Lines file of ``{"image_id": ..., "items": [[tag_id, name], ...]}``.
    """
    path = Path(path)
    gold: dict[int, list[tuple[int, str]]] = {}
    if path.is_dir():
        sidecars = sorted(path.glob("*.tags.json"))
        if not sidecars:
            raise DataError(f"no *.tags.json sidecars under {path}")
        for sc in sidecars:
            image_id, items = _listing_from_sidecar_file(sc)
            gold[image_id] = items
        return gold
    if path.name.endswith(".tags.json"):
        image_id, items = _listing_from_sidecar_file(path)
        gold[image_id] = items
        return gold
    for rec in iter_records(path):
        if "image_id" not in rec or "items" not in rec:
            raise DataError(f"{path}: gold records need image_id and items")
        items = [(int(t), str(d)) for t, d in rec["items"]]
        gold[int(rec["image_id"])] = items
    if not gold:
        raise DataError(f"{path}: no gold listings found")
    return gold


def _listing_from_sidecar_file(path) -> tuple[int, list[tuple[int, str]]]:
    from .markalloc import load_sidecar

    payload = load_sidecar(path)
    items = [
        (int(p["tag_id"]), str(p.get("category", "")))
        for p in sorted(payload["placements"], key=lambda p: int(p["tag_id"]))
    ]
    return int(payload["image_id"]), items


def load_predictions(path) -> dict[int, list[tuple[int, str]]]:
    """Predicted listings keyed by image id, from a JSON Lines file.

    Accepts three line shapes: ``{"image_id", "raw_text"}`` (parsed here),
    ``{"image_id", "items"}`` (pre-parsed), or a conversation record whose id
    holds the image id (the last assistant turn is parsed).
    """
    preds: dict[int, list[tuple[int, str]]] = {}
    count = 0
    for rec in iter_records(path):
        count += 1
        if "conversations" in rec:
            image_id = _image_id_from_record(rec)
            values = [
                str(t.get("value", ""))
                for t in rec["conversations"]
                if isinstance(t, dict) and t.get("from") in ("assistant", "gpt")
            ]
            if not values:
                raise DataError(f"{path}: record {rec.get('id')} has no assistant turn")
            items = list(listparse.parse_listing(values[-1]).items)
        elif "raw_text" in rec:
            image_id = _require_image_id(rec, path)
            items = list(listparse.parse_listing(str(rec["raw_text"])).items)
        elif "items" in rec:
            image_id = _require_image_id(rec, path)
            items = [(int(t), str(d)) for t, d in rec["items"]]
        else:
            raise DataError(f"{path}: prediction records need raw_text or items")
        preds[image_id] = items
    if count == 0:
        raise DataError(f"{path}: prediction file is empty")
    return preds


def _require_image_id(rec: dict, path) -> int:
    if "image_id" not in rec:
        raise DataError(f"{path}: prediction record misses image_id")
    return int(rec["image_id"])


def _image_id_from_record(rec: dict) -> int:
    raw = str(rec.get("id", ""))
    digits = raw.rsplit("_", 1)[-1]
    try:
        return int(digits)
    except ValueError:
        raise DataError(f"cannot derive an image id from record id '{raw}'") from None


def score_file(pred_path, gold_path, policy: MatchPolicy = MatchPolicy()) -> dict:
    """Score a prediction file against gold listings; JSON-ready report.

    Every predicted image id must exist in gold; a stray id raises an error
    naming it. The aggregate mean is reported to 4 decimals.
    """
    gold = load_gold_listings(gold_path)
    preds = load_predictions(pred_path)
    rows = []
    scores = []
    for image_id in sorted(preds):
        if image_id not in gold:
            raise DataError(f"prediction image_id {image_id} not present in gold")
        s = score_listing(preds[image_id], gold[image_id], policy)
        scores.append(s)
        rows.append(
            {
                "image_id": image_id,
                "n_total": s.n_total,
                "n_correct": s.n_correct,
                "score": round(float(s.score), 4),
            }
        )
    mean = aggregate_scores(scores)
    return {
        "images": rows,
        "aggregate": {"images": len(rows), "mean_score": round(float(mean), 4)},
    }
