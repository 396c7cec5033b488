"""Detection and parsing of enumerated listings in free-form model text.

Grammar, applied to candidate enumerators found in the text:

* line-start enumerators (after optional whitespace, optionally behind a
  ``-``/``*`` bullet): ``N.``, ``N)``, ``N:``, or ``Tag N`` / ``Tag N is`` /
  ``Tag N:``, each followed by whitespace;
* inline enumerators: ``N.`` or ``N)`` preceded by a comma, so
  ``1. person, 2. cat, 3. dog.`` counts; a mid-line ``1.``/``1)`` preceded by
  whitespace may start a sequence ("the image shows 1. a cup, 2. a bowl");
* candidates chain into runs: a run starts at N == 1 and continues while N is
  strictly increasing. Candidates outside a run ("version 2.0", "in 1999.")
  are plain text. Nested lists are not tracked; restarting at 1 begins a new
  top-level run.

Detection reports a listing when qualifying runs (length >= 2) hold at least
two items. Parsing also returns singleton runs, so a one-item answer such as
"1. bird." still yields its item.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Iterable, Iterator

from .recordio import iter_records

logger = logging.getLogger(__name__)

__all__ = [
    "ListingDetection",
    "ParsedListing",
    "ProbeResult",
    "detect_listing",
    "iter_record_texts",
    "parse_listing",
    "probe_corpus",
]

_LINE_MARKER = re.compile(
    r"(?m)^[ \t]*(?:[-*•][ \t]+)?"
    r"(?:(?P<num>\d{1,6})[.):]|[Tt]ag[ \t]+(?P<tagnum>\d{1,6})(?:[ \t]+is\b|:)?)"
    r"[ \t]+"
)
_INLINE_MARKER = re.compile(r",[ \t]+(?P<num>\d{1,6})[.)][ \t]+")
_INLINE_START = re.compile(r"(?<=[ \t])(?P<num>1)[.)][ \t]+")


@dataclass(frozen=True)
class ListingDetection:
    has_listing: bool
    spans: tuple[tuple[int, int], ...]  # character offsets, non-overlapping, ascending
    item_count: int


@dataclass(frozen=True)
class ParsedListing:
    items: tuple[tuple[int, str], ...]  # (tag_id, description), tag_ids unique
    residual: str


@dataclass(frozen=True)
class ProbeResult:
    total: int
    listings: int
    percentage: float  # 0..100, two decimals


@dataclass(frozen=True)
class _Item:
    number: int
    start: int
    body_start: int
    end: int


def _candidates(text: str) -> list[tuple[int, int, int]]:
    """(number, span_start, body_start) for every enumerator candidate, by position."""
    found: dict[int, tuple[int, int, int]] = {}
    for m in _LINE_MARKER.finditer(text):
        num = m.group("num") or m.group("tagnum")
        found.setdefault(m.start(), (int(num), m.start(), m.end()))
    for pattern in (_INLINE_MARKER, _INLINE_START):
        for m in pattern.finditer(text):
            start = m.start("num")
            found.setdefault(start, (int(m.group("num")), start, m.end()))
    return [found[k] for k in sorted(found)]


def _scan(text: str) -> list[list[_Item]]:
    tokens = _candidates(text)
    runs: list[list[_Item]] = []
    current: list[_Item] | None = None
    for idx, (num, start, body_start) in enumerate(tokens):
        next_start = tokens[idx + 1][1] if idx + 1 < len(tokens) else len(text)
        newline = text.find("\n", body_start)
        line_end = len(text) if newline == -1 else newline
        item = _Item(number=num, start=start, body_start=body_start, end=min(next_start, line_end))
        if num == 1:
            current = [item]
            runs.append(current)
        elif current is not None and num > current[-1].number:
            current.append(item)
        # anything else ("version 2.0", "in 1999.") is plain text
    return runs


def detect_listing(text: str) -> ListingDetection:
    """Report whether the text contains an enumerated listing of >= 2 items."""
    spans: list[tuple[int, int]] = []
    count = 0
    for run in _scan(text):
        if len(run) < 2:
            continue
        count += len(run)
        spans.extend((item.start, item.end) for item in run)
    spans.sort()
    return ListingDetection(has_listing=count >= 2, spans=tuple(spans), item_count=count)


def _clean_description(body: str) -> str:
    desc = body.strip()
    while desc and desc[-1] in ".,":
        desc = desc[:-1].rstrip()
    return desc


def parse_listing(text: str) -> ParsedListing:
    """Extract (tag_id, description) items; everything else lands in residual.

    Descriptions run from the enumerator to the next enumerator or line end
    and are trimmed of the markers. Duplicate tag ids keep their first
    occurrence.
    """
    items_all = sorted((item for run in _scan(text) for item in run), key=lambda it: it.start)
    seen: set[int] = set()
    items: list[tuple[int, str]] = []
    spans: list[tuple[int, int]] = []
    for item in items_all:
        if item.number in seen:
            continue
        seen.add(item.number)
        items.append((item.number, _clean_description(text[item.body_start : item.end])))
        spans.append((item.start, item.end))
    pieces = []
    cursor = 0
    for start, end in spans:
        pieces.append(text[cursor:start])
        cursor = end
    pieces.append(text[cursor:])
    residual = "".join(pieces).strip()
    return ParsedListing(items=tuple(items), residual=residual)


def probe_corpus(records: Iterable[str]) -> ProbeResult:
    """Count listing-bearing records in a stream of text blobs (constant memory)."""
    total = 0
    hits = 0
    for text in records:
        total += 1
        if detect_listing(text).has_listing:
            hits += 1
    if total == 0:
        logger.warning("probed an empty corpus; reporting 0.00%%")
        return ProbeResult(total=0, listings=0, percentage=0.0)
    return ProbeResult(total=total, listings=hits, percentage=round(100.0 * hits / total, 2))


def iter_record_texts(path) -> Iterator[str]:
    """One text blob per record: all assistant-side turn values joined together."""
    for rec in iter_records(path):
        turns = rec.get("conversations", ())
        values = [
            str(t.get("value", ""))
            for t in turns
            if isinstance(t, dict) and t.get("from") in ("assistant", "gpt")
        ]
        yield "\n\n".join(values)
