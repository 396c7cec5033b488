"""Reading and writing conversation-record collections (JSON array or JSON Lines)."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Iterator

from .errors import DataError

__all__ = [
    "canonical_dumps",
    "iter_records",
    "read_records",
    "sha256_file",
    "write_records_json",
    "write_records_jsonl",
]


def canonical_dumps(obj) -> str:
    """Stable single-line JSON used for digests and JSONL output."""
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def iter_records(path) -> Iterator[dict]:
    """Yield records from a JSON array file or a JSON Lines file.

    Detection is by first non-whitespace character; a leading '[' means one
    JSON array, anything else is treated as JSONL. Bad content raises
    DataError naming the record index.
    """
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        head = ""
        while True:
            ch = fh.read(1)
            if not ch:
                return
            if not ch.isspace():
                head = ch
                break
        fh.seek(0)
        if head == "[":
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: malformed JSON array: {exc.msg}") from exc
            for idx, rec in enumerate(data):
                if not isinstance(rec, dict):
                    raise DataError(f"{path}: record {idx} is not a JSON object")
                yield rec
            return
        for idx, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: record {idx}: malformed JSON: {exc.msg}") from exc
            if not isinstance(rec, dict):
                raise DataError(f"{path}: record {idx} is not a JSON object")
            yield rec


def read_records(path) -> list[dict]:
    return list(iter_records(path))


def write_records_jsonl(records, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(canonical_dumps(rec))
            fh.write("\n")


def write_records_json(records, path) -> None:
    text = json.dumps(list(records), sort_keys=True, ensure_ascii=False, indent=2)
    Path(path).write_text(text + "\n", "utf-8")


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()
