"""Instruction-tuning text generation for tagged images.

Covers the rule-based listing writer ("1. person, 2. cat, 3. dog."), the
instruction template pool, prompt bundles for the three prompting modes, a
retrying vision-LLM client with an offline replay mode, and conversion of
responses into conversation records.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import random
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import requests

from .errors import ConfigError, DataError, ProtocolError, ReferentialError, TransportError
from .markalloc import TaggedImage, encode_png

logger = logging.getLogger(__name__)

__all__ = [
    "ClientConfig",
    "ConversationRecord",
    "DEFAULT_SYSTEM_MESSAGE",
    "IMAGE_TOKEN",
    "IMPROVED_SYSTEM_MESSAGE",
    "InstructionTemplate",
    "ListingRecord",
    "PROMPT_MODES",
    "PromptBundle",
    "QA_INSTRUCTION",
    "VlmClient",
    "build_listing_prompt",
    "build_qa_prompt",
    "build_request_payload",
    "format_listing",
    "listing_from_sidecar",
    "llava_export",
    "load_icl_exemplars",
    "load_templates",
    "make_conversation_record",
    "parse_conversation",
    "record_from_json",
    "record_to_json",
    "request_fingerprint",
    "rule_based_listing",
    "sample_template",
    "to_conversation_record",
]

IMAGE_TOKEN = "<image>"

PROMPT_MODES = ("zero_shot", "improved_sysmsg", "two_shot_icl")

# zero_shot keeps the default (empty) system message; the other modes replace it.
DEFAULT_SYSTEM_MESSAGE = ""

IMPROVED_SYSTEM_MESSAGE = (
    "You describe images annotated with numeric tags. Each tag sits at the "
    "center of the object it marks. For every tag, describe the object "
    "directly under the tag. Do not assign a tag to a distant object, even "
    "when the distant object is more prominent or easier to describe. If the "
    "region under a tag is ambiguous, describe the immediate region the tag "
    "sits on."
)

LISTING_INSTRUCTION = (
    "Please list the items in the image one by one, following the numerical "
    "order of the tags."
)

QA_INSTRUCTION = (
    "Create a multi-turn conversation between a person and an AI assistant "
    "about this image. The person asks questions about the objects marked by "
    "numeric tags and the assistant answers them, referring to objects by "
    "their tag numbers. Write each exchange as two lines, one starting with "
    "'Question:' and one starting with 'Answer:'."
)


@dataclass(frozen=True)
class ListingRecord:
    """Gold listing for one image: (tag_id, description) in tag order."""

    image_id: int
    items: tuple[tuple[int, str], ...]

    def __post_init__(self):
        if not self.items:
            raise DataError(f"listing for image {self.image_id} has no items")
        prev = 0
        for tag_id, desc in self.items:
            if prev == 0 and tag_id != 1:
                raise DataError(f"listing for image {self.image_id} must start at tag 1")
            if tag_id <= prev:
                raise DataError(
                    f"listing for image {self.image_id} has non-increasing tag id {tag_id}"
                )
            if not str(desc).strip():
                raise DataError(
                    f"listing for image {self.image_id} has an empty description at tag {tag_id}"
                )
            prev = tag_id


def format_listing(record: ListingRecord) -> str:
    return ", ".join(f"{tag_id}. {desc}" for tag_id, desc in record.items) + "."


def rule_based_listing(aset, placements) -> ListingRecord:
    """Deterministic listing from resolved placements and their category names."""
    placements = sorted(placements, key=lambda p: p.tag_id)
    if not placements:
        raise DataError("cannot build a listing without placements")
    items = []
    image_ids = set()
    for p in placements:
        ann = aset.annotation(p.annotation_id)
        image_ids.add(ann.image_id)
        items.append((p.tag_id, aset.category(ann.category_id).name))
    if len(image_ids) != 1:
        raise DataError(f"placements span multiple images: {sorted(image_ids)}")
    return ListingRecord(image_id=image_ids.pop(), items=tuple(items))


def listing_from_sidecar(sidecar: dict) -> ListingRecord:
    """Listing straight from a rendered sidecar payload (no annotation set needed)."""
    placements = sorted(sidecar["placements"], key=lambda p: int(p["tag_id"]))
    items = []
    for p in placements:
        name = str(p.get("category", "")).strip()
        if not name:
            raise ReferentialError(
                f"sidecar for image {sidecar.get('image_id')} has no category for "
                f"tag {p.get('tag_id')}"
            )
        items.append((int(p["tag_id"]), name))
    return ListingRecord(image_id=int(sidecar["image_id"]), items=tuple(items))


# ---------- instruction templates ----------


@dataclass(frozen=True)
class InstructionTemplate:
    id: int
    text: str


def load_templates() -> tuple[InstructionTemplate, ...]:
    raw = json.loads(
        resources.files("somkit").joinpath("data/templates.json").read_text("utf-8")
    )
    return tuple(InstructionTemplate(id=i + 1, text=t) for i, t in enumerate(raw))


def sample_template(templates, seed: int) -> InstructionTemplate:
    """Uniform pick; the same seed always returns the same template."""
    if not templates:
        raise DataError("no instruction templates to sample from")
    rng = random.Random(seed)
    return templates[rng.randrange(len(templates))]


# ---------- prompt bundles ----------


@dataclass(frozen=True)
class PromptBundle:
    """Everything one vision-LLM call needs, independent of the wire format."""

    mode: str
    system_message: str
    user_text: str
    image_png: bytes
    exemplars: tuple[tuple[bytes, str], ...] = ()

    def __post_init__(self):
        if self.mode not in PROMPT_MODES:
            raise ConfigError(f"unknown prompt mode '{self.mode}'")
        if self.mode == "two_shot_icl":
            if len(self.exemplars) != 2:
                raise ConfigError("two_shot_icl bundles need exactly 2 exemplars")
        elif self.exemplars:
            raise ConfigError(f"mode '{self.mode}' must not carry exemplars")
        if self.mode == "zero_shot":
            if self.system_message != DEFAULT_SYSTEM_MESSAGE:
                raise ConfigError("zero_shot bundles keep the default system message")
        elif self.system_message == DEFAULT_SYSTEM_MESSAGE:
            raise ConfigError(f"mode '{self.mode}' needs a non-default system message")


def load_icl_exemplars() -> tuple[tuple[bytes, str], ...]:
    root = resources.files("somkit").joinpath("data/exemplars")
    out = []
    for stem in ("exemplar_1", "exemplar_2"):
        image = root.joinpath(f"{stem}.png").read_bytes()
        text = root.joinpath(f"{stem}.txt").read_text("utf-8").strip()
        out.append((image, text))
    return tuple(out)


def _image_payload(tagged) -> bytes:
    if isinstance(tagged, TaggedImage):
        if not tagged.placements:
            raise DataError(f"image {tagged.image_id} has no placements to prompt about")
        return encode_png(tagged.pixels)
    if isinstance(tagged, (bytes, bytearray)):
        return bytes(tagged)
    raise DataError(f"expected TaggedImage or PNG bytes, got {type(tagged).__name__}")


def build_listing_prompt(tagged, mode: str, system_message: str | None = None) -> PromptBundle:
    """Listing prompt for one tagged image in the given mode."""
    image_png = _image_payload(tagged)
    if mode == "zero_shot":
        return PromptBundle(
            mode=mode,
            system_message=DEFAULT_SYSTEM_MESSAGE,
            user_text=LISTING_INSTRUCTION,
            image_png=image_png,
        )
    sysmsg = system_message or IMPROVED_SYSTEM_MESSAGE
    if mode == "improved_sysmsg":
        return PromptBundle(
            mode=mode,
            system_message=sysmsg,
            user_text=LISTING_INSTRUCTION,
            image_png=image_png,
        )
    if mode == "two_shot_icl":
        return PromptBundle(
            mode=mode,
            system_message=sysmsg,
            user_text=LISTING_INSTRUCTION,
            image_png=image_png,
            exemplars=load_icl_exemplars(),
        )
    raise ConfigError(f"unknown prompt mode '{mode}'")


def build_qa_prompt(tagged, system_message: str | None = None) -> PromptBundle:
    """QA prompt; always runs with the improved system message."""
    return PromptBundle(
        mode="improved_sysmsg",
        system_message=system_message or IMPROVED_SYSTEM_MESSAGE,
        user_text=QA_INSTRUCTION,
        image_png=_image_payload(tagged),
    )


# ---------- vision-LLM client ----------


@dataclass(frozen=True)
class ClientConfig:
    endpoint: str = "https://api.openai.com/v1/chat/completions"
    model: str = "gpt-4-vision-preview"
    max_tokens: int = 512
    temperature: float = 0.2
    retry_cap: int = 4  # total attempts per request
    concurrency: int = 4
    timeout: float = 60.0
    backoff_base: float = 0.5
    api_key_env: str = "SOMKIT_API_KEY"

    def __post_init__(self):
        if self.retry_cap < 1:
            raise ConfigError(f"retry_cap must be >= 1, got {self.retry_cap}")
        if self.concurrency < 1:
            raise ConfigError(f"concurrency must be >= 1, got {self.concurrency}")


def request_fingerprint(bundle: PromptBundle) -> str:
    """Stable hash of a bundle's content; replay fixtures are keyed by it."""
    payload = {
        "mode": bundle.mode,
        "system": bundle.system_message,
        "user": bundle.user_text,
        "image": hashlib.sha256(bundle.image_png).hexdigest(),
        "exemplars": [
            [hashlib.sha256(img).hexdigest(), text] for img, text in bundle.exemplars
        ],
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _user_content(text: str, image_png: bytes) -> list[dict]:
    encoded = base64.b64encode(image_png).decode("ascii")
    return [
        {"type": "text", "text": text},
        {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{encoded}"}},
    ]


def build_request_payload(bundle: PromptBundle, config: ClientConfig) -> dict:
    """Chat-completions style request body."""
    messages = []
    if bundle.system_message:
        messages.append({"role": "system", "content": bundle.system_message})
    for image_png, listing_text in bundle.exemplars:
        messages.append({"role": "user", "content": _user_content(bundle.user_text, image_png)})
        messages.append({"role": "assistant", "content": listing_text})
    messages.append({"role": "user", "content": _user_content(bundle.user_text, bundle.image_png)})
    return {
        "model": config.model,
        "messages": messages,
        "max_tokens": config.max_tokens,
        "temperature": config.temperature,
    }


def _extract_text(body: str) -> str:
    try:
        envelope = json.loads(body)
        content = envelope["choices"][0]["message"]["content"]
    except (json.JSONDecodeError, KeyError, IndexError, TypeError) as exc:
        raise ProtocolError(f"response envelope not understood: {exc}") from exc
    if not isinstance(content, str) or not content.strip():
        raise ProtocolError("response envelope carries no message text")
    return content


class VlmClient:
    """Submits prompt bundles with retries, bounded concurrency, and replay.

    ``transport`` takes the request payload and returns ``(status, body)``;
    the default posts JSON over HTTP with the credential from the configured
    environment variable. With ``replay_dir`` set, no network is touched:
    responses come from ``<fingerprint>.txt`` fixture files.
    """

    def __init__(self, config: ClientConfig = ClientConfig(), replay_dir=None,
                 transport=None, sleep=time.sleep):
        self.config = config
        self.replay_dir = Path(replay_dir) if replay_dir is not None else None
        self._transport = transport or self._http_transport
        self._sleep = sleep

    def _http_transport(self, payload: dict):
        key = os.environ.get(self.config.api_key_env)
        if not key:
            raise ConfigError(
                f"environment variable {self.config.api_key_env} is not set"
            )
        response = requests.post(
            self.config.endpoint,
            json=payload,
            headers={"Authorization": f"Bearer {key}"},
            timeout=self.config.timeout,
        )
        return response.status_code, response.text

    def submit(self, bundle: PromptBundle) -> str:
        """Raw response text for one bundle; retries transient failures."""
        if self.replay_dir is not None:
            return self._replay(bundle)
        payload = build_request_payload(bundle, self.config)
        cap = self.config.retry_cap
        last_failure = "no attempt made"
        for attempt in range(1, cap + 1):
            try:
                status, body = self._transport(payload)
            except (OSError, requests.RequestException) as exc:
                # covers timeouts and connection drops; both retry
                last_failure = f"transport failure: {exc}"
            else:
                if status == 200:
                    return _extract_text(body)
                if status == 429 or status >= 500:
                    last_failure = f"HTTP {status}"
                else:
                    raise TransportError(f"request rejected with HTTP {status}")
            logger.warning("attempt %d/%d failed (%s)", attempt, cap, last_failure)
            if attempt < cap:
                self._sleep(self.config.backoff_base * (2 ** (attempt - 1)))
        raise TransportError(f"request failed after {cap} attempts: {last_failure}")

    def submit_many(self, bundles) -> list:
        """Submit bundles concurrently; the result list keeps input order.

        Each entry is either the response text or the exception that bundle
        raised, so one bad record cannot sink a batch.
        """
        bundles = list(bundles)
        if not bundles:
            return []
        workers = min(self.config.concurrency, len(bundles))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(self.submit, b) for b in bundles]
        results = []
        for future in futures:
            try:
                results.append(future.result())
            except (TransportError, ProtocolError, ConfigError, DataError) as exc:
                results.append(exc)
        return results

    def _replay(self, bundle: PromptBundle) -> str:
        fingerprint = request_fingerprint(bundle)
        path = self.replay_dir / f"{fingerprint}.txt"
        if not path.is_file():
            raise TransportError(f"no replay fixture for request {fingerprint}")
        return path.read_text("utf-8")


# ---------- conversation records ----------


@dataclass(frozen=True)
class ConversationRecord:
    """LLaVA-style training record: image reference plus alternating turns."""

    id: str
    image: str
    conversations: tuple[tuple[str, str], ...]  # (speaker, value)

    def __post_init__(self):
        if len(self.conversations) < 2:
            raise DataError(f"record {self.id} needs at least two turns")
        for idx, (speaker, value) in enumerate(self.conversations):
            expected = "human" if idx % 2 == 0 else "assistant"
            if speaker != expected:
                raise DataError(
                    f"record {self.id} turn {idx} should be '{expected}', got '{speaker}'"
                )
            if not value.strip():
                raise DataError(f"record {self.id} turn {idx} is empty")
        if IMAGE_TOKEN not in self.conversations[0][1]:
            raise DataError(f"record {self.id} first turn misses the image token")


_QA_MARKER = re.compile(r"(?mi)^[ \t]*(?:question|answer|q|a|person|assistant)[ \t]*:[ \t]*")
_QUESTION_WORDS = ("question", "q", "person")


def parse_conversation(text: str) -> list[tuple[str, str]]:
    """(question, answer) pairs from a 'Question:/Answer:' style transcript.

    Bodies run to the next marker; unmatched questions are dropped. Returns
    an empty list when the text carries no markers.
    """
    markers = list(_QA_MARKER.finditer(text))
    if not markers:
        return []
    pairs = []
    pending_question = None
    for idx, m in enumerate(markers):
        role = m.group(0).strip().rstrip(":").strip().lower()
        end = markers[idx + 1].start() if idx + 1 < len(markers) else len(text)
        body = text[m.end() : end].strip()
        if not body:
            continue
        if role in _QUESTION_WORDS:
            pending_question = body
        elif pending_question is not None:
            pairs.append((pending_question, body))
            pending_question = None
    return pairs


def make_conversation_record(
    image_id: int, image_path: str, instruction: str, response: str
) -> ConversationRecord:
    """Build a record from a model response (or rule-based text).

    A response that parses as a QA transcript expands into one human/assistant
    turn pair per exchange; anything else becomes a two-turn record with the
    instruction as the human turn.
    """
    if not response or not response.strip():
        raise DataError(f"empty response for image {image_id}")
    pairs = parse_conversation(response)
    turns: list[tuple[str, str]] = []
    if pairs:
        for idx, (question, answer) in enumerate(pairs):
            prefix = IMAGE_TOKEN + "\n" if idx == 0 else ""
            turns.append(("human", prefix + question))
            turns.append(("assistant", answer))
    else:
        turns.append(("human", IMAGE_TOKEN + "\n" + instruction))
        turns.append(("assistant", response.strip()))
    return ConversationRecord(
        id=f"{image_id:012d}", image=image_path, conversations=tuple(turns)
    )


def to_conversation_record(
    tagged: TaggedImage, instruction: str, response: str, image_path: str | None = None
) -> ConversationRecord:
    path = image_path or f"{tagged.image_id:012d}.png"
    return make_conversation_record(tagged.image_id, path, instruction, response)


def record_to_json(record: ConversationRecord) -> dict:
    return {
        "id": record.id,
        "image": record.image,
        "conversations": [
            {"from": speaker, "value": value} for speaker, value in record.conversations
        ],
    }


def record_from_json(obj: dict) -> ConversationRecord:
    try:
        turns = tuple((t["from"], t["value"]) for t in obj["conversations"])
        return ConversationRecord(id=str(obj["id"]), image=str(obj["image"]), conversations=turns)
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed conversation record: {exc}") from exc


def llava_export(records) -> list[dict]:
    """Single-array export of conversation records (training-ready JSON)."""
    return [record_to_json(r) for r in records]
