"""Command-line pipeline: tag, gen-listing, gen-qa, probe, score, mix.

stdout carries only machine-readable summaries (JSON, or TSV for probe);
progress and diagnostics go to stderr. Exit codes: 0 success, 2 config,
3 data, 4 I/O. All randomness flows from explicit seeds, so reruns with
identical inputs produce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from . import annotations, datamix, listparse, markalloc, scoring, textgen
from .errors import (
    ConfigError,
    DataError,
    ProtocolError,
    SomkitError,
    TransportError,
)
from .recordio import write_records_json, write_records_jsonl

logger = logging.getLogger("somkit")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_IO = 0, 2, 3, 4

# Default seed for template sampling; override with --seed or the config file.
DEFAULT_SEED = 0

_CONFIG_DEFAULTS = {
    "annotations": None,
    "images": None,
    "output_dir": None,
    "level": 2,
    "area_fractions": {},
    "tag_style": {},
    "prompt_mode": "improved_sysmsg",
    "client": {},
    "match_policy": {},
    "seed": DEFAULT_SEED,
}


def _emit(summary: dict) -> None:
    sys.stdout.write(json.dumps(summary, sort_keys=True) + "\n")


def _load_config(args) -> dict:
    cfg = json.loads(json.dumps(_CONFIG_DEFAULTS))  # deep copy
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text("utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc.msg}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        for key, value in loaded.items():
            if key in ("area_fractions", "tag_style", "client", "match_policy"):
                if not isinstance(value, dict):
                    raise ConfigError(f"config key '{key}' must be an object")
                cfg[key].update(value)
            else:
                cfg[key] = value
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    return cfg


def _require_file(value, what) -> Path:
    if not value:
        raise ConfigError(f"no {what} path configured")
    path = Path(value)
    if not path.is_file():
        raise ConfigError(f"{what} path does not exist: {path}")
    return path


def _require_dir(value, what) -> Path:
    if not value:
        raise ConfigError(f"no {what} directory configured")
    path = Path(value)
    if not path.is_dir():
        raise ConfigError(f"{what} directory does not exist: {path}")
    return path


def _tag_style(cfg: dict) -> markalloc.TagStyle:
    style = cfg.get("tag_style", {})
    kwargs = {}
    if style.get("box_fill") is not None:
        kwargs["box_fill"] = tuple(int(v) for v in style["box_fill"])
    if style.get("text_color") is not None:
        kwargs["text_color"] = tuple(int(v) for v in style["text_color"])
    if "glyph_scale" in style:
        kwargs["glyph_scale"] = int(style["glyph_scale"])
    if "padding" in style:
        kwargs["padding"] = int(style["padding"])
    return markalloc.TagStyle(**kwargs)


def _client_config(cfg: dict) -> textgen.ClientConfig:
    client = dict(cfg.get("client", {}))
    client.pop("system_message", None)  # consumed by the prompt builders
    allowed = {f for f in textgen.ClientConfig.__dataclass_fields__}
    unknown = set(client) - allowed
    if unknown:
        raise ConfigError(f"unknown client config keys: {sorted(unknown)}")
    return textgen.ClientConfig(**client)


def _match_policy(cfg: dict) -> scoring.MatchPolicy:
    policy = cfg.get("match_policy", {})
    synonyms = {
        str(k).strip().lower(): str(v).strip().lower()
        for k, v in policy.get("synonyms", {}).items()
    }
    return scoring.MatchPolicy(
        synonyms=synonyms, substring_match=bool(policy.get("substring_match", True))
    )


def _stem(image_id: int) -> str:
    return f"{image_id:012d}"


# ---------- tag ----------


def _cmd_tag(args) -> int:
    cfg = _load_config(args)
    if args.annotations:
        cfg["annotations"] = args.annotations
    if args.images:
        cfg["images"] = args.images
    if args.out:
        cfg["output_dir"] = args.out
    if args.level is not None:
        cfg["level"] = args.level
    ann_path = _require_file(cfg["annotations"], "annotations")
    images_dir = _require_dir(cfg["images"], "images")
    if not cfg["output_dir"]:
        raise ConfigError("no output directory configured")
    out_dir = Path(cfg["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)

    aset = annotations.load_annotation_file(ann_path)
    level = markalloc.GranularityLevel.preset(int(cfg["level"]), cfg.get("area_fractions"))
    style = _tag_style(cfg)
    images = sorted(aset.images, key=lambda img: img.id)

    def work(image):
        pixels = np.asarray(Image.open(images_dir / image.file_name).convert("RGB"))
        return markalloc.tag_image(aset, image.id, pixels, level, style)

    jobs = max(1, args.jobs or 1)
    if jobs > 1 and images:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            tagged_all = list(pool.map(work, images))
    else:
        tagged_all = [work(img) for img in images]

    total_tags = 0
    total_collisions = 0
    for image, tagged in zip(images, tagged_all):
        stem = _stem(image.id)
        markalloc.write_tagged_png(tagged, out_dir / f"{stem}.png")
        markalloc.write_sidecar(tagged, aset, out_dir / f"{stem}.tags.json", f"{stem}.png")
        total_tags += len(tagged.placements)
        total_collisions += len(tagged.collisions)
        logger.info("tagged image %d with %d tags", image.id, len(tagged.placements))
    _emit({"images": len(images), "tags": total_tags, "collisions": total_collisions})
    return EXIT_OK


# ---------- gen-listing / gen-qa ----------


def _mix_seed(base: int, image_id: int) -> int:
    return base * 1_000_003 + image_id


def _cmd_gen(args, kind: str) -> int:
    cfg = _load_config(args)
    tags_dir = _require_dir(args.tags, "tags")
    out_dir = Path(args.out) if args.out else None
    if out_dir is None:
        raise ConfigError("no output directory configured")
    out_dir.mkdir(parents=True, exist_ok=True)
    generator = getattr(args, "generator", "vlm")
    if args.replay:
        generator = "vlm"  # replay fixtures only exist for the model-backed path
    mode = getattr(args, "mode", None) or cfg.get("prompt_mode", "improved_sysmsg")
    seed = int(cfg["seed"])
    templates = textgen.load_templates()
    system_message = cfg.get("client", {}).get("system_message")

    sidecars = sorted(tags_dir.glob("*.tags.json"))
    jobs = []  # (image_id, sidecar payload, instruction)
    skipped = 0
    for sc_path in sidecars:
        payload = markalloc.load_sidecar(sc_path)
        image_id = int(payload["image_id"])
        if not payload["placements"]:
            skipped += 1
            logger.info("image %d has no tags; skipped", image_id)
            continue
        instruction = textgen.sample_template(templates, _mix_seed(seed, image_id)).text
        jobs.append((image_id, payload, instruction))

    records = []
    failures = []
    if kind == "listing" and generator == "rule":
        for image_id, payload, instruction in jobs:
            try:
                listing = textgen.listing_from_sidecar(payload)
                response = textgen.format_listing(listing)
                records.append(
                    textgen.make_conversation_record(
                        image_id, payload.get("file_name") or f"{_stem(image_id)}.png",
                        instruction, response,
                    )
                )
            except SomkitError as exc:
                failures.append({"image_id": image_id, "error": str(exc)})
    else:
        client = textgen.VlmClient(_client_config(cfg), replay_dir=args.replay)
        bundles = []
        for image_id, payload, instruction in jobs:
            png_path = tags_dir / (payload.get("file_name") or f"{_stem(image_id)}.png")
            tagged = markalloc.load_tagged_image(png_path, payload)
            if kind == "qa":
                bundles.append(textgen.build_qa_prompt(tagged, system_message))
            else:
                bundles.append(textgen.build_listing_prompt(tagged, mode, system_message))
        results = client.submit_many(bundles)
        for (image_id, payload, instruction), result in zip(jobs, results):
            if isinstance(result, Exception):
                failures.append({"image_id": image_id, "error": str(result)})
                continue
            try:
                records.append(
                    textgen.make_conversation_record(
                        image_id, payload.get("file_name") or f"{_stem(image_id)}.png",
                        instruction, result,
                    )
                )
            except SomkitError as exc:
                failures.append({"image_id": image_id, "error": str(exc)})

    record_dicts = textgen.llava_export(records)
    stem = kind
    write_records_jsonl(record_dicts, out_dir / f"{stem}.jsonl")
    write_records_json(record_dicts, out_dir / f"{stem}.json")
    if failures:
        write_records_jsonl(failures, out_dir / f"{stem}-failures.jsonl")
        for row in failures:
            logger.warning("image %s failed: %s", row["image_id"], row["error"])

    _emit({"records": len(records), "failures": len(failures), "skipped": skipped})
    if failures and (args.strict or not records):
        return EXIT_DATA
    return EXIT_OK


# ---------- probe / score / mix ----------


def _cmd_probe(args) -> int:
    paths = [_require_file(f, "corpus") for f in args.files]
    for raw, path in zip(args.files, paths):
        result = listparse.probe_corpus(listparse.iter_record_texts(path))
        sys.stdout.write(f"{raw}\t{result.total}\t{result.percentage:.2f}%\n")
        logger.info("%s: %d records, %d with listings", raw, result.total, result.listings)
    return EXIT_OK


def _cmd_score(args) -> int:
    cfg = _load_config(args)
    pred = _require_file(args.pred, "predictions")
    gold = Path(args.gold)
    if not gold.exists():
        raise ConfigError(f"gold path does not exist: {gold}")
    report = scoring.score_file(pred, gold, _match_policy(cfg))
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", "utf-8")
    _emit(report)
    return EXIT_OK


def _cmd_mix(args) -> int:
    recipe_path = _require_file(args.recipe, "recipe")
    recipe = datamix.load_recipe(recipe_path)
    if args.seed is not None:
        recipe = datamix.MixRecipe(sources=recipe.sources, shuffle_seed=args.seed)
    if not args.out:
        raise ConfigError("no output path configured")
    manifest = datamix.mix(recipe, args.out, fmt=args.format)
    _emit(manifest)
    return EXIT_OK


# ---------- wiring ----------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON file")
    common.add_argument("--jobs", type=int, default=None, help="worker pool size")
    common.add_argument("--seed", type=int, default=None, help="base RNG seed")
    common.add_argument("--replay", default=None, help="replay fixture directory")
    common.add_argument("--strict", action="store_true", help="fail on any per-record error")

    parser = argparse.ArgumentParser(prog="somkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tag", parents=[common], help="render numbered tags onto images")
    p.add_argument("--annotations", help="instance annotation JSON")
    p.add_argument("--images", help="source image directory")
    p.add_argument("--out", help="output directory for PNGs and sidecars")
    p.add_argument("--level", type=int, choices=(1, 2, 3), default=None)
    p.set_defaults(func=_cmd_tag)

    p = sub.add_parser("gen-listing", parents=[common], help="generate listing records")
    p.add_argument("--tags", required=True, help="directory produced by 'tag'")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--generator", choices=("rule", "vlm"), default="rule")
    p.add_argument("--mode", choices=textgen.PROMPT_MODES, default=None)
    p.set_defaults(func=lambda a: _cmd_gen(a, "listing"))

    p = sub.add_parser("gen-qa", parents=[common], help="generate multi-turn QA records")
    p.add_argument("--tags", required=True, help="directory produced by 'tag'")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=lambda a: _cmd_gen(a, "qa"))

    p = sub.add_parser("probe", parents=[common], help="report listing share per corpus file")
    p.add_argument("files", nargs="+", help="instruction-tuning JSON/JSONL files")
    p.set_defaults(func=_cmd_probe)

    p = sub.add_parser("score", parents=[common], help="list-wise accuracy against gold")
    p.add_argument("--pred", required=True, help="prediction JSONL")
    p.add_argument("--gold", required=True, help="sidecar dir, sidecar file, or gold JSONL")
    p.add_argument("--out", default=None, help="also write the report here")
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("mix", parents=[common], help="mix datasets per a recipe")
    p.add_argument("--recipe", required=True, help="mix recipe JSON")
    p.add_argument("--out", required=True, help="output dataset path")
    p.add_argument("--format", choices=("jsonl", "json"), default="jsonl")
    p.set_defaults(func=_cmd_mix)
    return parser


def main(argv=None) -> int:
    if not logging.getLogger().handlers:
        logging.basicConfig(
            stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
        )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG
    except (DataError, ProtocolError, TransportError) as exc:
        logger.error("%s", exc)
        return EXIT_DATA
    except OSError as exc:
        logger.error("%s", exc)
        return EXIT_IO


def entrypoint() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entrypoint()
