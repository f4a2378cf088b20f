"""On-disk corpora: JSONL manifest + PNG images, split assignment, ingestion and statistics."""

import json
import math
import re
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .generate import ALL_TYPES, ChangePair, canonical_types, generate_pair
from .scene import GLOBAL_CHANGES, ChangeType
from .tokenizer import is_punct, split_words

SPLITS = ("train", "val", "test")
SOURCES = ("synthetic", "external")
MANIFEST = "manifest.jsonl"
REQUIRED_FIELDS = ("id", "image_a", "image_b", "captions", "change_types", "split", "source")

_SENTENCE_END = re.compile(r"[.!?]+")


class ManifestError(ValueError):
    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        shown = "\n".join(self.errors[:20])
        more = f"\n... and {len(self.errors) - 20} more" if len(self.errors) > 20 else ""
        super().__init__(f"{len(self.errors)} manifest error(s):\n{shown}{more}")


def split_sizes(n: int, ratio: Sequence[float] = (0.8, 0.1, 0.1)) -> Tuple[int, ...]:
    """Largest-remainder apportionment; each size is within 1 of ``n * ratio``."""
    total = float(sum(ratio))
    exact = [n * r / total for r in ratio]
    sizes = [math.floor(x) for x in exact]
    by_remainder = sorted(range(len(ratio)), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in by_remainder[: n - sum(sizes)]:
        sizes[i] += 1
    return tuple(sizes)


def count_sentences(text: str) -> int:
    return sum(1 for part in _SENTENCE_END.split(text) if part.strip())


def caption_vocabulary(captions: Iterable[str]) -> set:
    return {t for c in captions for t in split_words(c) if not is_punct(t)}


@dataclass
class DatasetStats:
    pairs: int
    captions: int
    avg_words_per_caption: float
    total_sentences: int
    sentences_per_caption: float
    vocabulary_size: int
    splits: Dict[str, int] = field(default_factory=dict)
    change_types: Dict[str, int] = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def compute_stats(records: Sequence[ChangePair]) -> DatasetStats:
    captions = [c for r in records for c in r.captions]
    words = sum(len(c.split()) for c in captions)
    sentences = sum(count_sentences(c) for c in captions)
    n = len(captions)
    splits = Counter(r.split for r in records)
    types = Counter(str(t) for r in records for t in r.change_types)
    return DatasetStats(
        pairs=len(records),
        captions=n,
        avg_words_per_caption=words / n if n else 0.0,
        total_sentences=sentences,
        sentences_per_caption=sentences / n if n else 0.0,
        vocabulary_size=len(caption_vocabulary(captions)),
        splits={s: splits.get(s, 0) for s in SPLITS},
        change_types={str(t): types.get(str(t), 0) for t in ALL_TYPES},
    )


def record_to_json(pair: ChangePair) -> dict:
    return {
        "id": pair.id,
        "image_a": str(pair.image_a),
        "image_b": str(pair.image_b),
        "captions": list(pair.captions),
        "change_types": [str(t) for t in pair.change_types],
        "split": pair.split,
        "source": pair.source,
    }


def _validate_record(obj, lineno: int) -> Tuple[Optional[ChangePair], List[str]]:
    where = f"line {lineno}"
    if not isinstance(obj, dict):
        return None, [f"{where}: record is not a JSON object"]
    errors = [f"{where}: missing field '{k}'" for k in REQUIRED_FIELDS if k not in obj]
    if errors:
        return None, errors
    if not isinstance(obj["id"], str) or not obj["id"]:
        errors.append(f"{where}: 'id' must be a non-empty string")
    for key in ("image_a", "image_b"):
        if not isinstance(obj[key], str) or not obj[key]:
            errors.append(f"{where}: '{key}' must be a non-empty path string")
    caps = obj["captions"]
    if not isinstance(caps, list) or not caps:
        errors.append(f"{where}: 'captions' must be a non-empty list")
    elif any(not isinstance(c, str) or not c.strip() for c in caps):
        errors.append(f"{where}: empty caption")
    types = obj["change_types"]
    parsed = []
    if not isinstance(types, list) or not types:
        errors.append(f"{where}: 'change_types' must be a non-empty list")
    else:
        for t in types:
            try:
                parsed.append(ChangeType(t))
            except ValueError:
                errors.append(f"{where}: unknown change type {t!r}")
        if parsed and all(t in GLOBAL_CHANGES for t in parsed):
            errors.append(f"{where}: only distractor-like change types {types}; "
                          "a semantic change must co-occur")
    if obj["split"] not in SPLITS:
        errors.append(f"{where}: split must be one of {SPLITS}, got {obj['split']!r}")
    if obj["source"] not in SOURCES:
        errors.append(f"{where}: source must be one of {SOURCES}, got {obj['source']!r}")
    if errors:
        return None, errors
    return ChangePair(
        id=obj["id"], image_a=obj["image_a"], image_b=obj["image_b"],
        change_types=canonical_types(parsed), captions=list(caps),
        split=obj["split"], source=obj["source"],
    ), []


@dataclass
class IngestResult:
    stats: DatasetStats
    records: List[ChangePair]
    errors: List[str]


def ingest_manifest(path, check_images: bool = False, strict: bool = True) -> IngestResult:
    """Stream-validate a JSONL manifest and compute corpus statistics.

    With ``strict`` any invalid record raises :class:`ManifestError` listing
    every problem by line number; otherwise invalid records are skipped and
    reported in ``errors``.
    """
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    root = path.parent
    records: List[ChangePair] = []
    errors: List[str] = []
    seen_ids = set()
    image_split: Dict[str, Tuple[str, int]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                errors.append(f"line {lineno}: malformed JSON ({exc.msg})")
                continue
            rec, errs = _validate_record(obj, lineno)
            if rec is not None:
                if rec.id in seen_ids:
                    errs.append(f"line {lineno}: duplicate id {rec.id!r}")
                for img in (rec.image_a, rec.image_b):
                    prev = image_split.get(img)
                    if prev is not None and prev[0] != rec.split:
                        errs.append(f"line {lineno}: image {img!r} already used by split "
                                    f"{prev[0]!r} (line {prev[1]})")
                    image_split.setdefault(img, (rec.split, lineno))
                    if check_images and not (root / img).is_file():
                        errs.append(f"line {lineno}: image file not found: {img}")
            if errs:
                errors.extend(errs)
                continue
            seen_ids.add(rec.id)
            records.append(rec)
    if errors and strict:
        raise ManifestError(errors)
    return IngestResult(compute_stats(records), records, errors)


def write_manifest(records: Iterable[ChangePair], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(record_to_json(r), sort_keys=True) + "\n")


def pair_seeds(seed: int, n: int) -> List[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]


def _generate_job(args):
    seed, types, distractors, n_captions, must, image_size, pair_id = args
    return generate_pair(seed, types, distractors, n_captions, must, image_size, pair_id=pair_id)


def build_corpus(
    out_dir,
    n_pairs: int,
    seed: int = 0,
    types: Iterable = ALL_TYPES,
    distractors: bool = False,
    split_ratio: Sequence[float] = (0.8, 0.1, 0.1),
    n_captions: int = 1,
    image_size: int = 64,
    workers: int = 1,
) -> List[ChangePair]:
    """Generate ``n_pairs`` pairs into ``out_dir`` (manifest.jsonl + images/).

    Within every split the pairs cycle through the requested change types, so
    each split of at least ``len(types)`` pairs covers all of them.
    """
    if n_pairs < 10:
        raise ValueError("n_pairs must be at least 10")
    menu = canonical_types(types)
    out = Path(out_dir)
    img_dir = out / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    seeds = pair_seeds(seed, n_pairs)
    jobs, splits = [], []
    i = 0
    for split, size in zip(SPLITS, split_sizes(n_pairs, split_ratio)):
        for j in range(size):
            must = menu[j % len(menu)]
            jobs.append((seeds[i], menu, distractors, n_captions, must, image_size, f"{split}{i:06d}"))
            splits.append(split)
            i += 1
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            pairs = list(ex.map(_generate_job, jobs, chunksize=32))
    else:
        pairs = [_generate_job(j) for j in jobs]
    for pair, split in zip(pairs, splits):
        pair.split = split
        for side in ("a", "b"):
            rel = f"images/{pair.id}_{side}.png"
            save_png(getattr(pair, f"image_{side}"), out / rel)
            setattr(pair, f"image_{side}", rel)
    write_manifest(pairs, out / MANIFEST)
    return pairs


def save_png(arr: np.ndarray, path) -> None:
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def load_split(data_dir, split: str) -> List[ChangePair]:
    res = ingest_manifest(Path(data_dir) / MANIFEST)
    return [r for r in res.records if r.split == split]
