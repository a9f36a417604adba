"""Dataset ingestion: manifest parsing, text cleaning, dedup, split, batching.

A dataset is a CSV manifest with columns
``id, text, image_paths, label, event_id, split`` where image_paths holds
one or more |-separated paths relative to the image root (the manifest's
directory unless overridden). Only the first image of a sample is ever
read. Samples that lose their text to cleaning, duplicate an earlier
(text, label) pair, or point at unreadable images are dropped and logged.
"""

import csv
import logging
import random
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import (
    DecodeError,
    MissingImageRootError,
    ParseError,
    TooFewSamplesError,
)
from .text_graph import DEFAULT_WINDOW_SIZE, Vocab, batch_graphs, sentence_to_graph, tokenize

logger = logging.getLogger(__name__)

MANIFEST_COLUMNS = ("id", "text", "image_paths", "label", "event_id", "split")
SPLIT_TAGS = ("train", "val", "test")
LABELS = ("real", "fake")

IMAGE_SIZE = 224
# Channel statistics the pretrained backbone was trained with.
IMAGE_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGE_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)

URL_PREFIXES = ("http://", "https://", "www.")


@dataclass(frozen=True)
class Sample:
    """One news item: text, ordered image paths, binary label."""

    id: str
    text: str
    image_refs: tuple
    label: str
    event_id: str | None = None
    split: str = "train"

    @property
    def label_index(self) -> int:
        return LABELS.index(self.label)


@dataclass(frozen=True)
class Drop:
    sample_id: str
    reason: str


@dataclass
class DatasetManifest:
    samples: list
    image_root: Path
    drops: list


@dataclass
class Batch:
    """Model-ready aligned batch; images is None for text-only training."""

    graphs: object
    images: torch.Tensor | None
    labels: torch.Tensor
    ids: tuple


def load_manifest(path, image_root=None) -> DatasetManifest:
    """Parse a manifest CSV, resolving image paths and dropping invalid rows.

    Rows with a blank text or an unresolvable first image are dropped (and
    counted); duplicate ids or malformed rows fail the whole parse.
    """
    path = Path(path)
    root = Path(image_root) if image_root is not None else path.parent
    if not root.is_dir():
        raise MissingImageRootError(f"image root {root} is not a directory")
    samples = []
    drops = []
    seen_ids = set()
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        missing = set(MANIFEST_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ParseError(f"manifest is missing columns: {sorted(missing)}")
        for row_no, row in enumerate(reader, start=2):
            sample_id = (row["id"] or "").strip()
            if not sample_id:
                raise ParseError(f"row {row_no}: empty id")
            if sample_id in seen_ids:
                raise ParseError(f"row {row_no}: duplicate id {sample_id!r}")
            seen_ids.add(sample_id)
            label = (row["label"] or "").strip().lower()
            if label not in LABELS:
                raise ParseError(f"row {row_no}: label must be real or fake, got {row['label']!r}")
            split = (row["split"] or "").strip().lower() or "train"
            if split not in SPLIT_TAGS:
                raise ParseError(f"row {row_no}: unknown split tag {row['split']!r}")
            text = (row["text"] or "").strip()
            refs = tuple(
                str(root / ref.strip())
                for ref in (row["image_paths"] or "").split("|")
                if ref.strip()
            )
            if not text:
                drops.append(Drop(sample_id, "missing-text"))
                continue
            if not refs or not Path(refs[0]).is_file():
                drops.append(Drop(sample_id, "missing-image"))
                continue
            samples.append(
                Sample(
                    id=sample_id,
                    text=text,
                    image_refs=refs,
                    label=label,
                    event_id=(row["event_id"] or "").strip() or None,
                    split=split,
                )
            )
    if drops:
        logger.info("dropped %d of %d manifest rows", len(drops), len(drops) + len(samples))
    return DatasetManifest(samples=samples, image_root=root, drops=drops)


def clean_text(raw: str) -> str:
    """Lowercase and strip links, @-mentions and leading retweet markers.

    Idempotent: tokens are filtered first, then any run of leading "rt"
    markers is removed, so a second pass finds nothing new to delete.
    """
    kept = [
        tok
        for tok in raw.split()
        if not tok.startswith("@") and not tok.lower().startswith(URL_PREFIXES)
    ]
    while kept and kept[0].lower() in ("rt", "rt:"):
        kept.pop(0)
    return " ".join(kept).lower()


def clean_samples(samples):
    """Apply clean_text to every sample; drop the ones cleaned down to nothing."""
    kept = []
    drops = []
    for sample in samples:
        cleaned = clean_text(sample.text)
        if cleaned:
            kept.append(replace(sample, text=cleaned))
        else:
            drops.append(Drop(sample.id, "empty-after-cleaning"))
    return kept, drops


def deduplicate(samples):
    """Keep the first occurrence of each (cleaned text, label) pair."""
    seen = set()
    kept = []
    for sample in samples:
        key = (sample.text, sample.label)
        if key not in seen:
            seen.add(key)
            kept.append(sample)
    return kept


def preprocess(samples):
    """Clean then deduplicate, returning the survivors and the drop records."""
    cleaned, drops = clean_samples(samples)
    deduped = deduplicate(cleaned)
    surviving = {s.id for s in deduped}
    drops = drops + [Drop(s.id, "duplicate") for s in cleaned if s.id not in surviving]
    return deduped, drops


def write_drop_log(drops, path) -> None:
    """One `DROP <id> <reason>` line per dropped sample."""
    with open(path, "w", encoding="utf-8") as handle:
        for drop in drops:
            handle.write(f"DROP {drop.sample_id} {drop.reason}\n")


def split(samples, val_fraction: float, seed: int):
    """Deterministic seeded shuffle, then partition into (train, val).

    Sizes land within one sample of the exact fractions; both sides keep
    manifest order internally.
    """
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    n = len(samples)
    if n < 2:
        raise TooFewSamplesError(f"need at least 2 samples to split, got {n}")
    indices = list(range(n))
    random.Random(seed).shuffle(indices)
    n_val = min(n - 1, max(1, round(n * val_fraction)))
    val_idx = sorted(indices[:n_val])
    train_idx = sorted(indices[n_val:])
    return [samples[i] for i in train_idx], [samples[i] for i in val_idx]


@lru_cache(maxsize=128)
def _decode_standardized(path: str, size: int) -> np.ndarray:
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB").resize((size, size), Image.BILINEAR)
    except (OSError, ValueError) as exc:
        raise DecodeError(f"cannot decode image {path}: {exc}") from exc
    arr = np.asarray(rgb, dtype=np.float32) / 255.0
    arr = (arr - IMAGE_MEAN) / IMAGE_STD
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_image(sample: Sample, size: int = IMAGE_SIZE) -> np.ndarray:
    """Decode the sample's first image to a standardized (3, size, size) array.

    Grayscale inputs are replicated across channels by the RGB conversion.
    Decoded arrays are cached, so repeated epochs do not re-read files.
    """
    return _decode_standardized(sample.image_refs[0], size).copy()


def make_batches(samples, batch_size: int, vocab: Vocab = None,
                 window_size: int = DEFAULT_WINDOW_SIZE, shuffle: bool = False,
                 seed: int = 0, image_size: int = IMAGE_SIZE,
                 with_graphs: bool = True, with_images: bool = True):
    """Yield aligned Batch objects; the final partial batch is kept.

    Samples whose image fails to decode are skipped with a logged drop so
    graphs, images and labels always stay aligned. Image-only or text-only
    consumers turn the other modality off instead of paying for it.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if with_graphs and vocab is None:
        raise ValueError("a vocab is required to build graphs")
    order = list(range(len(samples)))
    if shuffle:
        random.Random(seed).shuffle(order)

    pending = []

    def assemble():
        graphs = None
        if with_graphs:
            graphs = batch_graphs(
                [sentence_to_graph(tokenize(s.text, vocab), window_size) for s, _ in pending]
            )
        images = None
        if with_images:
            images = torch.from_numpy(np.stack([img for _, img in pending]))
        labels = torch.tensor([s.label_index for s, _ in pending], dtype=torch.long)
        return Batch(graphs=graphs, images=images,
                     labels=labels, ids=tuple(s.id for s, _ in pending))

    for idx in order:
        sample = samples[idx]
        image = None
        if with_images:
            try:
                image = load_image(sample, size=image_size)
            except DecodeError:
                logger.warning("DROP %s undecodable-image", sample.id)
                continue
        pending.append((sample, image))
        if len(pending) == batch_size:
            yield assemble()
            pending = []
    if pending:
        yield assemble()
