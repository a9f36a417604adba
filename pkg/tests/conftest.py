"""Shared fixtures: synthetic separable datasets small enough for CPU runs."""

import csv
import random

import numpy as np
import pytest
from PIL import Image

from graphnews.encoders import TINY_CNN_BACKBONE, ImageEncoderConfig, TextEncoderConfig
from graphnews.training import TrainConfig

FAKE_WORDS = ["hoax", "rumor", "clickbait", "scam", "viral", "bogus"]
REAL_WORDS = ["report", "official", "confirmed", "statement", "update", "verified"]


def tiny_text_config(**overrides) -> TextEncoderConfig:
    base = dict(vocab_size=20, embed_dim=6, lstm_layers=1, lstm_hidden_dim=8,
                sage_layers=2, sage_hidden_dim=10, dropout_rate=0.0,
                projection_dim=7)
    base.update(overrides)
    return TextEncoderConfig(**base)


def tiny_image_config(**overrides) -> ImageEncoderConfig:
    base = dict(backbone=TINY_CNN_BACKBONE, feature_dim=12, projection_dim=7,
                tiny_channels=(4, 6), tiny_pool=2)
    base.update(overrides)
    return ImageEncoderConfig(**base)


def tiny_train_config(**overrides) -> TrainConfig:
    base = dict(epochs=2, batch_size=8, lr=5e-3, image_size=16, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


def synthetic_text(label: str, rng: random.Random) -> str:
    pool = FAKE_WORDS if label == "fake" else REAL_WORDS
    return " ".join(rng.choice(pool) for _ in range(rng.randint(4, 7)))


def synthetic_image(path, label: str, rng: random.Random, size: int = 32) -> None:
    """Color-separable patterns: fake skews red, real skews blue."""
    noise = np.asarray([rng.randint(0, 60) for _ in range(size * size * 3)],
                       dtype=np.uint8).reshape(size, size, 3)
    base = np.zeros((size, size, 3), dtype=np.uint8)
    channel = 0 if label == "fake" else 2
    base[:, :, channel] = 180
    Image.fromarray(np.clip(base + noise, 0, 255).astype(np.uint8)).save(path)


def write_manifest(directory, rows) -> str:
    path = directory / "manifest.csv"
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["id", "text", "image_paths", "label", "event_id", "split"])
        writer.writerows(rows)
    return str(path)


def build_synthetic_dataset(directory, n: int, seed: int = 0, split: str = "train",
                            image_size: int = 32):
    """n separable samples (half fake, half real) with unique texts."""
    rng = random.Random(seed)
    (directory / "images").mkdir(exist_ok=True)
    rows = []
    seen_texts = set()
    for i in range(n):
        label = "fake" if i % 2 == 0 else "real"
        text = synthetic_text(label, rng)
        while text in seen_texts:
            text = synthetic_text(label, rng)
        seen_texts.add(text)
        image_name = f"images/{split}_{i}.png"
        synthetic_image(directory / image_name, label, rng, size=image_size)
        rows.append([f"{split}-{i}", text, image_name, label, "", split])
    return rows


@pytest.fixture
def synthetic_manifest(tmp_path):
    """32 train + 12 test separable samples; returns the manifest path."""
    rows = build_synthetic_dataset(tmp_path, 32, seed=11, split="train")
    rows += build_synthetic_dataset(tmp_path, 12, seed=23, split="test")
    return write_manifest(tmp_path, rows)


@pytest.hookimpl(tryfirst=True, hookwrapper=True)
def pytest_runtest_makereport(item, call):
    # expose per-phase outcomes so the acceptance suite can print a
    # pass/fail line per criterion
    outcome = yield
    report = outcome.get_result()
    setattr(item, "rep_" + report.when, report)
