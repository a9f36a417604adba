"""Evaluation metrics, checkpoint scoring, and learning-curve plots.

Metrics treat fake as the positive class. Micro-F1 pools true/false
positives over both classes; for single-label binary data that makes it
equal to accuracy, and the report keeps both columns anyway.
"""

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import torch

from .data_pipeline import IMAGE_SIZE, clean_samples, load_manifest, make_batches
from .encoders import load_checkpoint
from .errors import EmptyHistoryError, InvalidLabelError, LengthMismatchError
from .fusion import FAKE_INDEX, LABEL_NAMES
from .text_graph import DEFAULT_WINDOW_SIZE
from .training import COMBINED_KIND, IMAGE_PRETRAIN_KIND, TEXT_PRETRAIN_KIND, model_from_checkpoint


@dataclass(frozen=True)
class ConfusionCounts:
    """Binary confusion counts with fake as the positive class."""

    tp_fake: int
    fp_fake: int
    fn_fake: int
    tn_fake: int

    @property
    def total(self) -> int:
        return self.tp_fake + self.fp_fake + self.fn_fake + self.tn_fake

    @classmethod
    def from_pairs(cls, predictions, labels) -> "ConfusionCounts":
        tp = fp = fn = tn = 0
        for pred, true in zip(predictions, labels):
            if pred == "fake" and true == "fake":
                tp += 1
            elif pred == "fake":
                fp += 1
            elif true == "fake":
                fn += 1
            else:
                tn += 1
        return cls(tp_fake=tp, fp_fake=fp, fn_fake=fn, tn_fake=tn)


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float


@dataclass
class MetricsReport:
    accuracy: float
    f1_micro: float
    per_class: dict
    warnings: tuple = ()

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "f1_micro": self.f1_micro,
            "per_class": {
                name: {"precision": m.precision, "recall": m.recall, "f1": m.f1}
                for name, m in self.per_class.items()
            },
            "warnings": list(self.warnings),
        }


@dataclass(frozen=True)
class PredictionRow:
    id: str
    true: str
    predicted: str
    p_fake: float


def _safe_ratio(numerator, denominator, cell, warnings):
    if denominator == 0:
        warnings.append(f"zero denominator for {cell}; reporting 0")
        return 0.0
    return numerator / denominator


def compute_metrics(predictions, labels) -> MetricsReport:
    """Accuracy, pooled micro-F1 and per-class precision/recall/F1.

    Zero-denominator cells report 0 and add a warning instead of NaN.
    """
    predictions = list(predictions)
    labels = list(labels)
    if len(predictions) != len(labels):
        raise LengthMismatchError(
            f"{len(predictions)} predictions vs {len(labels)} labels"
        )
    if not labels:
        raise LengthMismatchError("cannot score zero samples")
    bad = {v for v in predictions + labels if v not in LABEL_NAMES}
    if bad:
        raise InvalidLabelError(f"values must be 'real' or 'fake', got {sorted(bad)}")
    counts = ConfusionCounts.from_pairs(predictions, labels)
    warnings = []
    per_class = {}
    # (tp, fp, fn) per class; the real-class cells mirror the fake ones.
    class_counts = {
        "fake": (counts.tp_fake, counts.fp_fake, counts.fn_fake),
        "real": (counts.tn_fake, counts.fn_fake, counts.fp_fake),
    }
    pooled_tp = pooled_fp = pooled_fn = 0
    for name, (tp, fp, fn) in class_counts.items():
        precision = _safe_ratio(tp, tp + fp, f"{name} precision", warnings)
        recall = _safe_ratio(tp, tp + fn, f"{name} recall", warnings)
        f1 = _safe_ratio(2 * precision * recall, precision + recall, f"{name} f1", warnings)
        per_class[name] = ClassMetrics(precision=precision, recall=recall, f1=f1)
        pooled_tp += tp
        pooled_fp += fp
        pooled_fn += fn
    micro_p = _safe_ratio(pooled_tp, pooled_tp + pooled_fp, "micro precision", warnings)
    micro_r = _safe_ratio(pooled_tp, pooled_tp + pooled_fn, "micro recall", warnings)
    f1_micro = _safe_ratio(2 * micro_p * micro_r, micro_p + micro_r, "micro f1", warnings)
    accuracy = (counts.tp_fake + counts.tn_fake) / counts.total
    return MetricsReport(accuracy=accuracy, f1_micro=f1_micro,
                         per_class=per_class, warnings=tuple(warnings))


def evaluate(checkpoint_path, manifest_path, split: str = "test",
             batch_size: int = 32):
    """Score a checkpoint on one manifest split.

    Returns (MetricsReport, prediction rows); rows carry the fake-class
    probability so reports can be recomputed from the dump. Runs in eval
    mode, so repeated calls give identical output.
    """
    payload = load_checkpoint(checkpoint_path)
    model = model_from_checkpoint(payload)
    kind = payload["kind"]
    manifest = load_manifest(manifest_path)
    subset = [s for s in manifest.samples if s.split == split]
    if not subset:
        raise ValueError(f"split {split!r} has no samples in {manifest_path}")
    samples, _ = clean_samples(subset)
    rows = []
    with torch.no_grad():
        batches = make_batches(
            samples,
            batch_size,
            payload.get("vocab"),
            window_size=payload.get("window_size") or DEFAULT_WINDOW_SIZE,
            image_size=payload.get("image_size") or IMAGE_SIZE,
            with_graphs=kind != IMAGE_PRETRAIN_KIND,
            with_images=kind != TEXT_PRETRAIN_KIND,
        )
        for batch in batches:
            if kind == COMBINED_KIND:
                _, _, probs = model(batch.graphs, batch.images)
            elif kind == TEXT_PRETRAIN_KIND:
                probs = model(batch.graphs)
            else:
                probs = model(batch.images)
            predicted = probs.argmax(dim=1)
            for i, sample_id in enumerate(batch.ids):
                rows.append(PredictionRow(
                    id=sample_id,
                    true=LABEL_NAMES[int(batch.labels[i])],
                    predicted=LABEL_NAMES[int(predicted[i])],
                    p_fake=float(probs[i, FAKE_INDEX]),
                ))
    report = compute_metrics([r.predicted for r in rows], [r.true for r in rows])
    return report, rows


def write_predictions(rows, path) -> None:
    """Dump one `id, true, predicted, p_fake` line per sample."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["id", "true", "predicted", "p_fake"])
        for row in rows:
            writer.writerow([row.id, row.true, row.predicted, f"{row.p_fake:.6f}"])


def render_report(report: MetricsReport) -> str:
    """Plain-text metrics table."""
    lines = [
        f"accuracy  {report.accuracy:.4f}",
        f"f1_micro  {report.f1_micro:.4f}",
        "",
        f"{'class':<8}{'precision':>10}{'recall':>10}{'f1':>10}",
    ]
    for name in ("fake", "real"):
        m = report.per_class[name]
        lines.append(f"{name:<8}{m.precision:>10.4f}{m.recall:>10.4f}{m.f1:>10.4f}")
    for warning in report.warnings:
        lines.append(f"warning: {warning}")
    return "\n".join(lines)


def plot_curves(history, out_dir, stem: str = "loss-curves"):
    """Render train/val loss curves as a PNG plus the raw series as CSV.

    Returns (png_path, csv_path).
    """
    history = list(history)
    if not history:
        raise EmptyHistoryError("no epochs to plot")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    epochs = [r["epoch"] for r in history]
    train = [r["train_total"] for r in history]
    val = [r["val_total"] for r in history]

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(epochs, train, marker="o", label="train loss")
    ax.plot(epochs, val, marker="s", label="validation loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("total loss")
    ax.legend()
    fig.tight_layout()
    png_path = out_dir / f"{stem}.png"
    fig.savefig(png_path, dpi=120)
    plt.close(fig)

    csv_path = out_dir / f"{stem}.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["epoch", "train_total", "val_total"])
        for e, t, v in zip(epochs, train, val):
            writer.writerow([e, repr(t), repr(v)])
    return png_path, csv_path


def load_history(path):
    """Read a JSONL training history back into a list of epoch records."""
    records = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records
