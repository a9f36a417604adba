"""Training orchestration: pretraining, combined training, schedules, clipping.

Each run owns its parameters on a single thread; validation passes run on
the live model in eval mode. Optimizer groups are split per component
(text encoder, text head, image encoder, image head, classifier) so the
combined stage can give every component its own learning rate, and within
each component biases, 1-d parameters and the embedding table are exempt
from weight decay.
"""

import dataclasses
import json
import logging
import math
import random
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data_pipeline import IMAGE_SIZE, make_batches
from .encoders import (
    ImageEncoder,
    ImageEncoderConfig,
    TextEncoder,
    TextEncoderConfig,
    TWITTER_TEXT,
    WEIBO_TEXT,
    load_checkpoint,
    load_state_into,
    save_checkpoint,
)
from .errors import CheckpointMismatchError, NonFiniteLossError
from .fusion import LossBundle, MultiModalClassifier, classification_loss, compute_losses
from .text_graph import DEFAULT_WINDOW_SIZE

logger = logging.getLogger(__name__)

PARAM_GROUPS = ("text_encoder", "text_head", "image_encoder", "image_head", "classifier")

TEXT_PRETRAIN_KIND = "text-pretrain"
IMAGE_PRETRAIN_KIND = "image-pretrain"
COMBINED_KIND = "combined"


@dataclass
class TrainConfig:
    """One training run's hyperparameters.

    `lr` drives every group unless `group_lrs` maps component names to
    rates; `group_weight_decay` likewise overrides `weight_decay` per
    component.
    """

    epochs: int
    batch_size: int
    lr: float = 1e-3
    weight_decay: float = 0.0
    group_lrs: dict | None = None
    group_weight_decay: dict | None = None
    scheduler_factor: float = 0.9
    scheduler_patience: int = 2
    clip_norm: float = 1.0
    mixed_precision: bool = False
    seed: int = 0
    window_size: int = DEFAULT_WINDOW_SIZE
    image_size: int = IMAGE_SIZE
    deterministic: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        rates = [self.lr] + list((self.group_lrs or {}).values())
        if any(r <= 0 for r in rates):
            raise ValueError("learning rates must be > 0")
        if not 0.0 < self.scheduler_factor < 1.0:
            raise ValueError("scheduler_factor must be in (0, 1)")
        if self.scheduler_patience < 0:
            raise ValueError("scheduler_patience must be >= 0")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be > 0")


@dataclass
class PresetBundle:
    """A training config paired with the encoder configs it was tuned for."""

    train: TrainConfig
    text: TextEncoderConfig | None = None
    image: ImageEncoderConfig | None = None


PRESETS = {
    "twitter-text-pretrain": PresetBundle(
        train=TrainConfig(epochs=30, batch_size=256, lr=3e-3,
                          scheduler_factor=0.8, scheduler_patience=3),
        text=TWITTER_TEXT,
    ),
    "twitter-image-pretrain": PresetBundle(
        train=TrainConfig(epochs=10, batch_size=128, lr=1e-4, weight_decay=0.07,
                          scheduler_factor=0.7, scheduler_patience=5),
        image=ImageEncoderConfig(),
    ),
    "twitter-combined": PresetBundle(
        train=TrainConfig(
            epochs=30,
            batch_size=64,
            weight_decay=0.07,
            group_lrs={
                "text_encoder": 1e-5,
                "text_head": 5e-3,
                "image_encoder": 1e-7,
                "image_head": 5e-3,
                "classifier": 5e-3,
            },
            scheduler_factor=0.9,
            scheduler_patience=2,
            mixed_precision=True,
        ),
        text=TWITTER_TEXT,
        image=ImageEncoderConfig(),
    ),
    "weibo-text-pretrain": PresetBundle(
        train=TrainConfig(epochs=50, batch_size=32, lr=5e-3,
                          scheduler_factor=0.8, scheduler_patience=3),
        text=WEIBO_TEXT,
    ),
    "weibo-image-pretrain": PresetBundle(
        train=TrainConfig(epochs=30, batch_size=64, lr=1e-4,
                          scheduler_factor=0.8, scheduler_patience=5),
        image=ImageEncoderConfig(),
    ),
    "weibo-combined": PresetBundle(
        train=TrainConfig(
            epochs=20,
            batch_size=30,
            group_lrs={
                "text_encoder": 5e-3,
                "text_head": 5e-3,
                "image_encoder": 1e-7,
                "image_head": 5e-3,
                "classifier": 5e-3,
            },
            group_weight_decay={
                "text_encoder": 0.0,
                "text_head": 0.0,
                "image_encoder": 0.07,
                "image_head": 0.07,
                "classifier": 0.0,
            },
            scheduler_factor=0.9,
            scheduler_patience=2,
            mixed_precision=True,
        ),
        text=WEIBO_TEXT,
        image=ImageEncoderConfig(),
    ),
}


def seed_all(seed: int, deterministic: bool = False) -> None:
    """Seed every RNG a run touches; optionally force deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)


class TextClassifierModel(nn.Module):
    """Text encoder plus one linear layer, for text-only pretraining."""

    def __init__(self, encoder: TextEncoder):
        super().__init__()
        self.encoder = encoder
        self.classifier = nn.Linear(encoder.config.projection_dim, 2)

    def forward(self, graphs) -> torch.Tensor:
        return torch.softmax(self.classifier(self.encoder(graphs)), dim=1)


class ImageClassifierModel(nn.Module):
    """Image encoder plus one linear layer, for image-only pretraining."""

    def __init__(self, encoder: ImageEncoder):
        super().__init__()
        self.encoder = encoder
        self.classifier = nn.Linear(encoder.config.projection_dim, 2)

    def forward(self, images) -> torch.Tensor:
        return torch.softmax(self.classifier(self.encoder(images)), dim=1)


class PlateauScheduler:
    """Multiply every group's lr by `factor` when the monitored value stalls.

    An improvement means dropping below the best seen value by more than
    `eps`; after more than `patience` consecutive non-improvements all
    rates are recomputed as initial * factor**firings (never chained, so
    the ledger invariant holds exactly) and the counter resets.
    """

    def __init__(self, optimizer, factor: float, patience: int, eps: float = 1e-8):
        if not 0.0 < factor < 1.0:
            raise ValueError("factor must be in (0, 1)")
        if patience < 0:
            raise ValueError("patience must be >= 0")
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.eps = eps
        self.initial_lrs = [group["lr"] for group in optimizer.param_groups]
        self.best = math.inf
        self.num_bad = 0
        self.firings = 0

    def step(self, value: float) -> bool:
        """Feed one monitored value; returns True when rates were reduced."""
        if value < self.best - self.eps:
            self.best = value
            self.num_bad = 0
            return False
        self.num_bad += 1
        if self.num_bad > self.patience:
            self.firings += 1
            self.num_bad = 0
            for group, initial in zip(self.optimizer.param_groups, self.initial_lrs):
                group["lr"] = initial * self.factor**self.firings
            return True
        return False


def clip_gradients(grads, clip_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most clip_norm.

    Returns the pre-clip norm. Below the threshold nothing changes.
    """
    if clip_norm <= 0:
        raise ValueError("clip_norm must be > 0")
    grads = [g for g in grads if g is not None]
    if not grads:
        return 0.0
    total = math.sqrt(sum(float((g.detach().to(torch.float64) ** 2).sum()) for g in grads))
    if total > clip_norm:
        scale = clip_norm / total
        for g in grads:
            g.detach().mul_(scale)
    return total


def global_grad_norm(model: nn.Module) -> float:
    """Current global L2 norm over all parameter gradients."""
    return math.sqrt(
        sum(
            float((p.grad.detach().to(torch.float64) ** 2).sum())
            for p in model.parameters()
            if p.grad is not None
        )
    )


def ensure_finite_loss(bundle: LossBundle, *, epoch: int, step: int, out_dir=None) -> None:
    """Abort training on a NaN/Inf loss, dumping the components first."""
    values = {
        "similarity": float(bundle.similarity.detach()),
        "classification": float(bundle.classification.detach()),
        "total": float(bundle.total.detach()),
    }
    if all(math.isfinite(v) for v in values.values()):
        return
    if out_dir is not None:
        dump = Path(out_dir) / "nonfinite_loss.json"
        dump.write_text(json.dumps({"epoch": epoch, "step": step, **values}, indent=2))
    raise NonFiniteLossError(f"non-finite loss at epoch {epoch} step {step}: {values}")


def _decay_exempt(name: str, param: torch.Tensor) -> bool:
    return param.ndim <= 1 or name.endswith("embedding.weight")


def _combined_component(name: str) -> str:
    if name.startswith("text_encoder.head."):
        return "text_head"
    if name.startswith("text_encoder."):
        return "text_encoder"
    if name.startswith("image_encoder.head."):
        return "image_head"
    if name.startswith("image_encoder."):
        return "image_encoder"
    return "classifier"


def build_optimizer(model: nn.Module, config: TrainConfig, component_of=None):
    """AdamW with per-component learning rates and decay-exempt subgroups."""
    if component_of is None:
        component_of = lambda name: "model"
    buckets = {}
    for name, param in model.named_parameters():
        if not param.requires_grad:
            continue
        component = component_of(name)
        decayed = not _decay_exempt(name, param)
        buckets.setdefault((component, decayed), []).append(param)
    groups = []
    for (component, decayed), params in sorted(buckets.items()):
        lr = (config.group_lrs or {}).get(component, config.lr)
        decay = (config.group_weight_decay or {}).get(component, config.weight_decay)
        groups.append({
            "params": params,
            "lr": lr,
            "weight_decay": decay if decayed else 0.0,
            "component": component,
        })
    return torch.optim.AdamW(groups)


def current_lrs(optimizer) -> dict:
    """One learning rate per component (decay and no-decay subgroups share it)."""
    rates = {}
    for group in optimizer.param_groups:
        rates.setdefault(group["component"], group["lr"])
    return rates


@dataclass
class TrainResult:
    checkpoint_path: Path | None
    history: list
    model: nn.Module
    best_val_loss: float


def _validate(model, forward_losses, samples, vocab, config, with_graphs, with_images):
    model.eval()
    total = 0.0
    correct = 0
    count = 0
    with torch.no_grad():
        for batch in make_batches(samples, config.batch_size, vocab,
                                  window_size=config.window_size, shuffle=False,
                                  image_size=config.image_size,
                                  with_graphs=with_graphs, with_images=with_images):
            bundle, probs = forward_losses(model, batch)
            n = batch.labels.numel()
            total += float(bundle.total) * n
            correct += int((probs.argmax(dim=1) == batch.labels).sum())
            count += n
    return total / count, correct / count


def _fit(model, forward_losses, train_samples, val_samples, vocab, config,
         out_dir, *, kind, ckpt_meta, with_graphs, with_images) -> TrainResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / f"{kind}.pt"
    history_path = out_dir / f"{kind}-history.jsonl"
    optimizer = build_optimizer(
        model, config,
        component_of=_combined_component if kind == COMBINED_KIND else None,
    )
    scheduler = PlateauScheduler(optimizer, config.scheduler_factor,
                                 config.scheduler_patience)
    device_type = "cuda" if next(model.parameters()).is_cuda else "cpu"
    history = []
    best = math.inf
    with open(history_path, "w", encoding="utf-8") as log:
        for epoch in range(config.epochs):
            model.train()
            sums = {"similarity": 0.0, "classification": 0.0, "total": 0.0}
            seen = 0
            max_grad_after_clip = 0.0
            batches = make_batches(train_samples, config.batch_size, vocab,
                                   window_size=config.window_size, shuffle=True,
                                   seed=config.seed + epoch,
                                   image_size=config.image_size,
                                   with_graphs=with_graphs, with_images=with_images)
            for step, batch in enumerate(batches):
                with torch.autocast(device_type=device_type,
                                    enabled=config.mixed_precision):
                    bundle, _ = forward_losses(model, batch)
                ensure_finite_loss(bundle, epoch=epoch, step=step, out_dir=out_dir)
                optimizer.zero_grad()
                bundle.total.backward()
                clip_gradients((p.grad for p in model.parameters()), config.clip_norm)
                max_grad_after_clip = max(max_grad_after_clip, global_grad_norm(model))
                optimizer.step()
                n = batch.labels.numel()
                for key in sums:
                    sums[key] += float(getattr(bundle, key).detach()) * n
                seen += n
            val_total, val_accuracy = _validate(model, forward_losses, val_samples,
                                                vocab, config, with_graphs, with_images)
            reduced = scheduler.step(val_total)
            record = {
                "epoch": epoch,
                "train_similarity": sums["similarity"] / seen,
                "train_classification": sums["classification"] / seen,
                "train_total": sums["total"] / seen,
                "val_total": val_total,
                "val_accuracy": val_accuracy,
                "lrs": current_lrs(optimizer),
                "max_grad_norm_after_clip": max_grad_after_clip,
                "lr_reduced": reduced,
            }
            history.append(record)
            log.write(json.dumps(record) + "\n")
            log.flush()
            logger.info("epoch %d: train %.4f val %.4f acc %.3f",
                        epoch, record["train_total"], val_total, val_accuracy)
            if val_total < best:
                best = val_total
                save_checkpoint(ckpt_path, kind=kind, state_dict=model.state_dict(),
                                epoch=epoch, val_loss=val_total, **ckpt_meta)
    return TrainResult(checkpoint_path=ckpt_path, history=history, model=model,
                       best_val_loss=best)


def _pretrain_losses(classify_batch):
    def forward_losses(model, batch):
        probs = classify_batch(model, batch)
        l_c = classification_loss(probs, batch.labels)
        zero = torch.zeros((), dtype=l_c.dtype, device=l_c.device)
        return LossBundle(similarity=zero, classification=l_c, total=l_c + zero), probs

    return forward_losses


def pretrain_text(train_samples, val_samples, vocab, text_config: TextEncoderConfig,
                  config: TrainConfig, out_dir, pretrained_embeddings=None) -> TrainResult:
    """Train the text encoder with a linear head on labels alone."""
    seed_all(config.seed, config.deterministic)
    if text_config.vocab_size != len(vocab):
        logger.info("overriding configured vocab_size %d with corpus vocabulary %d",
                    text_config.vocab_size, len(vocab))
        text_config = dataclasses.replace(text_config, vocab_size=len(vocab))
    model = TextClassifierModel(TextEncoder(text_config, pretrained_embeddings))
    forward_losses = _pretrain_losses(lambda m, b: m(b.graphs))
    return _fit(model, forward_losses, train_samples, val_samples, vocab, config,
                out_dir, kind=TEXT_PRETRAIN_KIND,
                ckpt_meta={"text_config": text_config, "vocab": vocab,
                           "window_size": config.window_size},
                with_graphs=True, with_images=False)


def pretrain_image(train_samples, val_samples, image_config: ImageEncoderConfig,
                   config: TrainConfig, out_dir) -> TrainResult:
    """Train the image encoder with a linear head on labels alone."""
    seed_all(config.seed, config.deterministic)
    model = ImageClassifierModel(ImageEncoder(image_config))
    forward_losses = _pretrain_losses(lambda m, b: m(b.images))
    return _fit(model, forward_losses, train_samples, val_samples, None, config,
                out_dir, kind=IMAGE_PRETRAIN_KIND,
                ckpt_meta={"image_config": image_config,
                           "image_size": config.image_size},
                with_graphs=False, with_images=True)


def train_combined(train_samples, val_samples, vocab,
                   text_config: TextEncoderConfig, image_config: ImageEncoderConfig,
                   config: TrainConfig, out_dir, text_ckpt=None, image_ckpt=None,
                   classifier_hidden_dim: int = 512,
                   pretrained_embeddings=None) -> TrainResult:
    """Train the full model on the summed classification + similarity loss.

    Warm starts take the corresponding encoder (and for text, the vocab)
    from a pretraining checkpoint and override the passed-in config.
    """
    seed_all(config.seed, config.deterministic)
    if text_ckpt is not None:
        payload = load_checkpoint(text_ckpt)
        if payload["kind"] != TEXT_PRETRAIN_KIND:
            raise CheckpointMismatchError(
                f"expected a {TEXT_PRETRAIN_KIND} checkpoint, got {payload['kind']}"
            )
        text_config = payload["text_config"]
        vocab = payload["vocab"]
        warm = TextClassifierModel(TextEncoder(text_config))
        load_state_into(warm, payload)
        text_encoder = warm.encoder
    else:
        if text_config.vocab_size != len(vocab):
            text_config = dataclasses.replace(text_config, vocab_size=len(vocab))
        text_encoder = TextEncoder(text_config, pretrained_embeddings)
    if image_ckpt is not None:
        payload = load_checkpoint(image_ckpt)
        if payload["kind"] != IMAGE_PRETRAIN_KIND:
            raise CheckpointMismatchError(
                f"expected an {IMAGE_PRETRAIN_KIND} checkpoint, got {payload['kind']}"
            )
        image_config = payload["image_config"]
        warm = ImageClassifierModel(ImageEncoder(image_config))
        load_state_into(warm, payload)
        image_encoder = warm.encoder
    else:
        image_encoder = ImageEncoder(image_config)
    model = MultiModalClassifier(text_encoder, image_encoder, classifier_hidden_dim)

    def forward_losses(m, batch):
        z_text, z_img, probs = m(batch.graphs, batch.images)
        return compute_losses(z_text, z_img, probs, batch.labels), probs

    return _fit(model, forward_losses, train_samples, val_samples, vocab, config,
                out_dir, kind=COMBINED_KIND,
                ckpt_meta={"text_config": text_config, "image_config": image_config,
                           "classifier_hidden_dim": classifier_hidden_dim,
                           "vocab": vocab, "window_size": config.window_size,
                           "image_size": config.image_size},
                with_graphs=True, with_images=True)


def model_from_checkpoint(payload: dict) -> nn.Module:
    """Rebuild the model a checkpoint describes and load its arrays."""
    kind = payload["kind"]
    if kind == TEXT_PRETRAIN_KIND:
        model = TextClassifierModel(TextEncoder(payload["text_config"]))
    elif kind == IMAGE_PRETRAIN_KIND:
        model = ImageClassifierModel(
            ImageEncoder(payload["image_config"], load_backbone_weights=False)
        )
    elif kind == COMBINED_KIND:
        model = MultiModalClassifier(
            TextEncoder(payload["text_config"]),
            ImageEncoder(payload["image_config"], load_backbone_weights=False),
            payload["classifier_hidden_dim"],
        )
    else:
        raise CheckpointMismatchError(f"unknown checkpoint kind {kind!r}")
    load_state_into(model, payload)
    model.eval()
    return model
