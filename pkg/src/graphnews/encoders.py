"""Text and image encoders that map both modalities into one comparison space.

The text path embeds tokens, runs an LSTM per sentence to get per-node
features, refines them with mean-aggregating graph layers, pools each graph
to a single vector and projects it. The image path extracts CNN backbone
features and projects them with an identical head, so both sides end as
(B, projection_dim) matrices ready for the similarity loss and classifier.
"""

import os
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import (
    BackboneWeightsMissingError,
    CheckpointMismatchError,
    DimensionMismatchError,
    EmptyGraphError,
    IdOutOfRangeError,
)
from .text_graph import PAD_ID, PAD_TOKEN, BatchedGraph, Vocab

RESNET152_BACKBONE = "resnet152-pretrained"
TINY_CNN_BACKBONE = "tiny-cnn-test"

RESNET152_FEATURE_DIM = 2048


@dataclass
class TextEncoderConfig:
    """Hyperparameters of the token-graph text encoder."""

    vocab_size: int
    embed_dim: int
    embed_frozen: bool = False
    lstm_layers: int = 1
    lstm_hidden_dim: int = 64
    lstm_dropout: float = 0.0
    sage_layers: int = 2
    sage_hidden_dim: int = 64
    sage_l2_normalize: bool = False
    dropout_rate: float = 0.5
    projection_dim: int = 512
    # ReLU is applied between graph layers only; the last layer feeds the
    # pool raw unless this is set.
    sage_final_relu: bool = False

    def __post_init__(self):
        for name in ("vocab_size", "embed_dim", "lstm_layers", "lstm_hidden_dim",
                     "sage_layers", "sage_hidden_dim", "projection_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("lstm_dropout", "dropout_rate"):
            rate = getattr(self, name)
            if not 0.0 <= rate < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {rate}")


@dataclass
class ImageEncoderConfig:
    """Backbone selection and head size for the image encoder."""

    backbone: str = RESNET152_BACKBONE
    feature_dim: int = RESNET152_FEATURE_DIM
    projection_dim: int = 512
    weights_path: str | None = None
    # tiny-cnn-test only: conv channel widths and adaptive pool size.
    tiny_channels: tuple = (8, 16)
    tiny_pool: int = 4

    def __post_init__(self):
        if self.backbone not in (RESNET152_BACKBONE, TINY_CNN_BACKBONE):
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.backbone == RESNET152_BACKBONE and self.feature_dim != RESNET152_FEATURE_DIM:
            raise DimensionMismatchError(
                f"resnet152 produces {RESNET152_FEATURE_DIM}-wide features, "
                f"config says {self.feature_dim}"
            )
        if self.feature_dim < 1 or self.projection_dim < 1:
            raise ValueError("feature_dim and projection_dim must be >= 1")


# Layer sizes used for the published runs.
TWITTER_TEXT = TextEncoderConfig(
    vocab_size=3_000_000,
    embed_dim=300,
    embed_frozen=True,
    lstm_layers=3,
    lstm_hidden_dim=256,
    lstm_dropout=0.3,
    sage_layers=3,
    sage_hidden_dim=512,
    sage_l2_normalize=True,
    dropout_rate=0.5,
    projection_dim=512,
)

WEIBO_TEXT = TextEncoderConfig(
    vocab_size=8_991,
    embed_dim=16,
    embed_frozen=False,
    lstm_layers=2,
    lstm_hidden_dim=32,
    lstm_dropout=0.0,
    sage_layers=3,
    sage_hidden_dim=32,
    sage_l2_normalize=False,
    dropout_rate=0.5,
    projection_dim=512,
)


def graph_tensors(batch: BatchedGraph, device=None):
    """Convert a batched graph to (node_ids, edge_index, batch_vector) tensors."""
    node_ids = torch.tensor(batch.node_token_ids, dtype=torch.long, device=device)
    edge_index = torch.tensor(batch.edges, dtype=torch.long, device=device).t().contiguous()
    batch_vector = torch.tensor(batch.batch_vector, dtype=torch.long, device=device)
    return node_ids, edge_index, batch_vector


def embed_tokens(node_ids, table: nn.Embedding) -> torch.Tensor:
    """Look up one embedding row per node; PAD rows stay all-zero.

    `node_ids` may be a BatchedGraph or an already-built long tensor.
    """
    if isinstance(node_ids, BatchedGraph):
        node_ids = torch.tensor(
            node_ids.node_token_ids, dtype=torch.long, device=table.weight.device
        )
    if node_ids.numel() and int(node_ids.max()) >= table.num_embeddings:
        raise IdOutOfRangeError(
            f"token id {int(node_ids.max())} outside table of {table.num_embeddings}"
        )
    if node_ids.numel() and int(node_ids.min()) < 0:
        raise IdOutOfRangeError("negative token id")
    return table(node_ids)


def lstm_node_features(lstm: nn.LSTM, node_features: torch.Tensor,
                       batch_vector: torch.Tensor) -> torch.Tensor:
    """Run the LSTM over each sentence separately, in token order.

    Nodes of a batched graph are contiguous per sentence, so the feature
    matrix splits cleanly; the returned matrix re-aligns hidden state i
    with graph node i of its sentence.
    """
    num_graphs = int(batch_vector.max()) + 1 if batch_vector.numel() else 0
    sizes = torch.bincount(batch_vector, minlength=num_graphs)
    chunks = torch.split(node_features, sizes.tolist())
    padded = nn.utils.rnn.pad_sequence(chunks, batch_first=True)
    packed = nn.utils.rnn.pack_padded_sequence(
        padded, sizes.cpu(), batch_first=True, enforce_sorted=False
    )
    out, _ = lstm(packed)
    unpacked, lengths = nn.utils.rnn.pad_packed_sequence(out, batch_first=True)
    return torch.cat([unpacked[g, :n] for g, n in enumerate(lengths.tolist())])


class SageLayer(nn.Module):
    """Mean-aggregation graph convolution.

    Each node gets W_self @ h_i + W_neigh @ mean of incoming neighbor
    features (self-loops put the node itself into that mean). With
    `l2_normalize`, nonzero output rows are rescaled to unit length.
    """

    def __init__(self, in_dim: int, out_dim: int, l2_normalize: bool = False):
        super().__init__()
        self.lin_self = nn.Linear(in_dim, out_dim)
        self.lin_neigh = nn.Linear(in_dim, out_dim, bias=False)
        self.l2_normalize = l2_normalize

    def forward(self, x: torch.Tensor, edge_index: torch.Tensor) -> torch.Tensor:
        if x.size(1) != self.lin_self.in_features:
            raise DimensionMismatchError(
                f"node features are {x.size(1)}-wide, layer expects "
                f"{self.lin_self.in_features}"
            )
        src, dst = edge_index
        counts = torch.bincount(dst, minlength=x.size(0)).clamp(min=1)
        summed = torch.zeros_like(x).index_add_(0, dst, x[src])
        mean = summed / counts.unsqueeze(1).to(x.dtype)
        out = self.lin_self(x) + self.lin_neigh(mean)
        if self.l2_normalize:
            # clamp keeps all-zero rows at zero instead of dividing by 0
            out = out / out.norm(dim=1, keepdim=True).clamp(min=1e-12)
        return out


def global_mean_pool(x: torch.Tensor, batch_vector: torch.Tensor,
                     num_graphs: int | None = None) -> torch.Tensor:
    """Average node rows per graph: row g = mean of x over nodes with index g."""
    if num_graphs is None:
        num_graphs = int(batch_vector.max()) + 1 if batch_vector.numel() else 0
    counts = torch.bincount(batch_vector, minlength=num_graphs)
    if (counts == 0).any():
        empty = int((counts == 0).nonzero()[0])
        raise EmptyGraphError(f"graph {empty} has no nodes")
    sums = torch.zeros(num_graphs, x.size(1), dtype=x.dtype, device=x.device)
    sums.index_add_(0, batch_vector, x)
    return sums / counts.unsqueeze(1).to(x.dtype)


class ProjectionHead(nn.Module):
    """Residual two-linear map into the shared comparison space.

    With a = W1 @ x + b1, the output is W2 @ gelu(a) + a + b2, so the first
    linear's activation rides a skip connection past the gelu.
    """

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, out_dim)
        self.fc2 = nn.Linear(out_dim, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.size(-1) != self.fc1.in_features:
            raise DimensionMismatchError(
                f"input width {x.size(-1)} != head input {self.fc1.in_features}"
            )
        a = self.fc1(x)
        return self.fc2(F.gelu(a)) + a


class TextEncoder(nn.Module):
    """embedding -> per-sentence LSTM -> graph layers -> mean pool -> head."""

    def __init__(self, config: TextEncoderConfig,
                 pretrained_embeddings: torch.Tensor | None = None):
        super().__init__()
        self.config = config
        self.embedding = nn.Embedding(config.vocab_size, config.embed_dim,
                                      padding_idx=PAD_ID)
        if pretrained_embeddings is not None:
            if tuple(pretrained_embeddings.shape) != (config.vocab_size, config.embed_dim):
                raise DimensionMismatchError(
                    f"embedding matrix {tuple(pretrained_embeddings.shape)} does not "
                    f"match ({config.vocab_size}, {config.embed_dim})"
                )
            with torch.no_grad():
                self.embedding.weight.copy_(pretrained_embeddings)
                self.embedding.weight[PAD_ID].zero_()
        if config.embed_frozen:
            self.embedding.weight.requires_grad_(False)
        self.lstm = nn.LSTM(
            config.embed_dim,
            config.lstm_hidden_dim,
            num_layers=config.lstm_layers,
            dropout=config.lstm_dropout if config.lstm_layers > 1 else 0.0,
            batch_first=True,
        )
        layers = []
        in_dim = config.lstm_hidden_dim
        for _ in range(config.sage_layers):
            layers.append(SageLayer(in_dim, config.sage_hidden_dim,
                                    l2_normalize=config.sage_l2_normalize))
            in_dim = config.sage_hidden_dim
        self.sage_layers = nn.ModuleList(layers)
        self.dropout = nn.Dropout(config.dropout_rate)
        self.head = ProjectionHead(config.sage_hidden_dim, config.projection_dim)

    def forward(self, batch: BatchedGraph) -> torch.Tensor:
        device = self.embedding.weight.device
        node_ids, edge_index, batch_vector = graph_tensors(batch, device=device)
        h = embed_tokens(node_ids, self.embedding)
        h = lstm_node_features(self.lstm, h, batch_vector)
        last = len(self.sage_layers) - 1
        for i, layer in enumerate(self.sage_layers):
            h = layer(h, edge_index)
            if i < last or self.config.sage_final_relu:
                h = F.relu(h)
        pooled = global_mean_pool(h, batch_vector, batch.graph_count)
        return self.head(self.dropout(pooled))


class TinyCnnBackbone(nn.Module):
    """Two-conv stand-in backbone so the whole pipeline runs without
    pretrained weights; accepts any input resolution >= 8 px."""

    def __init__(self, feature_dim: int, channels=(8, 16), pool: int = 4):
        super().__init__()
        c1, c2 = channels
        self.conv1 = nn.Conv2d(3, c1, kernel_size=3, padding=1)
        self.conv2 = nn.Conv2d(c1, c2, kernel_size=3, padding=1)
        self.downsample = nn.MaxPool2d(2)
        self.avg = nn.AdaptiveAvgPool2d(pool)
        self.fc = nn.Linear(c2 * pool * pool, feature_dim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        h = self.downsample(F.relu(self.conv1(images)))
        h = F.relu(self.conv2(h))
        return self.fc(self.avg(h).flatten(1))


def _resnet152_backbone(weights_path: str | None) -> nn.Module:
    if not weights_path or not os.path.exists(weights_path):
        raise BackboneWeightsMissingError(
            f"resnet152 weights not found at {weights_path!r}; point "
            "weights_path at a saved state dict or use the tiny-cnn-test backbone"
        )
    import torchvision.models

    model = torchvision.models.resnet152(weights=None)
    state = torch.load(weights_path, map_location="cpu", weights_only=True)
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointMismatchError(f"resnet152 weights do not fit: {exc}") from exc
    model.fc = nn.Identity()
    return model


class ImageEncoder(nn.Module):
    """CNN backbone features followed by the shared-space projection head.

    `load_backbone_weights=False` builds the architecture only, for callers
    about to overwrite every array from a checkpoint.
    """

    def __init__(self, config: ImageEncoderConfig, load_backbone_weights: bool = True):
        super().__init__()
        self.config = config
        if config.backbone == TINY_CNN_BACKBONE:
            self.backbone = TinyCnnBackbone(config.feature_dim,
                                            channels=config.tiny_channels,
                                            pool=config.tiny_pool)
        elif load_backbone_weights:
            self.backbone = _resnet152_backbone(config.weights_path)
        else:
            import torchvision.models

            self.backbone = torchvision.models.resnet152(weights=None)
            self.backbone.fc = nn.Identity()
        self.head = ProjectionHead(config.feature_dim, config.projection_dim)

    def features(self, images: torch.Tensor) -> torch.Tensor:
        """Backbone output of shape (B, feature_dim), before projection."""
        return self.backbone(images)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(images))


def load_pretrained_embeddings(vocab: Vocab, path: str, embed_dim: int,
                               seed: int = 0) -> torch.Tensor:
    """Read a word2vec-style text file (token v1 .. vd per line).

    Vocabulary tokens found in the file get their stored vector; missing
    tokens draw from uniform(-0.05, 0.05); the PAD row is zero.
    """
    vectors = {}
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle):
            parts = line.rstrip("\n").split(" ")
            if line_no == 0 and len(parts) == 2 and all(p.isdigit() for p in parts):
                continue  # optional "count dim" header
            if len(parts) < 2:
                continue
            token, values = parts[0], parts[1:]
            if len(values) != embed_dim:
                raise DimensionMismatchError(
                    f"line {line_no + 1}: vector of width {len(values)}, "
                    f"expected {embed_dim}"
                )
            vectors[token] = np.asarray(values, dtype=np.float32)
    rng = np.random.default_rng(seed)
    matrix = rng.uniform(-0.05, 0.05, size=(len(vocab), embed_dim)).astype(np.float32)
    for token_id, token in enumerate(vocab.id_to_token):
        if token in vectors:
            matrix[token_id] = vectors[token]
    matrix[PAD_ID] = 0.0
    return torch.from_numpy(matrix)


CHECKPOINT_FORMAT_VERSION = 1


def save_checkpoint(path, *, kind: str, state_dict, text_config=None,
                    image_config=None, classifier_hidden_dim=None, vocab=None,
                    window_size=None, image_size=None, epoch=None,
                    val_loss=None) -> None:
    """Write one archive: named parameter arrays plus the configs that built them."""
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": kind,
        "state_dict": {k: v.cpu() for k, v in state_dict.items()},
        "text_config": asdict(text_config) if text_config else None,
        "image_config": asdict(image_config) if image_config else None,
        "classifier_hidden_dim": classifier_hidden_dim,
        "vocab_tokens": list(vocab.id_to_token[2:]) if vocab else None,
        "window_size": window_size,
        "image_size": image_size,
        "epoch": epoch,
        "val_loss": val_loss,
    }
    torch.save(payload, path)


def load_checkpoint(path) -> dict:
    """Read a checkpoint archive back, rebuilding config objects and the vocab."""
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointMismatchError(
            f"unsupported checkpoint format {payload.get('format_version')!r}"
        )
    if payload["text_config"] is not None:
        payload["text_config"] = TextEncoderConfig(**payload["text_config"])
    if payload["image_config"] is not None:
        cfg = dict(payload["image_config"])
        cfg["tiny_channels"] = tuple(cfg["tiny_channels"])
        payload["image_config"] = ImageEncoderConfig(**cfg)
    if payload["vocab_tokens"] is not None:
        payload["vocab"] = Vocab.from_tokens(payload["vocab_tokens"])
    else:
        payload["vocab"] = None
    return payload


def load_state_into(model: nn.Module, payload: dict) -> nn.Module:
    """Load checkpoint arrays into a freshly built model; fail closed on mismatch."""
    try:
        model.load_state_dict(payload["state_dict"])
    except RuntimeError as exc:
        raise CheckpointMismatchError(str(exc)) from exc
    return model
