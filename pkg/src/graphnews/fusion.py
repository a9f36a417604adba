"""Text-image alignment loss and the fused binary classifier.

The alignment loss pushes the batch similarity matrix P = z_text @ z_img.T
toward a soft target matrix E derived from within-modality similarities.
P is unbounded, so entries pass through a logistic map before the binary
cross-entropy; the target matrix rows are softmax-normalized.

Label convention throughout: class index 1 = fake, 0 = real.
"""

from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

from .errors import DimensionMismatchError, InvalidLabelError

PROB_EPS = 1e-7

FAKE_INDEX = 1
REAL_INDEX = 0
LABEL_NAMES = ("real", "fake")


@dataclass
class LossBundle:
    """The three training losses; total is always similarity + classification."""

    similarity: torch.Tensor
    classification: torch.Tensor
    total: torch.Tensor


def _check_pair(z_text: torch.Tensor, z_img: torch.Tensor) -> None:
    if z_text.size(1) != z_img.size(1):
        raise DimensionMismatchError(
            f"embedding widths differ: text {z_text.size(1)}, image {z_img.size(1)}"
        )
    if z_text.size(0) != z_img.size(0):
        raise DimensionMismatchError(
            f"batch sizes differ: text {z_text.size(0)}, image {z_img.size(0)}"
        )


def similarity_logits(z_text: torch.Tensor, z_img: torch.Tensor) -> torch.Tensor:
    """Prediction matrix P: P[i, j] is the inner product of text i and image j."""
    _check_pair(z_text, z_img)
    return z_text @ z_img.t()


def expected_matrix(z_text: torch.Tensor, z_img: torch.Tensor) -> torch.Tensor:
    """Soft target matrix E: row-softmax of the averaged Gram matrices."""
    _check_pair(z_text, z_img)
    gram = (z_img @ z_img.t() + z_text @ z_text.t()) / 2
    return torch.softmax(gram, dim=1)


def similarity_loss(p: torch.Tensor, e: torch.Tensor):
    """Soft-target BCE between the prediction and expected matrices.

    Returns (l_text, l_img, l_s). The text side scores text-anchored
    predictions Q = logistic(P) against E; the image side scores the
    image-anchored predictions Q.T against the same E. Only the prediction
    matrix is transposed: transposing targets as well would make the two
    sides identical under the full-matrix mean and would break the symmetry
    of l_s under swapping the two modalities.
    """
    if p.shape != e.shape:
        raise DimensionMismatchError(f"P is {tuple(p.shape)}, E is {tuple(e.shape)}")
    q = torch.sigmoid(p).clamp(PROB_EPS, 1 - PROB_EPS)
    qt = q.t()
    l_text = -(e * q.log() + (1 - e) * (1 - q).log()).mean()
    l_img = -(e * qt.log() + (1 - e) * (1 - qt).log()).mean()
    l_s = (l_text + l_img) / 2
    return l_text, l_img, l_s


class PairClassifier(nn.Module):
    """Two linear maps over the concatenated embeddings, softmaxed to 2 classes.

    The hidden activation is gelu(W5 @ z + b5) + b6 with b6 added after the
    gelu; the output map W6 carries no bias of its own.
    """

    def __init__(self, in_dim: int, hidden_dim: int = 512):
        super().__init__()
        self.hidden = nn.Linear(in_dim, hidden_dim)
        self.hidden_bias = nn.Parameter(torch.zeros(hidden_dim))
        self.output = nn.Linear(hidden_dim, 2, bias=False)

    def forward(self, z_combined: torch.Tensor) -> torch.Tensor:
        if z_combined.size(-1) != self.hidden.in_features:
            raise DimensionMismatchError(
                f"combined width {z_combined.size(-1)} != classifier input "
                f"{self.hidden.in_features}"
            )
        h = F.gelu(self.hidden(z_combined)) + self.hidden_bias
        return torch.softmax(self.output(h), dim=1)


def classify(z_text: torch.Tensor, z_img: torch.Tensor,
             classifier: PairClassifier) -> torch.Tensor:
    """Concatenate the two embeddings and return (B, 2) class probabilities."""
    if z_text.size(0) != z_img.size(0):
        raise DimensionMismatchError(
            f"batch sizes differ: text {z_text.size(0)}, image {z_img.size(0)}"
        )
    return classifier(torch.cat([z_text, z_img], dim=1))


def classification_loss(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy of the one-hot labels against both class probabilities,
    averaged over batch and classes."""
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) > 1):
        raise InvalidLabelError(f"labels must be 0 (real) or 1 (fake), got {labels.tolist()}")
    z = probs.clamp(PROB_EPS, 1 - PROB_EPS)
    onehot = F.one_hot(labels, num_classes=2).to(z.dtype)
    return -(onehot * z.log() + (1 - onehot) * (1 - z).log()).mean()


def total_loss(l_c: torch.Tensor, l_s: torch.Tensor) -> torch.Tensor:
    """Unweighted sum of the classification and similarity losses."""
    return l_c + l_s


def compute_losses(z_text: torch.Tensor, z_img: torch.Tensor,
                   probs: torch.Tensor, labels: torch.Tensor) -> LossBundle:
    """Full loss bundle for one batch of aligned text/image embeddings."""
    p = similarity_logits(z_text, z_img)
    e = expected_matrix(z_text, z_img)
    _, _, l_s = similarity_loss(p, e)
    l_c = classification_loss(probs, labels)
    return LossBundle(similarity=l_s, classification=l_c, total=total_loss(l_c, l_s))


class MultiModalClassifier(nn.Module):
    """The combined model: both encoders plus the concat classifier."""

    def __init__(self, text_encoder, image_encoder, classifier_hidden_dim: int = 512):
        super().__init__()
        text_dim = text_encoder.config.projection_dim
        image_dim = image_encoder.config.projection_dim
        if text_dim != image_dim:
            raise DimensionMismatchError(
                f"projection dims must match for the similarity product: "
                f"text {text_dim}, image {image_dim}"
            )
        self.text_encoder = text_encoder
        self.image_encoder = image_encoder
        self.classifier = PairClassifier(text_dim + image_dim, classifier_hidden_dim)

    def forward(self, graphs, images):
        """Returns (z_text, z_img, probs) for a batch."""
        z_text = self.text_encoder(graphs)
        z_img = self.image_encoder(images)
        probs = classify(z_text, z_img, self.classifier)
        return z_text, z_img, probs
