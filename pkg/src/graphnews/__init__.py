"""Multi-modal news authenticity classification.

Text becomes a token co-occurrence graph encoded by an LSTM + mean-
aggregation graph stack; images go through a CNN backbone. Both sides are
projected into one space, aligned with a contrastive similarity loss and
fused by concatenation into a binary real/fake classifier.
"""

from .data_pipeline import (
    Batch,
    DatasetManifest,
    Sample,
    clean_text,
    deduplicate,
    load_image,
    load_manifest,
    make_batches,
    preprocess,
    split,
)
from .encoders import (
    ImageEncoder,
    ImageEncoderConfig,
    ProjectionHead,
    SageLayer,
    TextEncoder,
    TextEncoderConfig,
    TinyCnnBackbone,
    TWITTER_TEXT,
    WEIBO_TEXT,
    global_mean_pool,
    load_checkpoint,
    save_checkpoint,
)
from .evaluation import MetricsReport, compute_metrics, evaluate, plot_curves
from .fusion import (
    LossBundle,
    MultiModalClassifier,
    PairClassifier,
    classification_loss,
    classify,
    compute_losses,
    expected_matrix,
    similarity_logits,
    similarity_loss,
    total_loss,
)
from .text_graph import (
    BatchedGraph,
    SentenceGraph,
    TokenSeq,
    Vocab,
    batch_graphs,
    build_vocab,
    graph_dump,
    sentence_to_graph,
    tokenize,
    unbatch_graphs,
)
from .training import (
    PRESETS,
    PlateauScheduler,
    TrainConfig,
    clip_gradients,
    pretrain_image,
    pretrain_text,
    train_combined,
)

__version__ = "0.1.0"
