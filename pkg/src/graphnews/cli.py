"""Command-line entry points.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .data_pipeline import load_manifest, preprocess, split, write_drop_log
from .encoders import (
    ImageEncoderConfig,
    TINY_CNN_BACKBONE,
    TextEncoderConfig,
    load_pretrained_embeddings,
)
from .errors import GraphNewsError
from .evaluation import evaluate, load_history, plot_curves, render_report, write_predictions
from .text_graph import build_vocab, graph_dump, sentence_to_graph, tokenize
from .training import (
    PRESETS,
    PresetBundle,
    TrainConfig,
    pretrain_image,
    pretrain_text,
    train_combined,
)

logger = logging.getLogger(__name__)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; the CLI contract wants 1.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit_message = message
        raise UsageError(message)


def _default_bundle() -> PresetBundle:
    """Small self-contained configuration for runs without a named preset."""
    return PresetBundle(
        train=TrainConfig(epochs=5, batch_size=8, lr=1e-3),
        text=TextEncoderConfig(vocab_size=2, embed_dim=32, lstm_layers=1,
                               lstm_hidden_dim=64, sage_layers=2, sage_hidden_dim=64,
                               dropout_rate=0.2, projection_dim=64),
        image=ImageEncoderConfig(backbone=TINY_CNN_BACKBONE, feature_dim=64,
                                 projection_dim=64),
    )


def _resolve_bundle(args) -> tuple:
    """Preset -> config-file overrides -> per-flag overrides."""
    if args.preset:
        if args.preset not in PRESETS:
            raise UsageError(f"unknown preset {args.preset!r}; "
                             f"choose from {', '.join(sorted(PRESETS))}")
        bundle = PRESETS[args.preset]
        bundle = PresetBundle(train=bundle.train, text=bundle.text, image=bundle.image)
    else:
        bundle = _default_bundle()
    classifier_hidden_dim = 512
    if args.config:
        data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        if "train" in data:
            bundle.train = dataclasses.replace(bundle.train, **data["train"])
        if "text_encoder" in data:
            base = bundle.text or _default_bundle().text
            bundle.text = dataclasses.replace(base, **data["text_encoder"])
        if "image_encoder" in data:
            base = bundle.image or _default_bundle().image
            overrides = dict(data["image_encoder"])
            if "tiny_channels" in overrides:
                overrides["tiny_channels"] = tuple(overrides["tiny_channels"])
            bundle.image = dataclasses.replace(base, **overrides)
        classifier_hidden_dim = data.get("classifier_hidden_dim", classifier_hidden_dim)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.deterministic:
        overrides["deterministic"] = True
    if overrides:
        bundle.train = dataclasses.replace(bundle.train, **overrides)
    return bundle, classifier_hidden_dim


def _prepared_splits(args, out_dir):
    """Manifest -> cleaned, deduplicated train/val sample lists."""
    manifest = load_manifest(args.manifest)
    tagged_train = [s for s in manifest.samples if s.split == "train"]
    tagged_val = [s for s in manifest.samples if s.split == "val"]
    train_samples, drops = preprocess(tagged_train)
    val_samples, val_drops = preprocess(tagged_val)
    drops = manifest.drops + drops + val_drops
    if not tagged_val:
        train_samples, val_samples = split(train_samples, 0.2, args.seed or 0)
    write_drop_log(drops, Path(out_dir) / "drops.log")
    logger.info("prepared %d train / %d val samples (%d dropped)",
                len(train_samples), len(val_samples), len(drops))
    return train_samples, val_samples


def _out_dir(args, command: str) -> Path:
    out = Path(args.out) if args.out else Path("runs") / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cmd_pretrain_text(args) -> int:
    bundle, _ = _resolve_bundle(args)
    if bundle.text is None:
        raise UsageError(f"preset {args.preset!r} has no text encoder configuration")
    out = _out_dir(args, "pretrain-text")
    train_samples, val_samples = _prepared_splits(args, out)
    vocab = build_vocab([s.text for s in train_samples], min_freq=args.min_freq)
    embeddings = None
    if args.embeddings:
        embeddings = load_pretrained_embeddings(vocab, args.embeddings,
                                                bundle.text.embed_dim)
    result = pretrain_text(train_samples, val_samples, vocab, bundle.text,
                           bundle.train, out, pretrained_embeddings=embeddings)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"best validation loss: {result.best_val_loss:.6f}")
    return 0


def _cmd_pretrain_image(args) -> int:
    bundle, _ = _resolve_bundle(args)
    if bundle.image is None:
        raise UsageError(f"preset {args.preset!r} has no image encoder configuration")
    out = _out_dir(args, "pretrain-image")
    train_samples, val_samples = _prepared_splits(args, out)
    result = pretrain_image(train_samples, val_samples, bundle.image,
                            bundle.train, out)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"best validation loss: {result.best_val_loss:.6f}")
    return 0


def _cmd_train(args) -> int:
    bundle, classifier_hidden_dim = _resolve_bundle(args)
    if bundle.text is None or bundle.image is None:
        raise UsageError("combined training needs both encoder configurations")
    out = _out_dir(args, "train")
    train_samples, val_samples = _prepared_splits(args, out)
    vocab = build_vocab([s.text for s in train_samples], min_freq=args.min_freq)
    embeddings = None
    if args.embeddings:
        embeddings = load_pretrained_embeddings(vocab, args.embeddings,
                                                bundle.text.embed_dim)
    result = train_combined(train_samples, val_samples, vocab, bundle.text,
                            bundle.image, bundle.train, out,
                            text_ckpt=args.text_ckpt, image_ckpt=args.image_ckpt,
                            classifier_hidden_dim=classifier_hidden_dim,
                            pretrained_embeddings=embeddings)
    plot_curves(result.history, out)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"best validation loss: {result.best_val_loss:.6f}")
    return 0


def _cmd_evaluate(args) -> int:
    report, rows = evaluate(args.checkpoint, args.manifest, split=args.split)
    print(render_report(report))
    if args.out:
        out = _out_dir(args, "evaluate")
        write_predictions(rows, out / "predictions.csv")
        (out / "report.json").write_text(json.dumps(report.as_dict(), indent=2),
                                         encoding="utf-8")
        print(f"wrote {out / 'predictions.csv'}")
    return 0


def _cmd_graph_inspect(args) -> int:
    vocab = build_vocab([args.text])
    graph = sentence_to_graph(tokenize(args.text, vocab), window_size=args.window)
    print(graph_dump(graph))
    return 0


def _cmd_plot(args) -> int:
    history = load_history(args.history)
    out = _out_dir(args, "plot")
    png_path, csv_path = plot_curves(history, out)
    print(f"wrote {png_path} and {csv_path}")
    return 0


def _add_common(parser, manifest: bool = True):
    if manifest:
        parser.add_argument("--manifest", required=True, help="dataset manifest CSV")
    parser.add_argument("--preset", help="named configuration preset")
    parser.add_argument("--config", help="JSON file overriding config fields")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--deterministic", action="store_true",
                        help="force deterministic kernels")
    parser.add_argument("--min-freq", type=int, default=1,
                        help="minimum token frequency kept in the vocabulary")
    parser.add_argument("--embeddings",
                        help="word2vec-style text file of pretrained embeddings")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="graphnews",
                     description="Multi-modal news authenticity classifier")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain-text", help="train the text encoder alone")
    _add_common(p)
    p.set_defaults(handler=_cmd_pretrain_text)

    p = sub.add_parser("pretrain-image", help="train the image encoder alone")
    _add_common(p)
    p.set_defaults(handler=_cmd_pretrain_image)

    p = sub.add_parser("train", help="train the combined model")
    _add_common(p)
    p.add_argument("--text-ckpt", help="warm-start text encoder checkpoint")
    p.add_argument("--image-ckpt", help="warm-start image encoder checkpoint")
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a manifest split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", help="directory for the prediction dump")
    p.set_defaults(handler=_cmd_evaluate)

    p = sub.add_parser("graph-inspect",
                       help="print the co-occurrence graph of a text")
    p.add_argument("--text", required=True)
    p.add_argument("--window", type=int, default=2)
    p.set_defaults(handler=_cmd_graph_inspect)

    p = sub.add_parser("plot", help="render loss curves from a history file")
    p.add_argument("--history", required=True, help="JSONL training history")
    p.add_argument("--out", help="output directory")
    p.set_defaults(handler=_cmd_plot)

    return parser


def cli_main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.handler(args) or 0
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except GraphNewsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures exit 2 by contract
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
