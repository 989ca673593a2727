"""Command-line interface.

Subcommands: train, pretrain, evaluate, predict, fewshot, tune-threshold,
gen-pretrain, zeroshot. Values from a --config file (YAML or JSON) override
command-line flags; the DOCREX_CHECKPOINT_ROOT environment variable
resolves relative checkpoint paths.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import yaml

from .clients import client_from_endpoint
from .dataset_io import (
    FewShotSpec,
    load_corpus,
    load_pretrain_corpus,
    load_rel_info,
    read_predictions,
    write_predictions,
    corpus_label_set,
)
from .encoders import EncoderConfig
from .metrics import build_train_facts, evaluate
from .model import ModelConfig, build_model, parse_on_off
from .pretrain_gen import (
    DEFAULT_GENERATION_TEMPLATE,
    generate,
    load_raw_documents,
    normalize_labels,
)
from .trainer import (
    FINETUNE,
    PRETRAIN,
    TrainConfig,
    load_checkpoint,
    run_fewshot_suite,
    train,
    tune_threshold,
)
from .zeroshot import DEFAULT_ZEROSHOT_TEMPLATE, run_zeroshot

logger = logging.getLogger("docrex")

CHECKPOINT_ROOT_ENV = "DOCREX_CHECKPOINT_ROOT"


def resolve_checkpoint_path(path: str) -> Path:
    """Relative checkpoint paths live under $DOCREX_CHECKPOINT_ROOT."""
    p = Path(path)
    root = os.environ.get(CHECKPOINT_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--pooling", choices=["mean", "logsumexp"], default="mean")
    parser.add_argument("--lop", choices=["on", "off"], default="on")
    parser.add_argument("--loss", choices=["focal", "adaptive_threshold"], default="focal")
    parser.add_argument("--activation", default="gelu")
    parser.add_argument("--threshold", type=float, default=0.5, help="decision threshold")
    parser.add_argument("--focal-gamma", type=float, default=2.0)
    parser.add_argument("--focal-alpha-pos", type=float, default=0.25)
    parser.add_argument("--hidden-size", type=int, default=32)
    parser.add_argument("--max-length", type=int, default=512)
    parser.add_argument("--latent-size", type=int, default=None)
    parser.add_argument("--backend", choices=["tiny", "pretrained"], default="tiny")


def _add_train_flags(parser: argparse.ArgumentParser, steps: int) -> None:
    parser.add_argument("--steps", type=int, default=steps)
    parser.add_argument("--batch-size", type=int, default=16)
    parser.add_argument("--lr-encoder", type=float, default=1e-5)
    parser.add_argument("--lr-heads", type=float, default=1e-4)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--eval-every", type=int, default=500)
    parser.add_argument("--pair-cap", type=int, default=None)


def _model_config(args) -> ModelConfig:
    encoder = EncoderConfig(
        backend_kind=args.backend,
        max_length=args.max_length,
        hidden_size=args.hidden_size,
        latent_size=args.latent_size,
    )
    return ModelConfig(
        encoder=encoder,
        pooling=args.pooling,
        lop=parse_on_off(args.lop),
        loss=args.loss,
        activation=args.activation,
        decision_threshold=args.threshold,
        focal_gamma=args.focal_gamma,
        focal_alpha_pos=args.focal_alpha_pos,
    )


def _train_config(args, mode: str) -> TrainConfig:
    return TrainConfig(
        steps=args.steps,
        batch_size=args.batch_size,
        lr_encoder=args.lr_encoder,
        lr_heads=args.lr_heads,
        seed=args.seed,
        eval_every=args.eval_every,
        mode=mode,
        pair_cap=args.pair_cap,
    )


def _apply_config_file(args: argparse.Namespace) -> argparse.Namespace:
    """Config file values override flags (documented precedence)."""
    if not getattr(args, "config", None):
        return args
    text = Path(args.config).read_text(encoding="utf-8")
    if args.config.endswith(".json"):
        overrides = json.loads(text)
    else:
        overrides = yaml.safe_load(text)
    if not isinstance(overrides, dict):
        raise SystemExit(f"config file {args.config} must hold a mapping")
    for key, value in overrides.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            raise SystemExit(f"config file {args.config}: unknown key {key!r}")
        setattr(args, attr, value)
    return args


def cmd_train(args) -> int:
    rel_info = load_rel_info(args.rel_info)
    train_corpus = load_corpus(args.train, rel_info, "train")
    dev_corpus = load_corpus(args.dev, rel_info, "dev") if args.dev else None
    model_cfg = _model_config(args)
    model = build_model(
        model_cfg,
        [doc.words for doc in train_corpus],
        [name.split() for name in rel_info.names],
        seed=args.seed,
    )
    result = train(
        model,
        train_corpus,
        rel_info,
        _train_config(args, FINETUNE),
        dev_corpus=dev_corpus,
        checkpoint_dir=resolve_checkpoint_path(args.out),
    )
    print(f"checkpoint: {result.checkpoint_path}")
    if result.best_dev_f1 is not None:
        print(f"best dev F1: {result.best_dev_f1:.4f}")
    print(f"final loss: {result.final_loss:.6f}")
    return 0


def cmd_pretrain(args) -> int:
    corpus, skip_report = load_pretrain_corpus(args.corpus, max_words=args.max_words)
    corpus, _, dropped = normalize_labels(corpus)
    if dropped:
        logger.warning("dropped %d relations with empty labels", dropped)
    labels = corpus_label_set(corpus)
    model_cfg = _model_config(args)
    model = build_model(
        model_cfg,
        [doc.words for doc in corpus],
        [name.split() for name in labels.names],
        seed=args.seed,
    )
    result = train(
        model,
        corpus,
        labels,
        _train_config(args, PRETRAIN),
        checkpoint_dir=resolve_checkpoint_path(args.out),
    )
    print(f"skip report: {skip_report.__dict__}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"final loss: {result.final_loss:.6f}")
    return 0


def cmd_evaluate(args) -> int:
    rel_info = load_rel_info(args.rel_info)
    gold = load_corpus(args.gold, rel_info, "test")
    preds = read_predictions(args.preds)
    train_facts = frozenset()
    if args.train:
        train_facts = build_train_facts(load_corpus(args.train, rel_info, "train"))
    report = evaluate(preds, gold, train_facts)
    if args.json:
        print(report.to_json())
    else:
        print(report.format_table())
    return 0


def cmd_predict(args) -> int:
    rel_info = load_rel_info(args.rel_info)
    corpus = load_corpus(args.corpus, rel_info, "test")
    model, _ = load_checkpoint(resolve_checkpoint_path(args.checkpoint))
    model.eval()
    preds = model.predict_corpus(corpus, rel_info, threshold=args.threshold)
    write_predictions(preds, args.out)
    print(f"wrote {len(preds)} predictions to {args.out}")
    return 0


def cmd_fewshot(args) -> int:
    rel_info = load_rel_info(args.rel_info)
    train_corpus = load_corpus(args.train, rel_info, "train")
    test_corpus = load_corpus(args.test, rel_info, "test")
    sizes = tuple(int(s) for s in args.sizes.split(","))
    seeds = tuple(int(s) for s in args.seeds.split(","))
    result = run_fewshot_suite(
        train_corpus,
        test_corpus,
        rel_info,
        FewShotSpec(sizes=sizes, seeds=seeds),
        _train_config(args, FINETUNE),
        _model_config(args),
    )
    print(result.format_table())
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump({"runs": result.runs}, fh, indent=2)
        print(f"per-run results: {args.out}")
    return 0


def cmd_tune_threshold(args) -> int:
    rel_info = load_rel_info(args.rel_info)
    dev = load_corpus(args.dev, rel_info, "dev")
    model, _ = load_checkpoint(resolve_checkpoint_path(args.checkpoint))
    model.eval()
    grid = [float(t) for t in args.grid.split(",")]
    best = tune_threshold(model, dev, rel_info, grid)
    print(f"best threshold: {best}")
    return 0


def cmd_gen_pretrain(args) -> int:
    raw_docs = load_raw_documents(args.input)
    client = client_from_endpoint(args.endpoint, args.model)
    template = (
        Path(args.template).read_text(encoding="utf-8")
        if args.template
        else DEFAULT_GENERATION_TEMPLATE
    )
    records, report = generate(
        raw_docs, client, template, max_words=args.max_words, out_path=args.out
    )
    print(json.dumps(report.to_dict(), indent=2))
    if args.report:
        Path(args.report).write_text(json.dumps(report.to_dict(), indent=2), encoding="utf-8")
    return 0


def cmd_zeroshot(args) -> int:
    rel_info = load_rel_info(args.rel_info)
    corpus = load_corpus(args.corpus, rel_info, "test")
    client = client_from_endpoint(args.endpoint, args.model)
    template = (
        Path(args.template).read_text(encoding="utf-8")
        if args.template
        else DEFAULT_ZEROSHOT_TEMPLATE
    )
    preds, report, run_report = run_zeroshot(corpus, client, rel_info, template)
    if args.out:
        write_predictions(preds, args.out)
    print(report.format_table())
    print(
        f"documents={run_report.documents} failed={run_report.failed_documents} "
        f"triplets={run_report.triplets} degraded={run_report.degraded}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="docrex", description="bi-encoder document-level relation extraction"
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fine-tune on a labeled corpus")
    p.add_argument("--train", required=True)
    p.add_argument("--dev", default=None)
    p.add_argument("--rel-info", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    _add_train_flags(p, steps=10_000)
    _add_model_flags(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("pretrain", help="pretrain on a synthetic corpus")
    p.add_argument("--corpus", required=True, help="pretraining JSONL")
    p.add_argument("--out", required=True)
    p.add_argument("--max-words", type=int, default=1024)
    p.add_argument("--config", default=None)
    _add_train_flags(p, steps=50_000)
    _add_model_flags(p)
    p.set_defaults(handler=cmd_pretrain)

    p = sub.add_parser("evaluate", help="score a prediction file")
    p.add_argument("--preds", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--rel-info", required=True)
    p.add_argument("--train", default=None, help="training corpus for Ign F1 facts")
    p.add_argument("--json", action="store_true")
    p.add_argument("--config", default=None)
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("predict", help="run a checkpoint over a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--rel-info", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser("fewshot", help="run the few-shot suite")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--rel-info", required=True)
    p.add_argument("--sizes", default="1,5,10,50,100,500,1000")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--out", default=None)
    p.add_argument("--config", default=None)
    _add_train_flags(p, steps=10_000)
    _add_model_flags(p)
    p.set_defaults(handler=cmd_fewshot)

    p = sub.add_parser("tune-threshold", help="grid-search the decision threshold")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dev", required=True)
    p.add_argument("--rel-info", required=True)
    p.add_argument("--grid", default="0.3,0.4,0.5,0.6,0.7")
    p.add_argument("--config", default=None)
    p.set_defaults(handler=cmd_tune_threshold)

    p = sub.add_parser("gen-pretrain", help="generate a synthetic pretraining corpus")
    p.add_argument("--input", required=True, help="text file (one doc per line) or directory of .txt")
    p.add_argument("--endpoint", required=True, help="http(s) URL or mock://simple")
    p.add_argument("--model", default="annotator")
    p.add_argument("--template", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--report", default=None)
    p.add_argument("--max-words", type=int, default=1024)
    p.add_argument("--config", default=None)
    p.set_defaults(handler=cmd_gen_pretrain)

    p = sub.add_parser("zeroshot", help="zero-shot extraction through a completion endpoint")
    p.add_argument("--corpus", required=True)
    p.add_argument("--rel-info", required=True)
    p.add_argument("--endpoint", required=True, help="http(s) URL or mock://empty")
    p.add_argument("--model", default="annotator")
    p.add_argument("--template", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(handler=cmd_zeroshot)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = _apply_config_file(args)
    return args.handler(args)


if __name__ == "__main__":
    sys.exit(main())
