"""Optimization loop and experiment harnesses.

Two learning-rate groups (encoders vs all other layers), decoupled weight
decay on non-bias/non-norm parameters, linear warmup, periodic dev
evaluation with best-checkpoint selection, plus the few-shot suite and
global threshold tuning. Everything is seeded: weight init, document order,
pair capping and pretraining label negatives, so identical configs give
identical trajectories.
"""

from __future__ import annotations

import json
import logging
import subprocess
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .data_model import RelationLabelSet
from .dataset_io import CorpusFile, FewShotSpec, PredictionRecord, sample_fewshot
from .encoders import TinyTokenizer
from .losses import adaptive_threshold_loss, focal_loss
from .metrics import EvalReport, aggregate_runs, evaluate
from .model import ADAPTIVE_THRESHOLD, ModelConfig, RelationMatcher, build_model, build_targets

logger = logging.getLogger(__name__)

PRETRAIN = "pretrain"
FINETUNE = "finetune"


class TrainingDiverged(RuntimeError):
    """Raised when the loss turns non-finite; carries batch diagnostics."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; defaults follow the reference recipe
    (batch 16, encoder lr 1e-5, head lr 1e-4, 10k finetune steps)."""

    steps: int = 10_000
    batch_size: int = 16
    lr_encoder: float = 1e-5
    lr_heads: float = 1e-4
    seed: int = 0
    eval_every: int = 500
    mode: str = FINETUNE
    weight_decay: float = 0.01
    warmup_frac: float = 0.06
    pair_cap: int | None = None
    negative_labels: int = 8  # pretraining: in-batch label negatives
    log_every: int = 50

    def __post_init__(self) -> None:
        if self.steps <= 0 or self.batch_size <= 0:
            raise ValueError("steps and batch_size must be positive")
        if self.lr_encoder <= 0 or self.lr_heads <= 0:
            raise ValueError("learning rates must be positive")
        if self.mode not in (PRETRAIN, FINETUNE):
            raise ValueError(f"mode must be pretrain or finetune, got {self.mode!r}")


@dataclass
class TrainResult:
    checkpoint_path: str | None
    loss_log: list[dict]
    eval_log: list[dict]
    final_loss: float
    best_dev_f1: float | None


def build_param_groups(model: RelationMatcher, cfg: TrainConfig) -> list[dict]:
    """Four optimizer groups: {encoder, heads} x {decay, no-decay}.

    Every trainable parameter lands in exactly one group; biases and
    normalization parameters are excluded from weight decay.
    """
    encoder_ids = {id(p) for p in model.encoder_parameters()}
    groups = {
        ("encoder", True): [],
        ("encoder", False): [],
        ("heads", True): [],
        ("heads", False): [],
    }
    for name, param in model.named_parameters():
        if not param.requires_grad:
            continue
        kind = "encoder" if id(param) in encoder_ids else "heads"
        decay = not (name.endswith(".bias") or "ln_" in name or ".norm" in name)
        groups[(kind, decay)].append(param)

    total = sum(len(v) for v in groups.values())
    n_params = sum(1 for p in model.parameters() if p.requires_grad)
    assert total == n_params, f"parameter group mismatch: {total} grouped, {n_params} present"

    out = []
    for (kind, decay), params in groups.items():
        if not params:
            continue
        out.append(
            {
                "params": params,
                "lr": cfg.lr_encoder if kind == "encoder" else cfg.lr_heads,
                "weight_decay": cfg.weight_decay if decay else 0.0,
                "name": f"{kind}_{'decay' if decay else 'no_decay'}",
            }
        )
    return out


def _warmup_scale(step: int, cfg: TrainConfig) -> float:
    warmup_steps = max(1, int(cfg.warmup_frac * cfg.steps))
    if step < warmup_steps:
        return (step + 1) / warmup_steps
    return 1.0


def _batched_doc_stream(num_docs: int, batch_size: int, seed: int):
    """Seeded epoch permutations, yielded in fixed-size batches forever."""
    rng = np.random.default_rng(seed)
    while True:
        order = rng.permutation(num_docs)
        for start in range(0, num_docs, batch_size):
            chunk = order[start : start + batch_size]
            if len(chunk) > 0:
                yield [int(i) for i in chunk]


def _pretrain_label_set(
    batch_docs, global_labels: list[str], n_negatives: int, rng: np.random.Generator
) -> RelationLabelSet:
    """Gold relation strings of the batch plus sampled hard negatives."""
    positive = sorted({f.relation_id for doc in batch_docs for f in doc.gold_labels})
    pool = [l for l in global_labels if l not in set(positive)]
    n_pick = min(n_negatives, len(pool))
    negatives = []
    if n_pick:
        picked = rng.choice(len(pool), size=n_pick, replace=False)
        negatives = [pool[i] for i in sorted(int(i) for i in picked)]
    chosen = positive + negatives
    if not chosen:
        raise ValueError("pretraining batch has no labels at all")
    return RelationLabelSet([(l, l) for l in chosen])


def train(
    model: RelationMatcher,
    train_corpus: CorpusFile,
    labels: RelationLabelSet,
    cfg: TrainConfig,
    dev_corpus: CorpusFile | None = None,
    checkpoint_dir: str | Path | None = None,
) -> TrainResult:
    """Run the optimization loop; returns the retained checkpoint and logs.

    In finetune mode with periodic evaluation enabled, the checkpoint with
    the best dev F1 is retained; otherwise the final weights are saved.
    Aborts with diagnostics on a non-finite loss.
    """
    if len(train_corpus) == 0:
        raise ValueError("training corpus is empty")
    if cfg.mode == FINETUNE and cfg.eval_every > 0 and dev_corpus is None:
        raise ValueError("finetune mode with periodic evaluation needs a dev split")

    torch.manual_seed(cfg.seed)
    groups = build_param_groups(model, cfg)
    optimizer = torch.optim.AdamW(groups)
    base_lrs = [g["lr"] for g in optimizer.param_groups]
    stream = _batched_doc_stream(len(train_corpus), cfg.batch_size, cfg.seed)
    label_rng = np.random.default_rng(cfg.seed + 1)

    global_labels = None
    label_matrix_full = None
    if cfg.mode == PRETRAIN:
        global_labels = sorted(
            {f.relation_id for doc in train_corpus for f in doc.gold_labels}
        )

    loss_log: list[dict] = []
    eval_log: list[dict] = []
    best_f1 = None
    best_step = -1
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    final_loss = float("nan")

    def run_eval(step: int) -> float:
        model.eval()
        preds = model.predict_corpus(dev_corpus, labels)
        report = evaluate(preds, dev_corpus)
        model.train()
        eval_log.append({"step": step, **report.to_dict()})
        return report.f1

    model.train()
    for step in range(cfg.steps):
        batch_ids = next(stream)
        batch_docs = [train_corpus.documents[i] for i in batch_ids]

        if cfg.mode == PRETRAIN:
            step_labels = _pretrain_label_set(
                batch_docs, global_labels, cfg.negative_labels, label_rng
            )
        else:
            step_labels = labels
        label_matrix = model.label_matrix(step_labels)

        logits_chunks, target_chunks, th_chunks = [], [], []
        for doc in batch_docs:
            batch = model.score_document(
                doc,
                label_matrix,
                cap=cfg.pair_cap,
                cap_seed=cfg.seed * 1_000_003 + step,
            )
            if not batch.pairs:
                continue
            logits_chunks.append(batch.logits)
            target_chunks.append(build_targets(doc, batch.pairs, step_labels))
            if batch.th_logits is not None:
                th_chunks.append(batch.th_logits)
        if not logits_chunks:
            continue
        logits = torch.cat(logits_chunks)
        targets = torch.cat(target_chunks)

        if model.cfg.loss == ADAPTIVE_THRESHOLD:
            loss = adaptive_threshold_loss(logits, torch.cat(th_chunks), targets)
        else:
            loss = focal_loss(
                logits, targets, model.cfg.focal_params(), model.cfg.loss_reduction
            )

        if not torch.isfinite(loss):
            raise TrainingDiverged(
                f"non-finite loss {loss.item()} at step {step}; "
                f"batch documents: {[d.doc_id for d in batch_docs]}; "
                f"logit range [{logits.min().item():.3g}, {logits.max().item():.3g}]"
            )

        optimizer.zero_grad()
        loss.backward()
        scale = _warmup_scale(step, cfg)
        for group, base in zip(optimizer.param_groups, base_lrs):
            group["lr"] = base * scale
        optimizer.step()

        final_loss = float(loss.detach())
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            loss_log.append({"step": step, "loss": final_loss})

        if (
            cfg.eval_every > 0
            and dev_corpus is not None
            and (step + 1) % cfg.eval_every == 0
        ):
            f1 = run_eval(step + 1)
            if best_f1 is None or f1 > best_f1:
                best_f1, best_step = f1, step + 1
                if ckpt_dir is not None:
                    save_checkpoint(ckpt_dir / "best", model, cfg.seed, step + 1)
            logger.info("step %d: dev F1 %.4f (best %.4f @ %d)", step + 1, f1, best_f1, best_step)

    if cfg.eval_every > 0 and dev_corpus is not None and cfg.steps % cfg.eval_every != 0:
        f1 = run_eval(cfg.steps)
        if best_f1 is None or f1 > best_f1:
            best_f1, best_step = f1, cfg.steps
            if ckpt_dir is not None:
                save_checkpoint(ckpt_dir / "best", model, cfg.seed, cfg.steps)

    checkpoint_path = None
    if ckpt_dir is not None:
        save_checkpoint(ckpt_dir / "last", model, cfg.seed, cfg.steps)
        retained = ckpt_dir / ("best" if best_f1 is not None else "last")
        checkpoint_path = str(retained)
        with open(ckpt_dir / "train_log.json", "w", encoding="utf-8") as fh:
            json.dump({"loss": loss_log, "eval": eval_log}, fh, indent=2)

    return TrainResult(
        checkpoint_path=checkpoint_path,
        loss_log=loss_log,
        eval_log=eval_log,
        final_loss=final_loss,
        best_dev_f1=best_f1,
    )


# --- checkpointing -------------------------------------------------------

def _git_hash() -> str:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def save_checkpoint(path: str | Path, model: RelationMatcher, seed: int, step: int) -> None:
    """Write the checkpoint directory layout.

    ``encoder_doc/`` and ``encoder_label/`` hold weights plus (tiny backend)
    the tokenizer vocabulary; ``heads/`` holds every non-encoder parameter;
    ``config`` is flat key=value text; ``metadata`` records git hash, seed
    and step.
    """
    path = Path(path)
    for sub in ("encoder_doc", "encoder_label", "heads"):
        (path / sub).mkdir(parents=True, exist_ok=True)
    torch.save(model.doc_encoder.state_dict(), path / "encoder_doc" / "weights.pt")
    torch.save(model.label_encoder.state_dict(), path / "encoder_label" / "weights.pt")
    heads_state = {
        k: v
        for k, v in model.state_dict().items()
        if not k.startswith(("doc_encoder.", "label_encoder."))
    }
    torch.save(heads_state, path / "heads" / "weights.pt")
    for side, encoder in (("encoder_doc", model.doc_encoder), ("encoder_label", model.label_encoder)):
        tokenizer = getattr(encoder, "tokenizer", None)
        if isinstance(tokenizer, TinyTokenizer):
            (path / side / "vocab.json").write_text(tokenizer.to_json(), encoding="utf-8")
    with open(path / "config", "w", encoding="utf-8") as fh:
        for key, value in model.cfg.to_flat_dict().items():
            fh.write(f"{key} = {value}\n")
    with open(path / "metadata", "w", encoding="utf-8") as fh:
        fh.write(f"git_hash = {_git_hash()}\n")
        fh.write(f"seed = {seed}\n")
        fh.write(f"step = {step}\n")


def read_kv_file(path: Path) -> dict[str, str]:
    out = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def load_checkpoint(path: str | Path) -> tuple[RelationMatcher, dict[str, str]]:
    """Rebuild a matcher from a checkpoint directory."""
    path = Path(path)
    cfg = ModelConfig.from_flat_dict(read_kv_file(path / "config"))
    metadata = read_kv_file(path / "metadata")
    if cfg.encoder.backend_kind != "tiny":
        raise NotImplementedError(
            "checkpoint loading is implemented for the tiny backend; pretrained "
            "encoders reload from their upstream weights"
        )
    from .encoders import TinyDocumentEncoder, TinyLabelEncoder

    doc_tok = TinyTokenizer.from_json(
        (path / "encoder_doc" / "vocab.json").read_text(encoding="utf-8")
    )
    label_tok = TinyTokenizer.from_json(
        (path / "encoder_label" / "vocab.json").read_text(encoding="utf-8")
    )
    model = RelationMatcher(
        TinyDocumentEncoder(doc_tok, cfg.encoder),
        TinyLabelEncoder(label_tok, cfg.encoder),
        cfg,
    )
    model.doc_encoder.load_state_dict(torch.load(path / "encoder_doc" / "weights.pt"))
    model.label_encoder.load_state_dict(torch.load(path / "encoder_label" / "weights.pt"))
    heads_state = torch.load(path / "heads" / "weights.pt")
    missing, unexpected = model.load_state_dict(
        {**{f"doc_encoder.{k}": v for k, v in model.doc_encoder.state_dict().items()},
         **{f"label_encoder.{k}": v for k, v in model.label_encoder.state_dict().items()},
         **heads_state},
        strict=True,
    )
    assert not missing and not unexpected
    return model, metadata


# --- harnesses -----------------------------------------------------------

def tune_threshold(
    model: RelationMatcher,
    dev_corpus: CorpusFile,
    labels: RelationLabelSet,
    grid: list[float],
) -> float:
    """Global decision threshold maximizing dev F1; ties resolve toward 0.5.

    Scores each document once and re-applies every candidate threshold to
    the same score set.
    """
    if not grid:
        raise ValueError("threshold grid is empty")
    for tau in grid:
        if not 0.0 < tau < 1.0:
            raise ValueError(f"thresholds must lie in (0, 1), got {tau}")
    scored: list[tuple[str, list[tuple[int, int]], torch.Tensor]] = []
    label_matrix = model.label_matrix(labels)
    with torch.no_grad():
        for doc in dev_corpus:
            batch = model.score_document(doc, label_matrix)
            scored.append((doc.title, batch.pairs, torch.sigmoid(batch.logits)))
    ids = labels.ids
    results = []
    for tau in grid:
        preds = []
        for title, pairs, scores in scored:
            hits = torch.nonzero(scores > tau)
            for row, k in hits.tolist():
                h, t = pairs[row]
                preds.append(PredictionRecord(title, h, t, ids[k], float(scores[row, k])))
        report = evaluate(preds, dev_corpus)
        results.append((tau, report.f1))
    best_f1 = max(f1 for _, f1 in results)
    candidates = [tau for tau, f1 in results if f1 == best_f1]
    return min(candidates, key=lambda tau: (abs(tau - 0.5), tau))


@dataclass
class FewShotResult:
    """Per-run F1 plus per-size aggregates for the few-shot protocol."""

    sizes: tuple[int, ...]
    seeds: tuple[int, ...]
    runs: list[dict]  # {"n", "seed", "f1", ...}
    aggregates: dict[int, dict[str, tuple[float, float]]]

    def format_table(self) -> str:
        header = ["model"] + [f"N={n}" for n in self.sizes]
        cells = ["matcher"]
        for n in self.sizes:
            mean, std = self.aggregates[n]["f1"]
            cells.append(f"{mean:.4f}±{std:.4f}")
        widths = [max(len(h), len(c)) for h, c in zip(header, cells)]
        line1 = "  ".join(h.ljust(w) for h, w in zip(header, widths))
        line2 = "  ".join(c.ljust(w) for c, w in zip(cells, widths))
        return line1 + "\n" + line2


def run_fewshot_suite(
    train_corpus: CorpusFile,
    test_corpus: CorpusFile,
    labels: RelationLabelSet,
    spec: FewShotSpec,
    train_cfg: TrainConfig,
    model_cfg: ModelConfig,
    dev_corpus: CorpusFile | None = None,
) -> FewShotResult:
    """Train once per (subset size, seed) and aggregate test F1.

    Each run samples its nested subset, builds a fresh seeded model and
    trains with the run seed; aggregation reports mean and sample std.
    """
    runs = []
    reports_by_n: dict[int, list[EvalReport]] = {n: [] for n in spec.sizes}
    for n in spec.sizes:
        for seed in spec.seeds:
            subset = sample_fewshot(train_corpus, n, seed)
            model = build_model(
                model_cfg,
                [doc.words for doc in train_corpus],
                [name.split() for name in labels.names],
                seed=seed,
            )
            run_cfg = replace(train_cfg, seed=seed)
            start = time.monotonic()
            train(model, subset, labels, run_cfg, dev_corpus=dev_corpus)
            model.eval()
            preds = model.predict_corpus(test_corpus, labels)
            report = evaluate(preds, test_corpus)
            reports_by_n[n].append(report)
            runs.append(
                {
                    "n": n,
                    "seed": seed,
                    "f1": report.f1,
                    "ign_f1": report.ign_f1,
                    "precision": report.precision,
                    "recall": report.recall,
                    "seconds": round(time.monotonic() - start, 2),
                }
            )
            logger.info("fewshot n=%d seed=%d: F1 %.4f", n, seed, report.f1)
    aggregates = {n: aggregate_runs(reports) for n, reports in reports_by_n.items()}
    return FewShotResult(spec.sizes, spec.seeds, runs, aggregates)
