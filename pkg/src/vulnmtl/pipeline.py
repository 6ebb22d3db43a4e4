"""Record -> sample preparation, fitting with model selection, evaluation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .config import RunConfig
from .data import LabelMap, Record, Sample, Vocabulary, pad_truncate
from .metrics import MetricReport, evaluate_predictions
from .model import EncoderConfig, VulnModel
from .syntax import analyze, build_def_use, build_pdg_attention_mask, select_perturbation_targets, tokenize
from .training import predict_samples, train_epoch

log = logging.getLogger(__name__)


def prepare_sample(record: Record, vocab: Vocabulary, labels: LabelMap, cfg: RunConfig) -> Sample:
    analysis = analyze(record.code)
    tf = tokenize(record.code, vocab, cfg.L_c, cfg.N_l, cfg.N_t, sample_id=record.id, analysis=analysis)
    tf.cwe_label = labels.index(record.cwe)
    tf.vuln_lines = set(record.vuln_lines)
    graph = build_def_use(record.code, analysis)
    sample = pad_truncate(tf, cfg.L_c, cfg.N_l, cfg.N_t, attn_mask=build_pdg_attention_mask(tf, graph))
    sample.targets = [t for t in select_perturbation_targets(tf, graph) if t < sample.length]
    return sample


def prepare_samples(records, vocab: Vocabulary, labels: LabelMap, cfg: RunConfig) -> list[Sample]:
    return [prepare_sample(r, vocab, labels, cfg) for r in records]


def encoder_config(cfg: RunConfig, vocab_size: int, n_classes: int) -> EncoderConfig:
    return EncoderConfig(
        vocab_size=vocab_size,
        n_classes=n_classes,
        d_model=cfg.d_model,
        n_layers=cfg.n_layers,
        n_heads=cfg.n_heads,
        max_len=cfg.L_c,
        n_lines=cfg.N_l,
        tokens_per_line=cfg.N_t,
        dropout=cfg.dropout,
    )


def selection_score(report: MetricReport, task_mode: str) -> float:
    """Higher is better: macro-F1 (cls-only), Top-10 (loc-only), their mean
    (multi). A missing line metric counts as 0."""
    top10 = report.top10_acc if report.top10_acc is not None else 0.0
    if task_mode == "cls-only":
        return report.macro_f1
    if task_mode == "loc-only":
        return top10
    return 0.5 * (report.macro_f1 + top10)


def evaluate(model: VulnModel, samples: list[Sample], cfg: RunConfig, labels: LabelMap | None = None) -> MetricReport:
    preds = predict_samples(model, samples, cfg.batch, cfg.task_mode)
    names = labels.classes if labels is not None else None
    return evaluate_predictions(preds, model.config.n_classes, names)


@dataclass
class FitResult:
    model: VulnModel
    history: list[dict]
    best_epoch: int
    best_score: float | None


def fit(
    cfg: RunConfig,
    train: list[Sample],
    valid: list[Sample] | None,
    vocab_size: int,
    n_classes: int,
    log_fh=None,
    labels: LabelMap | None = None,
) -> FitResult:
    """Train for ``cfg.epochs`` epochs and keep the parameters of the best
    validation epoch (the last epoch when there is no validation set)."""
    if not train:
        raise ValueError("training set is empty")
    model = VulnModel(encoder_config(cfg, vocab_size, n_classes), seed=cfg.seed)
    model.fusion = cfg.task_mode == "multi"
    steps_per_epoch = -(-len(train) // cfg.batch)
    opt = nx.OptimizerState(
        base_lr=cfg.lr,
        total_steps=max(1, cfg.epochs * steps_per_epoch),
        weight_decay=cfg.weight_decay,
        max_grad_norm=cfg.grad_clip if cfg.grad_clip > 0 else None,
    )
    rng = np.random.default_rng(cfg.seed)
    best_state, best_score, best_epoch = model.state_dict(), None, 0
    history = []
    for epoch in range(1, cfg.epochs + 1):
        stats = train_epoch(model, train, cfg, opt, epoch, rng)
        row = stats.to_dict()
        if valid:
            report = evaluate(model, valid, cfg, labels)
            score = selection_score(report, cfg.task_mode)
            row["valid"] = {
                "macro_f1": report.macro_f1,
                "accuracy": report.accuracy,
                "top10_acc": report.top10_acc,
                "ifa": report.ifa,
                "selection": score,
            }
            if best_score is None or score > best_score:
                best_score, best_epoch, best_state = score, epoch, model.state_dict()
        else:
            best_epoch, best_state = epoch, model.state_dict()
        history.append(row)
        if log_fh is not None:
            log_fh.write(json.dumps(row, sort_keys=True) + "\n")
            log_fh.flush()
        log.info("epoch %d loss %.4f", epoch, stats.loss)
    model.load_state_dict(best_state)
    return FitResult(model, history, best_epoch, best_score)
