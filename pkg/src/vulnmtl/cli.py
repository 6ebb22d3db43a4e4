"""Command-line entry point: split, vocab, train, eval, targets, stats,
convert-csv and synth.

Every command is deterministic given its inputs, config and seed. Exit
codes: 0 success, 2 invalid input or config, 3 I/O failure, 4 numeric
failure (non-finite loss or gradient).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import Counter

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .data import DatasetError, LabelMap, LoadSummary, Vocabulary, build_vocab, convert_csv, dataset_stats, load_dataset, stratified_split, write_dataset
from .model import load_checkpoint, save_checkpoint
from .pipeline import encoder_config, evaluate, fit, prepare_samples
from .syntax import analyze, build_def_use, extract_identifiers, filter_report, select_perturbation_targets, tokenize
from .training import predict_samples

log = logging.getLogger("vulnmtl")

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


def _write_json(path, obj) -> None:
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
        return
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _overrides(args) -> dict:
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    if args.seed is not None:
        out["seed"] = str(args.seed)
    return out


def _config(args) -> RunConfig:
    return load_config(args.config, _overrides(args))


def _load(path) -> list:
    summary = LoadSummary()
    records = load_dataset(path, summary=summary)
    for n, why in summary.malformed:
        log.warning("%s:%d skipped: %s", path, n, why)
    return records


# -- commands ------------------------------------------------------------------


def cmd_split(args) -> int:
    ratios = tuple(float(x) for x in args.ratios.split(","))
    seed = args.seed if args.seed is not None else 0
    records = _load(args.input)
    train, valid, test, warnings = stratified_split(records, ratios, seed=seed)
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    parts = {"train": train, "valid": valid, "test": test}
    for name, recs in parts.items():
        write_dataset(recs, os.path.join(out, f"{name}.jsonl"))
    classes = sorted({r.cwe for r in records})
    manifest = {
        "input": os.path.basename(args.input),
        "seed": seed,
        "ratios": list(ratios),
        "n_records": len(records),
        "counts": {name: len(recs) for name, recs in parts.items()},
        "per_class": {c: {name: Counter(r.cwe for r in recs)[c] for name, recs in parts.items()} for c in classes},
        "warnings": warnings,
    }
    _write_json(os.path.join(out, "manifest.json"), manifest)
    return EXIT_OK


def cmd_vocab(args) -> int:
    records = _load(args.input)
    vocab = build_vocab(records, args.min_freq)
    vocab.save(args.out or "vocab.txt")
    log.info("vocabulary: %d entries", len(vocab))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    train_recs = _load(args.train)
    valid_recs = _load(args.valid) if args.valid else []
    vocab = Vocabulary.load(args.vocab) if args.vocab else build_vocab(train_recs, cfg.min_freq)
    labels = LabelMap.from_records(train_recs)
    train = prepare_samples(train_recs, vocab, labels, cfg)
    valid = prepare_samples(valid_recs, vocab, labels, cfg)
    out = args.out or "model.json"
    log_path = args.log or os.path.splitext(out)[0] + ".log.jsonl"
    with open(log_path, "w", encoding="utf-8", newline="\n") as fh:
        if cfg.epochs == 0:
            from .model import VulnModel

            model = VulnModel(encoder_config(cfg, len(vocab), len(labels)), seed=cfg.seed)
            model.fusion = cfg.task_mode == "multi"
            best_epoch, best_score = 0, None
        else:
            result = fit(cfg, train, valid, len(vocab), len(labels), log_fh=fh, labels=labels)
            model, best_epoch, best_score = result.model, result.best_epoch, result.best_score
    extra = {
        "run_config": cfg.to_dict(),
        "vocab": vocab.to_list(),
        "labels": labels.classes,
        "best_epoch": best_epoch,
        "best_score": best_score,
        "version": __version__,
    }
    save_checkpoint(out, model, extra)
    return EXIT_OK


def cmd_eval(args) -> int:
    model, extra = load_checkpoint(args.model)
    cfg = RunConfig(**extra["run_config"])
    if args.config or args.set or args.seed is not None:
        # an explicit config must describe the stored model exactly
        requested = load_config(args.config, _overrides(args))
        want = encoder_config(requested, model.config.vocab_size, model.config.n_classes)
        if want.to_dict() != model.config.to_dict():
            diff = {k: (v, model.config.to_dict()[k]) for k, v in want.to_dict().items() if model.config.to_dict()[k] != v}
            raise ConfigError(f"config does not match checkpoint (requested, stored): {diff}")
        cfg = requested
    vocab = Vocabulary(extra["vocab"][3:])
    labels = LabelMap(extra["labels"])
    samples = prepare_samples(_load(args.test), vocab, labels, cfg)
    report = evaluate(model, samples, cfg, labels)
    out = args.out or "report.json"
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report.to_json())
    with open(os.path.splitext(out)[0] + ".txt", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report.to_table())
    if args.predictions:
        preds = predict_samples(model, samples, cfg.batch, cfg.task_mode)
        rows = [
            {
                "id": preds.sample_ids[i],
                "label": int(preds.labels[i]),
                "pred": int(preds.pred[i]),
                "line_probs": [float(x) for x in preds.line_probs[i]],
                "line_valid": [bool(x) for x in preds.line_valid[i]],
                "vuln_lines": preds.vuln_lines[i],
                "original_vuln_count": preds.original_vuln_counts[i],
            }
            for i in range(len(samples))
        ]
        with open(args.predictions, "w", encoding="utf-8", newline="\n") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    sys.stdout.write(report.to_table())
    return EXIT_OK


def cmd_targets(args) -> int:
    with open(args.source, encoding="utf-8") as fh:
        source = fh.read()
    cfg = _config(args)
    analysis = analyze(source)
    doc = {"source": os.path.basename(args.source), "fallback": analysis.fallback}
    if analysis.fallback:
        doc["note"] = "brackets do not balance; identifiers classified lexically only"
    graph = build_def_use(source, analysis)
    doc["identifiers"] = [s.to_dict() for s in extract_identifiers(source)]
    doc["def_use"] = graph.to_dict()
    if analysis.lexemes:
        tf = tokenize(source, Vocabulary(), cfg.L_c, cfg.N_l, cfg.N_t, analysis=analysis)
        doc["filters"] = filter_report(tf, graph)
        lexemes = analysis.lexemes  # position p > 0 holds lexeme p - 1
        doc["targets"] = [
            {"position": t, "token": lexemes[t - 1].text, "line": lexemes[t - 1].line}
            for t in select_perturbation_targets(tf, graph)
        ]
    else:
        doc["filters"], doc["targets"] = [], []
    _write_json(args.out, doc)
    return EXIT_OK


def cmd_stats(args) -> int:
    cfg = _config(args)
    stats = dataset_stats(_load(args.input), cfg.L_c, cfg.N_l, cfg.N_t)
    _write_json(args.out, stats)
    return EXIT_OK


def cmd_convert_csv(args) -> int:
    n = convert_csv(
        args.input,
        args.out or "dataset.jsonl",
        code_col=args.code_col,
        cwe_col=args.cwe_col,
        lines_col=args.lines_col,
        id_col=args.id_col,
        lines_base=args.lines_base,
    )
    log.info("converted %s records", n)
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synthetic import make_corpus

    seed = args.seed if args.seed is not None else 0
    records = make_corpus(args.n_per_class, seed=seed, distractor_rate=args.distractor_rate)
    write_dataset(records, args.out or "synthetic.jsonl")
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, wins over --config")
    common.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    common.add_argument("--out", help="output path (file or directory, per command)")

    p = argparse.ArgumentParser(prog="vulnmtl", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("split", parents=[common], help="stratified train/valid/test split")
    s.add_argument("input")
    s.add_argument("--ratios", default="8,1,1")
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("vocab", parents=[common], help="build a vocabulary file")
    s.add_argument("input")
    s.add_argument("--min-freq", type=int, default=1)
    s.set_defaults(func=cmd_vocab)

    s = sub.add_parser("train", parents=[common], help="train and checkpoint the best validation model")
    s.add_argument("--train", required=True)
    s.add_argument("--valid")
    s.add_argument("--vocab")
    s.add_argument("--log", help="JSON-lines training log (default: next to the checkpoint)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="write a metric report for a checkpoint")
    s.add_argument("--model", required=True)
    s.add_argument("--test", required=True)
    s.add_argument("--predictions", help="also dump per-sample predictions as JSON-lines")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("targets", parents=[common], help="show identifiers, def-use edges and perturbation targets")
    s.add_argument("source")
    s.set_defaults(func=cmd_targets)

    s = sub.add_parser("stats", parents=[common], help="length and coverage statistics")
    s.add_argument("input")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("convert-csv", parents=[common], help="convert a Big-Vul style CSV to JSON-lines")
    s.add_argument("input")
    s.add_argument("--code-col", default="func_before")
    s.add_argument("--cwe-col", default="CWE ID")
    s.add_argument("--lines-col", default="flaw_line_index")
    s.add_argument("--id-col")
    s.add_argument("--lines-base", type=int, default=0, choices=(0, 1))
    s.set_defaults(func=cmd_convert_csv)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic corpus with planted flaws")
    s.add_argument("--n-per-class", type=int, default=50)
    s.add_argument("--distractor-rate", type=float, default=0.0)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FloatingPointError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (ConfigError, DatasetError, ValueError, KeyError) as exc:
        log.error("invalid input: %s", exc)
        return EXIT_INVALID
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
