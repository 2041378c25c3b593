"""Command line: synth, train, generate, evaluate, coherence, pipeline.

Settings come from built-in defaults, then an optional JSON config file,
then flags; later sources win. Each command writes the resolved settings
next to its outputs. Exit codes: 0 success, 1 internal error, 2 bad input.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
import time
from pathlib import Path

log = logging.getLogger("cer")

DEFAULTS: dict = {
    "seed": 0,
    "synth": {"records": 5000, "users": 200, "items": 200, "coherent_fraction": 0.75,
              "valid": 0.1, "test": 0.1},
    "model": {"embed_dim": 32, "n_layers": 2, "n_heads": 2, "hidden_dim": 32, "ffn_dim": 64,
              "max_expl_len": 16, "max_features": 2},
    "train": {"lr": 1e-3, "optimizer": "adam", "batch_size": 64, "max_epochs": 10, "max_steps": None,
              "clip_norm": 1.0, "weight_decay": 0.0, "patience": 5, "coh_stop_gradient": False,
              "no_coh_loss": False},
    "generate": {"split": "test"},
    "coherence": {"n_models": 10, "rule_label": False, "workers": 1},
    "paths": {"data": "data.jsonl", "lexicon": None, "run_dir": "run", "checkpoint": None,
              "predictions": None, "pairs": None, "out": None},
}


class InputError(Exception):
    """Bad user input; reported with exit code 2."""


# ----------------------------------------------------------------- config

def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in out:
            raise InputError(f"unknown config key {where + k!r}")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = _merge(out[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise InputError(f"config file not found: {path}")
        try:
            cfg = _merge(cfg, json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: invalid JSON ({exc})") from exc
    for dest, value in vars(args).items():
        if "." not in dest or value is None:
            continue
        section, key = dest.split(".", 1)
        cfg[section][key] = value
    return cfg


def write_resolved(cfg: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def _existing(path, what: str) -> Path:
    if path is None:
        raise InputError(f"no {what} path given")
    p = Path(path)
    if not p.exists():
        raise InputError(f"{what} not found: {p}")
    return p


def _lexicon(cfg):
    from cer.corpus import load_lexicon
    path = cfg["paths"]["lexicon"]
    return load_lexicon(_existing(path, "lexicon") if path else None)


def _dataset(cfg):
    from cer.corpus import DatasetError, load_dataset
    path = _existing(cfg["paths"]["data"], "dataset")
    try:
        return load_dataset(path)
    except DatasetError as exc:
        raise InputError(str(exc)) from exc


def _run_dir(cfg) -> Path:
    d = Path(cfg["paths"]["run_dir"])
    d.mkdir(parents=True, exist_ok=True)
    return d


def _checkpoint_path(cfg) -> Path:
    return Path(cfg["paths"]["checkpoint"] or Path(cfg["paths"]["run_dir"]) / "model.npz")


def _predictions_path(cfg) -> Path:
    return Path(cfg["paths"]["predictions"] or Path(cfg["paths"]["run_dir"]) / "predictions.jsonl")


# --------------------------------------------------------------- commands

def cmd_synth(cfg: dict) -> int:
    from cer.corpus import coherent_fraction, save_dataset, save_lexicon, split_records, synthesize_corpus
    s = cfg["synth"]
    lexicon = _lexicon(cfg)
    records = synthesize_corpus(seed=cfg["seed"], n_users=s["users"], n_items=s["items"],
                                n_records=s["records"], lexicon=lexicon,
                                coherent_fraction=s["coherent_fraction"])
    split = split_records(records, seed=cfg["seed"], valid=s["valid"], test=s["test"])
    out = Path(cfg["paths"]["data"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(split, out)
    save_lexicon(lexicon, out.with_suffix(".lexicon.json"))
    write_resolved(cfg, out.with_suffix(".config.json"))
    frac = coherent_fraction(records, lexicon)
    n_tr, n_va, n_te = split.sizes()
    print(f"wrote {len(records)} records to {out} (train {n_tr}, valid {n_va}, test {n_te})")
    print(f"coherent fraction: {100 * frac:.1f}%")
    return 0


def _train_config(cfg: dict):
    from cer.training import TrainConfig
    t = dict(cfg["train"])
    no_coh = t.pop("no_coh_loss")
    weights = {"coherence": 0.0} if no_coh else {}
    return TrainConfig(seed=cfg["seed"], loss_weights=weights, **t)


def cmd_train(cfg: dict) -> int:
    from cer.model import config_for_vocab, save_checkpoint
    from cer.training import train
    from cer.corpus import build_vocab
    dataset = _dataset(cfg)
    if not dataset.train:
        raise InputError(f"{cfg['paths']['data']}: training split is empty")
    try:
        tc = _train_config(cfg)
        vocab = build_vocab(dataset.train, id_records=dataset.valid + dataset.test)
        mc = config_for_vocab(vocab, **cfg["model"])
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid settings: {exc}") from exc
    run_dir = _run_dir(cfg)
    write_resolved(cfg, run_dir / "train.config.json")
    log_path = run_dir / "train_log.jsonl"
    t0 = time.time()
    with open(log_path, "w", encoding="utf-8") as fh:
        def on_epoch(entry):
            fh.write(json.dumps(entry.to_json()) + "\n")
            fh.flush()
            log.info("epoch %d  L_total %.4f", entry.epoch, entry.train.total)
        result = train(dataset, mc, tc, vocab=vocab, on_epoch=on_epoch)
    ckpt = _checkpoint_path(cfg)
    save_checkpoint(ckpt, result.params, result.config, result.vocab,
                    extra={"best_epoch": result.best_epoch, "steps": result.steps})
    last = result.history[-1]
    print(f"trained {result.steps} steps in {time.time() - t0:.1f}s; best epoch {result.best_epoch}")
    print(f"final train L_total {last.train.total:.4f}; checkpoint {ckpt}; log {log_path}")
    return 0


def cmd_generate(cfg: dict) -> int:
    from cer.decoding import predict_batch, save_predictions
    from cer.model import load_checkpoint
    ckpt_path = _existing(_checkpoint_path(cfg), "checkpoint")
    try:
        ckpt = load_checkpoint(ckpt_path)
    except (ValueError, KeyError, OSError) as exc:
        raise InputError(f"cannot load checkpoint {ckpt_path}: {exc}") from exc
    dataset = _dataset(cfg)
    split = cfg["generate"]["split"]
    if split not in ("train", "valid", "test"):
        raise InputError(f"unknown split {split!r}")
    records = getattr(dataset, split)
    try:
        preds = predict_batch(records, ckpt.params, ckpt.config, ckpt.vocab)
    except KeyError as exc:
        raise InputError(f"dataset does not match checkpoint vocabulary: {exc}") from exc
    out = _predictions_path(cfg)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_predictions(preds, out)
    write_resolved(cfg, out.with_suffix(".config.json"))
    print(f"wrote {len(preds)} predictions to {out}")
    return 0


def _load_predictions(cfg):
    from cer.decoding import load_predictions
    path = _existing(_predictions_path(cfg), "predictions")
    try:
        return load_predictions(path)
    except ValueError as exc:
        raise InputError(str(exc)) from exc


def cmd_evaluate(cfg: dict) -> int:
    from cer.metrics import evaluate
    dataset = _dataset(cfg)
    preds = _load_predictions(cfg)
    gold = getattr(dataset, cfg["generate"]["split"])
    if len(preds) != len(gold):
        raise InputError(f"{len(preds)} predictions but {len(gold)} records in the "
                         f"{cfg['generate']['split']} split")
    if not gold:
        raise InputError("nothing to evaluate: the split is empty")
    for p, r in zip(preds, gold):
        if (p.user, p.item) != (r.user, r.item):
            raise InputError(f"prediction for ({p.user}, {p.item}) does not line up with "
                             f"record ({r.user}, {r.item})")
    all_features = {f for r in dataset.all_records() for f in r.features}
    report = evaluate([p.explanation for p in preds], [r.explanation for r in gold],
                      [r.features for r in gold], [p.raw_rating for p in preds],
                      [r.rating for r in gold], feature_set=all_features, div_seed=cfg["seed"])
    out = Path(cfg["paths"]["out"] or _predictions_path(cfg).with_suffix(".metrics.json"))
    out.write_text(report.to_json() + "\n")
    write_resolved(cfg, out.with_suffix(".config.json"))
    print(report.table())
    print(f"report written to {out}")
    return 0


def cmd_coherence(cfg: dict) -> int:
    from cer.coherence import (class_weights, coherence_score, load_pairs, render_table,
                               rule_annotate, rule_coherence, save_pairs)
    c = cfg["coherence"]
    preds = _load_predictions(cfg)
    if c["rule_label"]:
        lexicon = _lexicon(cfg)
        pairs = rule_annotate(_dataset(cfg).train, lexicon, seed=cfg["seed"])
        pairs_path = _predictions_path(cfg).with_suffix(".pairs.jsonl")
        save_pairs(pairs, pairs_path)
    else:
        pairs_path = _existing(cfg["paths"]["pairs"], "annotated pairs")
        try:
            pairs = load_pairs(pairs_path)
        except ValueError as exc:
            raise InputError(str(exc)) from exc
    try:
        class_weights([p.label for p in pairs])
    except ValueError as exc:
        raise InputError(f"{pairs_path}: {exc}") from exc
    if not preds:
        raise InputError("no predictions to score")
    name = Path(cfg["paths"]["run_dir"]).name or "model"
    report = coherence_score(preds, pairs, n_models=c["n_models"], name=name, workers=c["workers"])
    out_data = report.to_dict()
    if c["rule_label"]:
        out_data["rule_labeler"] = rule_coherence([p.rating for p in preds],
                                                  [p.explanation for p in preds], lexicon)
    out = Path(cfg["paths"]["out"] or _predictions_path(cfg).with_suffix(".coherence.json"))
    table = render_table([report])
    out_data["table"] = table
    out.write_text(json.dumps(out_data, indent=2) + "\n")
    write_resolved(cfg, out.with_suffix(".config.json"))
    print(table)
    if "rule_labeler" in out_data:
        print(f"rule labeler: {out_data['rule_labeler']:.2f}% coherent")
    print(f"report written to {out}")
    return 0


def cmd_pipeline(cfg: dict) -> int:
    """synth, train, generate, evaluate and coherence into one run directory."""
    run_dir = _run_dir(cfg)
    cfg = copy.deepcopy(cfg)
    if cfg["paths"]["data"] == DEFAULTS["paths"]["data"]:
        cfg["paths"]["data"] = str(run_dir / "data.jsonl")
    cfg["coherence"]["rule_label"] = cfg["coherence"]["rule_label"] or not cfg["paths"]["pairs"]
    # each step picks its own default output name inside the run directory
    cfg["paths"]["out"] = None
    for step in (cmd_synth, cmd_train, cmd_generate, cmd_evaluate, cmd_coherence):
        step(cfg)
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "generate": cmd_generate,
            "evaluate": cmd_evaluate, "coherence": cmd_coherence, "pipeline": cmd_pipeline}


# ----------------------------------------------------------------- parser

def _flag(p, name, dest, **kw):
    p.add_argument(name, dest=dest, default=None, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cer", description="Coherent explainable recommender")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON config file")
        _flag(p, "--seed", "seed_", type=int)
        _flag(p, "--data", "paths.data", help="dataset JSONL")
        _flag(p, "--lexicon", "paths.lexicon", help="polarity lexicon JSON")
        _flag(p, "--run-dir", "paths.run_dir")
        _flag(p, "--checkpoint", "paths.checkpoint")
        _flag(p, "--predictions", "paths.predictions")
        _flag(p, "--split", "generate.split", choices=["train", "valid", "test"])

    def model_train(p):
        for name in ("embed-dim", "n-layers", "n-heads", "hidden-dim", "ffn-dim", "max-expl-len", "max-features"):
            _flag(p, f"--{name}", f"model.{name.replace('-', '_')}", type=int)
        _flag(p, "--lr", "train.lr", type=float)
        _flag(p, "--optimizer", "train.optimizer", choices=["adam", "sgd"])
        _flag(p, "--batch-size", "train.batch_size", type=int)
        _flag(p, "--epochs", "train.max_epochs", type=int)
        _flag(p, "--max-steps", "train.max_steps", type=int)
        _flag(p, "--clip-norm", "train.clip_norm", type=float)
        _flag(p, "--weight-decay", "train.weight_decay", type=float)
        _flag(p, "--patience", "train.patience", type=int)
        p.add_argument("--no-coh-loss", dest="train.no_coh_loss", action="store_const", const=True,
                       default=None, help="drop the coherence loss (ablation)")
        p.add_argument("--coh-stop-gradient", dest="train.coh_stop_gradient", action="store_const",
                       const=True, default=None, help="treat the main rating as a constant in L_coh")

    def synth(p):
        _flag(p, "--records", "synth.records", type=int)
        _flag(p, "--users", "synth.users", type=int)
        _flag(p, "--items", "synth.items", type=int)
        _flag(p, "--coherent-fraction", "synth.coherent_fraction", type=float)

    def coherence(p):
        _flag(p, "--pairs", "paths.pairs", help="annotated pairs JSONL")
        _flag(p, "--n-models", "coherence.n_models", type=int)
        _flag(p, "--workers", "coherence.workers", type=int)
        p.add_argument("--rule-label", dest="coherence.rule_label", action="store_const", const=True,
                       default=None, help="annotate the training split with the rule labeler")

    p = sub.add_parser("synth", help="write a synthetic corpus")
    common(p)
    synth(p)
    p = sub.add_parser("train", help="train a model")
    common(p)
    model_train(p)
    p = sub.add_parser("generate", help="predict ratings and explanations")
    common(p)
    p = sub.add_parser("evaluate", help="text, explainability and rating metrics")
    common(p)
    _flag(p, "--out", "paths.out")
    p = sub.add_parser("coherence", help="trainable coherence metric")
    common(p)
    coherence(p)
    _flag(p, "--out", "paths.out")
    p = sub.add_parser("pipeline", help="synth, train, generate, evaluate, coherence")
    common(p)
    synth(p)
    model_train(p)
    coherence(p)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    threads = os.environ.get("CER_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)
    try:
        cfg = resolve_config(args)
        if args.seed_ is not None:
            cfg["seed"] = args.seed_
        return COMMANDS[args.command](cfg)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
