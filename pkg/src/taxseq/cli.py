"""Command-line surface: train, evaluate, predict, ablate, gen-synth, stats.

Heavy imports happen inside the command functions so the global
``--threads`` and ``--deterministic`` flags can pin the numeric library
thread pools before anything numeric loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

ABLATION_VARIANTS: dict[str, dict[str, str]] = {
    "parent-to-child": {"codec.ordering": "parent_to_child_levelwise"},
    "no-separator": {"codec.ordering": "child_to_parent_nosep"},
    "path-separated": {"codec.ordering": "path_separated"},
    "shuffled": {"codec.ordering": "shuffled"},
    "children-only": {"codec.ordering": "minimal_children_levelwise"},
    "focal-per-label": {"loss.variant": "focal_per_token"},
    "no-focal": {"loss.variant": "plain_ce"},
    "label-init": {"decoder.use_label_init": "true"},
}

VARIANT_DISPLAY = {
    "base": "base model",
    "parent-to-child": "but parent-to-child ordering",
    "no-separator": "w/o <unk> token separators",
    "path-separated": "using <unk> to separate paths instead of levels",
    "shuffled": "but shuffled labels w/o <unk>",
    "children-only": "children only + hierarchy",
    "focal-per-label": "focal loss on label level",
    "no-focal": "w/o focal loss",
    "label-init": "with labels semantics",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="taxseq",
        description="Hierarchical text classification via label-sequence decoding.")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the configured training seed")
    parser.add_argument("--deterministic", action="store_true",
                        help="single-threaded numerics for bit-reproducible runs")
    parser.add_argument("--threads", type=int, default=None,
                        help="pin numeric library thread pools")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a data directory")
    p.add_argument("--config", default=None, help="INI config file")
    p.add_argument("--data", required=True, help="directory with taxonomy.tsv + splits")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="config override (repeatable)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "dev", "test"))
    p.add_argument("--out", default=None, help="report path prefix")
    p.add_argument("--macro-all-labels", action="store_true",
                   help="average macro-F1 over every taxonomy label")
    p.add_argument("--precomputed", default=None,
                   help="precomputed encoder-state directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="decode labels for new texts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="JSONL with id and text fields")
    p.add_argument("--out", default=None, help="output JSONL (default stdout)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate", help="run the base config plus named variants")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variants", default=",".join(ABLATION_VARIANTS),
                   help="comma-separated variant names")
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    p.add_argument("--parallel", type=int, default=1,
                   help="run up to N variants concurrently")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gen-synth", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--branching", type=int, default=4)
    p.add_argument("--vocab-size", type=int, default=2000)
    p.add_argument("--docs-per-leaf", type=int, default=94)
    p.add_argument("--noise-rate", type=float, default=0.3)
    p.add_argument("--signal-strength", type=int, default=4)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("stats", help="summarize a data directory")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_stats)
    return parser


def _apply_global_flags(args) -> None:
    threads = args.threads
    if args.deterministic and threads is None:
        threads = 1
    if threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ[var] = str(threads)


def _load_config(args):
    from .config import RunConfig

    cfg = (RunConfig.from_file(args.config, args.overrides)
           if args.config else RunConfig.defaults(args.overrides))
    if args.seed is not None:
        cfg.set("train", "seed", int(args.seed))
    return cfg


def _build_bundle(cfg, h, splits, store=None):
    """Construct a ModelBundle (plus codec capacity) from a RunConfig."""
    from .codec import Ordering, capacity_for
    from .decoder import DecoderConfig
    from .encoder import EncoderConfig, TextVocab
    from .errors import ConfigError
    from .model import ModelBundle

    ordering = Ordering.from_string(cfg.get("codec", "ordering"))
    capacity = int(cfg.get("codec", "capacity"))
    if capacity == 0:
        sets = [s.labels for split in splits.values() for s in split]
        capacity = capacity_for(sets, h, strategy=ordering)

    enc_kw = dict(mode=cfg.get("encoder", "mode"),
                  d_model=cfg.get("encoder", "d_model"),
                  layers=cfg.get("encoder", "layers"),
                  heads=cfg.get("encoder", "heads"),
                  max_len=cfg.get("encoder", "max_len"),
                  dropout=cfg.get("encoder", "dropout"))
    text_vocab = None
    if enc_kw["mode"] == "trainable":
        if "train" not in splits:
            raise ConfigError("building a trainable encoder needs a train split")
        text_vocab = TextVocab.build(
            (s.text for s in splits["train"]),
            min_count=cfg.get("encoder", "word_min_count"),
            max_size=cfg.get("encoder", "word_max_size"))
    else:
        if store is None:
            raise ConfigError("precomputed mode needs a states directory "
                              "([data] precomputed_dir or --precomputed)")
        enc_kw["max_len"] = store.max_len
        enc_kw["d_model"] = store.d_model
    enc_cfg = EncoderConfig(**enc_kw)

    label_init = None
    if cfg.get("decoder", "use_label_init"):
        label_init = cfg.get("decoder", "label_init")
        if not label_init:
            raise ConfigError("use_label_init requires [decoder] label_init = <path>")
    dec_cfg = DecoderConfig(vocab_size=0,
                            d_model=enc_cfg.d_model,
                            layers=cfg.get("decoder", "layers"),
                            heads=cfg.get("decoder", "heads"),
                            ff_dim=cfg.get("decoder", "ff_dim"),
                            dropout=cfg.get("decoder", "dropout"),
                            max_positions=capacity)
    return ModelBundle.build(h, ordering, capacity, enc_cfg, dec_cfg,
                             seed=cfg.get("train", "seed"),
                             text_vocab=text_vocab, label_init=label_init)


def _train_config(cfg):
    from .loss import LossConfig
    from .trainer import TrainConfig

    loss = LossConfig(variant=cfg.get("loss", "variant"),
                      gamma=cfg.get("loss", "gamma"),
                      smoothing=cfg.get("loss", "smoothing"))
    return TrainConfig(
        lr_encoder=cfg.get("train", "lr_encoder"),
        lr_decoder=cfg.get("train", "lr_decoder"),
        plateau_patience=cfg.get("train", "plateau_patience"),
        plateau_factor=cfg.get("train", "plateau_factor"),
        improve_eps=cfg.get("train", "improve_eps"),
        encoder_freeze_threshold=cfg.get("train", "encoder_freeze_threshold"),
        early_stop_patience=cfg.get("train", "early_stop_patience"),
        micro_batch=cfg.get("train", "micro_batch"),
        accumulation_steps=cfg.get("train", "accumulation_steps"),
        max_epochs=cfg.get("train", "max_epochs"),
        seed=cfg.get("train", "seed"),
        beta1=cfg.get("train", "beta1"),
        beta2=cfg.get("train", "beta2"),
        adam_eps=cfg.get("train", "adam_eps"),
        weight_decay=cfg.get("train", "weight_decay"),
        loss=loss,
        val_plain_ce=cfg.get("train", "val_plain_ce"),
    )


def _open_store(cfg, flag_value=None):
    from .encoder import PrecomputedStates

    path = flag_value or cfg.get("data", "precomputed_dir")
    return PrecomputedStates.open(path) if path else None


def _run_training(cfg, data_dir, out_dir):
    from .corpus import load_splits
    from .errors import EmptyCorpus
    from .trainer import prepare_data, train

    h, splits = load_splits(data_dir)
    for need in ("train", "dev"):
        if need not in splits:
            raise EmptyCorpus(f"{data_dir}: missing {need}.jsonl")
    store = _open_store(cfg)
    bundle = _build_bundle(cfg, h, splits, store)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_resolved(out / "resolved.ini")
    seed = cfg.get("train", "seed")
    prep_train = prepare_data(bundle, splits["train"], seed=seed, store=store)
    prep_dev = prepare_data(bundle, splits["dev"], seed=seed + 1, store=store)
    result = train(bundle, prep_train, prep_dev, _train_config(cfg), out_dir=out)
    return bundle, result, h, splits, store


def _score_split(bundle, samples, store=None, macro_all=False):
    from .inference import predict_prepared
    from .metrics import build_report
    from .trainer import prepare_data

    prep = prepare_data(bundle, samples, seed=0, store=store)
    preds = predict_prepared(bundle, prep)
    gold_seqs = [prep.seq_ids[i][prep.seq_mask[i] == 1].tolist()
                 for i in range(prep.n)]
    return build_report([p.labels for p in preds], prep.gold, bundle.hierarchy,
                        macro_all_labels=macro_all,
                        pred_sequences=[p.token_ids for p in preds],
                        gold_sequences=gold_seqs, vocab=bundle.vocab)


def cmd_train(args) -> int:
    cfg = _load_config(args)
    bundle, result, _, _, _ = _run_training(cfg, args.data, args.out)
    print(f"trained {bundle.n_params()} parameters, "
          f"{result.epochs_run} epochs ({result.stopped}), "
          f"best val {result.best_val:.4f} at epoch {result.best_epoch}")
    print(f"checkpoints: {result.best_dir} (best), {result.last_dir} (last)")
    return 0


def cmd_evaluate(args) -> int:
    from .corpus import load_jsonl
    from .metrics import write_report
    from .trainer import load_checkpoint

    bundle, manifest = load_checkpoint(args.checkpoint)
    store = None
    if bundle.enc_cfg.mode == "precomputed" or args.precomputed:
        from .encoder import PrecomputedStates
        from .errors import ConfigError
        if not args.precomputed:
            raise ConfigError("precomputed-mode checkpoint needs --precomputed DIR")
        store = PrecomputedStates.open(args.precomputed)
    samples = load_jsonl(Path(args.data) / f"{args.split}.jsonl", bundle.hierarchy)
    report = _score_split(bundle, samples, store, args.macro_all_labels)
    prefix = Path(args.out) if args.out else Path(args.checkpoint) / f"eval_{args.split}"
    txt, kv = write_report(report, prefix)
    print(f"micro_f1 {report.micro_f1:.4f}  macro_f1 {report.macro_f1:.4f} "
          f"({len(samples)} samples; report: {txt}, {kv})")
    return 0


def cmd_predict(args) -> int:
    from .errors import MalformedLine
    from .inference import predict_texts
    from .trainer import load_checkpoint

    bundle, _ = load_checkpoint(args.checkpoint)
    ids, texts = [], []
    with Path(args.input).open(encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise MalformedLine(f"{args.input}:{n}: invalid JSON ({e.msg})") from None
            ids.append(str(obj.get("id", n)))
            texts.append(str(obj["text"]))
    preds = predict_texts(bundle, texts, sample_ids=ids)
    sink = Path(args.out).open("w", encoding="utf-8") if args.out else sys.stdout
    try:
        for p in preds:
            sink.write(json.dumps({"id": p.sample_id,
                                   "labels": sorted(p.labels),
                                   "levels": p.groups,
                                   "diagnostics": p.diagnostics}) + "\n")
    finally:
        if sink is not sys.stdout:
            sink.close()
    return 0


def _ablate_one(payload):
    """Train one (variant, seed) cell and score it on the test split."""
    cfg_values, data_dir, out_dir, variant, seed = payload
    from .config import RunConfig
    from .corpus import load_jsonl
    from .trainer import load_checkpoint

    cfg = RunConfig(cfg_values)
    for dotted, value in ABLATION_VARIANTS.get(variant, {}).items():
        section, key = dotted.split(".", 1)
        cfg.set(section, key, value)
    cfg.set("train", "seed", seed)
    run_dir = Path(out_dir) / variant.replace("/", "_") / f"seed{seed}"
    bundle, result, h, splits, store = _run_training(cfg, data_dir, run_dir)
    best, _ = load_checkpoint(result.best_dir)
    test = splits.get("test") or load_jsonl(Path(data_dir) / "test.jsonl", h)
    report = _score_split(best, test, store)
    return {"variant": variant, "seed": seed,
            "micro_f1": report.micro_f1, "macro_f1": report.macro_f1,
            "best_val": result.best_val, "epochs": result.epochs_run}


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    variants = ["base"] + [v for v in args.variants.split(",") if v and v != "base"]
    unknown = [v for v in variants[1:] if v not in ABLATION_VARIANTS]
    if unknown:
        from .errors import ConfigError
        raise ConfigError(f"unknown ablation variants {unknown}; "
                          f"choose from {sorted(ABLATION_VARIANTS)}")
    seeds = [int(s) for s in args.seeds.split(",") if s]
    jobs = [(cfg.values, args.data, args.out, v, s) for v in variants for s in seeds]

    if args.parallel > 1:
        import multiprocessing as mp
        with mp.Pool(args.parallel) as pool:
            cells = pool.map(_ablate_one, jobs)
    else:
        cells = [_ablate_one(j) for j in jobs]

    rows = []
    for v in variants:
        micro = sorted(c["micro_f1"] for c in cells if c["variant"] == v)
        macro = sorted(c["macro_f1"] for c in cells if c["variant"] == v)
        mid = len(micro) // 2
        rows.append({"variant": v, "display": VARIANT_DISPLAY[v],
                     "micro_f1": micro[mid], "macro_f1": macro[mid],
                     "seeds": seeds})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(
        json.dumps({"rows": rows, "cells": cells}, indent=1), encoding="utf-8")
    width = max(len(r["display"]) for r in rows) + 2
    lines = [f"{'experiment':<{width}}{'micro_f1':>10}{'macro_f1':>10}"]
    for r in rows:
        lines.append(f"{r['display']:<{width}}{r['micro_f1']:>10.4f}{r['macro_f1']:>10.4f}")
    table = "\n".join(lines) + "\n"
    (out / "ablation.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    return 0


def cmd_gen_synth(args) -> int:
    from .corpus import SynthConfig, generate_synthetic

    cfg = SynthConfig(depth=args.depth, branching=args.branching,
                      vocab_size=args.vocab_size, docs_per_leaf=args.docs_per_leaf,
                      noise_rate=args.noise_rate, signal_strength=args.signal_strength,
                      seed=args.seed if args.seed is not None else 0)
    result = generate_synthetic(cfg, args.out)
    sizes = ", ".join(f"{k}={v}" for k, v in result.split_sizes.items())
    print(f"wrote {result.n_labels} labels ({result.n_leaves} leaves) and "
          f"{sizes} under {result.out_dir}")
    return 0


def cmd_stats(args) -> int:
    from .corpus import load_splits
    from .taxonomy import dataset_stats

    h, splits = load_splits(args.data)
    print(f"labels {len(h)}  depth {h.max_depth}")
    print(f"{'split':<8}{'samples':>9}{'avg_labels':>12}{'avg_parent':>12}{'avg_leaf':>10}")
    for name, samples in splits.items():
        st = dataset_stats(h, [s.labels for s in samples])
        print(f"{name:<8}{st.n_samples:>9}{st.avg_labels:>12.2f}"
              f"{st.avg_parent_labels:>12.2f}{st.avg_leaf_labels:>10.2f}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _apply_global_flags(args)
    from .errors import TaxseqError
    try:
        return args.func(args)
    except TaxseqError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
