"""Command-line pipeline: generate data, train, evaluate, analyze.

One binary, subcommand style. Settings come from built-in defaults,
then an optional key=value config file, then repeated --set overrides,
then the TODKAT_SEED environment variable (strongest, seed only). The
resolved config, the seed, and content hashes of every input file are
echoed to a per-command manifest in the output directory, so a run can
be reproduced exactly. A lock file guards the output directory; no
command ever mutates its inputs.
"""

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from importlib import resources as _importlib_resources

import numpy as np

from . import data as data_mod
from . import evaluation as eval_mod
from .classifier import ClfConfig, ClfTrainConfig, EmotionClassifier, train_classifier
from .errors import ContractError, DataFormatError, TodkatError
from .features import FeatureExtractor
from .knowledge import (
    GenConfig,
    GenTrainConfig,
    RELATIONS,
    Seq2SeqGenerator,
    canonical_relation,
    load_kb,
    relation_marker,
    retrieve_topk,
    train_generator,
)
from .lm import LMConfig, SplitLM, Vocab, build_vocab
from .nn import ParamStore
from .numerics import RngStream, load_params, save_params
from .topicvae import TopicTrainConfig, TopicVAE, extract_topics, train_topic_model

DEFAULTS = {
    "seed": 0,
    # synthetic corpus
    "n_topics": 2,
    "n_dialogues": 200,
    "min_utterances": 4,
    "max_utterances": 8,
    "rho": 0.9,
    "words_per_topic": 40,
    "kb_head_rate": 0.75,
    "labels": "happiness,sadness,neutral",
    "signatures": "happiness,sadness",
    "splits": "0.7,0.15,0.15",
    # encoder / topic model
    "d_model": 64,
    "n_heads": 4,
    "n_lower": 2,
    "n_upper": 2,
    "d_ff": 128,
    "d_z": 16,
    "vae_hidden": 64,
    "max_tokens": 32,
    "max_dialogue_length": 36,
    "vocab_size": 2000,
    "topic_epochs": 3,
    "topic_lr": 5e-5,
    "beta_max": 1.0,
    "kl_warmup_epochs": 1.0,
    "word_dropout": 0.0,
    "memory_dropout": 0.0,
    "topic_select": "spearman",
    "select_every": 100,
    "select_pairs": 2000,
    # knowledge
    "k": 5,
    "tau": 0.5,
    "relations": "xIntent,xReact,oReact",
    "gen_epochs": 60,
    "gen_lr": 1e-3,
    # classifier
    "clf_epochs": 12,
    "clf_lr": 1e-3,
    "patience": 3,
    "label_dropout": 0.5,
    "exclude_labels": "",
    # ablation / analysis
    "variants": "full,minus_topics,minus_kb",
    "seeds": "0,1,2,3,4",
    "n_pairs": 5000,
}


def bundled_kb_path():
    return str(
        _importlib_resources.files("todkat.resources").joinpath("toy_kb.jsonl")
    )


# ------------------------------------------------------------- run config


def parse_config_file(path):
    out = {}
    with open(path, encoding="utf-8") as f:
        for ln, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataFormatError(
                    "%s:%d: expected key=value" % (path, ln)
                )
            key, val = line.split("=", 1)
            out[key.strip()] = val.strip()
    return out


def _coerce(key, raw):
    default = DEFAULTS[key]
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return str(raw)


def resolve_config(args):
    cfg = dict(DEFAULTS)
    layers = []
    if getattr(args, "config", None):
        layers.append(parse_config_file(args.config))
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ContractError("--set expects key=value, got %r" % item)
        key, val = item.split("=", 1)
        overrides[key.strip()] = val.strip()
    layers.append(overrides)
    for layer in layers:
        for key, raw in layer.items():
            if key not in DEFAULTS:
                raise ContractError("unknown config key %r" % key)
            cfg[key] = _coerce(key, raw)
    env_seed = os.environ.get("TODKAT_SEED")
    if env_seed is not None:
        cfg["seed"] = int(env_seed)
    return cfg


def _names(csv_text):
    return tuple(x.strip() for x in csv_text.split(",") if x.strip())


def _relation_list(cfg):
    return tuple(canonical_relation(r) for r in _names(cfg["relations"]))


def _exclude_ids(cfg, labels):
    out = []
    for name in _names(cfg["exclude_labels"]):
        if name not in labels:
            raise ContractError("exclude label %r not in label set" % name)
        out.append(labels.index(name))
    return tuple(out)


# ----------------------------------------------------------- run directory


class RunLock:
    """Exclusive ownership of an output directory for one command."""

    def __init__(self, out_dir):
        self.path = os.path.join(out_dir, ".todkat.lock")
        self._fd = None

    def __enter__(self):
        try:
            self._fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ContractError(
                "output directory is locked by another run (%s)" % self.path
            ) from None
        os.write(self._fd, str(os.getpid()).encode("ascii"))
        return self

    def __exit__(self, *exc):
        os.close(self._fd)
        os.unlink(self.path)
        return False


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command, cfg, input_paths):
    manifest = {
        "command": command,
        "config": cfg,
        "seed": cfg["seed"],
        "inputs": {p: sha256_file(p) for p in input_paths},
    }
    path = os.path.join(out_dir, "manifest-%s.json" % command)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _ensure_dirs(out_dir, *subs):
    os.makedirs(out_dir, exist_ok=True)
    for sub in subs:
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)


# ------------------------------------------------- shared loading helpers


def _corpus_path(args, split):
    base = args.data_dir or args.out_dir
    return os.path.join(base, "%s.jsonl" % split)


def _load_split(args, cfg, split):
    return data_mod.load_corpus(_corpus_path(args, split), _names(cfg["labels"]))


def _ckpt(args, name):
    base = getattr(args, "model_dir", None) or args.out_dir
    return os.path.join(base, "checkpoints", name)


def _vocab_path(args):
    base = getattr(args, "model_dir", None) or args.out_dir
    return os.path.join(base, "vocab.txt")


def _build_topic_stack(cfg, vocab, rng):
    store = ParamStore()
    lm_cfg = LMConfig(
        vocab_size=len(vocab),
        d_model=cfg["d_model"],
        n_heads=cfg["n_heads"],
        n_lower=cfg["n_lower"],
        n_upper=cfg["n_upper"],
        d_ff=cfg["d_ff"],
        d_z=cfg["d_z"],
        max_tokens=cfg["max_tokens"],
    )
    lm = SplitLM(store, lm_cfg, rng.split("lm"))
    vae = TopicVAE(
        store,
        cfg["d_model"],
        cfg["d_z"],
        cfg["vae_hidden"],
        cfg["n_heads"],
        rng.split("vae"),
    )
    return store, lm, vae


def _build_generator(cfg, vocab, rng):
    store = ParamStore()
    gen = Seq2SeqGenerator(store, GenConfig(vocab_size=len(vocab)), rng.split("gen"))
    return store, gen


def _load_topic_stack(args, cfg):
    """Vocab, frozen encoder+topic model, and generator from disk."""
    vocab = Vocab.load(_vocab_path(args))
    rng = RngStream(cfg["seed"])
    store, lm, vae = _build_topic_stack(cfg, vocab, rng)
    store.load_arrays(load_params(_ckpt(args, "topic.ckpt")), strict=True)
    gen_store, gen = _build_generator(cfg, vocab, rng)
    gen_store.load_arrays(load_params(_ckpt(args, "generator.ckpt")), strict=True)
    return vocab, store, lm, vae, gen


def _encode_splits(cfg, vocab, splits):
    labels = _names(cfg["labels"])
    return {
        name: data_mod.encode_dialogues(
            dialogues,
            vocab,
            labels,
            cfg["max_tokens"],
            cfg["max_dialogue_length"],
        )
        for name, dialogues in splits.items()
    }


def _extract_features(args, cfg, lm, vae, store, vocab, gen, splits, enc, relations):
    kb = load_kb(args.kb) if relations else None
    fx = FeatureExtractor(
        lm, vae, store, vocab, kb, gen if relations else None, relations, cfg["k"]
    )
    return {
        name: fx.extract_corpus(enc[name], splits[name]) for name in enc
    }, kb


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, cfg):
    _ensure_dirs(args.out_dir)
    labels = _names(cfg["labels"])
    signatures = _names(cfg["signatures"])
    splits = tuple(float(x) for x in _names(cfg["splits"]))
    kb = load_kb(args.kb)
    heads = kb.heads()
    chunks = np.array_split(np.asarray(heads, dtype=object), cfg["n_topics"])
    kb_heads = tuple(tuple(str(h) for h in chunk) for chunk in chunks)
    sc = data_mod.SynthConfig(
        n_topics=cfg["n_topics"],
        n_dialogues=cfg["n_dialogues"],
        min_utterances=cfg["min_utterances"],
        max_utterances=cfg["max_utterances"],
        rho=cfg["rho"],
        words_per_topic=cfg["words_per_topic"],
        kb_head_rate=cfg["kb_head_rate"],
        labels=labels,
        signatures=signatures,
        kb_heads=kb_heads,
        splits=splits,
    )
    sc.validate()
    corpus = data_mod.generate_corpus(sc, RngStream(cfg["seed"]).split("data"))
    for name, dialogues in corpus.items():
        data_mod.save_corpus(dialogues, os.path.join(args.out_dir, "%s.jsonl" % name))
    write_manifest(args.out_dir, "gen-data", cfg, [args.kb])
    print(
        json.dumps(
            {"command": "gen-data", "dialogues": {k: len(v) for k, v in corpus.items()}}
        )
    )


def cmd_train_topic(args, cfg):
    _ensure_dirs(args.out_dir, "checkpoints", "metrics")
    train = _load_split(args, cfg, "train")
    dev = _load_split(args, cfg, "dev")
    kb = load_kb(args.kb)
    markers = [relation_marker(r) for r in RELATIONS]
    texts = [u for d in train for u in d.utterances]
    vocab = build_vocab(
        texts + kb.texts(), max_size=cfg["vocab_size"], extra_tokens=markers
    )
    vocab.save(os.path.join(args.out_dir, "vocab.txt"))
    rng = RngStream(cfg["seed"])
    store, lm, vae = _build_topic_stack(cfg, vocab, rng)
    enc = _encode_splits(cfg, vocab, {"train": train, "dev": dev})
    labels = _names(cfg["labels"])
    if cfg["topic_select"] not in ("spearman", "none"):
        raise ContractError("topic_select must be spearman or none")

    def dev_rho():
        # checkpoint score: how well distances between latent topic
        # vectors mirror distances between emotion distributions on dev
        records = []
        for e in enc["dev"]:
            z, _ = extract_topics(lm, vae, e.id_rows)
            hot = eval_mod.one_hot(e.label_ids, len(labels))
            records.extend((z[i], hot[i]) for i in range(len(e.id_rows)))
        rho, _ = eval_mod.spearman_topic_emotion(
            records, n_pairs=cfg["select_pairs"], seed=cfg["seed"]
        )
        return rho

    history = train_topic_model(
        lm,
        vae,
        store,
        [e.id_rows for e in enc["train"]],
        [e.id_rows for e in enc["dev"]],
        TopicTrainConfig(
            epochs=cfg["topic_epochs"],
            lr=cfg["topic_lr"],
            beta_max=cfg["beta_max"],
            kl_warmup_epochs=cfg["kl_warmup_epochs"],
            word_dropout=cfg["word_dropout"],
            memory_dropout=cfg["memory_dropout"],
            select_every=cfg["select_every"],
        ),
        rng.split("topic"),
        selector=dev_rho if cfg["topic_select"] == "spearman" else None,
    )
    save_params(_ckpt(args, "topic.ckpt"), store.arrays())
    gen_store, gen = _build_generator(cfg, vocab, rng)
    gen_history = train_generator(
        gen,
        gen_store,
        kb,
        vocab,
        GenTrainConfig(epochs=cfg["gen_epochs"], lr=cfg["gen_lr"]),
        rng.split("gtrain"),
    )
    save_params(_ckpt(args, "generator.ckpt"), gen_store.arrays())
    with open(
        os.path.join(args.out_dir, "metrics", "topic_history.json"),
        "w",
        encoding="utf-8",
    ) as f:
        json.dump(
            {"topic": history, "generator_nll": gen_history},
            f,
            indent=2,
            sort_keys=True,
        )
        f.write("\n")
    write_manifest(
        args.out_dir,
        "train-topic",
        cfg,
        [_corpus_path(args, "train"), _corpus_path(args, "dev"), args.kb],
    )
    summary = {
        "command": "train-topic",
        "final_train_nelbo": history["train_nelbo"][-1],
        "final_generator_nll": gen_history[-1],
    }
    if history.get("best_select") is not None:
        summary["best_select"] = history["best_select"]
    print(json.dumps(summary))


def _clf_settings(args, cfg):
    labels = _names(cfg["labels"])
    relations = _relation_list(cfg)
    use_kb = not args.no_kb
    clf_cfg = ClfConfig(
        n_labels=len(labels),
        d_model=cfg["d_model"],
        n_heads=cfg["n_heads"],
        d_ff=cfg["d_ff"],
        d_z=cfg["d_z"],
        max_dialogue_length=cfg["max_dialogue_length"],
        relations=relations if use_kb else (),
        k=cfg["k"],
        tau=cfg["tau"],
        use_topics=not args.no_topics,
        use_kb=use_kb,
        force_source=None if args.source == "pointer" else args.source,
    )
    return labels, relations, clf_cfg


def cmd_train_clf(args, cfg):
    _ensure_dirs(args.out_dir, "checkpoints", "metrics")
    labels, relations, clf_cfg = _clf_settings(args, cfg)
    splits = {"train": _load_split(args, cfg, "train"), "dev": _load_split(args, cfg, "dev")}
    vocab, store, lm, vae, gen = _load_topic_stack(args, cfg)
    enc = _encode_splits(cfg, vocab, splits)
    feats, _ = _extract_features(
        args, cfg, lm, vae, store, vocab, gen, splits, enc, clf_cfg.relations
    )
    rng = RngStream(cfg["seed"])
    clf_store = ParamStore()
    model = EmotionClassifier(clf_store, clf_cfg, rng.split("clf-init"))
    history = train_classifier(
        model,
        clf_store,
        feats["train"],
        feats["dev"],
        ClfTrainConfig(
            epochs=cfg["clf_epochs"],
            lr=cfg["clf_lr"],
            patience=cfg["patience"],
            label_dropout=cfg["label_dropout"],
        ),
        rng.split("clf-train"),
        _exclude_ids(cfg, labels),
    )
    save_params(_ckpt(args, "classifier.ckpt"), clf_store.arrays())
    spec = {
        "labels": list(labels),
        "relations": list(clf_cfg.relations),
        "k": clf_cfg.k,
        "tau": clf_cfg.tau,
        "use_topics": clf_cfg.use_topics,
        "use_kb": clf_cfg.use_kb,
        "force_source": clf_cfg.force_source,
    }
    with open(_ckpt(args, "classifier.json"), "w", encoding="utf-8") as f:
        json.dump(spec, f, indent=2, sort_keys=True)
        f.write("\n")
    inputs = [
        _corpus_path(args, "train"),
        _corpus_path(args, "dev"),
        _ckpt(args, "topic.ckpt"),
        _ckpt(args, "generator.ckpt"),
    ]
    if clf_cfg.use_kb:
        inputs.append(args.kb)
    write_manifest(args.out_dir, "train-clf", cfg, inputs)
    print(
        json.dumps(
            {
                "command": "train-clf",
                "epochs_run": len(history["dev_micro_f1"]),
                "best_dev_micro_f1": max(history["dev_micro_f1"]),
            }
        )
    )


def _load_classifier(args, cfg):
    with open(_ckpt(args, "classifier.json"), encoding="utf-8") as f:
        spec = json.load(f)
    clf_cfg = ClfConfig(
        n_labels=len(spec["labels"]),
        d_model=cfg["d_model"],
        n_heads=cfg["n_heads"],
        d_ff=cfg["d_ff"],
        d_z=cfg["d_z"],
        max_dialogue_length=cfg["max_dialogue_length"],
        relations=tuple(spec["relations"]),
        k=spec["k"],
        tau=spec["tau"],
        use_topics=spec["use_topics"],
        use_kb=spec["use_kb"],
        force_source=spec["force_source"],
    )
    clf_store = ParamStore()
    model = EmotionClassifier(
        clf_store, clf_cfg, RngStream(cfg["seed"]).split("clf-init")
    )
    clf_store.load_arrays(load_params(_ckpt(args, "classifier.ckpt")), strict=True)
    return spec, clf_cfg, model


def cmd_eval(args, cfg):
    _ensure_dirs(args.out_dir, "metrics", "predictions")
    spec, clf_cfg, model = _load_classifier(args, cfg)
    labels = tuple(spec["labels"])
    dialogues = _load_split(args, cfg, args.split)
    vocab, store, lm, vae, gen = _load_topic_stack(args, cfg)
    splits = {args.split: dialogues}
    enc = _encode_splits(cfg, vocab, splits)
    feats, _ = _extract_features(
        args, cfg, lm, vae, store, vocab, gen, splits, enc, clf_cfg.relations
    )
    golds = []
    preds = []
    pred_path = os.path.join(args.out_dir, "predictions", "%s.jsonl" % args.split)
    with open(pred_path, "w", encoding="utf-8") as f:
        for bundle in feats[args.split]:
            p = model.predict(bundle)
            golds.extend(bundle.label_ids.tolist())
            preds.extend(p.tolist())
            for i in range(bundle.n):
                f.write(
                    json.dumps(
                        {
                            "dialogue_id": bundle.id,
                            "utterance_index": i,
                            "gold": labels[int(bundle.label_ids[i])],
                            "predicted": labels[int(p[i])],
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )
    exclude = _exclude_ids(cfg, list(labels))
    cm = eval_mod.confusion_matrix(golds, preds, len(labels))
    scores = eval_mod.f1_scores(cm, exclude=exclude)
    metrics_path = os.path.join(args.out_dir, "metrics", "metrics.csv")
    with open(metrics_path, "w", encoding="utf-8") as f:
        f.write("metric,value\n")
        f.write("split,%s\n" % args.split)
        for key in ("macro", "micro", "weighted"):
            f.write("%s_f1,%.6f\n" % (key, scores[key]))
        f.write("accuracy,%.6f\n" % eval_mod.accuracy(cm))
        f.write("n_utterances,%d\n" % len(golds))
    inputs = [
        _corpus_path(args, args.split),
        _ckpt(args, "topic.ckpt"),
        _ckpt(args, "generator.ckpt"),
        _ckpt(args, "classifier.ckpt"),
    ]
    if clf_cfg.use_kb:
        inputs.append(args.kb)
    write_manifest(args.out_dir, "eval", cfg, inputs)
    print(
        json.dumps(
            {
                "command": "eval",
                "split": args.split,
                "macro_f1": scores["macro"],
                "micro_f1": scores["micro"],
                "weighted_f1": scores["weighted"],
            }
        )
    )


def cmd_retrieve(args, cfg):
    _ensure_dirs(args.out_dir)
    vocab, store, lm, vae, gen = _load_topic_stack(args, cfg)
    kb = load_kb(args.kb)
    relations = _relation_list(cfg)
    fx = FeatureExtractor(lm, vae, store, vocab, kb, gen, relations, cfg["k"])
    out = {"utterance": args.text, "relations": {}}
    for rel in relations:
        picked = retrieve_topk(kb, rel, fx.embed_text(args.text), fx.embed_text, cfg["k"])
        generated = gen.generate(args.text, rel, vocab, cfg["k"])
        out["relations"][rel] = {
            "retrieved": [
                {"head": e.head, "tail": e.tail} for _, e in picked
            ],
            "generated": [
                {"tail": text, "logprob": lp} for text, lp in generated
            ],
        }
    path = os.path.join(args.out_dir, "knowledge.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(out, f, indent=2, sort_keys=True)
        f.write("\n")
    write_manifest(args.out_dir, "retrieve", cfg, [args.kb])
    print(json.dumps({"command": "retrieve", "out": path}))


def cmd_analyze_topics(args, cfg):
    _ensure_dirs(args.out_dir, "metrics")
    labels = _names(cfg["labels"])
    dialogues = _load_split(args, cfg, args.split)
    vocab, store, lm, vae, gen = _load_topic_stack(args, cfg)
    splits = {args.split: dialogues}
    enc = _encode_splits(cfg, vocab, splits)
    fx = FeatureExtractor(lm, vae, store, vocab)
    feats = fx.extract_corpus(enc[args.split])
    tsv_path = os.path.join(args.out_dir, "topics.tsv")
    eval_mod.write_topic_tsv(tsv_path, feats, labels)
    records = eval_mod.topic_emotion_records(feats, len(labels))
    rho, p = eval_mod.spearman_topic_emotion(
        records, n_pairs=cfg["n_pairs"], seed=cfg["seed"]
    )
    report = {"rho": rho, "p_value": p, "n_pairs": cfg["n_pairs"], "n_records": len(records)}
    with open(
        os.path.join(args.out_dir, "metrics", "spearman.json"), "w", encoding="utf-8"
    ) as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    write_manifest(
        args.out_dir,
        "analyze-topics",
        cfg,
        [_corpus_path(args, args.split), _ckpt(args, "topic.ckpt")],
    )
    print(json.dumps({"command": "analyze-topics", **report}))


def cmd_ablate(args, cfg):
    _ensure_dirs(args.out_dir, "metrics")
    labels = _names(cfg["labels"])
    splits = {
        name: _load_split(args, cfg, name) for name in ("train", "dev", "test")
    }
    vocab, store, lm, vae, gen = _load_topic_stack(args, cfg)
    enc = _encode_splits(cfg, vocab, splits)
    seeds = tuple(int(s) for s in _names(cfg["seeds"]))
    exclude = _exclude_ids(cfg, labels)
    train_cfg = ClfTrainConfig(
        epochs=cfg["clf_epochs"],
        lr=cfg["clf_lr"],
        patience=cfg["patience"],
        label_dropout=cfg["label_dropout"],
    )
    base = ClfConfig(
        n_labels=len(labels),
        d_model=cfg["d_model"],
        n_heads=cfg["n_heads"],
        d_ff=cfg["d_ff"],
        d_z=cfg["d_z"],
        max_dialogue_length=cfg["max_dialogue_length"],
        relations=_relation_list(cfg),
        k=cfg["k"],
        tau=cfg["tau"],
    )
    rows = []
    if args.sweep == "relations":
        for set_name, relations in eval_mod.RELATION_SETS.items():
            feats, _ = _extract_features(
                args, cfg, lm, vae, store, vocab, gen, splits, enc, relations
            )
            sub = eval_mod.run_ablations(
                eval_mod.AblationPlan(("full",), seeds),
                feats,
                dataclasses.replace(base, relations=relations),
                train_cfg,
                exclude,
            )
            for row in sub:
                row["variant"] = set_name
            rows.extend(sub)
    else:
        feats, _ = _extract_features(
            args, cfg, lm, vae, store, vocab, gen, splits, enc, base.relations
        )
        plan = eval_mod.AblationPlan(_names(cfg["variants"]), seeds)
        rows = eval_mod.run_ablations(plan, feats, base, train_cfg, exclude)
    csv_path = os.path.join(args.out_dir, "metrics", "ablations.csv")
    eval_mod.write_ablation_csv(rows, csv_path)
    summary = eval_mod.summarize_ablations(rows)
    inputs = [_corpus_path(args, s) for s in ("train", "dev", "test")]
    inputs += [_ckpt(args, "topic.ckpt"), _ckpt(args, "generator.ckpt"), args.kb]
    write_manifest(args.out_dir, "ablate", cfg, inputs)
    print(
        json.dumps(
            {
                "command": "ablate",
                "out": csv_path,
                "test_micro_f1_mean": {k: v[0] for k, v in summary.items()},
            }
        )
    )


# ------------------------------------------------------------------ main


def _add_common(sub, model_dir=True):
    sub.add_argument("--out-dir", required=True, help="output directory")
    sub.add_argument("--config", help="key=value config file")
    sub.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="override one config value (repeatable)",
    )
    sub.add_argument(
        "--kb", default=bundled_kb_path(), help="knowledge base JSONL"
    )
    sub.add_argument(
        "--data-dir", help="directory with train/dev/test.jsonl (default: out dir)"
    )
    if model_dir:
        sub.add_argument(
            "--model-dir",
            help="directory with vocab.txt and checkpoints/ (default: out dir)",
        )


def build_parser():
    parser = argparse.ArgumentParser(
        prog="todkat",
        description="topic-and-knowledge dialogue emotion pipeline",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen-data", help="write a synthetic dialogue corpus")
    _add_common(p, model_dir=False)
    p.set_defaults(fn=cmd_gen_data)

    p = subs.add_parser("train-topic", help="train the encoder, topic model, and generator")
    _add_common(p, model_dir=False)
    p.set_defaults(fn=cmd_train_topic)

    p = subs.add_parser("train-clf", help="train the emotion classifier")
    _add_common(p)
    p.add_argument("--no-topics", action="store_true", help="zero out topic vectors")
    p.add_argument("--no-kb", action="store_true", help="drop knowledge features")
    p.add_argument(
        "--source",
        choices=("retrieved", "generated", "pointer"),
        default="pointer",
        help="knowledge source (pointer = learned choice)",
    )
    p.set_defaults(fn=cmd_train_clf)

    p = subs.add_parser("eval", help="score a trained classifier on one split")
    _add_common(p)
    p.add_argument("--split", default="test", choices=("train", "dev", "test"))
    p.set_defaults(fn=cmd_eval)

    p = subs.add_parser("retrieve", help="dump knowledge for one utterance")
    _add_common(p)
    p.add_argument("--text", required=True, help="utterance text")
    p.set_defaults(fn=cmd_retrieve)

    p = subs.add_parser("analyze-topics", help="export topic vectors and correlation")
    _add_common(p)
    p.add_argument("--split", default="train", choices=("train", "dev", "test"))
    p.set_defaults(fn=cmd_analyze_topics)

    p = subs.add_parser("ablate", help="train and score model variants")
    _add_common(p)
    p.add_argument(
        "--sweep",
        choices=("variants", "relations"),
        default="variants",
        help="sweep named variants or relation-set sizes",
    )
    p.set_defaults(fn=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        os.makedirs(args.out_dir, exist_ok=True)
        with RunLock(args.out_dir):
            args.fn(args, cfg)
    except TodkatError as exc:
        sys.stderr.write(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n"
        )
        return 1
    except OSError as exc:
        sys.stderr.write(
            json.dumps({"error": "OSError", "message": str(exc)}) + "\n"
        )
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
