"""Metrics and analysis harnesses.

F1 with label exclusion drops excluded classes from both the gold and
predicted axes (scored on the remaining submatrix). The ablation
harness trains named model variants over paired seeds: each seed gives
every variant the same initial weights and the same data order, so
differences are attributable to the variant alone.
"""

import csv
import time
from dataclasses import dataclass

import numpy as np
from scipy import stats as _scipy_stats

from .errors import ContractError, TrainingDivergedError
from .knowledge import DEFAULT_RELATIONS, RELATIONS
from .numerics import RngStream

RELATION_SETS = {
    "3-type": DEFAULT_RELATIONS,
    "5-type": DEFAULT_RELATIONS + ("sEffect", "oEffect"),
    "9-type": RELATIONS,
}


def confusion_matrix(golds, preds, n_labels):
    """Square count matrix indexed (gold, predicted)."""
    golds = np.asarray(golds, dtype=np.int64)
    preds = np.asarray(preds, dtype=np.int64)
    if golds.shape != preds.shape:
        raise ContractError("gold/pred length mismatch")
    if golds.size and (golds.min() < 0 or golds.max() >= n_labels):
        raise ContractError("gold label out of range")
    if preds.size and (preds.min() < 0 or preds.max() >= n_labels):
        raise ContractError("predicted label out of range")
    cm = np.zeros((n_labels, n_labels), dtype=np.int64)
    np.add.at(cm, (golds, preds), 1)
    return cm


def _safe_div(num, den):
    return num / den if den > 0 else 0.0


def f1_scores(cm, exclude=()):
    """Macro, micro, and support-weighted F1 over non-excluded classes.

    Excluded classes are removed from both axes, so predictions falling
    into an excluded column do not count against any kept class. The
    0/0 cases all resolve to 0.
    """
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ContractError("confusion matrix must be square")
    if (cm < 0).any():
        raise ContractError("confusion matrix has negative counts")
    n = cm.shape[0]
    exclude = set(int(e) for e in exclude)
    keep = [i for i in range(n) if i not in exclude]
    if not keep:
        raise ContractError("all classes excluded")
    sub = cm[np.ix_(keep, keep)].astype(np.float64)
    per_class = {}
    support = {}
    f1s = []
    weights = []
    for pos, label in enumerate(keep):
        tp = sub[pos, pos]
        p = _safe_div(tp, sub[:, pos].sum())
        r = _safe_div(tp, sub[pos, :].sum())
        f1 = _safe_div(2 * p * r, p + r)
        per_class[label] = f1
        support[label] = int(sub[pos, :].sum())
        f1s.append(f1)
        weights.append(sub[pos, :].sum())
    total = sub.sum()
    micro = _safe_div(np.trace(sub), total)  # pooled P == pooled R here
    weights = np.asarray(weights)
    weighted = (
        float(np.dot(f1s, weights) / weights.sum()) if weights.sum() > 0 else 0.0
    )
    return {
        "macro": float(np.mean(f1s)),
        "micro": float(micro),
        "weighted": weighted,
        "per_class": per_class,
        "support": support,
    }


def accuracy(cm):
    cm = np.asarray(cm, dtype=np.float64)
    return _safe_div(np.trace(cm), cm.sum())


# ------------------------------------------------------- rank correlation


def rankdata_average(values):
    """Ranks starting at 1; ties get the average of their positions."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.shape[0], dtype=np.float64)
    i = 0
    while i < values.shape[0]:
        j = i
        while j + 1 < values.shape[0] and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg = 0.5 * (i + j) + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    return ranks


def spearman(xs, ys):
    """Rank correlation with average-rank ties; two-sided p-value from
    the large-sample t approximation."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ContractError("inputs must be equal-length vectors")
    n = xs.shape[0]
    if n < 3:
        raise ContractError("need at least 3 observations")
    if np.all(xs == xs[0]) or np.all(ys == ys[0]):
        raise ContractError("constant similarity list; correlation undefined")
    rx = rankdata_average(xs)
    ry = rankdata_average(ys)
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    rho = float(np.dot(rx, ry) / np.sqrt(np.dot(rx, rx) * np.dot(ry, ry)))
    rho = max(-1.0, min(1.0, rho))
    if abs(rho) == 1.0:
        return rho, 0.0
    t = rho * np.sqrt((n - 2) / (1.0 - rho * rho))
    p = 2.0 * float(_scipy_stats.t.sf(abs(t), n - 2))
    return rho, p


def one_hot(label_ids, n_labels):
    ids = np.asarray(label_ids, dtype=np.int64)
    out = np.zeros((ids.shape[0], n_labels))
    out[np.arange(ids.shape[0]), ids] = 1.0
    return out


def _cosine_rows(a, b):
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def spearman_topic_emotion(records, n_pairs=5000, seed=0):
    """Correlation between topic similarity and emotion similarity.

    records: list of (topic vector, emotion vector) pairs, one per
    utterance. Emotion vectors are one-hot gold labels by default
    (callers may pass learned embeddings instead). Samples n_pairs
    utterance pairs, computes cosine similarity within each pair for
    both vector kinds, and rank-correlates the two lists.
    """
    if len(records) < 10:
        raise ContractError("need at least 10 records")
    rng = RngStream(seed).split("topic-emotion-pairs")
    n = len(records)
    zsims = []
    esims = []
    for _ in range(int(n_pairs)):
        i = int(rng.integers(0, n))
        j = int(rng.integers(0, n - 1))
        if j >= i:
            j += 1  # distinct pair
        zi, ei = records[i]
        zj, ej = records[j]
        zsims.append(_cosine_rows(np.asarray(zi), np.asarray(zj)))
        esims.append(_cosine_rows(np.asarray(ei), np.asarray(ej)))
    return spearman(zsims, esims)


def topic_emotion_records(feature_bundles, n_labels):
    """Flatten dialogue features into (z, one-hot emotion) records."""
    records = []
    for bundle in feature_bundles:
        hot = one_hot(bundle.label_ids, n_labels)
        for i in range(bundle.n):
            records.append((bundle.z[i].copy(), hot[i]))
    return records


# ------------------------------------------------------- ablation harness


@dataclass
class AblationPlan:
    variants: tuple = ("full", "minus_topics", "minus_kb")
    seeds: tuple = (0, 1, 2, 3, 4)

    def validate(self):
        if len(set(self.variants)) != len(self.variants):
            raise ContractError("duplicate variants in plan")
        if not self.seeds:
            raise ContractError("need at least one seed")
        if not self.variants:
            raise ContractError("need at least one variant")


def run_ablations(
    plan, bundles, base_cfg, train_cfg, exclude_ids=(), progress=None
):
    """Train each variant per seed and score dev/test.

    bundles: {"train": [...], "dev": [...], "test": [...]} of dialogue
    features (shared across variants; the frozen encoder and topic
    model are computed once upstream). The random stream per run
    depends on the seed only, so every variant sees identical initial
    parameters and data order for a given seed. A diverged run is
    recorded with empty metric cells and the sweep continues.
    """
    from .classifier import EmotionClassifier, train_classifier, variant_config
    from .nn import ParamStore

    plan.validate()
    rows = []
    for variant in plan.variants:
        cfg = variant_config(base_cfg, variant)
        for seed in plan.seeds:
            rng = RngStream(seed)
            store = ParamStore()
            model = EmotionClassifier(store, cfg, rng.split("clf-init"))
            start = time.perf_counter()
            try:
                train_classifier(
                    model,
                    store,
                    bundles["train"],
                    bundles["dev"],
                    train_cfg,
                    rng.split("clf-train"),
                    exclude_ids,
                )
                failed = False
            except TrainingDivergedError:
                failed = True
            wall = time.perf_counter() - start
            for split in ("dev", "test"):
                row = {
                    "variant": variant,
                    "seed": seed,
                    "split": split,
                    "macro_f1": None,
                    "micro_f1": None,
                    "weighted_f1": None,
                    "wall_clock_seconds": wall,
                }
                if not failed:
                    golds = []
                    preds = []
                    for bundle in bundles[split]:
                        golds.extend(bundle.label_ids.tolist())
                        preds.extend(model.predict(bundle).tolist())
                    cm = confusion_matrix(golds, preds, cfg.n_labels)
                    scores = f1_scores(cm, exclude=exclude_ids)
                    row["macro_f1"] = scores["macro"]
                    row["micro_f1"] = scores["micro"]
                    row["weighted_f1"] = scores["weighted"]
                rows.append(row)
            if progress is not None:
                progress(variant, seed, wall)
    return rows


CSV_COLUMNS = (
    "variant",
    "seed",
    "split",
    "macro_f1",
    "micro_f1",
    "weighted_f1",
    "wall_clock_seconds",
)


def write_ablation_csv(rows, path):
    """One row per (variant, seed, split); failures leave metrics empty."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            out = []
            for col in CSV_COLUMNS:
                val = row[col]
                if val is None:
                    out.append("")
                elif isinstance(val, float):
                    out.append("%.6f" % val)
                else:
                    out.append(str(val))
            writer.writerow(out)


def summarize_ablations(rows, split="test", metric="micro_f1"):
    """Mean and stddev per variant on one split, skipping failed runs."""
    by_variant = {}
    for row in rows:
        if row["split"] != split or row[metric] is None:
            continue
        by_variant.setdefault(row["variant"], []).append(row[metric])
    out = {}
    for variant, vals in by_variant.items():
        arr = np.asarray(vals)
        out[variant] = (float(arr.mean()), float(arr.std()))
    return out


def attention_report(model, bundle, utterance_index):
    """Knowledge audit for one utterance: each candidate phrase with
    its fusion weight, per relation, plus the chosen source."""
    if not 0 <= utterance_index < bundle.n:
        raise ContractError(
            "utterance index %d out of range [0, %d)"
            % (utterance_index, bundle.n)
        )
    return model.explain(bundle)[utterance_index]


def write_topic_tsv(path, feature_bundles, label_names):
    """Topic vectors with dialogue/utterance ids and gold labels, for
    external plotting."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("dialogue_id\tutterance_index\tlabel\t")
        f.write("\t".join("z%d" % i for i in range(feature_bundles[0].z.shape[1])))
        f.write("\n")
        for bundle in feature_bundles:
            for i in range(bundle.n):
                vals = "\t".join("%.8f" % v for v in bundle.z[i])
                f.write(
                    "%s\t%d\t%s\t%s\n"
                    % (bundle.id, i, label_names[int(bundle.label_ids[i])], vals)
                )
