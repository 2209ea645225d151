"""Zero-shot classification, slide retrieval and cross-modal retrieval.

All rankings use cosine similarity in the joint space.  Ties are broken in
favour of the lower index everywhere, so every metric is deterministic.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from hwsi.encoders import EncoderConfig, encode_batch, encode_text_batch
from hwsi.errors import ContractError
from hwsi.numerics import ParamSet
from hwsi.projectors import project
from hwsi.spf import SpfConfig, spf_sample

RECALL_KS = (1, 3, 5, 10)


@dataclass
class EvalReport:
    task: str
    metrics: dict
    counts: dict = field(default_factory=dict)
    seed: int = 0


def _unit_rows(x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = np.sqrt((x * x).sum(axis=1, keepdims=True))
    return np.where(n == 0.0, 0.0, x / np.where(n == 0.0, 1.0, n))


def cosine_matrix(a, b) -> np.ndarray:
    return _unit_rows(a) @ _unit_rows(b).T


def rank_order(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score, ties to the lower index."""
    return np.lexsort((np.arange(scores.size), -scores))


def _partner_rank(scores: np.ndarray, target: int) -> int:
    s = scores[target]
    return int(np.sum(scores > s) + np.sum(scores[:target] == s))


# -- metrics ------------------------------------------------------------------------

def per_class_counts(y_true, y_pred, classes: int) -> np.ndarray:
    conf = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(conf, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return conf


def balanced_accuracy(y_true, y_pred, classes: int) -> float:
    """Mean per-class recall over classes present in ``y_true``."""
    conf = per_class_counts(y_true, y_pred, classes)
    support = conf.sum(axis=1)
    present = support > 0
    if not present.all():
        missing = np.flatnonzero(~present).tolist()
        warnings.warn(f"classes {missing} have no support and are excluded from balanced accuracy")
    recalls = np.diag(conf)[present] / support[present]
    return float(recalls.mean())


def weighted_f1(y_true, y_pred, classes: int) -> float:
    """Support-weighted mean of per-class F1."""
    conf = per_class_counts(y_true, y_pred, classes)
    tp = np.diag(conf).astype(np.float64)
    support = conf.sum(axis=1)
    predicted = conf.sum(axis=0)
    denom = support + predicted
    f1 = np.where(denom > 0, 2.0 * tp / np.where(denom > 0, denom, 1), 0.0)
    return float((f1 * support).sum() / support.sum())


def zeroshot_predict(z_wsi, class_embs) -> np.ndarray:
    return np.argmax(cosine_matrix(z_wsi, class_embs), axis=1)


def zeroshot_metrics(z_wsi, class_embs, labels) -> tuple:
    pred = zeroshot_predict(z_wsi, class_embs)
    classes = np.asarray(class_embs).shape[0]
    return pred, balanced_accuracy(labels, pred, classes), weighted_f1(labels, pred, classes)


def wsi_retrieval(z_wsi, labels) -> float:
    """Top-1% slide retrieval accuracy (at least one neighbour)."""
    z = np.asarray(z_wsi)
    labels = np.asarray(labels)
    n = z.shape[0]
    if n < 2:
        raise ContractError("slide retrieval needs at least two slides")
    k = max(1, math.ceil(0.01 * (n - 1)))
    sim = cosine_matrix(z, z)
    hits = 0
    for q in range(n):
        others = np.delete(np.arange(n), q)
        top = others[rank_order(sim[q, others])[:k]]
        hits += bool(np.any(labels[top] == labels[q]))
    return hits / n


def crossmodal_retrieval(z_wsi, t_r, ks=RECALL_KS) -> dict:
    """Recall@K in both directions for paired slides and reports (row i <-> row i)."""
    z, t = np.asarray(z_wsi), np.asarray(t_r)
    if z.shape[0] != t.shape[0]:
        raise ContractError(f"{z.shape[0]} slides but {t.shape[0]} reports")
    n = z.shape[0]
    sim = cosine_matrix(z, t)
    s2r = np.array([_partner_rank(sim[i], i) for i in range(n)])
    r2s = np.array([_partner_rank(sim[:, i], i) for i in range(n)])
    out = {}
    for k in ks:
        kk = k
        if k > n:
            warnings.warn(f"Recall@{k} requested with only {n} candidates; clamping to {n}")
            kk = n
        out[f"slide_to_report_R@{k}"] = float(np.mean(s2r < kk))
        out[f"report_to_slide_R@{k}"] = float(np.mean(r2s < kk))
    return out


# -- embedding pipeline ----------------------------------------------------------------

def inference_selections(samples, bank, spf_cfg: SpfConfig = SpfConfig()) -> list:
    cfg = replace(spf_cfg, mode="inference")
    return [[r.final for r in spf_sample(s, bank, cfg)] for s in samples]


def embed_slides(samples, bank, params: ParamSet, cfg: EncoderConfig, spf_cfg: SpfConfig = SpfConfig(),
                 batch_size: int = 16) -> np.ndarray:
    """Joint-space slide embeddings with test-time (vision-only) patch selection."""
    out = []
    sels = inference_selections(samples, bank, spf_cfg)
    for lo in range(0, len(samples), batch_size):
        feats = encode_batch(samples[lo:lo + batch_size], sels[lo:lo + batch_size], params, cfg)
        out.append(project(feats, params, cfg).wsi.data)
    return np.concatenate(out, axis=0)


def embed_reports(reports: list, params: ParamSet, cfg: EncoderConfig) -> np.ndarray:
    _, t_r, _ = encode_text_batch(params, [np.asarray(r) for r in reports], cfg)
    return t_r.data.copy()


def class_prompts(bank, classes: int) -> dict:
    """One class-concept token per class."""
    return {k: [bank.token_id("wsi", k)] for k in range(classes)}


def zeroshot_classify(z_wsi, prompts: dict, params: ParamSet, cfg: EncoderConfig, labels=None):
    """Predict the class whose prompt embedding is most cosine-similar.

    Returns ``(predictions, balanced_accuracy, weighted_f1)``; the two metrics
    are ``None`` when ``labels`` is not given.
    """
    classes = sorted(prompts)
    if labels is not None:
        uncovered = set(np.asarray(labels).tolist()) - set(classes)
        if uncovered:
            raise ContractError(f"prompt set does not cover classes {sorted(uncovered)}")
    class_embs = embed_reports([prompts[k] for k in classes], params, cfg)
    pred = np.asarray(classes)[zeroshot_predict(z_wsi, class_embs)]
    if labels is None:
        return pred, None, None
    n = max(classes) + 1
    return pred, balanced_accuracy(labels, pred, n), weighted_f1(labels, pred, n)


TASKS = ("zeroshot", "retrieval", "crossmodal")


def evaluate(task: str, samples, bank, params: ParamSet, cfg: EncoderConfig, classes: int,
             spf_cfg: SpfConfig = SpfConfig(), seed: int = 0, return_embeddings: bool = False):
    if task not in TASKS:
        raise ContractError(f"unknown task {task!r}; expected one of {TASKS}")
    labels = np.array([s.label for s in samples])
    z = embed_slides(samples, bank, params, cfg, spf_cfg)
    extra = {"z_wsi": z, "labels": labels}
    if task == "zeroshot":
        pred, ba, f1 = zeroshot_classify(z, class_prompts(bank, classes), params, cfg, labels)
        metrics = {"balanced_accuracy": ba, "weighted_f1": f1}
        extra["predictions"] = pred
    elif task == "retrieval":
        metrics = {"top1pct_accuracy": wsi_retrieval(z, labels)}
    else:
        t = embed_reports([s.tokens for s in samples], params, cfg)
        metrics = crossmodal_retrieval(z, t)
        extra["t_r"] = t
    report = EvalReport(task, metrics, {"n_samples": len(samples), "classes": classes}, seed)
    return (report, extra) if return_embeddings else report


def write_metrics(report: EvalReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task", "metric", "value"])
        for name, value in report.metrics.items():
            writer.writerow([report.task, name, f"{value:.6f}"])


def read_metrics(path) -> EvalReport:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ContractError(f"{path}: no metric rows")
    return EvalReport(rows[0]["task"], {r["metric"]: float(r["value"]) for r in rows})
