"""Challenge-style evaluation: per-class precision-recall curves, AUPRC
(rectangular / average-precision integration), micro-pooled metrics and
report emission.

Conventions pinned here so independent oracles agree: a descending sweep
over distinct scores with ties processed atomically, step-wise AP (sum of
precision times recall increment), micro F1 thresholded at score >= 0.5,
and positive-free classes excluded from macro averages.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np


class UndefinedClassError(ValueError):
    """A class with no positive labels has no precision-recall curve."""


@dataclass
class PRCurve:
    thresholds: np.ndarray  # distinct scores, descending
    precision: np.ndarray
    recall: np.ndarray  # nondecreasing


@dataclass
class EvalReport:
    coarse: dict
    fine: dict
    per_class: dict

    def to_dict(self):
        return {
            "coarse": self.coarse,
            "fine": self.fine,
            "per_class": self.per_class,
        }

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            d = json.load(fh)
        return cls(coarse=d["coarse"], fine=d["fine"], per_class=d["per_class"])


def pr_curve(scores, labels):
    """Precision/recall at every distinct score threshold (descending)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    pos = labels.sum()
    if pos == 0:
        raise UndefinedClassError("no positive labels")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    # last index of each tie group
    boundary = np.flatnonzero(np.diff(s) != 0)
    ends = np.append(boundary, s.size - 1)
    tp = np.cumsum(y)[ends]
    predicted = ends + 1.0
    precision = tp / predicted
    recall = tp / pos
    return PRCurve(thresholds=s[ends], precision=precision, recall=recall)


def auprc(curve):
    """Step-wise area: sum of precision times recall increment."""
    rec = np.concatenate([[0.0], curve.recall])
    return float(np.sum(np.diff(rec) * curve.precision))


def average_precision(scores, labels):
    return auprc(pr_curve(scores, labels))


def macro_auprc(scores, labels, masks=None):
    """Mean per-class AP over (n, C) arrays; masked pairs are dropped and
    positive-free classes are excluded from the average."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if masks is None:
        masks = np.ones_like(labels)
    masks = np.asarray(masks)
    if not scores.shape == labels.shape == masks.shape:
        raise ValueError("scores, labels and masks must share a shape")
    aps = []
    for c in range(scores.shape[1]):
        keep = masks[:, c] > 0
        if not keep.any() or labels[keep, c].sum() == 0:
            continue
        aps.append(average_precision(scores[keep, c], labels[keep, c]))
    if not aps:
        raise UndefinedClassError("every class is positive-free")
    return float(np.mean(aps))


def _pooled(scores, labels, masks):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if masks is None:
        masks = np.ones_like(labels)
    masks = np.asarray(masks)
    if not scores.shape == labels.shape == masks.shape:
        raise ValueError("scores, labels and masks must share a shape")
    keep = masks.reshape(-1) > 0
    return scores.reshape(-1)[keep], labels.reshape(-1)[keep]


def micro_auprc(scores, labels, masks=None):
    """AP over all unmasked (sample, class) pairs pooled into one problem."""
    s, y = _pooled(scores, labels, masks)
    return average_precision(s, y)


def micro_f1(scores, labels, masks=None, tau=0.5):
    """F1 of the pooled binary problem, thresholding at score >= tau."""
    s, y = _pooled(scores, labels, masks)
    pred = s >= tau
    tp = float(np.sum(pred & (y > 0.5)))
    fp = float(np.sum(pred & (y <= 0.5)))
    fn = float(np.sum(~pred & (y > 0.5)))
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2 * tp / denom


def level_metrics(scores, labels, masks=None, tau=0.5):
    return {
        "micro_auprc": micro_auprc(scores, labels, masks),
        "micro_f1": micro_f1(scores, labels, masks, tau=tau),
        "macro_auprc": macro_auprc(scores, labels, masks),
    }


def write_predictions_csv(path, lay, rows):
    """``rows`` is an iterable of (clip_id, vector of layout.dim scores)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["clip_id", *lay.slot_names])
        for clip_id, vec in rows:
            vec = np.asarray(vec)
            if vec.shape != (lay.dim,):
                raise ValueError(
                    f"prediction for {clip_id} has {vec.shape}, expected ({lay.dim},)"
                )
            writer.writerow([clip_id] + [f"{v:.6f}" for v in vec])


def read_predictions_csv(path, lay):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["clip_id", *lay.slot_names]:
            raise ValueError(f"prediction columns do not match layout in {path}")
        out = {}
        for row in reader:
            out[row[0]] = np.array([float(v) for v in row[1:]], dtype=np.float64)
    return out


def evaluate(predictions, records, tax, lay, tau=0.5):
    """Headline coarse/fine metrics for a set of annotated clips.

    ``predictions`` maps clip_id to a layout-dim score vector. Fine-level
    metrics honor the per-clip fine masks; the other/unknown slots of a
    system-3 layout never enter the fine metrics. Soft annotation targets
    are binarized at 0.5.
    """
    n = len(records)
    if n == 0:
        raise ValueError("no records to evaluate")
    dim = lay.dim
    S = np.zeros((n, dim))
    n_c = tax.n_coarse
    n_f = tax.n_fine
    Yc = np.zeros((n, n_c))
    Yf = np.zeros((n, n_f))
    Mf = np.zeros((n, n_f))
    for i, rec in enumerate(records):
        vec = predictions.get(rec.clip_id)
        if vec is None:
            raise ValueError(f"missing predictions for clip {rec.clip_id}")
        if np.asarray(vec).shape != (dim,):
            raise ValueError(f"prediction dim mismatch for clip {rec.clip_id}")
        S[i] = vec
        Yc[i] = (np.asarray(rec.targets.coarse) > 0.5).astype(float)
        Yf[i] = (np.asarray(rec.targets.fine) > 0.5).astype(float)
        Mf[i] = (np.asarray(rec.targets.fine_mask) > 0.5).astype(float)
    coarse = level_metrics(S[:, lay.coarse_slots], Yc, None, tau=tau)
    fine = level_metrics(S[:, lay.fine_slots], Yf, Mf, tau=tau)
    per_class = {"coarse": {}, "fine": {}}
    for c, name in enumerate(tax.coarse_tags):
        try:
            per_class["coarse"][name] = average_precision(
                S[:, lay.coarse_slots][:, c], Yc[:, c]
            )
        except UndefinedClassError:
            per_class["coarse"][name] = None
    Sf = S[:, lay.fine_slots]
    for f, name in enumerate(tax.fine_tags):
        keep = Mf[:, f] > 0
        try:
            if not keep.any():
                raise UndefinedClassError("fully masked")
            per_class["fine"][name] = average_precision(Sf[keep, f], Yf[keep, f])
        except UndefinedClassError:
            per_class["fine"][name] = None
    return EvalReport(coarse=coarse, fine=fine, per_class=per_class)
