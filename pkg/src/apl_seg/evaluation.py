"""Saliency metrics (max F-measure, MAE), pseudo-label audit and report tables."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from .predictor import TaskPredictor, binarize, images_to_tensor

log = logging.getLogger(__name__)

NUM_THRESHOLDS = 256
BETA_SQ = 0.3


@dataclass
class EvalReport:
    max_f: float
    mae: float
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f: np.ndarray
    n_images: int
    n_excluded: int = 0
    dataset: str = ""
    checkpoint: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self, arrays: bool = True) -> dict:
        d = {"max_f": self.max_f, "mae": self.mae, "n_images": self.n_images,
             "n_excluded": self.n_excluded, "dataset": self.dataset, "checkpoint": self.checkpoint}
        if arrays:
            for k in ("thresholds", "precision", "recall", "f"):
                d[k] = getattr(self, k).tolist()
        d.update(self.extra)
        return d


def mae(pred, gt) -> float:
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return float(np.abs(pred - gt).mean())


def thresholds_for(preds: Sequence[np.ndarray], mode: str = "quantile") -> np.ndarray:
    """256 thresholds: evenly spaced in rank over the pooled predictions
    (``quantile``) or evenly spaced on [0, 1] (``uniform``)."""
    q = np.linspace(0.0, 1.0, NUM_THRESHOLDS)
    if mode == "uniform":
        return q
    if mode != "quantile":
        raise ValueError(f"unknown threshold mode {mode!r}")
    pooled = np.concatenate([np.asarray(p, dtype=np.float64).ravel() for p in preds])
    # inverted_cdf returns data values, so any strictly increasing remap of the
    # predictions remaps the thresholds identically
    return np.quantile(pooled, q, method="inverted_cdf")


def precision_recall(pred, gt, thresholds) -> tuple[np.ndarray, np.ndarray]:
    """Precision and recall of ``pred > t`` for every threshold t."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    gt = np.asarray(gt).ravel().astype(bool)
    if pred.shape != gt.shape:
        raise ValueError("shape mismatch between prediction and mask")
    t = np.atleast_1d(np.asarray(thresholds, dtype=np.float64))
    all_sorted = np.sort(pred)
    fg_sorted = np.sort(pred[gt])
    n_pos = all_sorted.size - np.searchsorted(all_sorted, t, side="right")
    tp = fg_sorted.size - np.searchsorted(fg_sorted, t, side="right")
    precision = np.divide(tp, n_pos, out=np.zeros(t.shape), where=n_pos > 0)
    recall = tp / fg_sorted.size if fg_sorted.size else np.zeros(t.shape)
    return precision, recall


def f_from_pr(precision, recall, beta_sq: float = BETA_SQ) -> np.ndarray:
    precision, recall = np.asarray(precision, float), np.asarray(recall, float)
    den = beta_sq * precision + recall
    return np.divide((1 + beta_sq) * precision * recall, den, out=np.zeros(den.shape), where=den > 0)


def f_measure_curve(pred, gt, beta_sq: float = BETA_SQ, thresholds=None) -> np.ndarray:
    if thresholds is None:
        thresholds = thresholds_for([pred])
    p, r = precision_recall(pred, gt, thresholds)
    return f_from_pr(p, r, beta_sq)


def evaluate_maps(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray], beta_sq: float = BETA_SQ,
                  thresholds: str = "quantile", per_image: bool = False, dataset: str = "",
                  checkpoint: str = "") -> EvalReport:
    """Aggregate metrics over a dataset.

    By default precision and recall are averaged over images per threshold and
    F is computed from the averages; ``per_image`` averages per-image F
    instead. Images with an empty mask are left out of the F aggregation.
    """
    if len(preds) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    if len(preds) != len(gts):
        raise ValueError("preds and gts differ in length")
    t = thresholds_for(preds, thresholds)
    ps, rs, fs = [], [], []
    excluded = 0
    for pred, gt in zip(preds, gts):
        if not np.asarray(gt).any():
            excluded += 1
            continue
        p, r = precision_recall(pred, gt, t)
        ps.append(p)
        rs.append(r)
        fs.append(f_from_pr(p, r, beta_sq))
    if excluded:
        log.warning("%d image(s) with empty masks excluded from F-measure", excluded)
    if ps:
        prec, rec = np.mean(ps, axis=0), np.mean(rs, axis=0)
        f = np.mean(fs, axis=0) if per_image else f_from_pr(prec, rec, beta_sq)
    else:
        prec = rec = f = np.zeros(t.shape)
    return EvalReport(
        max_f=float(f.max()),
        mae=float(np.mean([mae(p, g) for p, g in zip(preds, gts)])),
        thresholds=t, precision=prec, recall=rec, f=f,
        n_images=len(preds), n_excluded=excluded, dataset=dataset, checkpoint=checkpoint,
    )


@torch.no_grad()
def predict_maps(model: TaskPredictor, samples, batch_size: int = 32) -> list[np.ndarray]:
    p = next(model.parameters())
    was_training = model.training
    model.eval()
    out = []
    for i in range(0, len(samples), batch_size):
        x = images_to_tensor([s.image for s in samples[i:i + batch_size]], p.device, p.dtype)
        out.extend(m for m in model(x).cpu().numpy())
    model.train(was_training)
    return out


def _truth(s):
    m = s.mask if s.mask is not None else s.hidden_mask
    if m is None:
        raise ValueError(f"sample {s.id} has no mask to evaluate against")
    return m


def evaluate(model: TaskPredictor, samples, batch_size: int = 32, **kw) -> EvalReport:
    """Predict every sample and score against its (possibly hidden) mask."""
    if len(samples) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    preds = predict_maps(model, samples, batch_size)
    return evaluate_maps(preds, [_truth(s) for s in samples], **kw)


def audit_pseudo_labels(preds, truths) -> tuple[float, float]:
    """Mean pixel accuracy and mean IoU of binarized predictions."""
    accs, ious = [], []
    for pred, gt in zip(preds, truths):
        b = binarize(np.asarray(pred)).astype(bool)
        g = np.asarray(gt).astype(bool)
        accs.append(float((b == g).mean()))
        union = np.logical_or(b, g).sum()
        ious.append(float(np.logical_and(b, g).sum() / union) if union else 1.0)
    return float(np.mean(accs)), float(np.mean(ious))


def audit_model(model: TaskPredictor, unlabeled, batch_size: int = 32) -> tuple[float, float]:
    """Pseudo-label quality of ``model`` on unlabeled samples with hidden masks."""
    preds = predict_maps(model, unlabeled, batch_size)
    return audit_pseudo_labels(preds, [s.hidden_mask for s in unlabeled])


def format_table(reports: Mapping[str, EvalReport], title: str = "") -> str:
    name_w = max([len("Method")] + [len(k) for k in reports])
    lines = []
    if title:
        lines.append(title)
    lines.append(f"{'Method':<{name_w}}  {'F_max':>6}  {'MAE':>6}")
    lines.append("-" * (name_w + 16))
    for name, r in reports.items():
        lines.append(f"{name:<{name_w}}  {r.max_f:6.3f}  {r.mae:6.3f}")
    return "\n".join(lines)


def reports_to_json(reports: Mapping[str, EvalReport], arrays: bool = False) -> str:
    return json.dumps({k: r.to_dict(arrays) for k, r in reports.items()}, indent=2, sort_keys=True)
