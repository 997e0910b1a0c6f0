"""MAE and adaptive-threshold F-beta for saliency maps."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import DimensionError

BETA_SQ = 0.3


class FScore(NamedTuple):
    f: float
    precision: float
    recall: float


def _pair(s, g):
    s = np.asarray(s, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if s.shape != g.shape:
        raise DimensionError(f"saliency map {s.shape} and ground truth {g.shape} differ in shape")
    return s, g


def mae(s, g) -> float:
    s, g = _pair(s, g)
    return float(np.abs(s - g).mean())


def adaptive_threshold(s) -> float:
    """Twice the mean saliency, kept strictly below 1."""
    return float(min(2.0 * np.asarray(s, dtype=np.float64).mean(), 1.0 - 1e-6))


def f_beta(s, g, threshold: float, beta_sq: float = BETA_SQ, literal_beta: bool = False) -> FScore | None:
    """Precision, recall and F-beta of ``s >= threshold`` against binary ``g``.

    Returns ``None`` when ``g`` has no positive pixel (the sample is skipped).
    ``literal_beta`` uses ``beta * P + R`` in the denominator instead of
    ``beta^2 * P + R``.
    """
    s, g = _pair(s, g)
    gt = g >= 0.5
    if not gt.any():
        return None
    pred = s >= threshold
    tp = float(np.count_nonzero(pred & gt))
    fp = float(np.count_nonzero(pred & ~gt))
    fn = float(np.count_nonzero(~pred & gt))
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn)
    weight = np.sqrt(beta_sq) if literal_beta else beta_sq
    denom = weight * precision + recall
    f = (1 + beta_sq) * precision * recall / denom if denom > 0 else 0.0
    return FScore(float(f), precision, recall)


@dataclass
class EvalReport:
    per_sample: list = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    config: dict = field(default_factory=lambda: {"beta_sq": BETA_SQ})
    skipped: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_sample": self.per_sample,
            "aggregate": self.aggregate,
            "config": self.config,
            "skipped": self.skipped,
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["per_sample"], d["aggregate"], d.get("config", {}), d.get("skipped", []), d.get("meta", {}))


def score_maps(ids, maps, masks, beta_sq: float = BETA_SQ, literal_beta: bool = False) -> EvalReport:
    """Score precomputed saliency maps; the aggregate is the per-sample mean."""
    report = EvalReport(config={"beta_sq": beta_sq, "literal_beta": literal_beta, "threshold": "adaptive"})
    for sid, s, g in zip(ids, maps, masks):
        thr = adaptive_threshold(s)
        fs = f_beta(s, g, thr, beta_sq, literal_beta)
        row = {"id": sid, "mae": mae(s, g), "threshold": thr}
        if fs is None:
            report.skipped.append({"id": sid, "reason": "ground truth has no salient pixel"})
            row.update(f_beta=None, precision=None, recall=None)
        else:
            row.update(f_beta=fs.f, precision=fs.precision, recall=fs.recall)
        report.per_sample.append(row)
    agg = {}
    for key in ("mae", "f_beta", "precision", "recall", "threshold"):
        vals = [r[key] for r in report.per_sample if r[key] is not None]
        agg[key] = float(np.mean(vals)) if vals else None
    agg["count"] = len(report.per_sample)
    report.aggregate = agg
    return report


def evaluate(model, dataset, batch_size: int = 16, beta_sq: float = BETA_SQ, literal_beta: bool = False) -> EvalReport:
    """Forward every sample without graph recording and score it."""
    from .sodnet import forward

    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    expected = (3, model.config.height, model.config.width)
    usable, unreadable = [], []
    for sample in dataset.samples:
        image = np.asarray(sample.image)
        if image.shape != expected or not np.all(np.isfinite(image)):
            unreadable.append({"id": sample.id, "reason": f"image shape {image.shape} or values unusable"})
        else:
            usable.append(sample)
    ids, maps, masks = [], [], []
    for start in range(0, len(usable), batch_size):
        chunk = usable[start : start + batch_size]
        images = np.stack([s.image for s in chunk])
        out = forward(model, images, record_graph=False)
        for sample, smap in zip(chunk, out.S.data):
            ids.append(sample.id)
            maps.append(smap[0])
            masks.append(sample.mask[0])
    report = score_maps(ids, maps, masks, beta_sq, literal_beta)
    report.skipped.extend(unreadable)
    return report
