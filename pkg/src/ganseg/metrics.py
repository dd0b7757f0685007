"""Binary segmentation metrics with foreground as the positive class.

Every score is derived from the four pixel counts, which are stored in the
report so any number can be recomputed. Batched evaluation offers both
micro aggregation (pool the pixel counts, then take ratios, the default)
and macro aggregation (average the per-image ratios); the report records
which one produced it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch


def _as_binary(mask) -> np.ndarray:
    if isinstance(mask, torch.Tensor):
        mask = mask.detach().cpu().numpy()
    arr = np.asarray(mask)
    if not np.isin(arr, (0, 1)).all():
        raise ValueError("masks must be binary (0/1); threshold soft masks first")
    return arr.astype(bool)


@dataclass
class SegReport:
    iou_fg: float
    iou_bg: float
    miou: float
    f1: float
    precision: float
    recall: float
    accuracy: float
    tp: int
    fp: int
    fn: int
    tn: int
    n_images: int = 1
    aggregation: str = "micro"

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int, tn: int,
                    n_images: int = 1, aggregation: str = "micro") -> "SegReport":
        def ratio(num, den):
            return num / den if den > 0 else 0.0

        iou_fg = ratio(tp, tp + fp + fn)
        iou_bg = ratio(tn, tn + fp + fn)
        precision = ratio(tp, tp + fp)
        recall = ratio(tp, tp + fn)
        f1 = ratio(2 * precision * recall, precision + recall)
        total = tp + fp + fn + tn
        return cls(iou_fg=iou_fg, iou_bg=iou_bg, miou=(iou_fg + iou_bg) / 2,
                   f1=f1, precision=precision, recall=recall,
                   accuracy=ratio(tp + tn, total),
                   tp=int(tp), fp=int(fp), fn=int(fn), tn=int(tn),
                   n_images=n_images, aggregation=aggregation)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "SegReport":
        return cls(**json.loads(Path(path).read_text()))


def pixel_counts(pred, gt) -> tuple[int, int, int, int]:
    p, g = _as_binary(pred), _as_binary(gt)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    tp = int(np.sum(p & g))
    fp = int(np.sum(p & ~g))
    fn = int(np.sum(~p & g))
    tn = int(np.sum(~p & ~g))
    return tp, fp, fn, tn


def compute_metrics(pred, gt) -> SegReport:
    """Score one predicted binary mask against ground truth."""
    return SegReport.from_counts(*pixel_counts(pred, gt))


def compute_metrics_batch(preds, gts, aggregation: str = "micro") -> SegReport:
    """Score a batch of mask pairs.

    micro: pool pixel counts across images before taking ratios.
    macro: average each per-image ratio.
    """
    if len(preds) != len(gts):
        raise ValueError(f"got {len(preds)} predictions for {len(gts)} ground-truth masks")
    if len(preds) == 0:
        raise ValueError("empty batch")
    if aggregation not in ("micro", "macro"):
        raise ValueError(f"aggregation must be 'micro' or 'macro', got {aggregation!r}")
    counts = [pixel_counts(p, g) for p, g in zip(preds, gts)]
    if aggregation == "micro":
        tp, fp, fn, tn = (sum(c[i] for c in counts) for i in range(4))
        return SegReport.from_counts(tp, fp, fn, tn, n_images=len(counts),
                                     aggregation="micro")
    reports = [SegReport.from_counts(*c) for c in counts]
    mean = lambda key: float(np.mean([getattr(r, key) for r in reports]))
    tp, fp, fn, tn = (sum(c[i] for c in counts) for i in range(4))
    return SegReport(
        iou_fg=mean("iou_fg"), iou_bg=mean("iou_bg"), miou=mean("miou"),
        f1=mean("f1"), precision=mean("precision"), recall=mean("recall"),
        accuracy=mean("accuracy"), tp=tp, fp=fp, fn=fn, tn=tn,
        n_images=len(counts), aggregation="macro")


def error_overlay(image, pred, gt) -> np.ndarray:
    """RGB overlay: green marks false positives, red marks false negatives."""
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu().numpy()
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] in (1, 3):
        img = img.transpose(1, 2, 0)
    if img.shape[-1] == 1:
        img = np.repeat(img, 3, axis=-1)
    rgb = (np.clip(img, -1, 1) + 1) / 2
    p, g = _as_binary(pred).squeeze(), _as_binary(gt).squeeze()
    false_pos = p & ~g
    false_neg = ~p & g
    rgb[false_pos] = 0.35 * rgb[false_pos] + 0.65 * np.array([0.0, 1.0, 0.0])
    rgb[false_neg] = 0.35 * rgb[false_neg] + 0.65 * np.array([1.0, 0.0, 0.0])
    return (rgb * 255).astype(np.uint8)
