"""Binarization, IoU / DICE overlap scores and dataset-level evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Dataset
from .errors import DataError, ShapeError


def binarize(grid, threshold: float = 0.5) -> np.ndarray:
    """1 where ``grid >= threshold`` (boundary inclusive), else 0."""
    return (np.asarray(grid) >= threshold).astype(np.uint8)


def _counts(pred_bin, gt_bin) -> tuple[int, int, int]:
    a = np.asarray(pred_bin).astype(bool)
    b = np.asarray(gt_bin).astype(bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return int(np.count_nonzero(a & b)), int(np.count_nonzero(a)), int(np.count_nonzero(b))


def iou(pred_bin, gt_bin) -> float:
    """|A & B| / |A | B|; two empty masks score 1.0."""
    inter, na, nb = _counts(pred_bin, gt_bin)
    union = na + nb - inter
    return 1.0 if union == 0 else inter / union


def dice(pred_bin, gt_bin) -> float:
    """2 |A & B| / (|A| + |B|); two empty masks score 1.0."""
    inter, na, nb = _counts(pred_bin, gt_bin)
    total = na + nb
    return 1.0 if total == 0 else 2.0 * inter / total


@dataclass
class SampleScore:
    id: str
    loss: float
    iou: float
    dice: float


@dataclass
class EvalReport:
    loss: float
    iou: float
    dice: float
    threshold: float
    rows: list[SampleScore] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["id,loss,iou,dice"]
        lines += [f"{r.id},{r.loss!r},{r.iou!r},{r.dice!r}" for r in self.rows]
        return "\n".join(lines) + "\n"


MASK_THRESHOLD = 0.5


def evaluate(model, ds: Dataset, threshold: float = 0.5, batch_size: int = 16) -> EvalReport:
    """Per-sample BCE against the continuous mask, then IoU/DICE on binary masks.

    Predictions are cut at ``threshold``; ground-truth masks are always cut
    at ``MASK_THRESHOLD`` so the reference does not move with the operating
    point. Means are taken over samples.
    """
    if len(ds) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    rows = []
    for lo in range(0, len(ds), batch_size):
        chunk = ds.samples[lo:lo + batch_size]
        x = np.stack([s.image for s in chunk])[:, None]
        probs = model.predict(x)
        for s, p in zip(chunk, probs[:, 0]):
            with T.no_grad():
                loss = T.bce_loss(T.Tensor(p), T.Tensor(s.mask)).item()
            pb = binarize(p, threshold)
            gb = binarize(s.mask, MASK_THRESHOLD)
            rows.append(SampleScore(s.id, loss, iou(pb, gb), dice(pb, gb)))
    return EvalReport(
        loss=float(np.mean([r.loss for r in rows])),
        iou=float(np.mean([r.iou for r in rows])),
        dice=float(np.mean([r.dice for r in rows])),
        threshold=threshold,
        rows=rows,
    )


def format_table(reports: dict[str, EvalReport]) -> str:
    """Render reports with the columns Model | Test Loss | IoU | DICE Coeff."""
    name_w = max([len("Model")] + [len(n) for n in reports])
    lines = [f"{'Model':<{name_w}}  {'Test Loss':>9}  {'IoU':>7}  {'DICE Coeff':>10}"]
    for name, r in reports.items():
        lines.append(f"{name:<{name_w}}  {r.loss:>9.4f}  {100 * r.iou:>6.2f}%  {100 * r.dice:>9.2f}%")
    return "\n".join(lines)
