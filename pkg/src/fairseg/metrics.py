"""Segmentation quality, fairness, and structure metrics.

Everything works in class-id space (background 0, foreground ids as
assigned by the task split).  Pixels labeled with the ignore sentinel
never enter any statistic.  Classes absent from both reference and
prediction are excluded from mIoU instead of dragging it to zero.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from .errors import DimensionError, LabelError, UnavailableError
from .model import forward_batch
from .synthdata import IGNORE_ID, evaluation_labels, write_manifest


class ConfusionMatrix:
    """Dense confusion counts indexed by class id (reference x prediction)."""

    def __init__(self, num_labels):
        if num_labels < 1:
            raise DimensionError("need at least one label id")
        self.num_labels = int(num_labels)
        self.matrix = np.zeros((num_labels, num_labels), dtype=np.int64)

    def accumulate(self, reference, prediction):
        ref = np.asarray(reference).reshape(-1)
        pred = np.asarray(prediction).reshape(-1)
        if ref.shape != pred.shape:
            raise DimensionError("reference and prediction sizes differ")
        valid = ref != IGNORE_ID
        ref = ref[valid].astype(np.int64)
        pred = pred[valid].astype(np.int64)
        if ref.size == 0:
            return self
        if ref.min() < 0 or ref.max() >= self.num_labels:
            raise LabelError("reference label outside matrix range")
        if pred.min() < 0 or pred.max() >= self.num_labels:
            raise LabelError("prediction label outside matrix range")
        np.add.at(self.matrix, (ref, pred), 1)
        return self

    def merge(self, other):
        if other.num_labels != self.num_labels:
            raise DimensionError("matrix sizes differ")
        self.matrix += other.matrix
        return self

    def total(self):
        return int(self.matrix.sum())

    def support(self, class_id):
        """Number of reference pixels of the class."""
        return int(self.matrix[class_id].sum())

    def predicted(self, class_id):
        return int(self.matrix[:, class_id].sum())

    def present_ids(self):
        """Ids that occur in the reference or the prediction."""
        occupied = (self.matrix.sum(axis=1) + self.matrix.sum(axis=0)) > 0
        return [int(i) for i in np.flatnonzero(occupied)]

    def iou(self, class_id):
        """tp/(tp+fp+fn); None when the class is absent on both sides."""
        tp = self.matrix[class_id, class_id]
        denom = (
            self.matrix[class_id].sum() + self.matrix[:, class_id].sum() - tp
        )
        if denom == 0:
            return None
        return float(tp / denom)

    def per_class_iou(self):
        out = {}
        for c in self.present_ids():
            v = self.iou(c)
            if v is not None:
                out[c] = v
        return out

    def pixel_accuracy(self):
        total = self.matrix.sum()
        if total == 0:
            return 0.0
        return float(np.trace(self.matrix) / total)


def mean_iou(per_class, ids):
    """Mean IoU over the requested ids, skipping absent classes."""
    vals = [per_class[c] for c in ids if c in per_class]
    return float(np.mean(vals)) if vals else float("nan")


def iou_std(per_class, ids):
    vals = [per_class[c] for c in ids if c in per_class]
    return float(np.std(vals)) if len(vals) >= 2 else 0.0


def normalized_entropy(counts):
    """Entropy of a class histogram divided by log of the class count.

    1 for a uniform histogram, 0 when a single class holds all the mass;
    zero-count classes contribute nothing.
    """
    c = np.asarray(counts, dtype=np.float64)
    if c.ndim != 1 or c.size < 2:
        raise DimensionError("need a flat histogram over >= 2 classes")
    if np.any(c < 0):
        raise LabelError("histogram counts must be >= 0")
    total = c.sum()
    if total == 0:
        raise UnavailableError("all-zero histogram has no entropy")
    p = c / total
    nz = p > 0
    ent = -np.sum(p[nz] * np.log(p[nz]))
    return float(ent / np.log(c.size))


def fairness_gap(rates):
    """Largest pairwise difference among per-class error rates."""
    r = [float(v) for v in rates]
    if len(r) < 2:
        raise UnavailableError("fairness gap needs >= 2 evaluated classes")
    return max(r) - min(r)


def single_pixel_islands(labels):
    """Count pixels whose label matches none of their 8 in-bounds neighbors."""
    y = np.asarray(labels)
    if y.ndim != 2:
        raise DimensionError("labels must be (H, W)")
    h, w = y.shape
    matches = np.zeros((h, w), dtype=bool)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if (dr, dc) == (0, 0):
                continue
            r0, r1 = max(0, -dr), min(h, h - dr)
            c0, c1 = max(0, -dc), min(w, w - dc)
            if r0 >= r1 or c0 >= c1:
                continue
            eq = y[r0:r1, c0:c1] == y[r0 + dr : r1 + dr, c0 + dc : c1 + dc]
            matches[r0:r1, c0:c1] |= eq
    return int(np.count_nonzero(~matches))


@dataclass
class MetricsReport:
    """Evaluation summary for one step (or the final model)."""

    step: int
    num_images: int
    per_class_iou: Dict[int, float] = field(default_factory=dict)
    per_class_pixels: Dict[int, int] = field(default_factory=dict)
    per_class_ce: Dict[int, float] = field(default_factory=dict)
    miou_initial: float = float("nan")
    miou_later: float = float("nan")
    miou_fg: float = float("nan")
    miou_all: float = float("nan")
    miou_avg: float = float("nan")  # mean of per-step mIoU(all); filled by runs
    miou_major: float = float("nan")
    miou_minor: float = float("nan")
    iou_std_fg: float = 0.0
    iou_std_major: float = 0.0
    iou_std_minor: float = 0.0
    fairness_gap: float = 0.0
    pixel_accuracy: float = 0.0
    entropy_fg: float = 0.0
    islands_per_image: float = 0.0

    def summary_fields(self):
        out = {
            "step": str(self.step),
            "num_images": str(self.num_images),
            "miou_initial": repr(self.miou_initial),
            "miou_later": repr(self.miou_later),
            "miou_fg": repr(self.miou_fg),
            "miou_all": repr(self.miou_all),
            "miou_avg": repr(self.miou_avg),
            "miou_major": repr(self.miou_major),
            "miou_minor": repr(self.miou_minor),
            "iou_std_fg": repr(self.iou_std_fg),
            "iou_std_major": repr(self.iou_std_major),
            "iou_std_minor": repr(self.iou_std_minor),
            "fairness_gap": repr(self.fairness_gap),
            "pixel_accuracy": repr(self.pixel_accuracy),
            "entropy_fg": repr(self.entropy_fg),
            "islands_per_image": repr(self.islands_per_image),
        }
        for cid in sorted(self.per_class_iou):
            out[f"iou_class_{cid}"] = repr(self.per_class_iou[cid])
        return out


def frequency_groups(cm, ids):
    """Split ids into (major, minor) by reference pixel share.

    Major holds classes whose share is strictly above the median share;
    everything else (including classes at or below the median) is minor.
    """
    shares = {c: cm.support(c) for c in ids}
    counted = [c for c in ids if shares[c] > 0]
    if len(counted) < 2:
        return list(counted), []
    med = float(np.median([shares[c] for c in counted]))
    major = [c for c in counted if shares[c] > med]
    minor = [c for c in counted if shares[c] <= med]
    return major, minor


def grouped_report(cm, split, step, per_class_ce=None, num_images=0):
    """Build a MetricsReport from an accumulated confusion matrix.

    Groups: initial = step-1 foreground classes, later = foreground classes
    introduced afterwards, all = background plus every foreground class,
    major/minor = frequency split of foreground ids by median pixel share.
    """
    known = sorted(split.known_through(step))
    initial = sorted(c for c in split.classes_at(1) if c != 0)
    later = [c for c in known if c != 0 and c not in initial]
    fg = [c for c in known if c != 0]
    per_class = cm.per_class_iou()
    major, minor = frequency_groups(cm, fg)
    ce = dict(per_class_ce or {})
    rates = [ce[c] for c in fg if c in ce]
    try:
        gap = fairness_gap(rates)
    except UnavailableError:
        gap = 0.0
    fg_pred = [cm.predicted(c) for c in fg]
    try:
        ent = normalized_entropy(fg_pred) if len(fg_pred) >= 2 else 0.0
    except UnavailableError:
        ent = 0.0
    return MetricsReport(
        step=step,
        num_images=num_images,
        per_class_iou=per_class,
        per_class_pixels={c: cm.support(c) for c in cm.present_ids()},
        per_class_ce=ce,
        miou_initial=mean_iou(per_class, initial),
        miou_later=mean_iou(per_class, later) if later else float("nan"),
        miou_fg=mean_iou(per_class, fg),
        miou_all=mean_iou(per_class, [0] + fg),
        miou_major=mean_iou(per_class, major),
        miou_minor=mean_iou(per_class, minor),
        iou_std_fg=iou_std(per_class, fg),
        iou_std_major=iou_std(per_class, major),
        iou_std_minor=iou_std(per_class, minor),
        fairness_gap=gap,
        pixel_accuracy=cm.pixel_accuracy(),
        entropy_fg=ent,
    )


def evaluate_model(params, samples, split, step, batch_size=8):
    """Run the model over a labeled test set and compute the full report.

    Labels are collapsed to the classes known through ``step``; later
    classes count as background, matching what the model could have seen.
    Returns (MetricsReport, ConfusionMatrix).
    """
    known = sorted(split.known_through(step))
    num_labels = max(params.num_rows, (max(known) + 1) if known else 1)
    row_to_id = np.array(
        [params.class_of_row(r) for r in range(params.num_rows)], dtype=np.int64
    )
    num_labels = max(num_labels, int(row_to_id.max()) + 1)
    cm = ConfusionMatrix(num_labels)
    ce_sums = np.zeros(num_labels)
    ce_counts = np.zeros(num_labels, dtype=np.int64)
    islands_total = 0
    rm = params.row_map()
    id_to_row = np.full(num_labels, -1, dtype=np.int64)
    for cid in known:
        if cid in rm:
            id_to_row[cid] = rm[cid]
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        preds, _ = forward_batch(params, [s.image for s in chunk])
        for sample, pred in zip(chunk, preds):
            ref = evaluation_labels(sample, split, step).labels
            rows = np.argmax(pred.logits, axis=2)
            ids = row_to_id[rows]
            cm.accumulate(ref, ids)
            islands_total += single_pixel_islands(ids)
            valid = ref != IGNORE_ID
            ref_rows = np.where(valid, id_to_row[np.where(valid, ref, 0)], -1)
            sel = ref_rows >= 0
            if sel.any():
                p = pred.probs[sel]
                r = ref_rows[sel]
                ce = -np.log(np.maximum(p[np.arange(r.size), r], 1e-300))
                np.add.at(ce_sums, ref[sel].astype(np.int64), ce)
                np.add.at(ce_counts, ref[sel].astype(np.int64), 1)
    per_class_ce = {
        int(c): float(ce_sums[c] / ce_counts[c])
        for c in np.flatnonzero(ce_counts)
        if c != 0
    }
    report = grouped_report(
        cm, split, step, per_class_ce=per_class_ce, num_images=len(samples)
    )
    report.islands_per_image = islands_total / max(1, len(samples))
    return report, cm


def write_report_csv(path, report):
    """One row per evaluated class: id, pixels, IoU, mean CE error."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class_id", "pixels", "iou", "ce_error"])
        for cid in sorted(report.per_class_iou):
            writer.writerow(
                [
                    cid,
                    report.per_class_pixels.get(cid, 0),
                    repr(report.per_class_iou[cid]),
                    repr(report.per_class_ce.get(cid, float("nan"))),
                ]
            )


def write_summary(path, report):
    write_manifest(path, report.summary_fields())
