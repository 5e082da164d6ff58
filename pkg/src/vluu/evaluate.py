"""Mask prediction, IOU and mIOU over a fully labeled test set.

IOUs are computed from intersection and union pixel counts summed over the
whole test set, then averaged over the K foreground classes. Background is
never part of the mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from vluu import nn
from vluu.errors import CheckpointError, DataError
from vluu.train import kt_fuse, replicate_nhwc

AGGREGATION = "dataset-level (summed intersections / summed unions)"
EVAL_BATCH = 20


@dataclass
class Metrics:
    ious: list           # per foreground class 1..K
    miou: float
    intersections: list  # pixel counts per class
    unions: list


def _check_geometry(model, images):
    arch = model.arch
    c, h, w = images.shape[1:]
    if (h, w) != (arch.height, arch.width) or c * arch.num_classes != arch.in_channels:
        raise CheckpointError(
            f"model expects {arch.in_channels // arch.num_classes}x{arch.height}x{arch.width} "
            f"images for K={arch.num_classes}, test images are {c}x{h}x{w}")


def predict_masks(model, images):
    """(N, C, H, W) normalized images -> (N, H, W) class ids."""
    images = np.asarray(images, dtype=np.float64)
    _check_geometry(model, images)
    k = model.arch.num_classes
    out = []
    for start in range(0, len(images), EVAL_BATCH):
        x = replicate_nhwc(images[start:start + EVAL_BATCH], k)
        if isinstance(model, nn.KTNet):
            out.append(kt_fuse(model.all_head_probs(x)))
        else:
            # argmax returns the first maximum, so ties go to the lowest channel
            out.append(nn.softmax(model.logits(x)).argmax(axis=-1).astype(np.uint8))
    return np.concatenate(out)


def predict_mask(model, image):
    """Class-id mask for one (C, H, W) image."""
    return predict_masks(model, np.asarray(image)[None])[0]


def argmax_mask(probs):
    """(K+1, H, W) probabilities -> ids, ties broken toward the lower channel."""
    return np.asarray(probs).argmax(axis=0).astype(np.uint8)


def confusion_counts(pred, gt, k):
    """Per-class intersection and union pixel counts for classes 1..K."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"pred {pred.shape} vs gt {gt.shape}")
    inter = np.empty(k, dtype=np.int64)
    union = np.empty(k, dtype=np.int64)
    for c in range(1, k + 1):
        p, g = pred == c, gt == c
        inter[c - 1] = np.count_nonzero(p & g)
        union[c - 1] = np.count_nonzero(p | g)
    return inter, union


def _ratio(inter, union):
    return 1.0 if union == 0 else inter / union


def iou(pred, gt, k):
    """|pred=k and gt=k| / |pred=k or gt=k|; 1.0 when class k is absent from both."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"pred {pred.shape} vs gt {gt.shape}")
    p, g = pred == k, gt == k
    return _ratio(int(np.count_nonzero(p & g)), int(np.count_nonzero(p | g)))


def metrics_from_masks(preds, gts, k):
    inter = np.zeros(k, dtype=np.int64)
    union = np.zeros(k, dtype=np.int64)
    for p, g in zip(preds, gts):
        i, u = confusion_counts(p, g, k)
        inter += i
        union += u
    ious = [_ratio(int(i), int(u)) for i, u in zip(inter, union)]
    return Metrics(ious, float(np.mean(ious)), inter.tolist(), union.tolist())


def evaluate(model, test):
    """Dataset-level per-class IOU and mIOU of ``model`` on a FullDataset."""
    if len(test) == 0:
        raise DataError("empty test set")
    preds = predict_masks(model, test.images)
    return metrics_from_masks(preds, test.labels, test.num_classes)


# ---------------------------------------------------------------------------
# results files


def result_row(strategy, seed, metrics):
    cols = [strategy, str(seed)] + [f"{v:.6f}" for v in metrics.ious] + [f"{metrics.miou:.6f}"]
    return "\t".join(cols)


def parse_row(line):
    parts = line.rstrip("\n").split("\t")
    return {"strategy": parts[0], "seed": int(parts[1]),
            "ious": [float(v) for v in parts[2:-1]], "miou": float(parts[-1])}


def header(k):
    return "\t".join(["#strategy", "seed"] + [f"iou_{c}" for c in range(1, k + 1)] + ["miou"])


def footer(rows):
    """Mean +- std of mIOU across seeds, one line per strategy."""
    by = {}
    for r in rows:
        by.setdefault(r["strategy"], []).append(r["miou"])
    lines = [f"# aggregation: {AGGREGATION}"]
    for s, vals in by.items():
        lines.append(f"# {s}\tmiou {np.mean(vals):.6f} +- {np.std(vals):.6f}\t(n={len(vals)})")
    return lines
