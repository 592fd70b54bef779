"""Segmentation and classification evaluation metrics on thresholded predictions."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage, signal

SEG_FIELDS = ("ds", "ji", "ssim", "f1", "hd", "sn", "sp", "pr", "rc")


@dataclass
class MetricReport:
    ds: float = float("nan")
    ji: float = float("nan")
    ssim: float = float("nan")
    f1: float = float("nan")
    hd: float = float("nan")
    sn: float = float("nan")
    sp: float = float("nan")
    pr: float = float("nan")
    rc: float = float("nan")
    accuracy: Optional[float] = None
    class_precision: Optional[list] = None
    class_recall: Optional[list] = None
    class_f1: Optional[list] = None
    n_samples: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def precision(self) -> Optional[float]:
        return None if self.class_precision is None else float(np.mean(self.class_precision))

    @property
    def recall(self) -> Optional[float]:
        return None if self.class_recall is None else float(np.mean(self.class_recall))

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in SEG_FIELDS}
        if self.accuracy is not None:
            d.update(acc=self.accuracy, cls_pr=self.precision, cls_re=self.recall)
        return d


def binarize(yhat, threshold: float = 0.5) -> np.ndarray:
    """1 where ``yhat >= threshold`` (ties go to the ROI), else 0."""
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return (np.asarray(yhat) >= threshold).astype(np.uint8)


def _pair(y, p):
    y = np.asarray(y).astype(bool)
    p = np.asarray(p).astype(bool)
    if y.shape != p.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {p.shape}")
    return y, p


def confusion(y, p) -> tuple:
    y, p = _pair(y, p)
    tp = int(np.count_nonzero(y & p))
    fp = int(np.count_nonzero(~y & p))
    fn = int(np.count_nonzero(y & ~p))
    tn = y.size - tp - fp - fn
    return tp, fp, tn, fn


def _ratio(num, den, if_empty):
    return num / den if den else if_empty


def overlap_metrics(y, p) -> dict:
    """DS, JI, F1, SN, SP, PR, RC from confusion counts.

    Empty denominators: a rate whose reference set is empty scores 1 when the
    prediction also has nothing to offer there, else 0. Two empty masks give
    DS = JI = 1.
    """
    tp, fp, tn, fn = confusion(y, p)
    ds = _ratio(2 * tp, 2 * tp + fp + fn, 1.0)
    ji = _ratio(tp, tp + fp + fn, 1.0)
    pr = _ratio(tp, tp + fp, 1.0 if tp + fn == 0 else 0.0)
    rc = _ratio(tp, tp + fn, 1.0 if tp + fp == 0 else 0.0)
    sp = _ratio(tn, tn + fp, 1.0 if tn + fn == 0 else 0.0)
    f1 = _ratio(2 * pr * rc, pr + rc, 0.0)
    return dict(ds=ds, ji=ji, f1=f1, sn=rc, sp=sp, pr=pr, rc=rc)


def avg_hausdorff(y, p) -> float:
    """Symmetric average Hausdorff distance in pixels (Euclidean, pixel centers).

    Two empty masks score 0; one empty mask scores the image diagonal.
    """
    y, p = _pair(y, p)
    ny, np_ = y.any(), p.any()
    if not ny and not np_:
        return 0.0
    if not ny or not np_:
        return float(math.hypot(*y.shape))
    # distance from every pixel to the nearest foreground pixel of the other mask
    to_p = ndimage.distance_transform_edt(~p)
    to_y = ndimage.distance_transform_edt(~y)
    return 0.5 * (float(to_p[y].mean()) + float(to_y[p].mean()))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(y, p, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows.

    Images smaller than the window fall back to a single global window.
    """
    y = np.asarray(y, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if y.shape != p.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {p.shape}")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    if min(y.shape) < window:
        mu_y, mu_p = y.mean(), p.mean()
        vy, vp = y.var(), p.var()
        cov = ((y - mu_y) * (p - mu_p)).mean()
    else:
        w = _gaussian_window(window, sigma)

        def filt(a):
            return signal.correlate2d(a, w, mode="valid")

        mu_y, mu_p = filt(y), filt(p)
        vy = filt(y * y) - mu_y**2
        vp = filt(p * p) - mu_p**2
        cov = filt(y * p) - mu_y * mu_p
    s = ((2 * mu_y * mu_p + c1) * (2 * cov + c2)) / ((mu_y**2 + mu_p**2 + c1) * (vy + vp + c2))
    return float(np.mean(s))


def classification_metrics(pred_classes, true_classes, n_classes: int) -> dict:
    """Accuracy plus per-class precision, recall and F1 (0 when undefined)."""
    pred = np.asarray(pred_classes, dtype=int).ravel()
    true = np.asarray(true_classes, dtype=int).ravel()
    if pred.size == 0:
        raise ValueError("no predictions to score")
    if pred.shape != true.shape:
        raise ValueError("prediction and label counts differ")
    if pred.min() < 0 or true.min() < 0 or pred.max() >= n_classes or true.max() >= n_classes:
        raise ValueError(f"labels must lie in 0..{n_classes - 1}")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    tp = np.diag(cm).astype(float)
    col = cm.sum(axis=0)
    row = cm.sum(axis=1)
    precision = [tp[i] / col[i] if col[i] else 0.0 for i in range(n_classes)]
    recall = [tp[i] / row[i] if row[i] else 0.0 for i in range(n_classes)]
    f1 = [2 * a * b / (a + b) if a + b else 0.0 for a, b in zip(precision, recall)]
    return dict(
        accuracy=float(tp.sum() / cm.sum()),
        precision=precision,
        recall=recall,
        f1=f1,
        confusion=cm,
    )


def segmentation_report(y, p) -> dict:
    """All nine segmentation metrics for one binary mask pair."""
    out = overlap_metrics(y, p)
    out["hd"] = avg_hausdorff(y, p)
    out["ssim"] = ssim(np.asarray(y, dtype=np.float64), np.asarray(p, dtype=np.float64))
    return out
