"""Equal error rate per tag and frame-level localization AUC."""

import csv
import warnings

import numpy as np
from scipy.stats import rankdata


def error_curve(scores, truth):
    """FPR and FNR at thresholds +inf and then each distinct score, descending.

    A chunk is called positive when its score is >= the threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth).astype(bool)
    n_pos = truth.sum()
    n_neg = len(truth) - n_pos
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], truth[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    # keep the last index of each run of tied scores
    last = np.r_[s[1:] != s[:-1], True]
    fpr = np.r_[0.0, fp[last] / n_neg]
    fnr = np.r_[1.0, 1.0 - tp[last] / n_pos]
    return fpr, fnr


def crossing(fpr, fnr):
    """Value where FPR - FNR changes sign, linearly interpolated."""
    d = fpr - fnr
    i = int(np.argmax(d >= 0))
    if d[i] == 0 or i == 0:
        return float(fpr[i])
    a = -d[i - 1] / (d[i] - d[i - 1])
    return float(fpr[i - 1] + a * (fpr[i] - fpr[i - 1]))


def eer(scores, truth):
    """Equal error rate of one tag, or None when only one class is present."""
    truth = np.asarray(truth).astype(bool)
    if truth.all() or not truth.any():
        warnings.warn("EER undefined: tag has a single class in the evaluated set")
        return None
    return crossing(*error_curve(scores, truth))


def eer_average(per_tag):
    """Unweighted mean over defined tags."""
    defined = [e for e in per_tag if e is not None]
    if not defined:
        raise ValueError("no tag has a defined EER")
    if len(defined) < len(per_tag):
        warnings.warn(f"{len(per_tag) - len(defined)} tag(s) excluded from the EER average")
    return float(np.mean(defined))


def localization_auc(scores, truth_frames):
    """Frame-level ROC AUC of one tag's localization score (ties count half).

    Returns None if every frame is inside (or outside) the event.
    """
    scores = np.asarray(scores, dtype=np.float64)
    inside = np.asarray(truth_frames).astype(bool)
    n_pos = int(inside.sum())
    n_neg = len(inside) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    return float((ranks[inside].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def interval_mask(n_frames, intervals, event):
    mask = np.zeros(n_frames, dtype=bool)
    for e, start, end in intervals:
        if e == event:
            mask[start:end] = True
    return mask


def chunk_localization_aucs(trace_scores, intervals):
    """AUC per present event for one chunk; ``trace_scores`` is (T, 7)."""
    T = trace_scores.shape[0]
    out = {}
    for e in sorted({iv[0] for iv in intervals}):
        auc = localization_auc(trace_scores[:, e], interval_mask(T, intervals, e))
        if auc is not None:
            out[e] = auc
    return out


def mean_localization_auc(traces, intervals):
    """Mean AUC over every present event of every chunk (``traces``: list of (T, 7))."""
    aucs = [a for tr, iv in zip(traces, intervals) for a in chunk_localization_aucs(tr, iv).values()]
    if not aucs:
        raise ValueError("no chunk has a localizable event")
    return float(np.mean(aucs))


def write_eer_csv(path, tags, per_tag, average):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["tag", "eer"])
        for t, e in zip(tags, per_tag):
            w.writerow([t, "nan" if e is None else f"{e:.6f}"])
        w.writerow(["ave", f"{average:.6f}"])
