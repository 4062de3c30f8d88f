"""Evaluation metrics for frame-level detection and temporal localization."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels

TIOU_GRID = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
AP_REPORT_THRESHOLDS = (0.5, 0.75, 0.9, 0.95)
AR_REPORT_N = (1, 2, 5, 10, 20)


class MetricError(ValueError):
    pass


def _interval(x):
    """Accept (start, dur) tuples or objects with start_s/dur_s."""
    if hasattr(x, "start_s"):
        return float(x.start_s), float(x.dur_s)
    return float(x[0]), float(x[1])


def tiou(a, b) -> float:
    """Temporal IoU of two (start, duration) intervals."""
    s0, d0 = _interval(a)
    s1, d1 = _interval(b)
    inter = min(s0 + d0, s1 + d1) - max(s0, s1)
    if inter <= 0:
        return 0.0
    # overlapping, so the union is the hull; identical intervals give exactly 1
    return inter / (max(s0 + d0, s1 + d1) - min(s0, s1))


# --------------------------------------------------------------------------
# frame-level detection
# --------------------------------------------------------------------------

@dataclass
class PfdReport:
    eer: float
    eer_threshold: float
    auc: float
    threshold: float
    fpr: float
    fnr: float
    precision: float
    recall: float
    f1: float

    def to_json(self) -> dict:
        return dict(self.__dict__)


def _check_binary(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(np.int64)
    if s.shape != y.shape:
        raise MetricError("scores and labels differ in length")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("both classes must be present")
    return s, y, n_pos, n_neg


def roc_points(scores, labels):
    """(thresholds, fpr, fnr) with predict-positive iff score >= threshold.

    The first point uses threshold +inf (nothing predicted positive).
    """
    s, y, n_pos, n_neg = _check_binary(scores, labels)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    distinct = np.flatnonzero(np.diff(s) != 0)
    cut = np.concatenate([distinct, [s.size - 1]])
    tp = np.cumsum(y == 1)[cut]
    fp = np.cumsum(y == 0)[cut]
    thr = np.concatenate([[np.inf], s[cut]])
    fpr = np.concatenate([[0.0], fp / n_neg])
    fnr = np.concatenate([[1.0], 1.0 - tp / n_pos])
    return thr, fpr, fnr


def eer(scores, labels) -> tuple[float, float]:
    """Equal error rate and the threshold where FPR crosses FNR.

    Between the two ROC points bracketing the crossing, rates and threshold
    are interpolated linearly.
    """
    thr, fpr, fnr = roc_points(scores, labels)
    diff = fnr - fpr
    k = int(np.flatnonzero(diff <= 0)[0])
    if diff[k] == 0:
        t = thr[k] if np.isfinite(thr[k]) else thr[1]
        return float(fpr[k]), float(t)
    lam = diff[k - 1] / (diff[k - 1] - diff[k])
    rate = fpr[k - 1] + lam * (fpr[k] - fpr[k - 1])
    t_prev = thr[k - 1] if np.isfinite(thr[k - 1]) else thr[k]
    return float(rate), float(t_prev + lam * (thr[k] - t_prev))


def auc(scores, labels) -> float:
    """Rank-statistic AUC with ties counted as one half."""
    s, y, n_pos, n_neg = _check_binary(scores, labels)
    ranks = _average_ranks(s)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def _average_ranks(s):
    order = np.argsort(s, kind="stable")
    ranks = np.empty(s.size)
    sorted_s = s[order]
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1
        i = j + 1
    return ranks


def confusion_metrics(scores, labels, threshold: float = 0.5):
    """(fpr, fnr, precision, recall, f1) with predict-fake iff score > threshold.

    Precision is 0 when nothing is predicted fake; F1 is 0 when P + R = 0.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(np.int64)
    pred = s > threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    tn = int(np.sum(~pred & (y == 0)))
    fpr = fp / (fp + tn) if fp + tn else 0.0
    fnr = fn / (fn + tp) if fn + tp else 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return fpr, fnr, precision, recall, f1


def pfd_report(scores, labels, threshold: float = 0.5) -> PfdReport:
    e, t = eer(scores, labels)
    fpr, fnr, p, r, f1 = confusion_metrics(scores, labels, threshold)
    return PfdReport(eer=e, eer_threshold=t, auc=auc(scores, labels), threshold=threshold,
                     fpr=fpr, fnr=fnr, precision=p, recall=r, f1=f1)


# --------------------------------------------------------------------------
# temporal localization
# --------------------------------------------------------------------------

@dataclass
class TflReport:
    ap_at: dict[float, float] = field(default_factory=dict)
    map_score: float = 0.0
    ar_at_n: dict[int, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "ap_at": {f"{k:.2f}": v for k, v in self.ap_at.items()},
            "map": self.map_score,
            "ar_at_n": {str(k): v for k, v in self.ar_at_n.items()},
            "tiou_grid": list(TIOU_GRID),
        }


def _flatten(proposals: dict, gts: dict):
    """Pool per-clip (start, dur, score) proposals and gts into ranked arrays."""
    clip_ids = sorted(set(proposals) | set(gts))
    index = {c: i for i, c in enumerate(clip_ids)}
    rows = []
    for c, props in proposals.items():
        for p in props:
            s, d = _interval(p)
            score = float(p.score if hasattr(p, "score") else p[2])
            rows.append((-score, s, c, index[c], d))
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    p_clip = np.array([r[3] for r in rows], dtype=np.int64)
    p_start = np.array([r[1] for r in rows], dtype=np.float64)
    p_end = p_start + np.array([r[4] for r in rows], dtype=np.float64)
    g = [(index[c], *_interval(x)) for c, segs in gts.items() for x in segs]
    g_clip = np.array([x[0] for x in g], dtype=np.int64)
    g_start = np.array([x[1] for x in g], dtype=np.float64)
    g_end = g_start + np.array([x[2] for x in g], dtype=np.float64)
    return (p_clip, p_start, p_end), (g_clip, g_start, g_end)


def _ap_from_tp(tp: np.ndarray, n_gt: int) -> float:
    if n_gt == 0:
        return 1.0 if tp.size == 0 else 0.0
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, tp.size + 1)
    recall = ctp / n_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * envelope))


def average_precision_multi(proposals: dict, gts: dict, thresholds) -> list[float]:
    (pc, ps, pe), (gc, gs, ge) = _flatten(proposals, gts)
    tp = _kernels.greedy_match(pc, ps, pe, gc, gs, ge, np.asarray(thresholds, dtype=np.float64))
    return [_ap_from_tp(tp[k], gc.size) for k in range(len(thresholds))]


def average_precision(proposals: dict, gts: dict, t: float) -> float:
    """AP at one TIoU threshold over a corpus.

    ``proposals`` maps clip id to scored intervals, ``gts`` maps clip id to
    segments. Proposals are ranked by score (ties: earlier start, then clip
    id) and greedily matched one-to-one against same-clip ground truths.
    """
    return average_precision_multi(proposals, gts, [t])[0]


def mean_ap(proposals: dict, gts: dict, thresholds=TIOU_GRID) -> float:
    return float(np.mean(average_precision_multi(proposals, gts, thresholds)))


def average_recall_at_n(proposals: dict, gts: dict, n: int, thresholds=TIOU_GRID) -> float:
    """Recall of the top-n proposals per clip, averaged over the TIoU grid.

    Recall is micro-averaged over all ground truths of the corpus. A corpus
    without ground truths scores 1.
    """
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        return 1.0
    if n <= 0:
        return 0.0
    top = {}
    for c, props in proposals.items():
        ranked = sorted(props, key=lambda p: (-float(p.score if hasattr(p, "score") else p[2]),
                                              _interval(p)[0]))
        top[c] = ranked[:n]
    (pc, ps, pe), (gc, gs, ge) = _flatten(top, gts)
    tp = _kernels.greedy_match(pc, ps, pe, gc, gs, ge, np.asarray(thresholds, dtype=np.float64))
    return float(np.mean(tp.sum(axis=1) / n_gt))


def tfl_report(proposals: dict, gts: dict, ap_thresholds=AP_REPORT_THRESHOLDS,
               ar_n=AR_REPORT_N) -> TflReport:
    grid = sorted(set(TIOU_GRID) | set(ap_thresholds))
    aps = dict(zip(grid, average_precision_multi(proposals, gts, grid)))
    return TflReport(
        ap_at={t: aps[t] for t in grid},
        map_score=float(np.mean([aps[t] for t in TIOU_GRID])),
        ar_at_n={n: average_recall_at_n(proposals, gts, n) for n in ar_n},
    )
