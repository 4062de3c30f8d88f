"""Inner loops for proposal extraction, overlap, Soft-NMS and greedy matching.

Every kernel exists twice: a numba ``@njit`` version and a pure-numpy version
with the same contract. The numba path is used unless numba is missing or the
environment variable ``FORGERYLOC_NO_NUMBA`` is set to a non-empty value other
than ``0``. Tests run both paths against each other.
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

_flag = os.environ.get("FORGERYLOC_NO_NUMBA", "")
USE_NUMBA = numba is not None and _flag in ("", "0")

# frame-grid intervals hit thresholds such as 0.5 exactly; rounding must not decide the match
TIOU_TOL = 1e-9


# --------------------------------------------------------------------------
# numpy implementations
# --------------------------------------------------------------------------

def runs_above_np(x, thr):
    mask = np.asarray(x, dtype=np.float64) > thr
    padded = np.concatenate(([False], mask, [False])).astype(np.int8)
    d = np.diff(padded)
    starts = np.flatnonzero(d == 1)
    ends = np.flatnonzero(d == -1)
    return starts.astype(np.int64), (ends - starts).astype(np.int64)


def tiou_matrix_np(a_start, a_end, b_start, b_end):
    a_start = np.asarray(a_start, dtype=np.float64)[:, None]
    a_end = np.asarray(a_end, dtype=np.float64)[:, None]
    b_start = np.asarray(b_start, dtype=np.float64)[None, :]
    b_end = np.asarray(b_end, dtype=np.float64)[None, :]
    inter = np.minimum(a_end, b_end) - np.maximum(a_start, b_start)
    # overlapping intervals: the union is their hull, which keeps identical pairs at exactly 1
    hull = np.maximum(a_end, b_end) - np.minimum(a_start, b_start)
    out = np.zeros(np.broadcast_shapes(inter.shape, hull.shape))
    np.divide(inter, hull, out=out, where=inter > 0)
    return out


def soft_nms_np(starts, ends, scores, sigma, min_score):
    starts = np.asarray(starts, dtype=np.float64)
    ends = np.asarray(ends, dtype=np.float64)
    live = np.asarray(scores, dtype=np.float64).copy()
    alive = live >= min_score
    order = []
    final = []
    while alive.any():
        cand = np.flatnonzero(alive)
        i = cand[np.argmax(live[cand])]
        order.append(i)
        final.append(live[i])
        alive[i] = False
        rest = np.flatnonzero(alive)
        if rest.size == 0:
            break
        ov = tiou_matrix_np(starts[i:i + 1], ends[i:i + 1], starts[rest], ends[rest])[0]
        live[rest] *= np.exp(-(ov * ov) / sigma)
        alive[rest[live[rest] < min_score]] = False
    return np.asarray(order, dtype=np.int64), np.asarray(final, dtype=np.float64)


def greedy_match_np(p_clip, p_start, p_end, g_clip, g_start, g_end, thresholds):
    """``tp[k, i]`` is True when ranked proposal i hits an unmatched gt at threshold k."""
    p_clip = np.asarray(p_clip, dtype=np.int64)
    g_clip = np.asarray(g_clip, dtype=np.int64)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    ov = tiou_matrix_np(p_start, p_end, g_start, g_end)
    same = p_clip[:, None] == g_clip[None, :]
    ov = np.where(same, ov, -1.0)
    n_thr, n_p = thresholds.size, p_clip.size
    tp = np.zeros((n_thr, n_p), dtype=np.bool_)
    for k in range(n_thr):
        matched = np.zeros(g_clip.size, dtype=np.bool_)
        for i in range(n_p):
            row = np.where(matched, -1.0, ov[i])
            if row.size == 0:
                continue
            j = int(np.argmax(row))
            if row[j] >= thresholds[k] - TIOU_TOL and row[j] >= 0.0:
                tp[k, i] = True
                matched[j] = True
    return tp


# --------------------------------------------------------------------------
# numba implementations
# --------------------------------------------------------------------------

if numba is not None:

    @njit(cache=True)
    def runs_above_nb(x, thr):
        n = x.shape[0]
        starts = np.empty(n, dtype=np.int64)
        lengths = np.empty(n, dtype=np.int64)
        k = 0
        t = 0
        while t < n:
            if x[t] > thr:
                s = t
                while t < n and x[t] > thr:
                    t += 1
                starts[k] = s
                lengths[k] = t - s
                k += 1
            else:
                t += 1
        return starts[:k].copy(), lengths[:k].copy()

    @njit(cache=True)
    def _tiou(a0, a1, b0, b1):
        inter = min(a1, b1) - max(a0, b0)
        if inter <= 0.0:
            return 0.0
        return inter / (max(a1, b1) - min(a0, b0))

    @njit(cache=True)
    def tiou_matrix_nb(a_start, a_end, b_start, b_end):
        na = a_start.shape[0]
        nb = b_start.shape[0]
        out = np.zeros((na, nb))
        for i in range(na):
            for j in range(nb):
                out[i, j] = _tiou(a_start[i], a_end[i], b_start[j], b_end[j])
        return out

    @njit(cache=True)
    def soft_nms_nb(starts, ends, scores, sigma, min_score):
        n = scores.shape[0]
        live = scores.copy()
        alive = np.empty(n, dtype=np.bool_)
        for i in range(n):
            alive[i] = live[i] >= min_score
        order = np.empty(n, dtype=np.int64)
        final = np.empty(n)
        k = 0
        while True:
            best = -1
            for i in range(n):
                if alive[i] and (best < 0 or live[i] > live[best]):
                    best = i
            if best < 0:
                break
            order[k] = best
            final[k] = live[best]
            k += 1
            alive[best] = False
            for j in range(n):
                if alive[j]:
                    ov = _tiou(starts[best], ends[best], starts[j], ends[j])
                    live[j] *= np.exp(-(ov * ov) / sigma)
                    if live[j] < min_score:
                        alive[j] = False
        return order[:k].copy(), final[:k].copy()

    @njit(cache=True)
    def greedy_match_nb(p_clip, p_start, p_end, g_clip, g_start, g_end, thresholds):
        n_thr = thresholds.shape[0]
        n_p = p_clip.shape[0]
        n_g = g_clip.shape[0]
        tp = np.zeros((n_thr, n_p), dtype=np.bool_)
        for k in range(n_thr):
            matched = np.zeros(n_g, dtype=np.bool_)
            for i in range(n_p):
                best = -1.0
                jbest = -1
                for j in range(n_g):
                    if matched[j] or g_clip[j] != p_clip[i]:
                        continue
                    ov = _tiou(p_start[i], p_end[i], g_start[j], g_end[j])
                    if ov > best:
                        best = ov
                        jbest = j
                if jbest >= 0 and best >= thresholds[k] - TIOU_TOL:
                    tp[k, i] = True
                    matched[jbest] = True
        return tp


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------

def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _i64(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def runs_above(x, thr):
    """Maximal runs where ``x > thr``; returns (start indices, run lengths)."""
    if USE_NUMBA:
        return runs_above_nb(_f64(x), float(thr))
    return runs_above_np(x, thr)


def tiou_matrix(a_start, a_end, b_start, b_end):
    if USE_NUMBA:
        return tiou_matrix_nb(_f64(a_start), _f64(a_end), _f64(b_start), _f64(b_end))
    return tiou_matrix_np(a_start, a_end, b_start, b_end)


def soft_nms(starts, ends, scores, sigma, min_score):
    """Gaussian Soft-NMS; returns (selected indices, final scores) in selection order."""
    if USE_NUMBA:
        return soft_nms_nb(_f64(starts), _f64(ends), _f64(scores), float(sigma), float(min_score))
    return soft_nms_np(starts, ends, scores, sigma, min_score)


def greedy_match(p_clip, p_start, p_end, g_clip, g_start, g_end, thresholds):
    if USE_NUMBA:
        return greedy_match_nb(_i64(p_clip), _f64(p_start), _f64(p_end),
                               _i64(g_clip), _f64(g_start), _f64(g_end), _f64(thresholds))
    return greedy_match_np(p_clip, p_start, p_end, g_clip, g_start, g_end, thresholds)
