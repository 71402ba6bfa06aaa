"""Slow, obviously-correct reference implementations used by the tests."""

from __future__ import annotations

import math
import statistics

import numpy as np

EPS = 1e-9


# ---- windowing


def brute_windows(t, values, kinds, labels, window_s=1.0, stride_s=0.5):
    """Per-window dicts for one session, scanning every grid start one by one."""
    out = []
    k = 0
    while k * stride_s < t[0] - EPS:
        k += 1
    while k * stride_s + window_s <= t[-1] + EPS:
        start = k * stride_s
        idx = [i for i in range(len(t)) if start - EPS <= t[i] < start + window_s - EPS]
        k += 1
        if not idx:
            continue
        row = {"t_start_s": start, "n_frames": len(idx)}
        eng = sum(labels[i] for i in idx)
        row["engaged"] = 1 if 2 * eng > len(idx) else 0
        for j, kind in enumerate(kinds):
            col = [values[i][j] for i in idx if not math.isnan(values[i][j])]
            row[("median", j)] = statistics.median(col) if col else math.nan
            if kind == "continuous":
                row[("var", j)] = statistics.pvariance(col) if col else math.nan
            else:
                row[("chg", j)] = (float(len(set(col)) > 1)) if col else math.nan
        out.append(row)
    return out


# ---- run-length encoding


def brute_runs(labels):
    out = []
    for i, v in enumerate(labels):
        if out and out[-1][0] == v:
            out[-1][2] += 1
        else:
            out.append([v, i, 1])
    return [tuple(r) for r in out]


# ---- AUROC


def pairwise_auroc(y, s):
    pos = [b for a, b in zip(y, s) if a == 1]
    neg = [b for a, b in zip(y, s) if a == 0]
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))


# ---- trees


def newton_leaf(g, h, lam):
    return -sum(g) / (sum(h) + lam)


def reference_tree(X, g, h, max_depth, lam=1.0, min_leaf=1, min_child_weight=0.0, min_gain=1e-6):
    """Recursive exact-greedy tree; returns a predict(row) closure.

    Candidate thresholds are the distinct values (missing counts as +inf,
    never a threshold); rows with x <= threshold go left; the first best
    (lowest feature, then lowest threshold) wins ties.
    """
    Xi = np.where(np.isnan(X), np.inf, X)

    def build(rows, depth):
        G = sum(g[r] for r in rows)
        H = sum(h[r] for r in rows)
        leaf = {"leaf": -G / (H + lam)}
        if depth >= max_depth or len(rows) < 2:
            return leaf
        parent = G * G / (H + lam)
        best = (min_gain, None, None)
        for f in range(X.shape[1]):
            cands = sorted({Xi[r, f] for r in rows if np.isfinite(Xi[r, f])})
            for thr in cands:
                left = [r for r in rows if Xi[r, f] <= thr]
                right = [r for r in rows if Xi[r, f] > thr]
                if len(left) < min_leaf or len(right) < min_leaf:
                    continue
                GL, HL = sum(g[r] for r in left), sum(h[r] for r in left)
                GR, HR = G - GL, H - HL
                if HL < min_child_weight or HR < min_child_weight:
                    continue
                gain = GL * GL / (HL + lam) + GR * GR / (HR + lam) - parent
                if gain > best[0]:
                    best = (gain, f, thr)
        if best[1] is None:
            return leaf
        f, thr = best[1], best[2]
        return {
            "f": f,
            "thr": thr,
            "l": build([r for r in rows if Xi[r, f] <= thr], depth + 1),
            "r": build([r for r in rows if Xi[r, f] > thr], depth + 1),
        }

    root = build(list(range(len(X))), 0)

    def predict(row):
        node = root
        while "leaf" not in node:
            x = row[node["f"]]
            node = node["l"] if (not math.isnan(x) and x <= node["thr"]) else node["r"]
        return node["leaf"]

    return predict


# ---- policy


def type7_quantile(x, q):
    if not x:
        return math.nan
    xs = sorted(x)
    pos = (len(xs) - 1) * q
    lo = math.floor(pos)
    hi = min(lo + 1, len(xs) - 1)
    return xs[lo] + (xs[hi] - xs[lo]) * (pos - lo)


def simulate_policy(timelines, window_s, threshold, mode="crossing", tick_s=0.5):
    """Scan every tick of every timeline; returns {(participant, session): [event times]}."""
    k = max(1, math.ceil(window_s / tick_s - 1e-9))
    events = {}
    for tl in timelines:
        fired = []
        prev_below = False
        for i in range(len(tl.prob)):
            lo = max(0, i - k + 1)
            chunk = tl.prob[lo : i + 1]
            mean = sum(chunk) / len(chunk)
            below = mean < threshold
            if below and (mode == "any" or not prev_below):
                fired.append(float(tl.t_s[i]))
            prev_below = below
        events[(tl.participant, tl.session)] = fired
    return events


def score_policy(events, segments):
    """Five policy metrics from event lists and segments, with quartiles computed by hand."""
    ds = [s.duration_s for s in segments if s.kind == "DS"]
    q1, q3 = type7_quantile(ds, 0.25), type7_quantile(ds, 0.75)
    hit = {"long": [0, 0], "short": [0, 0], "ES": [0, 0]}
    lengths, elapsed = [], []
    for s in segments:
        inside = [e for e in events.get((s.participant, s.session), []) if s.t_start_s <= e < s.t_end_s]
        has = bool(inside)
        if s.kind == "ES":
            key = "ES"
        elif s.duration_s >= q3:
            key = "long"
        elif s.duration_s < q1:
            key = "short"
        else:
            key = None
        if key:
            hit[key][0] += has
            hit[key][1] += 1
        if s.kind == "DS" and has:
            lengths.append(s.duration_s)
            elapsed.append(min(inside) - s.t_start_s)

    def pct(a, b):
        return 100.0 * a / b if b else math.nan

    return (
        pct(*hit["long"]),
        pct(*hit["ES"]),
        pct(*hit["short"]),
        statistics.median(lengths) if lengths else math.nan,
        statistics.median(elapsed) if elapsed else math.nan,
    )
