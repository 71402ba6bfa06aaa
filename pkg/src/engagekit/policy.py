"""Re-engagement trigger: trailing average of predicted engagement against a threshold.

Predictions arrive one per window on the 0.5 s grid. A re-engagement action
(RA) fires when the smoothed probability drops below the threshold; a
sustained sub-threshold run fires once (``mode="crossing"``) unless
``mode="any"`` is selected, which fires on every sub-threshold tick.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd

from .sequences import ES, Segment, SequenceStats
from .stats import spearman

TICK_S = 0.5
UNDEFINED = float("nan")
DEFAULT_WINDOWS = tuple(float(w) for w in range(1, 11))
DEFAULT_THRESHOLDS = tuple(round(0.10 + 0.05 * i, 2) for i in range(9))
MODES = ("crossing", "any")
SWEEP_COLUMNS = ["Window", "Threshold", "Long DS", "ES", "Short DS", "DS Length", "Re-engage Point"]


@dataclass(frozen=True)
class PolicyParams:
    window_s: float
    threshold: float

    def __post_init__(self):
        if not self.window_s > 0:
            raise ValueError("window_s must be > 0")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")


@dataclass(frozen=True)
class Timeline:
    """One session's per-window predictions in chronological order."""

    participant: str
    session: str
    t_s: np.ndarray
    prob: np.ndarray
    label: np.ndarray | None = None


@dataclass(frozen=True)
class TriggerEvent:
    participant: str
    session: str
    t_s: float


@dataclass(frozen=True)
class PolicyReport:
    pct_long_ds_with_ra: float
    pct_es_with_ra: float
    pct_short_ds_with_ra: float
    median_ds_duration_with_ra_s: float
    median_elapsed_before_ra_s: float
    window_s: float
    threshold: float
    n_long_ds: int
    n_es: int
    n_short_ds: int
    n_events: int

    def as_dict(self) -> dict:
        return asdict(self)


def timelines_from_predictions(pred: pd.DataFrame) -> list[Timeline]:
    """Group a predictions frame (participant_id, session_id, t_start_s, prob[, engaged]) by session."""
    out = []
    for (p, s), block in pred.groupby(["participant_id", "session_id"], sort=False):
        block = block.sort_values("t_start_s", kind="stable")
        label = block["engaged"].to_numpy() if "engaged" in block else None
        out.append(Timeline(str(p), str(s), block["t_start_s"].to_numpy(float), block["prob"].to_numpy(float), label))
    return out


def window_ticks(window_s: float, tick_s: float = TICK_S) -> int:
    return max(1, math.ceil(window_s / tick_s - 1e-9))


def smooth(probs, window_s: float, tick_s: float = TICK_S) -> np.ndarray:
    """Trailing moving average over ``ceil(window_s / tick_s)`` ticks; early ticks average the available prefix."""
    x = np.asarray(probs, dtype=np.float64)
    k = window_ticks(window_s, tick_s)
    if k == 1 or len(x) == 0:
        return x.copy()
    c = np.concatenate([[0.0], np.cumsum(x)])
    i = np.arange(1, len(x) + 1)
    lo = np.maximum(0, i - k)
    return (c[i] - c[lo]) / (i - lo)


def trigger_ticks(smoothed, threshold: float, mode: str = "crossing") -> np.ndarray:
    """Indices of ticks that fire an RA.

    In ``crossing`` mode a tick fires when it is below *threshold* and its
    predecessor was not (the first tick fires if it is already below).
    """
    s = np.asarray(smoothed, dtype=np.float64)
    below = s < threshold
    if mode == "any":
        return np.flatnonzero(below)
    if mode != "crossing":
        raise ValueError(f"unknown trigger mode {mode!r}")
    prev = np.concatenate([[False], below[:-1]])
    return np.flatnonzero(below & ~prev)


def triggers(timeline: Timeline, params: PolicyParams, mode: str = "crossing") -> list[TriggerEvent]:
    s = smooth(timeline.prob, params.window_s)
    return [
        TriggerEvent(timeline.participant, timeline.session, float(timeline.t_s[i]))
        for i in trigger_ticks(s, params.threshold, mode)
    ]


def _median(x: list[float]) -> float:
    return float(np.median(x)) if x else UNDEFINED


def _pct(hit: int, total: int) -> float:
    return 100.0 * hit / total if total else UNDEFINED


def evaluate_policy(
    events: list[TriggerEvent],
    segments: list[Segment],
    stats: SequenceStats,
    params: PolicyParams | None = None,
) -> PolicyReport:
    """Score trigger events against ground-truth segments.

    A segment has an RA when at least one event time lies in
    ``[t_start_s, t_end_s)``. Long/short DS use the thresholds in *stats*.
    The elapsed time before RA runs from DS start to its first event.
    """
    by_session: dict[tuple[str, str], list[float]] = defaultdict(list)
    for e in events:
        by_session[(e.participant, e.session)].append(e.t_s)
    seg_sessions = {(s.participant, s.session) for s in segments}
    stray = set(by_session) - seg_sessions
    if stray:
        raise ValueError(f"events for sessions without segments: {sorted(stray)}")
    times = {k: np.sort(np.asarray(v)) for k, v in by_session.items()}

    counts = {"long": [0, 0], "short": [0, 0], ES: [0, 0]}
    ds_durations: list[float] = []
    elapsed: list[float] = []
    for seg in segments:
        t = times.get((seg.participant, seg.session))
        first = None
        if t is not None:
            i = np.searchsorted(t, seg.t_start_s - 1e-9, side="left")
            if i < len(t) and t[i] < seg.t_end_s - 1e-9:
                first = float(t[i])
        has_ra = first is not None
        if seg.kind == ES:
            counts[ES][0] += has_ra
            counts[ES][1] += 1
            continue
        if stats.is_long(seg.duration_s):
            counts["long"][0] += has_ra
            counts["long"][1] += 1
        elif stats.is_short(seg.duration_s):
            counts["short"][0] += has_ra
            counts["short"][1] += 1
        if has_ra:
            ds_durations.append(seg.duration_s)
            elapsed.append(first - seg.t_start_s)
    return PolicyReport(
        pct_long_ds_with_ra=_pct(*counts["long"]),
        pct_es_with_ra=_pct(*counts[ES]),
        pct_short_ds_with_ra=_pct(*counts["short"]),
        median_ds_duration_with_ra_s=_median(ds_durations),
        median_elapsed_before_ra_s=_median(elapsed),
        window_s=params.window_s if params else UNDEFINED,
        threshold=params.threshold if params else UNDEFINED,
        n_long_ds=counts["long"][1],
        n_es=counts[ES][1],
        n_short_ds=counts["short"][1],
        n_events=len(events),
    )


def run_policy(
    timelines: list[Timeline],
    segments: list[Segment],
    stats: SequenceStats,
    params: PolicyParams,
    mode: str = "crossing",
) -> PolicyReport:
    events = [e for tl in timelines for e in triggers(tl, params, mode)]
    return evaluate_policy(events, segments, stats, params)


def sweep_grid(
    windows=DEFAULT_WINDOWS,
    thresholds=DEFAULT_THRESHOLDS,
    anchor_window: float = 3.0,
    anchor_threshold: float = 0.35,
    layout: str = "cross",
) -> list[PolicyParams]:
    """Grid points: ``cross`` gives the threshold block at the anchor window then the window block at the anchor threshold."""
    if layout == "product":
        return [PolicyParams(w, th) for w in windows for th in thresholds]
    if layout != "cross":
        raise ValueError(f"unknown grid layout {layout!r}")
    return [PolicyParams(anchor_window, th) for th in thresholds] + [
        PolicyParams(w, anchor_threshold) for w in windows
    ]


_METRICS = {
    "Long DS": "pct_long_ds_with_ra",
    "ES": "pct_es_with_ra",
    "Short DS": "pct_short_ds_with_ra",
    "DS Length": "median_ds_duration_with_ra_s",
    "Re-engage Point": "median_elapsed_before_ra_s",
}


def policy_sweep(
    timelines: list[Timeline],
    segments: list[Segment],
    stats: SequenceStats,
    grid: list[PolicyParams],
    mode: str = "crossing",
    anchor_window: float = 3.0,
    anchor_threshold: float = 0.35,
) -> tuple[pd.DataFrame, dict[str, dict[str, float]]]:
    """Evaluate every grid point and rank-correlate parameters with each metric.

    Returns the sweep table (one row per grid point, in grid order) and
    Spearman correlations of threshold vs metric at the anchor window and of
    window vs metric at the anchor threshold; NaN where fewer than two
    distinct grid values exist.
    """
    if not grid:
        raise ValueError("empty parameter grid")
    reports = [run_policy(timelines, segments, stats, p, mode) for p in grid]
    table = pd.DataFrame(
        [[r.window_s, r.threshold] + [getattr(r, m) for m in _METRICS.values()] for r in reports],
        columns=SWEEP_COLUMNS,
    )
    uniq = {(r.window_s, r.threshold): r for r in reports}
    corrs: dict[str, dict[str, float]] = {"threshold": {}, "window": {}}
    at_w = sorted((p, r) for p, r in uniq.items() if math.isclose(p[0], anchor_window))
    at_t = sorted((p, r) for p, r in uniq.items() if math.isclose(p[1], anchor_threshold))
    for name, attr in _METRICS.items():
        corrs["threshold"][name] = _rank_corr([p[1] for p, _ in at_w], [getattr(r, attr) for _, r in at_w])
        corrs["window"][name] = _rank_corr([p[0] for p, _ in at_t], [getattr(r, attr) for _, r in at_t])
    return table, corrs


def _rank_corr(x: list[float], y: list[float]) -> float:
    pairs = [(a, b) for a, b in zip(x, y) if not math.isnan(b)]
    if len(pairs) < 2:
        return UNDEFINED
    return spearman([a for a, _ in pairs], [b for _, b in pairs])


def tradeoff_curves(table: pd.DataFrame) -> dict:
    """Plot-ready (x, long DS %, ES %) series for the threshold and window blocks of a sweep."""
    out = {}
    for by, fixed in (("Threshold", "Window"), ("Window", "Threshold")):
        series = {}
        for value, block in table.groupby(fixed, sort=True):
            if len(block) < 2:
                continue
            block = block.drop_duplicates(subset=[by]).sort_values(by)
            series[str(value)] = {
                by.lower(): block[by].tolist(),
                "long_ds_pct": block["Long DS"].tolist(),
                "es_pct": block["ES"].tolist(),
            }
        out[f"vary_{by.lower()}"] = series
    return out
