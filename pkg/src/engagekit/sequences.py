"""Engagement/disengagement sequences on the window grid, their duration statistics and trend tests."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd

from .dataset import LABEL
from .preprocess import WindowTable
from .stats import LinearTrend, ols_trend

UNDEFINED = float("nan")
ES, DS = "ES", "DS"


@dataclass(frozen=True)
class Segment:
    kind: str
    participant: str
    session: str
    t_start_s: float
    t_end_s: float
    duration_s: float
    n_windows: int


def runs(labels: np.ndarray) -> list[tuple[int, int, int]]:
    """Maximal constant runs as (value, start index, length)."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        return []
    cut = np.flatnonzero(labels[1:] != labels[:-1]) + 1
    starts = np.concatenate([[0], cut])
    ends = np.concatenate([cut, [len(labels)]])
    return [(int(labels[a]), int(a), int(b - a)) for a, b in zip(starts, ends)]


def segments_from_labels(
    labels: np.ndarray, t_start: np.ndarray, participant: str, session: str, stride_s: float = 0.5
) -> list[Segment]:
    out = []
    for value, a, length in runs(labels):
        duration = length * stride_s
        t0 = float(t_start[a])
        out.append(Segment(ES if value == 1 else DS, participant, session, t0, t0 + duration, duration, length))
    return out


def segment_labels(windows: WindowTable, stride_s: float = 0.5, label_column: str = LABEL) -> list[Segment]:
    """Split every session's window labels into maximal ES/DS runs.

    A run of ``n`` consecutive windows lasts ``n * stride_s`` seconds, so the
    runs of a gapless session tile its window grid exactly.
    """
    data = windows.chronological().data
    out: list[Segment] = []
    for (p, s), block in data.groupby(["participant_id", "session_id"], sort=False):
        out += segments_from_labels(
            block[label_column].to_numpy(), block["t_start_s"].to_numpy(), str(p), str(s), stride_s
        )
    return out


def segments_frame(segments: list[Segment]) -> pd.DataFrame:
    cols = ["kind", "participant", "session", "t_start_s", "t_end_s", "duration_s", "n_windows"]
    return pd.DataFrame([asdict(s) for s in segments], columns=cols)


@dataclass(frozen=True)
class SequenceStats:
    """Duration quartiles per kind and how disengaged time splits across long, mid and short DS.

    A DS is long when its duration is at least the DS upper quartile and
    short when it is below the DS lower quartile. ``long_share_strict`` uses
    ``>`` for the long boundary instead.
    """

    es_q1: float
    es_median: float
    es_q3: float
    ds_q1: float
    ds_median: float
    ds_q3: float
    n_es: int
    n_ds: int
    long_share: float
    mid_share: float
    short_share: float
    long_share_strict: float
    n_long: int
    n_long_strict: int
    n_short: int

    @property
    def long_threshold(self) -> float:
        return self.ds_q3

    @property
    def short_threshold(self) -> float:
        return self.ds_q1

    def is_long(self, duration: float, strict: bool = False) -> bool:
        return duration > self.ds_q3 if strict else duration >= self.ds_q3

    def is_short(self, duration: float) -> bool:
        return duration < self.ds_q1

    def as_dict(self) -> dict:
        return asdict(self)


def _quartiles(x: np.ndarray) -> tuple[float, float, float]:
    if len(x) == 0:
        return UNDEFINED, UNDEFINED, UNDEFINED
    q1, q2, q3 = np.percentile(x, [25, 50, 75], method="linear")
    return float(q1), float(q2), float(q3)


def sequence_stats(segments: list[Segment]) -> SequenceStats:
    """Quartiles by linear interpolation; NaN markers for a kind with no segments."""
    es = np.array([s.duration_s for s in segments if s.kind == ES], dtype=float)
    ds = np.array([s.duration_s for s in segments if s.kind == DS], dtype=float)
    es_q = _quartiles(es)
    ds_q = _quartiles(ds)
    total = float(ds.sum())
    if len(ds) and total > 0:
        long = ds >= ds_q[2]
        short = ds < ds_q[0]
        mid = ~long & ~short
        shares = (float(ds[long].sum()) / total, float(ds[mid].sum()) / total, float(ds[short].sum()) / total)
        strict = float(ds[ds > ds_q[2]].sum()) / total
        counts = (int(long.sum()), int((ds > ds_q[2]).sum()), int(short.sum()))
    else:
        shares = (UNDEFINED, UNDEFINED, UNDEFINED)
        strict = UNDEFINED
        counts = (0, 0, 0)
    return SequenceStats(
        *es_q, *ds_q, len(es), len(ds), *shares, strict, *counts,
    )


def box_plot_quantiles(segments: list[Segment]) -> dict:
    """Quantiles per kind for external box plots (whiskers at 1.5 IQR, clipped to data)."""
    out = {}
    for kind in (ES, DS):
        x = np.array([s.duration_s for s in segments if s.kind == kind], dtype=float)
        if len(x) == 0:
            out[kind] = None
            continue
        q1, q2, q3 = _quartiles(x)
        iqr = q3 - q1
        lo = float(x[x >= q1 - 1.5 * iqr].min())
        hi = float(x[x <= q3 + 1.5 * iqr].max())
        out[kind] = {"q1": q1, "median": q2, "q3": q3, "whisker_low": lo, "whisker_high": hi, "n": len(x)}
    return out


@dataclass(frozen=True)
class EngagementTrend:
    participant: str
    rates: list[float]
    slope: float
    p: float

    def as_dict(self) -> dict:
        return asdict(self)


def _trend_of(labels: np.ndarray, n_bins: int) -> tuple[list[float], LinearTrend]:
    chunks = [c for c in np.array_split(labels, n_bins) if len(c)]
    if len(chunks) < 3:
        raise ValueError(f"need at least 3 non-empty bins, got {len(chunks)}")
    rates = [float(c.mean()) for c in chunks]
    fit = ols_trend(np.arange(1, len(rates) + 1), rates)
    return rates, fit


def engagement_trend(windows: WindowTable, n_bins: int = 10) -> dict[str, EngagementTrend]:
    """Per participant: engagement rate in chronological bins of equal window count, OLS slope and p-value."""
    data = windows.chronological().data
    out = {}
    for p, block in data.groupby("participant_id", sort=False):
        rates, fit = _trend_of(block[LABEL].to_numpy(), n_bins)
        out[str(p)] = EngagementTrend(str(p), rates, fit.slope, fit.p)
    return out


def engagement_by_robot_speech(
    windows: WindowTable, horizon_s: float = 60.0, column: str = "robot_spoke_elapsed_s"
) -> dict[str, float]:
    """Engagement rate of windows whose robot-speech recency is within vs beyond *horizon_s*."""
    if column not in windows.data.columns:
        raise ValueError(f"feature {column!r} is absent from the window table")
    t = windows.data[column].to_numpy(dtype=float)
    y = windows.data[LABEL].to_numpy(dtype=float)
    ok = ~np.isnan(t)
    recent = ok & (t <= horizon_s)
    stale = ok & (t > horizon_s)
    return {
        "rate_recent_speech": float(y[recent].mean()) if recent.any() else UNDEFINED,
        "rate_no_recent_speech": float(y[stale].mean()) if stale.any() else UNDEFINED,
        "n_recent": int(recent.sum()),
        "n_no_recent": int(stale.sum()),
    }


def engaged_fraction(windows: WindowTable) -> float:
    return float(windows.data[LABEL].mean()) if len(windows) else math.nan
