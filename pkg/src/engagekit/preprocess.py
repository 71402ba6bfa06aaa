"""Overlapping-window feature aggregation, train-only standardization and feature-group selection."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .dataset import LABEL, DataError, FeatureSchema, FrameTable

WINDOW_META = ("participant_id", "session_id", "session_index", "t_start_s", "t_end_s", "n_frames", LABEL)
EPS_T = 1e-9

# Feature concepts that carried most of the signal; values are the base
# frame columns that realise each concept in the default schema.
KEY_FEATURES: dict[str, tuple[str, ...]] = {
    "elapsed session time": ("session_elapsed_s",),
    "people count": ("people_count",),
    "eye-gaze direction": ("gaze_avg_x", "gaze_avg_y", "gaze_avg_z"),
    "camera-to-user distance": ("head_distance",),
    "time since robot talked": ("robot_spoke_elapsed_s",),
    "incorrect-response count": ("incorrect_game", "incorrect_session"),
    "face-detection confidence": ("face_confidence",),
}

GROUPS = ("all", "visual", "audio", "game", "key")


@dataclass(frozen=True)
class WindowFeature:
    name: str
    base: str
    modality: str
    stat: str


def derived_features(schema: FeatureSchema) -> tuple[WindowFeature, ...]:
    """Window feature inventory for a frame schema: medians, then variances, then change flags."""
    cols = schema.features
    out = [WindowFeature(c.name, c.name, c.modality, "median") for c in cols]
    out += [WindowFeature(c.name + "_var", c.name, c.modality, "var") for c in cols if c.kind == "continuous"]
    out += [WindowFeature(c.name + "_chg", c.name, c.modality, "chg") for c in cols if c.kind != "continuous"]
    return tuple(out)


@dataclass(frozen=True)
class WindowTable:
    """Window-level samples, chronological within each session.

    ``data`` has the :data:`WINDOW_META` columns followed by one column per
    entry of ``features``.
    """

    features: tuple[WindowFeature, ...]
    data: pd.DataFrame

    def __len__(self) -> int:
        return len(self.data)

    @property
    def feature_names(self) -> list[str]:
        return [f.name for f in self.features]

    @property
    def participants(self) -> list[str]:
        return list(dict.fromkeys(self.data["participant_id"]))

    def X(self) -> np.ndarray:
        return self.data[self.feature_names].to_numpy(dtype=np.float64)

    def y(self) -> np.ndarray:
        return self.data[LABEL].to_numpy(dtype=np.int64)

    def take(self, rows: Sequence[int] | np.ndarray) -> "WindowTable":
        return WindowTable(self.features, self.data.iloc[np.asarray(rows)].reset_index(drop=True))

    def where(self, mask: np.ndarray) -> "WindowTable":
        return WindowTable(self.features, self.data[np.asarray(mask, dtype=bool)].reset_index(drop=True))

    def chronological(self) -> "WindowTable":
        """Rows sorted by (participant order, session index, window start)."""
        p_order = {p: i for i, p in enumerate(self.participants)}
        key = self.data["participant_id"].map(p_order)
        order = np.lexsort((self.data["t_start_s"].to_numpy(), self.data["session_index"].to_numpy(), key.to_numpy()))
        return self.take(order)


def _session_windows(t: np.ndarray, window_s: float, stride_s: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Window starts, (lo, hi) frame bounds per window."""
    if len(t) == 0:
        empty = np.empty(0, dtype=np.int64)
        return np.empty(0), empty, empty
    k0 = math.ceil(t[0] / stride_s - EPS_T)
    k1 = math.floor((t[-1] - window_s) / stride_s + EPS_T)
    if k1 < k0:
        empty = np.empty(0, dtype=np.int64)
        return np.empty(0), empty, empty
    starts = np.arange(k0, k1 + 1) * stride_s
    lo = np.searchsorted(t, starts - EPS_T, side="left")
    hi = np.searchsorted(t, starts + window_s - EPS_T, side="left")
    keep = hi > lo
    return starts[keep], lo[keep], hi[keep]


def window_aggregate(frames: FrameTable, window_s: float = 1.0, stride_s: float = 0.5) -> WindowTable:
    """Aggregate frames into overlapping windows ``[k*stride, k*stride + window)``.

    Each window emits the median of every feature, the population variance of
    continuous features, a change flag for discrete/binary features and the
    median label (an even split counts as disengaged). Windows must lie fully
    inside the observed span of their session; windows without frames are
    skipped, and no window crosses a session boundary.
    """
    if not window_s > 0 or not 0 < stride_s <= window_s:
        raise ValueError("need window_s > 0 and 0 < stride_s <= window_s")
    schema = frames.schema
    feats = derived_features(schema)
    base_cols = [c.name for c in schema.features]
    cont = np.array([c.kind == "continuous" for c in schema.features])
    session_index = frames.session_index()

    parts = []
    for (p, s), block in frames.iter_sessions():
        t = block["timestamp_s"].to_numpy()
        values = block[base_cols].to_numpy(dtype=np.float64)
        label = block[LABEL].to_numpy()
        starts, lo, hi = _session_windows(t, window_s, stride_s)
        if len(starts) == 0:
            continue
        counts = hi - lo
        width = int(counts.max())
        idx = lo[:, None] + np.arange(width)[None, :]
        pad = idx >= hi[:, None]
        idx = np.where(pad, 0, idx)
        cube = values[idx]
        cube[pad] = np.nan
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            med = np.nanmedian(cube, axis=1)
            var = np.nanvar(cube[:, :, cont], axis=1)
            disc = cube[:, :, ~cont]
            hi_v, lo_v = np.nanmax(disc, axis=1), np.nanmin(disc, axis=1)
            # a column with no observed value in the window has no change flag
            changed = np.where(np.isnan(hi_v), np.nan, (hi_v != lo_v).astype(np.float64))
        lab = np.where(pad, 0, label[idx]).sum(axis=1)
        engaged = (2 * lab > counts).astype(np.int64)

        part = pd.DataFrame(
            {
                "participant_id": p,
                "session_id": s,
                "session_index": session_index[(p, s)],
                "t_start_s": starts,
                "t_end_s": starts + window_s,
                "n_frames": counts.astype(np.int64),
                LABEL: engaged,
            }
        )
        feat_block = np.hstack([med, var, changed])
        parts.append(pd.concat([part, pd.DataFrame(feat_block, columns=[f.name for f in feats])], axis=1))
    if parts:
        data = pd.concat(parts, ignore_index=True)
    else:
        data = pd.DataFrame(columns=list(WINDOW_META) + [f.name for f in feats])
    return WindowTable(feats, data)


def save_windows(table: WindowTable, path: str | Path) -> None:
    table.data.to_csv(path, index=False, na_rep="", lineterminator="\n")


def load_windows(path: str | Path, schema: FeatureSchema) -> WindowTable:
    """Read a window CSV written by :func:`save_windows`; feature columns may be any subset."""
    data = pd.read_csv(
        path,
        dtype={"participant_id": str, "session_id": str},
        keep_default_na=False,
        na_values=[""],
        float_precision="round_trip",
    )
    missing = [c for c in WINDOW_META if c not in data.columns]
    if missing:
        raise DataError(f"{path}: window table lacks columns {missing}")
    by_name = {f.name: f for f in derived_features(schema)}
    names = [c for c in data.columns if c not in WINDOW_META]
    unknown = [c for c in names if c not in by_name]
    if unknown:
        raise DataError(f"{path}: columns not derivable from schema: {unknown}")
    return WindowTable(tuple(by_name[n] for n in names), data)


# --------------------------------------------------------------------------
# standardization


@dataclass(frozen=True)
class Scaler:
    """Per-feature mean and population standard deviation from a training table."""

    features: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"features": list(self.features), "mean": self.mean.tolist(), "std": self.std.tolist()}


def fit_scaler(train: WindowTable) -> Scaler:
    if len(train) == 0:
        raise ValueError("cannot fit a scaler on an empty table")
    X = train.X()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mean = np.nanmean(X, axis=0)
        std = np.nanstd(X, axis=0)
    mean = np.nan_to_num(mean, nan=0.0)
    std = np.nan_to_num(std, nan=0.0)
    return Scaler(tuple(train.feature_names), mean, std)


def _check_features(scaler: Scaler, table: WindowTable) -> None:
    if tuple(table.feature_names) != scaler.features:
        raise ValueError("feature set of table does not match the scaler")


def apply_scaler(scaler: Scaler, table: WindowTable) -> WindowTable:
    """Standardize feature columns; constant training columns map to 0."""
    _check_features(scaler, table)
    X = table.X()
    safe = np.where(scaler.std > 0, scaler.std, 1.0)
    Z = np.where(scaler.std > 0, (X - scaler.mean) / safe, np.where(np.isnan(X), np.nan, 0.0))
    data = table.data.copy()
    data[table.feature_names] = Z
    return WindowTable(table.features, data)


def invert_scaler(scaler: Scaler, table: WindowTable) -> WindowTable:
    _check_features(scaler, table)
    data = table.data.copy()
    data[table.feature_names] = table.X() * scaler.std + scaler.mean
    return WindowTable(table.features, data)


# --------------------------------------------------------------------------
# feature groups


def key_base_columns() -> list[str]:
    return [c for cols in KEY_FEATURES.values() for c in cols]


def select_features(table: WindowTable, group: str | Iterable[str] = "all") -> WindowTable:
    """Project *table* onto a feature group, keeping meta and label columns.

    *group* is ``all``, a modality (``visual``, ``audio``, ``game``), ``key``
    for the seven key feature concepts, or an explicit list of base or
    derived column names. Base names pull in their ``_var``/``_chg`` columns.
    """
    if isinstance(group, str):
        if group == "all":
            return table
        if group in ("visual", "audio", "game"):
            keep = [f for f in table.features if f.modality == group]
        elif group == "key":
            bases = set(key_base_columns())
            keep = [f for f in table.features if f.base in bases]
            found = {f.base for f in keep}
            absent = [c for c in key_base_columns() if c not in found]
            if absent:
                raise ValueError(f"key feature columns absent from table: {absent}")
        else:
            raise ValueError(f"unknown feature group {group!r}")
    else:
        wanted = list(group)
        names = {f.name for f in table.features}
        bases = {f.base for f in table.features}
        unknown = [w for w in wanted if w not in names and w not in bases]
        if unknown:
            raise ValueError(f"unknown feature columns: {unknown}")
        wanted_set = set(wanted)
        keep = [f for f in table.features if f.name in wanted_set or f.base in wanted_set]
    cols = list(WINDOW_META) + [f.name for f in keep]
    return WindowTable(tuple(keep), table.data[cols].copy())
