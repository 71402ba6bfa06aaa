"""Frame-level multimodal logs: schema, CSV ingestion, truncation and a synthetic generator."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import pandas as pd

META_COLUMNS = ("participant_id", "session_id", "timestamp_s")
LABEL = "engaged"
KINDS = ("continuous", "discrete", "binary")
MODALITIES = ("visual", "audio", "game", "meta")

SessionKey = tuple[str, str]


class DataError(ValueError):
    """Raised when frame data does not conform to its schema."""


@dataclass(frozen=True)
class Column:
    name: str
    kind: str
    modality: str


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered column inventory of a frame log."""

    columns: tuple[Column, ...]

    def __post_init__(self):
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise DataError(f"duplicate column names in schema: {dupes}")
        for c in self.columns:
            if c.kind not in KINDS:
                raise DataError(f"column {c.name!r}: unknown kind {c.kind!r}")
            if c.modality not in MODALITIES:
                raise DataError(f"column {c.name!r}: unknown modality {c.modality!r}")
        for meta in META_COLUMNS:
            if meta not in names:
                raise DataError(f"schema lacks meta column {meta!r}")
        labels = [c for c in self.columns if c.name == LABEL]
        if len(labels) != 1 or labels[0].kind != "binary":
            raise DataError(f"schema needs exactly one binary label column {LABEL!r}")

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    @property
    def features(self) -> list[Column]:
        """Model input columns: everything except meta columns and the label."""
        return [c for c in self.columns if c.modality != "meta" and c.name != LABEL]

    def column(self, name: str) -> Column:
        for c in self.columns:
            if c.name == name:
                return c
        raise KeyError(name)

    def subset(self, feature_names: Iterable[str]) -> "FeatureSchema":
        """Schema restricted to meta/label columns plus the named features."""
        keep = set(feature_names)
        unknown = keep - {c.name for c in self.features}
        if unknown:
            raise DataError(f"unknown feature columns: {sorted(unknown)}")
        cols = [c for c in self.columns if c.modality == "meta" or c.name == LABEL or c.name in keep]
        return FeatureSchema(tuple(cols))


def load_schema(path: str | Path | None = None) -> FeatureSchema:
    """Read a ``name,kind,modality`` CSV; the packaged default schema when *path* is None."""
    if path is None:
        text = resources.files("engagekit.data").joinpath("default_schema.csv").read_text()
    else:
        text = Path(path).read_text()
    rows = list(csv.DictReader(text.splitlines()))
    if not rows or set(rows[0]) != {"name", "kind", "modality"}:
        raise DataError("schema file must have header name,kind,modality")
    return FeatureSchema(tuple(Column(r["name"].strip(), r["kind"].strip(), r["modality"].strip()) for r in rows))


@dataclass(frozen=True)
class FrameTable:
    """Per-frame records grouped by (participant, session), chronological within each session.

    ``data`` holds exactly the schema columns in schema order: identifiers as
    ``str``, the label as ``int64`` and everything else as ``float64``.
    """

    schema: FeatureSchema
    data: pd.DataFrame

    def __len__(self) -> int:
        return len(self.data)

    @property
    def participants(self) -> list[str]:
        return list(dict.fromkeys(self.data["participant_id"]))

    def sessions(self) -> list[SessionKey]:
        """Session keys in order of first appearance."""
        pairs = zip(self.data["participant_id"], self.data["session_id"])
        return list(dict.fromkeys(pairs))

    def session_index(self) -> dict[SessionKey, int]:
        """Per-participant chronological ordinal of each session."""
        counters: dict[str, int] = {}
        out = {}
        for p, s in self.sessions():
            out[(p, s)] = counters.get(p, 0)
            counters[p] = out[(p, s)] + 1
        return out

    def iter_sessions(self):
        for (p, s), block in self.data.groupby(["participant_id", "session_id"], sort=False):
            yield (p, s), block


def _validate_frame_frame(df: pd.DataFrame, schema: FeatureSchema) -> pd.DataFrame:
    if df.empty:
        raise DataError("frame table is empty")
    for col in ("participant_id", "session_id"):
        if df[col].isna().any() or (df[col] == "").any():
            row = int(np.flatnonzero(df[col].isna().to_numpy() | (df[col] == "").to_numpy())[0])
            raise DataError(f"row {row + 1}: empty {col}")
    label = df[LABEL].to_numpy(dtype=float)
    bad = ~np.isin(label, (0.0, 1.0))
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise DataError(f"row {row + 1}: label {LABEL!r} must be 0 or 1, got {df[LABEL].iloc[row]!r}")
    df[LABEL] = label.astype(np.int64)

    ts = df["timestamp_s"].to_numpy()
    bad = ~np.isfinite(ts) | (ts < 0)
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise DataError(f"row {row + 1}: timestamp_s must be finite and >= 0")

    # stable grouping by first appearance keeps within-session order
    key = df["participant_id"] + "\x1f" + df["session_id"]
    order = pd.factorize(key)[0]
    perm = np.argsort(order, kind="stable")
    if not np.array_equal(perm, np.arange(len(df))):
        df = df.iloc[perm].reset_index(drop=True)
        key = key.iloc[perm].reset_index(drop=True)
        ts = ts[perm]
    same = key.to_numpy()[1:] == key.to_numpy()[:-1]
    nonmono = same & (np.diff(ts) <= 0)
    if nonmono.any():
        row = int(np.flatnonzero(nonmono)[0]) + 1
        raise DataError(
            f"row {int(perm[row]) + 1}: timestamps not strictly increasing within session "
            f"({df['participant_id'].iloc[row]}, {df['session_id'].iloc[row]})"
        )
    return df


def frames_from_dataframe(df: pd.DataFrame, schema: FeatureSchema) -> FrameTable:
    """Validate an in-memory frame and wrap it as a :class:`FrameTable`."""
    missing = [n for n in schema.names if n not in df.columns]
    extra = [n for n in df.columns if n not in schema.names]
    if missing or extra:
        raise DataError(f"columns do not match schema (missing={missing}, extra={extra})")
    df = df[schema.names].copy()
    for name in schema.names:
        if name in ("participant_id", "session_id"):
            df[name] = df[name].astype(str)
        elif name != LABEL:
            df[name] = df[name].astype(np.float64)
    df = _validate_frame_frame(df.reset_index(drop=True), schema)
    return FrameTable(schema, df)


def _locate_bad_cell(path: Path, schema: FeatureSchema) -> str:
    raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    for name in schema.names:
        if name in ("participant_id", "session_id"):
            continue
        for i, cell in enumerate(raw[name]):
            if cell == "":
                continue
            try:
                float(cell)
            except ValueError:
                return f"row {i + 1}, column {name!r}: cannot parse {cell!r} as a number"
    return "unparseable numeric cell"


def load_frames(
    path: str | Path,
    schema: FeatureSchema,
    exclude_sessions: Iterable[SessionKey] = (),
) -> FrameTable:
    """Load a frame-level CSV export and validate it against *schema*.

    Args:
        path: CSV file with a header row of schema column names.
        schema: expected columns.
        exclude_sessions: (participant, session) pairs to drop after parsing,
            e.g. tutorial sessions.

    Raises:
        DataError: on header mismatch, bad labels, non-monotonic timestamps,
            unparseable cells or an empty file.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as f:
        header = next(csv.reader(f), None)
    if header is None:
        raise DataError(f"{path}: empty file")
    missing = [n for n in schema.names if n not in header]
    extra = [n for n in header if n not in schema.names]
    if missing or extra:
        raise DataError(f"{path}: header does not match schema (missing={missing}, extra={extra})")

    dtypes = {n: (str if n in ("participant_id", "session_id") else np.float64) for n in schema.names}
    try:
        df = pd.read_csv(
            path,
            dtype=dtypes,
            keep_default_na=False,
            na_values={n: [""] for n in schema.names if dtypes[n] is not str},
            float_precision="round_trip",
            encoding="utf-8",
        )
    except ValueError:
        raise DataError(f"{path}: {_locate_bad_cell(path, schema)}") from None
    if df.empty:
        raise DataError(f"{path}: no data rows")
    df = df[schema.names]
    exclude = set(map(tuple, exclude_sessions))
    if exclude:
        keys = list(zip(df["participant_id"], df["session_id"]))
        df = df[[k not in exclude for k in keys]].reset_index(drop=True)
    try:
        df = _validate_frame_frame(df, schema)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None
    return FrameTable(schema, df)


def save_frames(frames: FrameTable, path: str | Path) -> None:
    """Write *frames* as CSV; floats are written at full precision, NaN as empty cells."""
    frames.data.to_csv(path, index=False, na_rep="", lineterminator="\n")


def truncate_to_games(frames: FrameTable, game_bounds: Mapping[SessionKey, tuple[float, float]]) -> FrameTable:
    """Keep only frames between the first game start and last game end (inclusive) of each session."""
    df = frames.data
    keep = np.zeros(len(df), dtype=bool)
    for (p, s), block in frames.iter_sessions():
        if (p, s) not in game_bounds:
            raise DataError(f"no game bounds for session ({p}, {s})")
        lo, hi = game_bounds[(p, s)]
        t = block["timestamp_s"].to_numpy()
        keep[block.index.to_numpy()] = (t >= lo) & (t <= hi)
    return FrameTable(frames.schema, df[keep].reset_index(drop=True))


# --------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the synthetic frame generator.

    Engagement alternates between engaged (ES) and disengaged (DS) runs.
    DS durations are lognormal around ``ds_duration_median_s``; ES durations
    are lognormal and rescaled per session so that the engaged share of each
    session equals ``engagement_rate + trend_slope * (session - centre)``.
    """

    participants: int = 7
    sessions_per_participant: int = 5
    session_length_s: float = 240.0
    engagement_rate: float = 0.65
    ds_duration_median_s: float = 4.0
    ds_duration_sigma: float = 0.9
    es_duration_sigma: float = 0.9
    trend_slope: float = -0.05
    frame_rate_hz: float = 30.0
    signal: float = 0.6
    visual_noise: float = 1.0
    audio_noise: float = 1.0
    game_noise: float = 1.0
    disengaged_noise_factor: float = 1.6
    frame_noise: float = 0.5
    participant_drift: float = 0.6
    session_drift: float = 0.3
    segment_noise: float = 0.8
    speech_effect: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.participants < 1 or self.sessions_per_participant < 1:
            raise DataError("participants and sessions_per_participant must be >= 1")
        if not 0.0 < self.engagement_rate < 1.0:
            raise DataError("engagement_rate must lie in (0, 1)")
        for name in ("session_length_s", "ds_duration_median_s", "frame_rate_hz"):
            if not getattr(self, name) > 0:
                raise DataError(f"{name} must be > 0")
        if self.ds_duration_sigma < 0 or self.es_duration_sigma < 0:
            raise DataError("duration sigmas must be >= 0")
        rates = self.session_rates()
        if rates.min() <= 0.0 or rates.max() >= 1.0:
            raise DataError("trend_slope drives a session engagement rate outside (0, 1)")

    def session_rates(self) -> np.ndarray:
        idx = np.arange(self.sessions_per_participant, dtype=float)
        return self.engagement_rate + self.trend_slope * (idx - idx.mean())


# Columns driven by the engagement state, and how strongly. Sign gives the
# direction of the engaged shift; the remaining generic features carry a
# small random loading.
_LOADINGS = {
    "face_confidence": 1.0,
    "gaze_avg_x": -0.9,
    "gaze_avg_y": 0.7,
    "gaze_distance": -0.8,
    "head_distance": -0.9,
    "head_yaw": -0.4,
    "intensity": 0.3,
}


def _segments(rng: np.random.Generator, cfg: SynthConfig, rate: float) -> tuple[np.ndarray, np.ndarray]:
    """Alternating (state, duration) runs filling one session, starting engaged."""
    length = cfg.session_length_s
    ds_total = (1.0 - rate) * length
    ds: list[float] = []
    while sum(ds) < ds_total:
        ds.append(float(cfg.ds_duration_median_s * math.exp(cfg.ds_duration_sigma * rng.standard_normal())))
    ds[-1] -= sum(ds) - ds_total
    es = np.exp(cfg.es_duration_sigma * rng.standard_normal(len(ds)))
    es *= rate * length / es.sum()
    states = np.tile([1, 0], len(ds))
    durations = np.column_stack([es, ds]).ravel()
    return states, durations


def _game_columns(rng: np.random.Generator, t: np.ndarray, label: np.ndarray, fps: float) -> dict[str, np.ndarray]:
    n = len(t)
    out = {}
    starts = [0.0]
    while starts[-1] < t[-1]:
        starts.append(starts[-1] + rng.uniform(60.0, 150.0))
    game_idx = np.searchsorted(starts, t, side="right") - 1
    out["session_elapsed_s"] = t.copy()
    out["game_elapsed_s"] = t - np.asarray(starts)[game_idx]
    out["games_played"] = game_idx.astype(float)
    out["game_type"] = rng.integers(0, 5, size=len(starts)).astype(float)[game_idx]
    out["challenge_level"] = rng.integers(1, 4, size=len(starts)).astype(float)[game_idx]
    # incorrect answers arrive faster while disengaged
    rate = np.where(label == 1, 0.01, 0.05) / fps
    events = rng.random(n) < rate
    inc_session = np.cumsum(events).astype(float)
    first_of_game = np.searchsorted(game_idx, game_idx, side="left")
    base = np.concatenate([[0.0], inc_session])[first_of_game]
    out["incorrect_session"] = inc_session
    out["incorrect_game"] = inc_session - base
    return out


def _robot_speech(rng: np.random.Generator, t: np.ndarray, label: np.ndarray, effect: float, fps: float) -> np.ndarray:
    spoken = rng.random(len(t)) < (1.0 / 40.0) / fps
    if effect > 0:
        # the robot talks more while the child is engaged
        spoken |= (label == 1) & (rng.random(len(t)) < effect / fps)
    last = np.where(spoken, t, -np.inf)
    last = np.maximum.accumulate(last)
    return np.where(np.isfinite(last), t - last, t)


def generate_synthetic(cfg: SynthConfig, schema: FeatureSchema | None = None) -> FrameTable:
    """Deterministic synthetic frame table with a learnable, paper-shaped engagement signal."""
    schema = schema or load_schema()
    rng = np.random.default_rng(cfg.seed)
    feats = schema.features
    generic = [c for c in feats if c.kind == "continuous"]
    noise_scale = {"visual": cfg.visual_noise, "audio": cfg.audio_noise, "game": cfg.game_noise}
    loadings = np.array(
        [_LOADINGS.get(c.name, 0.0) for c in generic], dtype=float
    )
    rates = cfg.session_rates()
    fps = cfg.frame_rate_hz
    n_frames = int(round(cfg.session_length_s * fps))
    t = np.arange(n_frames) / fps
    blocks = []
    for p in range(cfg.participants):
        p_offset = cfg.participant_drift * rng.standard_normal(len(generic))
        p_loadings = loadings + 0.15 * rng.standard_normal(len(generic))
        for s in range(cfg.sessions_per_participant):
            s_offset = cfg.session_drift * rng.standard_normal(len(generic))
            states, durations = _segments(rng, cfg, rates[s])
            bounds = np.concatenate([[0.0], np.cumsum(durations)])
            seg_of = np.clip(np.searchsorted(bounds, t, side="right") - 1, 0, len(states) - 1)
            label = states[seg_of]
            n_seg = len(states)
            sigma = np.where(states == 0, cfg.disengaged_noise_factor, 1.0)
            seg_noise = cfg.segment_noise * sigma[:, None] * rng.standard_normal((n_seg, len(generic)))
            scale = np.array([noise_scale[c.modality] for c in generic])
            shift = cfg.signal * np.where(label == 1, 1.0, -1.0)[:, None] * p_loadings[None, :]
            values = (
                p_offset
                + s_offset
                + shift
                + seg_noise[seg_of]
                + cfg.frame_noise * rng.standard_normal((n_frames, len(generic)))
            ) * scale
            cols: dict[str, np.ndarray] = {c.name: values[:, j] for j, c in enumerate(generic)}

            if "face_confidence" in cols:
                cols["face_confidence"] = 1.0 / (1.0 + np.exp(-(1.2 + cols["face_confidence"])))
            if "face_success" in schema.names:
                conf = cols.get("face_confidence", np.full(n_frames, 0.9))
                cols["face_success"] = (conf > 0.5).astype(float)
            if "face_lost_elapsed_s" in cols:
                ok = cols.get("face_success", np.ones(n_frames)) > 0
                last = np.maximum.accumulate(np.where(ok, t, -np.inf))
                cols["face_lost_elapsed_s"] = np.where(np.isfinite(last), t - last, t)
            if "people_count" in schema.names:
                seg_people = 1 + rng.binomial(2, np.where(states == 1, 0.2, 0.45))
                cols["people_count"] = seg_people[seg_of].astype(float)
            game = _game_columns(rng, t, label, fps)
            for name, v in game.items():
                if name in schema.names:
                    cols[name] = v
            if "robot_spoke_elapsed_s" in schema.names:
                cols["robot_spoke_elapsed_s"] = _robot_speech(rng, t, label, cfg.speech_effect, fps)

            block = {
                "participant_id": np.full(n_frames, f"P{p + 1}"),
                "session_id": np.full(n_frames, f"S{s + 1:02d}"),
                "timestamp_s": t.copy(),
                LABEL: label.astype(np.int64),
            }
            for c in feats:
                block[c.name] = cols.get(c.name, np.zeros(n_frames))
            blocks.append(pd.DataFrame(block)[schema.names])
    df = pd.concat(blocks, ignore_index=True)
    return FrameTable(schema, df)
