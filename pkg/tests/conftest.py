from __future__ import annotations

import numpy as np
import pandas as pd
import pytest

from engagekit.dataset import Column, FeatureSchema, frames_from_dataframe

META = [
    Column("participant_id", "discrete", "meta"),
    Column("session_id", "discrete", "meta"),
    Column("timestamp_s", "continuous", "meta"),
    Column("engaged", "binary", "meta"),
]


@pytest.fixture
def tiny_schema() -> FeatureSchema:
    return FeatureSchema(tuple(META + [
        Column("gaze", "continuous", "visual"),
        Column("loudness", "continuous", "audio"),
        Column("people", "discrete", "visual"),
        Column("face_ok", "binary", "visual"),
    ]))


def random_stream(rng: np.random.Generator, n_frames: int | None = None, missing: float = 0.1) -> pd.DataFrame:
    """One session of jittered ~30 Hz frames with random values, gaps and missing cells."""
    n = int(rng.integers(5, 120)) if n_frames is None else n_frames
    gaps = rng.choice([1 / 30, 1 / 30, 1 / 30, 1 / 15, 0.4], size=n) * rng.uniform(0.9, 1.1, size=n)
    t = rng.uniform(0, 2) + np.cumsum(gaps)
    df = pd.DataFrame({
        "participant_id": "P1",
        "session_id": "S1",
        "timestamp_s": t,
        "engaged": rng.integers(0, 2, size=n),
        "gaze": rng.normal(size=n),
        "loudness": rng.integers(0, 4, size=n).astype(float),  # repeated values exercise ties
        "people": rng.integers(0, 3, size=n).astype(float),
        "face_ok": rng.integers(0, 2, size=n).astype(float),
    })
    for col in ("gaze", "loudness", "people", "face_ok"):
        df.loc[rng.random(n) < missing, col] = np.nan
    return df


@pytest.fixture
def make_frames(tiny_schema):
    def make(df: pd.DataFrame):
        return frames_from_dataframe(df, tiny_schema)

    return make
