import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from engagekit.preprocess import (
    apply_scaler,
    derived_features,
    fit_scaler,
    invert_scaler,
    load_windows,
    save_windows,
    select_features,
    window_aggregate,
)

from conftest import random_stream
from oracles import brute_windows

BASES = ["gaze", "loudness", "people", "face_ok"]
KINDS = ["continuous", "continuous", "discrete", "binary"]


def _same(a, b):
    return (math.isnan(a) and math.isnan(b)) or a == pytest.approx(b, rel=1e-12, abs=1e-12)


def _check_against_oracle(df, table):
    want = brute_windows(df["timestamp_s"].tolist(), df[BASES].to_numpy().tolist(), KINDS, df["engaged"].tolist())
    got = table.data
    assert len(got) == len(want)
    for (_, g), w in zip(got.iterrows(), want):
        assert g["t_start_s"] == pytest.approx(w["t_start_s"])
        assert g["n_frames"] == w["n_frames"]
        assert g["engaged"] == w["engaged"]
        for j, base in enumerate(BASES):
            assert _same(g[base], w[("median", j)])
            stat = "var" if KINDS[j] == "continuous" else "chg"
            assert _same(g[f"{base}_{stat}"], w[(stat, j)])


def test_windows_match_brute_force_on_200_streams(make_frames):
    rng = np.random.default_rng(2024)
    for _ in range(200):
        df = random_stream(rng)
        _check_against_oracle(df, window_aggregate(make_frames(df)))


def test_label_tie_resolves_to_disengaged(make_frames):
    t = np.arange(30) / 30
    df = pd.DataFrame({"participant_id": "P", "session_id": "S", "timestamp_s": t,
                       "engaged": [1, 0] * 15, "gaze": 0.0, "loudness": 0.0, "people": 1.0, "face_ok": 1.0})
    df = pd.concat([df, df.iloc[[-1]].assign(timestamp_s=1.0)], ignore_index=True)
    table = window_aggregate(make_frames(df))
    assert table.data["n_frames"].iloc[0] == 30
    assert table.data["engaged"].iloc[0] == 0


def test_window_count_for_full_session(make_frames):
    t = np.arange(0, 60 * 30 + 1) / 30  # 0..60 s inclusive
    df = pd.DataFrame({"participant_id": "P", "session_id": "S", "timestamp_s": t, "engaged": 1,
                       "gaze": 0.0, "loudness": 0.0, "people": 1.0, "face_ok": 1.0})
    table = window_aggregate(make_frames(df))
    assert len(table) == 119
    assert table.data["t_start_s"].iloc[-1] == 59.0


def test_short_session_gives_no_windows(make_frames):
    df = random_stream(np.random.default_rng(0), 10)
    df["timestamp_s"] = np.linspace(3.0, 3.5, 10)
    assert len(window_aggregate(make_frames(df))) == 0


def test_sessions_never_share_a_window(make_frames):
    rng = np.random.default_rng(1)
    a = random_stream(rng, 90)
    b = random_stream(rng, 90).assign(session_id="S2")
    table = window_aggregate(make_frames(pd.concat([a, b])))
    single = [window_aggregate(make_frames(x)) for x in (a, b)]
    assert len(table) == sum(len(s) for s in single)


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.integers(0, 2**31 - 1))
def test_interleaving_sessions_does_not_change_windows(make_frames, seed):
    rng = np.random.default_rng(seed)
    a = random_stream(rng, 60)
    b = random_stream(rng, 60).assign(session_id="S2")
    blocked = pd.concat([a, b], ignore_index=True)
    mixed = blocked.sort_values("timestamp_s", kind="stable")
    def by_session(df):
        out = window_aggregate(make_frames(df)).data.drop(columns="session_index")
        return out.sort_values(["session_id", "t_start_s"], kind="stable").reset_index(drop=True)

    pd.testing.assert_frame_equal(by_session(blocked), by_session(mixed))


def test_derived_inventory_counts(tiny_schema):
    names = [f.name for f in derived_features(tiny_schema)]
    assert names == BASES + ["gaze_var", "loudness_var", "people_chg", "face_ok_chg"]


def test_window_csv_round_trip(tmp_path, tiny_schema, make_frames):
    table = window_aggregate(make_frames(random_stream(np.random.default_rng(3), 100)))
    save_windows(table, tmp_path / "w.csv")
    back = load_windows(tmp_path / "w.csv", tiny_schema)
    pd.testing.assert_frame_equal(back.data, table.data, check_dtype=False)


def test_scaler_standardizes_train_and_inverts(make_frames):
    table = window_aggregate(make_frames(random_stream(np.random.default_rng(4), 110, missing=0.0)))
    train, test = table.take(range(0, len(table) // 2)), table.take(range(len(table) // 2, len(table)))
    scaler = fit_scaler(train)
    z = apply_scaler(scaler, train).X()
    live = scaler.std > 0
    assert np.allclose(np.nanmean(z[:, live], axis=0), 0.0, atol=1e-12)
    assert np.allclose(np.nanstd(z[:, live], axis=0), 1.0)
    back = invert_scaler(scaler, apply_scaler(scaler, test)).X()
    assert np.allclose(back[:, live], test.X()[:, live], equal_nan=True)


def test_constant_column_maps_to_zero(make_frames):
    df = random_stream(np.random.default_rng(5), 80, missing=0.0)
    df["people"] = 2.0
    table = window_aggregate(make_frames(df))
    z = apply_scaler(fit_scaler(table), table)
    assert (z.data["people"] == 0.0).all()


def test_scaler_rejects_other_feature_set(make_frames):
    table = window_aggregate(make_frames(random_stream(np.random.default_rng(6), 80)))
    scaler = fit_scaler(table)
    with pytest.raises(ValueError, match="does not match"):
        apply_scaler(scaler, select_features(table, ["gaze"]))


def test_feature_groups(make_frames):
    table = window_aggregate(make_frames(random_stream(np.random.default_rng(7), 80)))
    assert set(select_features(table, "audio").feature_names) == {"loudness", "loudness_var"}
    assert set(select_features(table, ["people"]).feature_names) == {"people", "people_chg"}
    with pytest.raises(ValueError):
        select_features(table, "key")
    with pytest.raises(ValueError):
        select_features(table, "smell")
