from itertools import combinations

import numpy as np
import pytest

from engagekit.dataset import SynthConfig, generate_synthetic
from engagekit.models import GbdtConfig, train_gbdt
from engagekit.preprocess import apply_scaler, fit_scaler, select_features, window_aggregate
from engagekit.protocols import (
    Generalized,
    Individualized,
    RandomSample,
    generalized_splits,
    individualized_split,
    n_train_rows,
    random_split,
    run_experiment,
    run_split,
    summarize,
)

SMALL = GbdtConfig(n_trees=8, n_bags=2, max_depth=3)


@pytest.fixture(scope="module")
def windows():
    cfg = SynthConfig(participants=4, sessions_per_participant=2, session_length_s=40, seed=3)
    return window_aggregate(generate_synthetic(cfg))


def test_generalized_splits_partition_participants(windows):
    pid = windows.data["participant_id"].to_numpy()
    for m in (1, 2, 3):
        splits = generalized_splits(windows, m)
        assert len(splits) == len(list(combinations(windows.participants, m)))
        for s in splits:
            assert not set(pid[s.train]) & set(pid[s.test])
            assert len(set(pid[s.train])) == m
            assert sorted(np.concatenate([s.train, s.test])) == list(range(len(windows)))
    with pytest.raises(ValueError):
        generalized_splits(windows, 4)


def test_individualized_split_is_chronological(windows):
    user = windows.where(windows.data["participant_id"].to_numpy() == "P2")
    d = user.data
    for f in (0.1, 0.3, 0.5, 0.9):
        s = individualized_split(user, f)
        key = lambda rows: list(zip(d["session_index"].iloc[rows], d["t_start_s"].iloc[rows]))  # noqa: E731
        assert max(key(s.train)) < min(key(s.test))
        assert len(s.train) == n_train_rows(f, len(user))


def test_fraction_rounding_is_exact():
    assert n_train_rows(0.3, 10) == 3
    assert n_train_rows(0.1, 10) == 1
    assert n_train_rows(0.5, 11) == 6


def test_random_split_reproducible(windows):
    a = random_split(windows, 0.5, 7)
    b = random_split(windows, 0.5, 7)
    assert np.array_equal(a.train, b.train)
    assert not np.array_equal(a.train, random_split(windows, 0.5, 8).train)
    assert len(np.intersect1d(a.train, a.test)) == 0
    with pytest.raises(ValueError):
        random_split(windows, 1.0, 0)


def test_test_rows_never_influence_the_model(windows):
    split = generalized_splits(windows, 2)[0]
    table = select_features(windows, "key")
    train = table.take(split.train)
    scaler = fit_scaler(train)
    reference = train_gbdt(apply_scaler(scaler, train), SMALL).to_json()

    perturbed = table.data.copy()
    rng = np.random.default_rng(0)
    cols = table.feature_names
    perturbed.loc[split.test, cols] = rng.normal(size=(len(split.test), len(cols))) * 100
    perturbed.loc[split.test, "engaged"] = 1 - perturbed.loc[split.test, "engaged"]
    other = type(table)(table.features, perturbed).take(split.train)
    again = train_gbdt(apply_scaler(fit_scaler(other), other), SMALL).to_json()
    assert again == reference


def test_run_split_reports_and_predictions(windows):
    split = generalized_splits(windows, 3)[0]
    res = run_split(windows, split, SMALL, "key", family_key=("generalized", 3.0))
    assert res.report.n_test == len(res.predictions) == len(split.test)
    assert 0.0 <= res.report.auroc <= 1.0
    assert res.predictions["prob"].between(0, 1, inclusive="neither").all()
    assert res.report.split_id.startswith("train=")


def test_logistic_baseline_runs_with_missing_values(windows):
    split = random_split(windows, 0.5, 0)
    res = run_split(windows, split, None, "visual", model_kind="logistic")
    assert np.isfinite(res.predictions["prob"]).all()


def test_experiment_and_summary_layout(windows):
    reports = []
    for spec in (Individualized(0.5), RandomSample(0.5, seeds=(0, 1))):
        reports += [r.report for r in run_experiment(windows, spec, SMALL, "key")]
    table = summarize(reports)
    assert list(table.columns)[:3] == ["family", "Training Proportion", "n_splits"]
    assert table.set_index("family")["n_splits"].to_dict() == {"individualized": 4, "random": 2}
    gen = summarize([r.report for r in run_experiment(windows, Generalized(1), SMALL, "key")])
    assert list(gen.columns[1:]) == ["Training Users", "n_splits", "AUROC", "Accuracy", "Engagement Precision",
                                     "Engagement Recall", "Disengagement Precision", "Disengagement Recall"]


def test_experiment_is_deterministic(windows):
    a = [r.predictions for r in run_experiment(windows, RandomSample(0.3, seeds=(4,)), SMALL, "key")]
    b = [r.predictions for r in run_experiment(windows, RandomSample(0.3, seeds=(4,)), SMALL, "key")]
    assert a[0].equals(b[0])
