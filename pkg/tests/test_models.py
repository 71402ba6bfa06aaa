import json

import numpy as np
import pytest

from engagekit.models import (
    DEGENERATE_EPS,
    GbdtConfig,
    GbdtModel,
    fit_gbdt,
    fit_logistic,
    grow_tree,
    log_loss,
    predict_proba,
    sigmoid,
)

from oracles import newton_leaf, reference_tree


def _gh(rng, n):
    p = rng.uniform(0.05, 0.95, size=n)
    y = rng.integers(0, 2, size=n)
    return p - y, p * (1 - p)


def test_depth0_leaf_is_newton_step():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(1, 300))
        X = rng.normal(size=(n, 3))
        g, h = _gh(rng, n)
        lam = float(rng.uniform(0, 3))
        tree, rows = grow_tree(X, g, h, max_depth=0, reg_lambda=lam)
        want = newton_leaf(g, h, lam)
        assert abs(tree.value[0] - want) <= 1e-9
        assert np.all(np.abs(rows - want) <= 1e-9)


def test_trees_match_recursive_reference():
    rng = np.random.default_rng(1)
    for trial in range(40):
        n = int(rng.integers(2, 60))
        d = int(rng.integers(1, 4))
        X = rng.normal(size=(n, d))
        if trial % 3 == 0:
            X = np.round(X)  # heavy ties
        if trial % 4 == 0:
            X[rng.random(X.shape) < 0.2] = np.nan
        g, h = _gh(rng, n)
        depth = int(rng.integers(1, 4))
        mcw = float(rng.choice([0.0, 0.3]))
        tree, rows = grow_tree(X, g, h, depth, 1.0, 1, mcw)
        ref = reference_tree(X, g, h, depth, 1.0, 1, mcw)
        want = np.array([ref(row) for row in X])
        assert np.allclose(tree.predict(X), want, rtol=0, atol=1e-9)
        assert np.allclose(rows, want, rtol=0, atol=1e-9)


def test_split_enumeration_finds_best_single_split():
    rng = np.random.default_rng(2)
    for _ in range(30):
        n = 40
        X = rng.normal(size=(n, 2))
        g, h = _gh(rng, n)
        tree, _ = grow_tree(X, g, h, 1, 1.0)
        G, H = g.sum(), h.sum()
        best = 1e-6
        for f in range(2):
            for thr in np.unique(X[:, f])[:-1]:
                m = X[:, f] <= thr
                gain = g[m].sum() ** 2 / (h[m].sum() + 1) + g[~m].sum() ** 2 / (h[~m].sum() + 1) - G * G / (H + 1)
                best = max(best, gain)
        if tree.feature[0] < 0:
            assert best == 1e-6
        else:
            m = X[:, tree.feature[0]] <= tree.threshold[0]
            got = g[m].sum() ** 2 / (h[m].sum() + 1) + g[~m].sum() ** 2 / (h[~m].sum() + 1) - G * G / (H + 1)
            assert got == pytest.approx(best, abs=1e-12)


def test_missing_values_go_right():
    X = np.array([[0.0], [1.0], [np.nan], [np.nan]])
    g = np.array([-1.0, -1.0, 1.0, 1.0])
    h = np.ones(4)
    tree, rows = grow_tree(X, g, h, 1, 0.0)
    assert tree.feature[0] == 0 and tree.threshold[0] == 1.0
    assert rows[2] == rows[3] == -1.0 and rows[0] == 1.0


def test_xor_fits_training_set():
    rng = np.random.default_rng(3)
    base = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=float)
    X = np.repeat(base, 50, axis=0) + rng.normal(0, 0.05, size=(200, 2))
    y = np.repeat([0, 1, 1, 0], 50)
    model = fit_gbdt(X, y, GbdtConfig(n_trees=50, max_depth=3, n_bags=1, subsample_fraction=1.0,
                                      validation_fraction=0.1, patience_rounds=50))
    assert np.mean((model.predict_proba(X) >= 0.5) == y) == 1.0


def test_training_loss_never_increases():
    rng = np.random.default_rng(4)
    for _ in range(20):
        n = int(rng.integers(50, 2000))
        d = int(rng.integers(1, 8))
        X = rng.normal(size=(n, d))
        y = (X[:, 0] + rng.normal(0, 1, n) > 0).astype(int)
        model = fit_gbdt(X, y, GbdtConfig(n_trees=30, n_bags=2, seed=int(rng.integers(1000))))
        for bag in model.bags:
            assert np.all(np.diff(bag.train_loss) <= 1e-12)


def test_invariant_to_monotone_feature_transforms():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(300, 3))
    y = (X[:, 0] * X[:, 1] > 0).astype(int)
    cfg = GbdtConfig(n_trees=20, n_bags=2)
    a = fit_gbdt(X, y, cfg)
    Xt = np.column_stack([np.exp(X[:, 0]), X[:, 1] ** 3, 5 * X[:, 2] + 2])
    b = fit_gbdt(Xt, y, cfg)
    assert np.allclose(a.predict_proba(X), b.predict_proba(Xt), atol=1e-12)


def test_early_stopping_truncates_to_best_round():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(400, 4))
    y = rng.integers(0, 2, 400)  # pure noise overfits fast
    model = fit_gbdt(X, y, GbdtConfig(n_trees=100, patience_rounds=5, n_bags=1))
    bag = model.bags[0]
    assert len(bag.trees) == bag.best_round
    assert bag.best_round == int(np.argmin(bag.val_loss[1:])) + 1 or bag.best_round == 0
    assert len(bag.val_loss) - 1 <= bag.best_round + 5


def test_json_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(7)
    X = rng.normal(size=(200, 3))
    X[rng.random(X.shape) < 0.1] = np.nan
    y = (np.nan_to_num(X[:, 0]) > 0).astype(int)
    model = fit_gbdt(X, y, GbdtConfig(n_trees=10, n_bags=2), ["a", "b", "c"])
    model.save(tmp_path / "m.json")
    back = GbdtModel.load(tmp_path / "m.json")
    assert np.array_equal(back.predict_proba(X), model.predict_proba(X))
    assert back.to_json() == model.to_json()
    doc = json.loads(model.to_json())
    doc["fingerprint"] = "0" * 16
    with pytest.raises(ValueError, match="fingerprint"):
        GbdtModel.from_dict(doc)


def test_training_is_deterministic():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(300, 5))
    y = (X[:, 1] > 0).astype(int)
    cfg = GbdtConfig(n_trees=15, n_bags=3, seed=4)
    assert fit_gbdt(X, y, cfg).to_json() == fit_gbdt(X, y, cfg).to_json()


def test_single_class_gives_degenerate_constant_model():
    X = np.random.default_rng(9).normal(size=(30, 2))
    model = fit_gbdt(X, np.ones(30, dtype=int))
    assert model.degenerate
    assert np.allclose(model.predict_proba(X), 1 - DEGENERATE_EPS)
    model0 = fit_gbdt(X, np.zeros(30, dtype=int))
    assert np.allclose(model0.predict_proba(X), DEGENERATE_EPS)


def test_probabilities_strictly_inside_unit_interval():
    X = np.vstack([np.zeros((50, 1)), np.ones((50, 1))])
    y = np.repeat([0, 1], 50)
    model = fit_gbdt(X, y, GbdtConfig(n_trees=100, learning_rate=1.0, reg_lambda=0.0, n_bags=1,
                                      patience_rounds=100))
    p = model.predict_proba(np.array([[-1e300], [1e300]]))
    assert 0 < p.min() and p.max() < 1
    assert isinstance(predict_proba(model, np.array([0.0])), float)


def test_wrong_width_rejected():
    model = fit_gbdt(np.random.default_rng(0).normal(size=(40, 2)), np.repeat([0, 1], 20),
                     GbdtConfig(n_trees=2, n_bags=1))
    with pytest.raises(ValueError, match="expected 2 features"):
        model.predict_proba(np.zeros((3, 4)))


def test_config_validation():
    with pytest.raises(ValueError):
        GbdtConfig(learning_rate=0)
    with pytest.raises(ValueError):
        GbdtConfig(subsample_fraction=1.5)


# ---- logistic baseline


def test_logistic_recovers_separable_direction():
    rng = np.random.default_rng(10)
    X = rng.normal(size=(500, 3))
    y = (2 * X[:, 0] - X[:, 2] > 0).astype(int)
    m = fit_logistic(X, y, reg_lambda=1e-3)
    assert m.weights[0] > 0 and m.weights[2] < 0
    assert np.mean((m.predict_proba(X) >= 0.5) == y) > 0.97


def test_logistic_on_permuted_labels_is_near_chance():
    rng = np.random.default_rng(11)
    X = rng.normal(size=(2000, 4))
    y = rng.permutation(np.repeat([0, 1], 1000))
    m = fit_logistic(X, y)
    assert np.all(np.abs(m.weights) < 0.1)
    assert abs(log_loss(y, m.predict_proba(X)) - np.log(2)) < 0.01


def test_logistic_invariant_to_duplicated_rows():
    rng = np.random.default_rng(12)
    X = rng.normal(size=(100, 2))
    y = (X[:, 0] + rng.normal(size=100) > 0).astype(int)
    a = fit_logistic(X, y)
    b = fit_logistic(np.vstack([X, X]), np.concatenate([y, y]))
    assert np.allclose(a.weights, b.weights, atol=1e-6)
    assert a.intercept == pytest.approx(b.intercept, abs=1e-6)


def test_logistic_rejects_missing_values():
    X = np.array([[0.0], [np.nan]])
    with pytest.raises(ValueError, match="finite"):
        fit_logistic(X, np.array([0, 1]))


def test_sigmoid_is_clipped():
    assert 0 < sigmoid(np.array([-1e9]))[0] < sigmoid(np.array([1e9]))[0] < 1
