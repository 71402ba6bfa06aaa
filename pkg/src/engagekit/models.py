"""Gradient-boosted regression trees with early stopping and bagging, and a logistic baseline.

Trees are grown level by level with an exact greedy split search over sorted
feature values. Each round fits second-order (Newton) leaf values to the
logistic-loss gradients; a bag's prediction is
``sigmoid(base_score + learning_rate * sum(tree outputs))`` and the model
averages bag probabilities.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numba import njit

from .preprocess import WindowTable

FORMAT = "engagekit.gbdt"
FORMAT_VERSION = 1
DEGENERATE_EPS = 1e-6
# a split must reduce the regularized loss by more than this
MIN_SPLIT_GAIN = 1e-6
_LOGIT_CLIP = 30.0


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.clip(z, -_LOGIT_CLIP, _LOGIT_CLIP)
    return 1.0 / (1.0 + np.exp(-z))


def logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


def log_loss(y: np.ndarray, p: np.ndarray) -> float:
    p = np.clip(p, 1e-15, 1 - 1e-15)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log1p(-p)))


def schema_fingerprint(names: Sequence[str]) -> str:
    return hashlib.sha256("\x1f".join(names).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class GbdtConfig:
    n_trees: int = 100
    max_depth: int = 6
    learning_rate: float = 0.3
    reg_lambda: float = 1.0
    min_samples_leaf: int = 1
    min_child_weight: float = 1.0
    validation_fraction: float = 0.1
    patience_rounds: int = 10
    n_bags: int = 5
    subsample_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 1:
            raise ValueError("n_trees and max_depth must be >= 1")
        for name in ("validation_fraction", "subsample_fraction"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0 and not (name == "subsample_fraction" and v == 1.0):
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.n_bags < 1 or self.patience_rounds < 1 or self.min_samples_leaf < 1:
            raise ValueError("n_bags, patience_rounds and min_samples_leaf must be >= 1")
        if self.learning_rate <= 0 or self.reg_lambda < 0 or self.min_child_weight < 0:
            raise ValueError("learning_rate must be > 0; reg_lambda and min_child_weight >= 0")


# --------------------------------------------------------------------------
# trees


@dataclass(frozen=True)
class RegressionTree:
    """Flat binary tree. ``feature[i] == -1`` marks a leaf; rows with ``x <= threshold`` go left."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def depth(self) -> int:
        def walk(i: int) -> int:
            if self.feature[i] < 0:
                return 0
            return 1 + max(walk(self.left[i]), walk(self.right[i]))

        return walk(0)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by each row. Missing values go right."""
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return node
            r = rows[inner]
            n = node[inner]
            x = X[r, f[inner]]
            node[inner] = np.where(x <= self.threshold[n], self.left[n], self.right[n])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_dict(self, i: int = 0) -> dict:
        if self.feature[i] < 0:
            return {"leaf": float(self.value[i])}
        return {
            "feature": int(self.feature[i]),
            "threshold": float(self.threshold[i]),
            "left": self.to_dict(int(self.left[i])),
            "right": self.to_dict(int(self.right[i])),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegressionTree":
        feature, threshold, left, right, value = [], [], [], [], []

        def add(node: dict) -> int:
            i = len(feature)
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(0.0)
            if "leaf" in node:
                value[i] = node["leaf"]
            else:
                feature[i] = node["feature"]
                threshold[i] = node["threshold"]
                left[i] = add(node["left"])
                right[i] = add(node["right"])
            return i

        add(d)
        return cls(
            np.array(feature, dtype=np.int64),
            np.array(threshold, dtype=np.float64),
            np.array(left, dtype=np.int64),
            np.array(right, dtype=np.int64),
            np.array(value, dtype=np.float64),
        )


def presort(X: np.ndarray) -> np.ndarray:
    """Feature-major stable argsort, shape ``(d, n)``; missing values (NaN) sort last."""
    return np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T.astype(np.int64))


@njit(cache=True, fastmath=False, boundscheck=False)
def _grow(XT, order, g, h, max_depth, reg_lambda, min_samples_leaf, min_child_weight, min_gain):
    d, n = order.shape
    cap = 2 ** (max_depth + 1)
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    value = np.zeros(cap)
    row_value = np.zeros(XT.shape[1])
    goes_left = np.zeros(XT.shape[1], np.int64)
    buf = np.empty(n, np.int64)
    vbuf = np.empty(n)
    # feature values in `order` layout, partitioned alongside it
    vals = np.empty((d, n))
    for f in range(d):
        for p in range(n):
            vals[f, p] = XT[f, order[f, p]]

    # segments of `order` (identical bounds in every feature row) per active node
    seg_node = np.zeros(1, np.int64)
    seg_start = np.zeros(1, np.int64)
    seg_end = np.full(1, n, np.int64)
    n_nodes = 1

    for depth in range(max_depth + 1):
        K = seg_node.shape[0]
        if K == 0:
            break
        nxt_node = np.empty(2 * K, np.int64)
        nxt_start = np.empty(2 * K, np.int64)
        nxt_end = np.empty(2 * K, np.int64)
        n_next = 0
        for k in range(K):
            node, a, b = seg_node[k], seg_start[k], seg_end[k]
            G = 0.0
            H = 0.0
            for p in range(a, b):
                r = order[0, p]
                G += g[r]
                H += h[r]
            best_gain = min_gain
            best_f = -1
            best_p = -1
            if depth < max_depth and b - a >= 2:
                parent = G * G / (H + reg_lambda)
                for f in range(d):
                    GL = 0.0
                    HL = 0.0
                    for p in range(a, b - 1):
                        r = order[f, p]
                        GL += g[r]
                        HL += h[r]
                        x0 = vals[f, p]
                        x1 = vals[f, p + 1]
                        if np.isnan(x0):
                            break
                        # NaN ranks above every finite value
                        if not (x1 > x0 or np.isnan(x1)):
                            continue
                        nl = p - a + 1
                        nr = b - a - nl
                        if nl < min_samples_leaf or nr < min_samples_leaf:
                            continue
                        HR = H - HL
                        if HL < min_child_weight or HR < min_child_weight:
                            continue
                        GR = G - GL
                        gain = GL * GL / (HL + reg_lambda) + GR * GR / (HR + reg_lambda) - parent
                        if gain > best_gain:
                            best_gain = gain
                            best_f = f
                            best_p = p
            if best_f < 0:
                v = -G / (H + reg_lambda)
                value[node] = v
                for p in range(a, b):
                    row_value[order[0, p]] = v
                continue
            thr = vals[best_f, best_p]
            li = n_nodes
            ri = n_nodes + 1
            n_nodes += 2
            feature[node] = best_f
            threshold[node] = thr
            left[node] = li
            right[node] = ri
            for p in range(a, b):
                r = order[0, p]
                goes_left[r] = XT[best_f, r] <= thr
            n_left = best_p - a + 1
            # children at the depth limit only need the row set, not per-feature order
            n_part = 1 if depth + 1 == max_depth else d
            for f in range(n_part):
                il = a
                ir = 0
                for p in range(a, b):
                    r = order[f, p]
                    x = vals[f, p]
                    gl = goes_left[r]
                    # branchless stable partition
                    order[f, il] = r
                    vals[f, il] = x
                    buf[ir] = r
                    vbuf[ir] = x
                    il += gl
                    ir += 1 - gl
                for q in range(ir):
                    order[f, il + q] = buf[q]
                    vals[f, il + q] = vbuf[q]
            nxt_node[n_next] = li
            nxt_start[n_next] = a
            nxt_end[n_next] = a + n_left
            nxt_node[n_next + 1] = ri
            nxt_start[n_next + 1] = a + n_left
            nxt_end[n_next + 1] = b
            n_next += 2
        seg_node = nxt_node[:n_next]
        seg_start = nxt_start[:n_next]
        seg_end = nxt_end[:n_next]

    return (
        feature[:n_nodes], threshold[:n_nodes], left[:n_nodes], right[:n_nodes], value[:n_nodes], row_value
    )


def grow_tree(
    X: np.ndarray,
    g: np.ndarray,
    h: np.ndarray,
    max_depth: int,
    reg_lambda: float = 1.0,
    min_samples_leaf: int = 1,
    min_child_weight: float = 0.0,
    order: np.ndarray | None = None,
    XT: np.ndarray | None = None,
) -> tuple[RegressionTree, np.ndarray]:
    """Fit one tree to gradients *g* and hessians *h*.

    Returns the tree and the leaf value of every training row. *order* is
    :func:`presort` of *X*; it is consumed (reordered in place), so callers
    reusing it across rounds pass a copy.

    Split gain is ``GL²/(HL+λ) + GR²/(HR+λ) - G²/(H+λ)``; leaves take the
    Newton value ``-G/(H+λ)``. Candidate thresholds are the distinct observed
    values; ties in gain go to the lowest feature index, then the lowest
    threshold.
    """
    X = np.asarray(X, dtype=np.float64)
    if XT is None:
        XT = np.ascontiguousarray(X.T)
    order = presort(X) if order is None else order
    if X.shape[1] == 0:
        order = np.arange(len(X), dtype=np.int64)[None, :]
        XT = np.zeros((1, len(X)))
        max_depth = 0
    f, t, lft, rgt, v, row_value = _grow(
        XT, order, np.asarray(g, np.float64), np.asarray(h, np.float64),
        int(max_depth), float(reg_lambda), int(min_samples_leaf), float(min_child_weight), MIN_SPLIT_GAIN,
    )
    return RegressionTree(f, t, lft, rgt, v), row_value


# --------------------------------------------------------------------------
# boosting


@dataclass
class Bag:
    base_score: float
    trees: list[RegressionTree]
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_round: int = 0

    def decision(self, X: np.ndarray, learning_rate: float) -> np.ndarray:
        F = np.full(len(X), self.base_score)
        for t in self.trees:
            F += learning_rate * t.predict(X)
        return F


@dataclass(frozen=True)
class GbdtModel:
    """Bagged boosted ensemble; prediction is the mean of per-bag sigmoid scores."""

    config: GbdtConfig
    features: tuple[str, ...]
    bags: tuple[Bag, ...]
    degenerate: bool = False

    @property
    def fingerprint(self) -> str:
        return schema_fingerprint(self.features)

    def predict_proba(self, X: np.ndarray | WindowTable) -> np.ndarray:
        X = _features_of(X, self.features)
        probs = [sigmoid(b.decision(X, self.config.learning_rate)) for b in self.bags]
        return np.mean(probs, axis=0)

    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "version": FORMAT_VERSION,
            "config": asdict(self.config),
            "features": list(self.features),
            "fingerprint": self.fingerprint,
            "degenerate": self.degenerate,
            "bags": [
                {
                    "base_score": b.base_score,
                    "best_round": b.best_round,
                    "train_loss": b.train_loss,
                    "val_loss": b.val_loss,
                    "trees": [t.to_dict() for t in b.trees],
                }
                for b in self.bags
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def from_dict(cls, d: dict) -> "GbdtModel":
        if d.get("format") != FORMAT:
            raise ValueError(f"not a {FORMAT} document")
        if d.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model version {d.get('version')!r}")
        bags = tuple(
            Bag(
                base_score=b["base_score"],
                trees=[RegressionTree.from_dict(t) for t in b["trees"]],
                train_loss=list(b["train_loss"]),
                val_loss=list(b["val_loss"]),
                best_round=b["best_round"],
            )
            for b in d["bags"]
        )
        model = cls(GbdtConfig(**d["config"]), tuple(d["features"]), bags, d["degenerate"])
        if model.fingerprint != d["fingerprint"]:
            raise ValueError("feature fingerprint does not match feature list")
        return model

    @classmethod
    def load(cls, path: str | Path) -> "GbdtModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _features_of(X: np.ndarray | WindowTable, features: Sequence[str]) -> np.ndarray:
    if isinstance(X, WindowTable):
        if schema_fingerprint(X.feature_names) != schema_fingerprint(features):
            raise ValueError("table features do not match the model's feature schema")
        return X.X()
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != len(features):
        raise ValueError(f"expected {len(features)} features, got {X.shape[1]}")
    return X


def _fit_bag(X: np.ndarray, y: np.ndarray, cfg: GbdtConfig, rng: np.random.Generator) -> Bag:
    n = len(y)
    m = max(1, int(round(cfg.subsample_fraction * n)))
    sub = np.sort(rng.choice(n, size=m, replace=False)) if m < n else np.arange(n)
    n_val = int(cfg.validation_fraction * m)
    if m - n_val < 1:
        n_val = 0
    fit, val = sub[: m - n_val], sub[m - n_val :]
    Xf, yf = X[fit], y[fit].astype(np.float64)
    Xv, yv = X[val], y[val].astype(np.float64)

    prior = float(np.clip(yf.mean(), DEGENERATE_EPS, 1 - DEGENERATE_EPS))
    bag = Bag(base_score=logit(prior), trees=[])
    Ff = np.full(len(yf), bag.base_score)
    Fv = np.full(len(yv), bag.base_score)
    bag.train_loss.append(log_loss(yf, sigmoid(Ff)))
    if n_val:
        bag.val_loss.append(log_loss(yv, sigmoid(Fv)))
    if yf.min() == yf.max():
        return bag

    order = presort(Xf)
    XfT = np.ascontiguousarray(Xf.T)
    best, best_round = np.inf, 0
    for r in range(1, cfg.n_trees + 1):
        p = sigmoid(Ff)
        tree, leaf_vals = grow_tree(
            Xf, p - yf, p * (1 - p), cfg.max_depth, cfg.reg_lambda,
            cfg.min_samples_leaf, cfg.min_child_weight, order.copy(), XfT,
        )
        bag.trees.append(tree)
        Ff = Ff + cfg.learning_rate * leaf_vals
        bag.train_loss.append(log_loss(yf, sigmoid(Ff)))
        if not n_val:
            best_round = r
            continue
        Fv = Fv + cfg.learning_rate * tree.predict(Xv)
        vl = log_loss(yv, sigmoid(Fv))
        bag.val_loss.append(vl)
        if vl < best:
            best, best_round = vl, r
        elif r - best_round >= cfg.patience_rounds:
            break
    bag.best_round = best_round
    del bag.trees[best_round:]
    return bag


def train_gbdt(train: WindowTable, cfg: GbdtConfig = GbdtConfig()) -> GbdtModel:
    """Train a bagged, early-stopped GBDT on the rows of *train* (in table order)."""
    return fit_gbdt(train.X(), train.y(), cfg, tuple(train.feature_names))


def fit_gbdt(X: np.ndarray, y: np.ndarray, cfg: GbdtConfig = GbdtConfig(), features: Sequence[str] | None = None) -> GbdtModel:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("cannot train on an empty table")
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("X must be 2-D with one row per label")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    features = tuple(features) if features is not None else tuple(f"f{i}" for i in range(X.shape[1]))
    if y.min() == y.max():
        p = 1 - DEGENERATE_EPS if y[0] == 1 else DEGENERATE_EPS
        bags = tuple(Bag(base_score=logit(p), trees=[]) for _ in range(cfg.n_bags))
        return GbdtModel(cfg, features, bags, degenerate=True)
    bags = tuple(_fit_bag(X, y, cfg, np.random.default_rng([cfg.seed, b])) for b in range(cfg.n_bags))
    return GbdtModel(cfg, features, bags)


def predict_proba(model: "GbdtModel | LinearModel", x: np.ndarray | WindowTable) -> np.ndarray | float:
    """Engagement probability for a feature vector (returns a float) or a matrix/table."""
    single = not isinstance(x, WindowTable) and np.ndim(x) == 1
    p = model.predict_proba(x)
    return float(p[0]) if single else p


# --------------------------------------------------------------------------
# linear baseline


@dataclass(frozen=True)
class LinearModel:
    features: tuple[str, ...]
    weights: np.ndarray
    intercept: float
    n_iter: int = 0

    def predict_proba(self, X: np.ndarray | WindowTable) -> np.ndarray:
        X = _features_of(X, self.features)
        return sigmoid(X @ self.weights + self.intercept)

    def to_dict(self) -> dict:
        return {"features": list(self.features), "weights": self.weights.tolist(), "intercept": self.intercept}


def fit_logistic(
    X: np.ndarray,
    y: np.ndarray,
    reg_lambda: float = 1.0,
    tol: float = 1e-6,
    max_iter: int = 1000,
    features: Sequence[str] | None = None,
) -> LinearModel:
    """L2-penalized logistic regression by damped Newton steps.

    Minimizes ``mean(log-loss) + reg_lambda/2 * ||w||²`` (intercept
    unpenalized) until the gradient max-norm drops below *tol*.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not np.isfinite(X).all():
        raise ValueError("logistic baseline needs finite feature values")
    n, d = X.shape
    A = np.hstack([X, np.ones((n, 1))])
    pen = np.full(d + 1, reg_lambda)
    pen[-1] = 0.0
    theta = np.zeros(d + 1)

    def objective(th: np.ndarray) -> float:
        z = A @ th
        return float(np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * np.sum(pen * th * th))

    it = 0
    for it in range(1, max_iter + 1):
        p = sigmoid(A @ theta)
        grad = A.T @ (p - y) / n + pen * theta
        if np.max(np.abs(grad)) < tol:
            break
        w = p * (1 - p)
        hess = (A * w[:, None]).T @ A / n + np.diag(pen) + 1e-12 * np.eye(d + 1)
        step = np.linalg.solve(hess, grad)
        f0, t = objective(theta), 1.0
        while objective(theta - t * step) > f0 - 1e-4 * t * grad @ step and t > 1e-10:
            t *= 0.5
        theta = theta - t * step
    return LinearModel(
        tuple(features) if features is not None else tuple(f"f{i}" for i in range(d)),
        theta[:-1].copy(),
        float(theta[-1]),
        it,
    )


def train_baseline(train: WindowTable, kind: str = "logistic", reg_lambda: float = 1.0) -> LinearModel:
    if kind != "logistic":
        raise ValueError(f"unsupported baseline {kind!r}")
    return fit_logistic(train.X(), train.y(), reg_lambda, features=train.feature_names)
