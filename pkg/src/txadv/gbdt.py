"""Self-contained gradient boosted decision trees: exact axis-aligned splits,
squared loss for distillation and logistic loss for labels."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import ValidationError

SQUARED = "squared"
LOGISTIC = "logistic"

_MIN_GAIN = 1e-12


@dataclass
class TreeNode:
    feature: int = -1          # -1 marks a leaf
    threshold: float = 0.0     # go left when x[feature] <= threshold
    left: Optional["TreeNode"] = None
    right: Optional["TreeNode"] = None
    value: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.feature < 0

    def to_doc(self) -> dict:
        if self.is_leaf:
            return {"value": self.value}
        return {"feature": self.feature, "threshold": self.threshold,
                "left": self.left.to_doc(), "right": self.right.to_doc()}

    @classmethod
    def from_doc(cls, doc: dict) -> "TreeNode":
        if "feature" not in doc:
            return cls(value=doc["value"])
        return cls(feature=doc["feature"], threshold=doc["threshold"],
                   left=cls.from_doc(doc["left"]), right=cls.from_doc(doc["right"]))


def _predict_tree(node: TreeNode, x: np.ndarray) -> np.ndarray:
    out = np.empty(len(x))
    stack = [(node, np.arange(len(x)))]
    while stack:
        nd, idx = stack.pop()
        if nd.is_leaf:
            out[idx] = nd.value
            continue
        go_left = x[idx, nd.feature] <= nd.threshold
        stack.append((nd.left, idx[go_left]))
        stack.append((nd.right, idx[~go_left]))
    return out


class _FlatTrees:
    """All trees of a model flattened into parallel node arrays so a batch
    can be routed through every tree with a few vector ops per depth level.
    Leaves self-loop, so over-iterating is harmless."""

    def __init__(self, trees):
        feature, threshold, left, right, value, roots = [], [], [], [], [], []

        def add(node):
            i = len(feature)
            feature.append(max(node.feature, 0))
            threshold.append(np.inf if node.is_leaf else node.threshold)
            value.append(node.value)
            left.append(i)
            right.append(i)
            if not node.is_leaf:
                left[i] = add(node.left)
                right[i] = add(node.right)
            return i

        def depth(node):
            return 0 if node.is_leaf else 1 + max(depth(node.left),
                                                  depth(node.right))

        for t in trees:
            roots.append(add(t))
        self.feature = np.array(feature, dtype=np.int64)
        self.threshold = np.array(threshold)
        self.left = np.array(left, dtype=np.int64)
        self.right = np.array(right, dtype=np.int64)
        self.value = np.array(value)
        self.roots = np.array(roots, dtype=np.int64)
        self.max_depth = max((depth(t) for t in trees), default=0)

    def predict_sum(self, x: np.ndarray) -> np.ndarray:
        rows = np.arange(len(x))[:, None]
        node = np.broadcast_to(self.roots, (len(x), len(self.roots))).copy()
        for _ in range(self.max_depth):
            go_left = x[rows, self.feature[node]] <= self.threshold[node]
            node = np.where(go_left, self.left[node], self.right[node])
        return self.value[node].sum(axis=1)


@dataclass(frozen=True)
class GbdtConfig:
    n_trees: int = 200
    max_depth: int = 4
    learning_rate: float = 0.1
    row_subsample: float = 0.8
    col_subsample: float = 1.0
    min_samples_leaf: int = 1
    seed: int = 0


@dataclass
class GbdtModel:
    loss: str
    base_score: float
    learning_rate: float
    trees: list = field(default_factory=list)

    def raw_predict(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if not self.trees:
            return np.full(len(x), self.base_score)
        flat = self.__dict__.get("_flat")
        if flat is None or flat[0] != len(self.trees):
            flat = (len(self.trees), _FlatTrees(self.trees))
            self.__dict__["_flat"] = flat
        return self.base_score + self.learning_rate * flat[1].predict_sum(x)

    def predict(self, x: np.ndarray) -> np.ndarray:
        f = self.raw_predict(x)
        if self.loss == LOGISTIC:
            return 1.0 / (1.0 + np.exp(-f))
        return np.clip(f, 0.0, 1.0)

    def training_loss(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Loss after each boosting stage, first entry = base score only."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        f = np.full(len(x), self.base_score)
        losses = [self._loss_value(f, y)]
        for t in self.trees:
            f += self.learning_rate * _predict_tree(t, x)
            losses.append(self._loss_value(f, y))
        return np.array(losses)

    def _loss_value(self, f: np.ndarray, y: np.ndarray) -> float:
        if self.loss == LOGISTIC:
            return float(np.mean(np.logaddexp(0.0, f) - y * f))
        return float(np.mean((y - f) ** 2))

    def to_doc(self) -> dict:
        return {"loss": self.loss, "base_score": self.base_score,
                "learning_rate": self.learning_rate,
                "trees": [t.to_doc() for t in self.trees]}

    @classmethod
    def from_doc(cls, doc: dict) -> "GbdtModel":
        return cls(loss=doc["loss"], base_score=doc["base_score"],
                   learning_rate=doc["learning_rate"],
                   trees=[TreeNode.from_doc(t) for t in doc["trees"]])


def _best_split(x: np.ndarray, g: np.ndarray, h: np.ndarray, min_leaf: int):
    """Exact best split over all features by the Newton gain
    (sum g)^2 / (sum h) of the children minus the parent score."""
    n, n_feat = x.shape
    if n < 2 * min_leaf:
        return None
    order = np.argsort(x, axis=0, kind="stable")
    xs = np.take_along_axis(x, order, axis=0)
    gs = np.cumsum(g[order], axis=0)
    hs = np.cumsum(h[order], axis=0)
    g_tot, h_tot = gs[-1], hs[-1]

    gl, hl = gs[:-1], hs[:-1]
    gr, hr = g_tot - gl, h_tot - hl
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = gl * gl / hl + gr * gr / hr
    gain = np.where((hl > 0) & (hr > 0), gain, -np.inf)
    # A split between equal feature values is not realizable.
    gain[xs[:-1] == xs[1:]] = -np.inf
    if min_leaf > 1:
        gain[: min_leaf - 1] = -np.inf
        gain[n - min_leaf:] = -np.inf

    parent = np.where(h_tot > 0, g_tot * g_tot / h_tot, 0.0)
    best_per_feat = gain.max(axis=0)
    feat = int(np.argmax(best_per_feat))  # ties -> lowest feature index
    if not np.isfinite(best_per_feat[feat]) or \
            best_per_feat[feat] - parent[feat] <= _MIN_GAIN:
        return None
    pos = int(np.argmax(gain[:, feat]))  # ties -> lowest split position
    threshold = 0.5 * (xs[pos, feat] + xs[pos + 1, feat])
    left_rows = x[:, feat] <= threshold
    return feat, float(threshold), left_rows


def _build_tree(x, g, h, depth, max_depth, min_leaf) -> TreeNode:
    h_sum = h.sum()
    value = float(g.sum() / h_sum) if h_sum > 0 else 0.0
    if depth >= max_depth:
        return TreeNode(value=value)
    split = _best_split(x, g, h, min_leaf)
    if split is None:
        return TreeNode(value=value)
    feat, threshold, left_rows = split
    left = _build_tree(x[left_rows], g[left_rows], h[left_rows],
                       depth + 1, max_depth, min_leaf)
    right = _build_tree(x[~left_rows], g[~left_rows], h[~left_rows],
                        depth + 1, max_depth, min_leaf)
    return TreeNode(feature=feat, threshold=threshold, left=left, right=right)


def train_gbdt(x: np.ndarray, y: np.ndarray, config: GbdtConfig = GbdtConfig(),
               loss: str = SQUARED) -> GbdtModel:
    """Stagewise boosting. Logistic loss fits Newton steps on residuals
    p - y; squared loss fits residuals directly (leaf = mean residual)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    if len(x) == 0 or len(x) != len(y):
        raise ValidationError("empty data or row/target mismatch")
    if loss not in (SQUARED, LOGISTIC):
        raise ValidationError(f"unknown loss {loss!r}")

    if loss == LOGISTIC:
        p = float(np.clip(y.mean(), 1e-6, 1 - 1e-6))
        base = float(np.log(p / (1 - p)))
    else:
        base = float(y.mean())
    model = GbdtModel(loss=loss, base_score=base,
                      learning_rate=config.learning_rate)
    if np.all(y == y[0]):
        return model  # constant targets: base score only, zero trees

    rng = np.random.default_rng(config.seed)
    n, n_feat = x.shape
    f = np.full(n, base)
    for _ in range(config.n_trees):
        if loss == LOGISTIC:
            prob = 1.0 / (1.0 + np.exp(-f))
            g = y - prob
            h = prob * (1.0 - prob)
        else:
            g = y - f
            h = np.ones(n)

        rows = np.arange(n)
        if config.row_subsample < 1.0:
            k = max(1, int(round(config.row_subsample * n)))
            rows = np.sort(rng.choice(n, size=k, replace=False))
        cols = np.arange(n_feat)
        if config.col_subsample < 1.0:
            k = max(1, int(round(config.col_subsample * n_feat)))
            cols = np.sort(rng.choice(n_feat, size=k, replace=False))

        tree = _build_tree(x[np.ix_(rows, cols)], g[rows], h[rows],
                           0, config.max_depth, config.min_samples_leaf)
        if len(cols) < n_feat:
            _remap_features(tree, cols)
        model.trees.append(tree)
        f += config.learning_rate * _predict_tree(tree, x)
    return model


def _remap_features(node: TreeNode, cols: np.ndarray):
    if node.is_leaf:
        return
    node.feature = int(cols[node.feature])
    _remap_features(node.left, cols)
    _remap_features(node.right, cols)
