"""
Supervised learners for the refinement chain: exact-greedy regression trees, gradient
boosting, a 2-hidden-layer MLP trained with Adam, and the G_x -> G_y -> G_r chain.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from config import FEATURE_DIM, FORMAT_VERSION, ChainConfig, GbdtHyperparams, MlpHyperparams, NoiseConfig
from picking.common import (
    DataFormatError,
    DimensionMismatchError,
    DivergenceError,
    EmptyDatasetError,
    ModelLoadError,
    read_json,
    write_json,
)
from picking.datagen import Dataset, TrainingPair
from picking.features import PhiLike

logger = logging.getLogger(__name__)

CHAIN_KIND = "chain"
MIN_TRAINING_ROWS = 10
SeedLike = Union[int, np.random.SeedSequence]


def _check_training_data(rows: np.ndarray, targets: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    X = np.asarray(rows, dtype=float)
    y = np.asarray(targets, dtype=float).ravel()
    if X.ndim != 2 or X.shape[0] == 0:
        raise EmptyDatasetError("training needs a non-empty 2-D feature matrix")
    if X.shape[0] < MIN_TRAINING_ROWS:
        raise EmptyDatasetError(f"training needs at least {MIN_TRAINING_ROWS} rows, got {X.shape[0]}")
    if y.shape[0] != X.shape[0]:
        raise DimensionMismatchError(f"{X.shape[0]} rows but {y.shape[0]} targets")
    if not np.all(np.isfinite(y)) or not np.all(np.isfinite(X)):
        raise DataFormatError("training data contains non-finite values")
    return X, y


def _check_input(X: np.ndarray, input_dim: int) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != input_dim:
        raise DimensionMismatchError(f"model expects {input_dim} inputs, got {X.shape[1]}")
    return X


# ----------------------------------------------------------------------------
# Regression trees and gradient boosting
# ----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RegressionTree:
    """Flat node arrays; feature == -1 marks a leaf. Rows with x <= threshold go left."""
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    max_depth: int

    def leaf_index(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        for _ in range(self.max_depth):
            feat = self.feature[node]
            internal = feat >= 0
            if not internal.any():
                break
            x = X[rows, np.where(internal, feat, 0)]
            nxt = np.where(x <= self.threshold[node], self.left[node], self.right[node])
            node = np.where(internal, nxt, node)
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.leaf_index(X)]

    def depth(self) -> int:
        def walk(i: int) -> int:
            if self.feature[i] < 0:
                return 0
            return 1 + max(walk(int(self.left[i])), walk(int(self.right[i])))
        return walk(0)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "max_depth": self.max_depth,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RegressionTree":
        return cls(
            feature=np.asarray(data["feature"], dtype=np.int64),
            threshold=np.asarray(data["threshold"], dtype=float),
            left=np.asarray(data["left"], dtype=np.int64),
            right=np.asarray(data["right"], dtype=np.int64),
            value=np.asarray(data["value"], dtype=float),
            max_depth=int(data["max_depth"]),
        )


class _TreeBuilder:
    """Exact greedy variance-reduction splits over presorted feature orders"""

    def __init__(self, X_T: np.ndarray, residual: np.ndarray, max_depth: int, min_leaf: int):
        self.X_T = X_T
        self.residual = residual
        self.max_depth = max_depth
        self.min_leaf = min_leaf
        self.n = X_T.shape[1]
        self.feature: List[int] = []
        self.threshold: List[float] = []
        self.left: List[int] = []
        self.right: List[int] = []

    def _new_node(self) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        return len(self.feature) - 1

    def _best_split(self, sorted_idx: np.ndarray) -> Optional[Tuple[int, int, float]]:
        m = sorted_idx.shape[1]
        if m < 2 * self.min_leaf:
            return None
        vals = np.take_along_axis(self.X_T, sorted_idx, axis=1)
        cums = np.cumsum(self.residual[sorted_idx], axis=1)
        total = cums[:, -1:]
        n_left = np.arange(1, m, dtype=float)
        s_left = cums[:, :-1]
        gain = s_left ** 2 / n_left + (total - s_left) ** 2 / (m - n_left) - total ** 2 / m
        valid = vals[:, :-1] < vals[:, 1:]
        valid &= (n_left >= self.min_leaf) & (m - n_left >= self.min_leaf)
        gain = np.where(valid, gain, -np.inf)
        best = int(np.argmax(gain))
        feat, pos = divmod(best, m - 1)
        if not np.isfinite(gain[feat, pos]) or gain[feat, pos] <= 0.0:
            return None
        lo, hi = vals[feat, pos], vals[feat, pos + 1]
        threshold = (lo + hi) / 2.0
        if not lo <= threshold < hi:
            threshold = lo
        return feat, pos, float(threshold)

    def grow(self, sorted_idx: np.ndarray, depth: int = 0) -> int:
        node = self._new_node()
        if depth >= self.max_depth:
            return node
        split = self._best_split(sorted_idx)
        if split is None:
            return node
        feat, pos, threshold = split
        goes_left = np.zeros(self.n, dtype=bool)
        goes_left[sorted_idx[feat, :pos + 1]] = True
        f = sorted_idx.shape[0]
        mask = goes_left[sorted_idx]
        left_idx = sorted_idx[mask].reshape(f, pos + 1)
        right_idx = sorted_idx[~mask].reshape(f, -1)
        self.feature[node] = feat
        self.threshold[node] = threshold
        self.left[node] = self.grow(left_idx, depth + 1)
        self.right[node] = self.grow(right_idx, depth + 1)
        return node

    def finish(self, X: np.ndarray) -> RegressionTree:
        """Leaf values are mean residuals over every training row that reaches the leaf"""
        tree = RegressionTree(
            feature=np.asarray(self.feature, dtype=np.int64),
            threshold=np.asarray(self.threshold, dtype=float),
            left=np.asarray(self.left, dtype=np.int64),
            right=np.asarray(self.right, dtype=np.int64),
            value=np.zeros(len(self.feature), dtype=float),
            max_depth=self.max_depth,
        )
        leaf = tree.leaf_index(X)
        sums = np.bincount(leaf, weights=self.residual, minlength=len(self.feature))
        counts = np.bincount(leaf, minlength=len(self.feature))
        values = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
        return RegressionTree(tree.feature, tree.threshold, tree.left, tree.right, values, tree.max_depth)


@dataclass(frozen=True, eq=False)
class StackedTrees:
    """All trees of an ensemble padded to a common node count; padding nodes are zero-valued leaves"""
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    max_depth: int

    @classmethod
    def build(cls, trees: Sequence[RegressionTree]) -> "StackedTrees":
        width = max(len(t.feature) for t in trees)

        def pad(name: str, fill: float, dtype: Any) -> np.ndarray:
            out = np.full((len(trees), width), fill, dtype=dtype)
            for i, tree in enumerate(trees):
                arr = getattr(tree, name)
                out[i, :len(arr)] = arr
            return out

        return cls(
            feature=pad("feature", -1, np.int64),
            threshold=pad("threshold", 0.0, float),
            left=pad("left", 0, np.int64),
            right=pad("right", 0, np.int64),
            value=pad("value", 0.0, float),
            max_depth=max(t.max_depth for t in trees),
        )

    @property
    def n_trees(self) -> int:
        return self.feature.shape[0]

    def leaf_values(self, X: np.ndarray) -> np.ndarray:
        """(n, n_trees) leaf value reached by every row in every tree, one level of all trees per step"""
        n, t = X.shape[0], self.n_trees
        tree_idx = np.broadcast_to(np.arange(t)[None, :], (n, t))
        rows = np.broadcast_to(np.arange(n)[:, None], (n, t))
        node = np.zeros((n, t), dtype=np.int64)
        for _ in range(self.max_depth):
            feat = self.feature[tree_idx, node]
            internal = feat >= 0
            if not internal.any():
                break
            x = X[rows, np.where(internal, feat, 0)]
            nxt = np.where(x <= self.threshold[tree_idx, node],
                           self.left[tree_idx, node], self.right[tree_idx, node])
            node = np.where(internal, nxt, node)
        return self.value[tree_idx, node]


@dataclass(eq=False)
class GbdtModel:
    trees: List[RegressionTree]
    learning_rate: float
    base_prediction: float
    input_dim: int
    history: List[float] = field(default_factory=list)
    _stacked: Optional[StackedTrees] = field(default=None, init=False, repr=False)

    def stacked(self) -> StackedTrees:
        """Stacked node arrays, rebuilt when trees were added since the last call"""
        if self._stacked is None or self._stacked.n_trees != len(self.trees):
            self._stacked = StackedTrees.build(self.trees)
        return self._stacked

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = _check_input(X, self.input_dim)
        if not self.trees:
            return np.full(X.shape[0], self.base_prediction, dtype=float)
        leaves = self.stacked().leaf_values(X)
        return self.base_prediction + self.learning_rate * leaves.sum(axis=1)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "type": "gbdt",
            "learning_rate": self.learning_rate,
            "base_prediction": self.base_prediction,
            "input_dim": self.input_dim,
            "history": list(self.history),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "GbdtModel":
        return cls(
            trees=[RegressionTree.from_dict(t) for t in data["trees"]],
            learning_rate=float(data["learning_rate"]),
            base_prediction=float(data["base_prediction"]),
            input_dim=int(data["input_dim"]),
            history=[float(v) for v in data.get("history", [])],
        )


def train_gbdt(rows: np.ndarray, targets: np.ndarray, hp: GbdtHyperparams = GbdtHyperparams(),
               seed: SeedLike = 0) -> GbdtModel:
    """Squared-error boosting with row subsampling; records train MSE after every round"""
    X, y = _check_training_data(rows, targets)
    n, f = X.shape
    rng = np.random.default_rng(seed)
    base = float(y.mean())
    pred = np.full(n, base)
    X_T = np.ascontiguousarray(X.T)
    order = np.argsort(X, axis=0, kind="stable").T
    n_sub = max(int(round(hp.subsample * n)), 2 * hp.min_samples_leaf)
    n_sub = min(n_sub, n)

    model = GbdtModel(trees=[], learning_rate=hp.learning_rate, base_prediction=base, input_dim=f,
                      history=[float(np.mean((y - pred) ** 2))])
    for round_ in range(hp.n_rounds):
        residual = y - pred
        if n_sub < n:
            in_sample = np.zeros(n, dtype=bool)
            in_sample[rng.choice(n, size=n_sub, replace=False)] = True
            root = order[in_sample[order]].reshape(f, n_sub)
        else:
            root = order
        builder = _TreeBuilder(X_T, residual, hp.max_depth, hp.min_samples_leaf)
        builder.grow(root)
        tree = builder.finish(X)
        model.trees.append(tree)
        pred += hp.learning_rate * tree.predict(X)
        model.history.append(float(np.mean((y - pred) ** 2)))
        logger.debug(f"GBDT round {round_ + 1}/{hp.n_rounds}: train MSE {model.history[-1]:.6g}")
    return model


# ----------------------------------------------------------------------------
# Multi-layer perceptron
# ----------------------------------------------------------------------------

PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")


class MlpModel:
    """[input, h1, h2, 1] with rectifier hidden layers; inputs standardized with stored train stats"""

    def __init__(self, params: Dict[str, np.ndarray], x_mean: np.ndarray, x_std: np.ndarray,
                 history: Optional[List[float]] = None):
        self.params = params
        self.x_mean = x_mean
        self.x_std = x_std
        self.history = history or []

    @property
    def input_dim(self) -> int:
        return self.params["W1"].shape[0]

    @property
    def layer_sizes(self) -> List[int]:
        return [self.input_dim, self.params["W1"].shape[1], self.params["W2"].shape[1], 1]

    @classmethod
    def initialize(cls, input_dim: int, hidden: Sequence[int], rng: np.random.Generator,
                   x_mean: np.ndarray, x_std: np.ndarray, target_mean: float = 0.0) -> "MlpModel":
        h1, h2 = hidden
        params = {
            "W1": rng.normal(0.0, np.sqrt(2.0 / input_dim), size=(input_dim, h1)),
            "b1": np.zeros(h1),
            "W2": rng.normal(0.0, np.sqrt(2.0 / h1), size=(h1, h2)),
            "b2": np.zeros(h2),
            "W3": np.zeros((h2, 1)),
            "b3": np.full(1, float(target_mean)),
        }
        return cls(params, x_mean, x_std)

    def standardize(self, X: np.ndarray) -> np.ndarray:
        return (X - self.x_mean) / self.x_std

    def forward(self, Z: np.ndarray) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        p = self.params
        a1 = Z @ p["W1"] + p["b1"]
        h1 = np.maximum(a1, 0.0)
        a2 = h1 @ p["W2"] + p["b2"]
        h2 = np.maximum(a2, 0.0)
        out = (h2 @ p["W3"] + p["b3"]).ravel()
        return out, {"Z": Z, "a1": a1, "h1": h1, "a2": a2, "h2": h2}

    def loss_and_grads(self, Z: np.ndarray, y: np.ndarray) -> Tuple[float, Dict[str, np.ndarray]]:
        """Mean squared error on standardized inputs and its exact gradients"""
        p = self.params
        out, cache = self.forward(Z)
        err = out - y
        n = Z.shape[0]
        loss = float(np.mean(err ** 2))
        d_out = (2.0 / n) * err[:, None]
        grads = {"W3": cache["h2"].T @ d_out, "b3": d_out.sum(axis=0)}
        d_a2 = (d_out @ p["W3"].T) * (cache["a2"] > 0)
        grads["W2"] = cache["h1"].T @ d_a2
        grads["b2"] = d_a2.sum(axis=0)
        d_a1 = (d_a2 @ p["W2"].T) * (cache["a1"] > 0)
        grads["W1"] = cache["Z"].T @ d_a1
        grads["b1"] = d_a1.sum(axis=0)
        return loss, grads

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = _check_input(X, self.input_dim)
        out, _ = self.forward(self.standardize(X))
        return out

    def to_dict(self) -> Dict[str, Any]:
        return {
            "type": "mlp",
            "layer_sizes": self.layer_sizes,
            "x_mean": self.x_mean.tolist(),
            "x_std": self.x_std.tolist(),
            "history": list(self.history),
            "params": {name: {"shape": list(self.params[name].shape), "data": self.params[name].ravel().tolist()}
                       for name in PARAM_NAMES},
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "MlpModel":
        params = {
            name: np.asarray(data["params"][name]["data"], dtype=float).reshape(data["params"][name]["shape"])
            for name in PARAM_NAMES
        }
        return cls(params, np.asarray(data["x_mean"], dtype=float), np.asarray(data["x_std"], dtype=float),
                   [float(v) for v in data.get("history", [])])


class _Adam:
    def __init__(self, params: Dict[str, np.ndarray], hp: MlpHyperparams):
        self.hp = hp
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        hp = self.hp
        self.t += 1
        c1 = 1.0 - hp.beta1 ** self.t
        c2 = 1.0 - hp.beta2 ** self.t
        for name in PARAM_NAMES:
            g = grads[name]
            self.m[name] = hp.beta1 * self.m[name] + (1.0 - hp.beta1) * g
            self.v[name] = hp.beta2 * self.v[name] + (1.0 - hp.beta2) * g * g
            params[name] -= hp.learning_rate * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + hp.epsilon)


def train_mlp(rows: np.ndarray, targets: np.ndarray, hp: MlpHyperparams = MlpHyperparams(),
              seed: SeedLike = 0, epochs: Optional[int] = None) -> MlpModel:
    """Mini-batch Adam on squared error; deterministic for a fixed seed"""
    X, y = _check_training_data(rows, targets)
    epochs = hp.epochs if epochs is None else epochs
    rng = np.random.default_rng(seed)
    x_mean = X.mean(axis=0)
    x_std = X.std(axis=0)
    x_std = np.where(x_std > 0, x_std, 1.0)
    model = MlpModel.initialize(X.shape[1], hp.hidden, rng, x_mean, x_std, float(y.mean()))
    Z = model.standardize(X)
    adam = _Adam(model.params, hp)
    n = X.shape[0]

    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, hp.batch_size):
            batch = order[start:start + hp.batch_size]
            loss, grads = model.loss_and_grads(Z[batch], y[batch])
            if not np.isfinite(loss):
                raise DivergenceError(f"MLP loss became non-finite at epoch {epoch}")
            adam.step(model.params, grads)
            total += loss * batch.size
        model.history.append(total / n)
        if epoch % 50 == 0 or epoch == epochs:
            logger.debug(f"MLP epoch {epoch}/{epochs}: train MSE {model.history[-1]:.6g}")
    return model


Regressor = Union[GbdtModel, MlpModel]


def regressor_from_dict(data: Mapping[str, Any]) -> Regressor:
    kind = data.get("type")
    if kind == "gbdt":
        return GbdtModel.from_dict(data)
    if kind == "mlp":
        return MlpModel.from_dict(data)
    raise ModelLoadError(f"unknown regressor type {kind!r}")


# ----------------------------------------------------------------------------
# Autoregressive chain
# ----------------------------------------------------------------------------

@dataclass(eq=False)
class AutoregressiveChain:
    g_x: Regressor
    g_y: Regressor
    g_r: Regressor
    model_kind: str
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    hyperparams: Dict[str, Any] = field(default_factory=dict)
    seed: int = 0
    teacher_forcing: bool = True
    feature_dim: int = FEATURE_DIM

    def __post_init__(self):
        dims = (self.g_x.input_dim, self.g_y.input_dim, self.g_r.input_dim)
        expected = (self.feature_dim, self.feature_dim + 1, self.feature_dim + 2)
        if dims != expected:
            raise DimensionMismatchError(f"chain member input dims {dims} != {expected}")

    def predict_batch(self, phi: np.ndarray) -> np.ndarray:
        """(n, 78) features -> (n, 3) deltas, feeding predicted upstream values downstream"""
        X = np.atleast_2d(np.asarray(phi, dtype=float))
        if X.shape[1] != self.feature_dim:
            raise DimensionMismatchError(f"chain expects {self.feature_dim} features, got {X.shape[1]}")
        dx = self.g_x.predict(X)
        dy = self.g_y.predict(np.column_stack([X, dx]))
        dr = self.g_r.predict(np.column_stack([X, dx, dy]))
        return np.column_stack([dx, dy, dr])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": CHAIN_KIND,
            "format_version": FORMAT_VERSION,
            "model_kind": self.model_kind,
            "feature_dim": self.feature_dim,
            "input_dims": [self.feature_dim, self.feature_dim + 1, self.feature_dim + 2],
            "noise": self.noise.model_dump(),
            "hyperparams": self.hyperparams,
            "seed": self.seed,
            "teacher_forcing": self.teacher_forcing,
            "members": {"g_x": self.g_x.to_dict(), "g_y": self.g_y.to_dict(), "g_r": self.g_r.to_dict()},
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "AutoregressiveChain":
        try:
            members = {name: regressor_from_dict(data["members"][name]) for name in ("g_x", "g_y", "g_r")}
            return cls(
                model_kind=str(data["model_kind"]),
                noise=NoiseConfig.model_validate(data["noise"]),
                hyperparams=dict(data.get("hyperparams", {})),
                seed=int(data["seed"]),
                teacher_forcing=bool(data["teacher_forcing"]),
                feature_dim=int(data["feature_dim"]),
                **members,
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ModelLoadError(f"malformed chain model: {e}") from e


def predict_chain(chain: AutoregressiveChain, phi: PhiLike) -> Tuple[float, float, float]:
    values = np.asarray(phi.values if hasattr(phi, "values") else phi, dtype=float)
    if values.shape != (chain.feature_dim,):
        raise DimensionMismatchError(f"chain expects {chain.feature_dim} features, got shape {values.shape}")
    dx, dy, dr = chain.predict_batch(values[None, :])[0]
    return float(dx), float(dy), float(dr)


def pair_arrays(pairs: Sequence[TrainingPair]) -> Tuple[np.ndarray, np.ndarray]:
    if not pairs:
        raise EmptyDatasetError("no training pairs")
    X = np.vstack([p.phi for p in pairs])
    D = np.asarray([p.delta for p in pairs], dtype=float)
    return X, D


def _train_member(kind: str, rows: np.ndarray, targets: np.ndarray, config: ChainConfig,
                  seed: np.random.SeedSequence) -> Regressor:
    if kind == "gbdt":
        return train_gbdt(rows, targets, config.gbdt, seed)
    if kind == "mlp":
        return train_mlp(rows, targets, config.mlp, seed)
    raise ValueError(f"unknown model kind {kind!r}")


def train_chain(dataset: Dataset, kind: Optional[str] = None, config: ChainConfig = ChainConfig(),
                seed: int = 0, threads: int = 1) -> AutoregressiveChain:
    """G_x on phi, G_y on phi + dx, G_r on phi + dx + dy; upstream inputs are true deltas under teacher forcing"""
    kind = kind or config.kind
    X, D = pair_arrays(dataset.train)
    seeds = np.random.SeedSequence(int(seed)).spawn(3)
    logger.info(f"Training {kind} chain on {X.shape[0]} pairs (teacher forcing: {config.teacher_forcing})")

    if config.teacher_forcing:
        inputs = [X, np.column_stack([X, D[:, 0]]), np.column_stack([X, D[:, 0], D[:, 1]])]
        jobs = [(inputs[i], D[:, i], seeds[i]) for i in range(3)]
        if threads > 1 and kind == "gbdt":
            with ThreadPoolExecutor(max_workers=3) as pool:
                members = list(pool.map(lambda job: _train_member(kind, job[0], job[1], config, job[2]), jobs))
        else:
            members = [_train_member(kind, rows, targets, config, s) for rows, targets, s in jobs]
    else:
        g_x = _train_member(kind, X, D[:, 0], config, seeds[0])
        dx = g_x.predict(X)
        g_y = _train_member(kind, np.column_stack([X, dx]), D[:, 1], config, seeds[1])
        dy = g_y.predict(np.column_stack([X, dx]))
        g_r = _train_member(kind, np.column_stack([X, dx, dy]), D[:, 2], config, seeds[2])
        members = [g_x, g_y, g_r]

    hyper = config.gbdt.model_dump() if kind == "gbdt" else config.mlp.model_dump()
    return AutoregressiveChain(
        g_x=members[0], g_y=members[1], g_r=members[2], model_kind=kind, noise=dataset.noise,
        hyperparams=hyper, seed=int(seed), teacher_forcing=config.teacher_forcing,
    )


def rmse_by_dimension(chain: AutoregressiveChain, pairs: Sequence[TrainingPair]) -> Tuple[float, float, float]:
    """Per-dimension RMSE (m, m, rad) with predicted upstream inputs"""
    X, D = pair_arrays(pairs)
    err = chain.predict_batch(X) - D
    rx, ry, rr = np.sqrt(np.mean(err ** 2, axis=0))
    return float(rx), float(ry), float(rr)


def held_out_rmse(chain: AutoregressiveChain, dataset: Dataset) -> Tuple[float, float, float]:
    """RMSE on the test split, falling back to the training split when the test split is empty"""
    if not dataset.test:
        logger.warning("Dataset has no test pairs; reporting RMSE on the training split")
        return rmse_by_dimension(chain, dataset.train)
    return rmse_by_dimension(chain, dataset.test)


@dataclass(frozen=True)
class ChainComparison:
    """Held-out RMSE per model kind, one row per dataset, and the per-dimension medians"""
    runs: Mapping[str, Tuple[Tuple[float, float, float], ...]]

    @property
    def medians(self) -> Dict[str, Tuple[float, float, float]]:
        return {kind: tuple(float(v) for v in np.median(np.asarray(rows), axis=0))
                for kind, rows in self.runs.items()}

    def leads(self, kind: str, other: str, tolerance: float = 1.05) -> bool:
        """`kind` matches or beats `other` on at least two dimensions and stays within `tolerance` on the rest"""
        mine, theirs = np.asarray(self.medians[kind]), np.asarray(self.medians[other])
        return int(np.sum(mine <= theirs)) >= 2 and bool(np.all(mine <= tolerance * theirs))


def compare_chain_kinds(datasets: Sequence[Dataset], kinds: Sequence[str] = ("gbdt", "mlp"),
                        config: ChainConfig = ChainConfig(), seed: int = 0,
                        threads: int = 1) -> ChainComparison:
    """Train every kind on every dataset with the same training seed and collect held-out RMSE"""
    if not datasets:
        raise EmptyDatasetError("model comparison needs at least one dataset")
    runs: Dict[str, List[Tuple[float, float, float]]] = {kind: [] for kind in kinds}
    for i, dataset in enumerate(datasets):
        for kind in kinds:
            rmse = held_out_rmse(train_chain(dataset, kind, config, seed, threads), dataset)
            logger.info(f"Dataset {i + 1}/{len(datasets)} {kind} held-out RMSE: "
                        f"x={rmse[0]:.4f} m, y={rmse[1]:.4f} m, r={rmse[2]:.4f} rad")
            runs[kind].append(rmse)
    return ChainComparison(runs={kind: tuple(rows) for kind, rows in runs.items()})


def save_chain(path: Path, chain: AutoregressiveChain) -> None:
    write_json(path, chain.to_dict())
    logger.info(f"Saved {chain.model_kind} chain to {path}")


def load_chain(path: Path) -> AutoregressiveChain:
    return AutoregressiveChain.from_dict(read_json(path, CHAIN_KIND, FORMAT_VERSION))
