"""Traditional comparators: constant predictors, ridge, lasso and random forests."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from numba import njit

from .errors import ContractError, ConvergenceError, DataError, DimensionError, SolverError
from .layers import decode_array, encode_array, envelope, open_envelope

TASKS = ("regression", "classification")


def _check_width(X, n_features):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != n_features:
        raise DimensionError(f"model was fit on {n_features} features, got input of shape {X.shape}")
    return X


@dataclass
class ConstantPredictor:
    """Predicts the training mean (regression) or the majority class (classification)."""

    value: np.ndarray
    task: str = "regression"
    n_features: Optional[int] = None

    @classmethod
    def fit(cls, y, task: str = "regression", n_features: Optional[int] = None) -> "ConstantPredictor":
        y = np.asarray(y)
        if len(y) == 0:
            raise DataError("cannot fit a constant predictor to no samples")
        if task == "classification":
            classes, counts = np.unique(y, return_counts=True)
            value = np.asarray(float(classes[np.argmax(counts)]))
        else:
            y = np.asarray(y, dtype=np.float64)
            value = _sequential_mean(np.ascontiguousarray(y.reshape(len(y), -1))).reshape(y.shape[1:])
        return cls(value, task, n_features)

    def predict(self, X) -> np.ndarray:
        n = len(X)
        return np.broadcast_to(self.value, (n,) + self.value.shape).copy()

    def to_dict(self):
        return envelope("constant", {"task": self.task, "n_features": self.n_features,
                                     "value": encode_array(np.atleast_1d(self.value)),
                                     "scalar": self.value.ndim == 0})

    @classmethod
    def from_dict(cls, doc):
        body = open_envelope(doc, "constant")
        value = decode_array(body["value"])
        return cls(value[0] if body["scalar"] else value, body["task"], body["n_features"])


@dataclass
class LinearModel:
    weights: np.ndarray
    intercept: np.ndarray
    alpha: float
    kind: str
    history: List[float] = field(default_factory=list, repr=False)

    @property
    def n_features(self):
        return self.weights.shape[0]

    def predict(self, X) -> np.ndarray:
        X = _check_width(X, self.n_features)
        return X @ self.weights + self.intercept

    def n_parameters(self) -> int:
        return int(self.weights.size + np.size(self.intercept))

    def to_dict(self):
        return envelope("linear", {"model": self.kind, "alpha": self.alpha,
                                   "weights": encode_array(self.weights),
                                   "intercept": encode_array(np.atleast_1d(self.intercept)),
                                   "scalar_intercept": np.ndim(self.intercept) == 0})

    @classmethod
    def from_dict(cls, doc):
        body = open_envelope(doc, "linear")
        intercept = decode_array(body["intercept"])
        if body["scalar_intercept"]:
            intercept = intercept[0]
        return cls(decode_array(body["weights"]), intercept, body["alpha"], body["model"])


def _center(X, y, fit_intercept):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) < 1:
        raise DataError(f"need a non-empty 2-D feature matrix, got shape {X.shape}")
    if len(y) != len(X):
        raise DimensionError(f"{len(X)} rows of features but {len(y)} targets")
    if fit_intercept:
        x_mean, y_mean = X.mean(axis=0), y.mean(axis=0)
    else:
        x_mean, y_mean = np.zeros(X.shape[1]), np.zeros(y.shape[1:]) if y.ndim > 1 else 0.0
    return X - x_mean, y - y_mean, x_mean, y_mean


def fit_ridge(X, y, alpha: float, fit_intercept: bool = True) -> LinearModel:
    """Minimise ||y - Xw - b||^2 + alpha*||w||^2; the intercept is not penalised."""
    if alpha < 0:
        raise ContractError("alpha must be non-negative")
    Xc, yc, x_mean, y_mean = _center(X, y, fit_intercept)
    p = Xc.shape[1]
    gram = Xc.T @ Xc + alpha * np.eye(p)
    if alpha == 0 and np.linalg.matrix_rank(gram) < p:
        raise SolverError("normal equations are singular; use alpha > 0")
    try:
        w = np.linalg.solve(gram, Xc.T @ yc)
    except np.linalg.LinAlgError as exc:
        raise SolverError(str(exc)) from exc
    intercept = y_mean - x_mean @ w
    return LinearModel(w, intercept, alpha, "ridge")


@njit(cache=True)
def _lasso_cd(gram, corr, alpha, tol, max_sweeps, w, track, yy):
    p = gram.shape[0]
    gw = gram @ w
    history = np.empty(max_sweeps + 1 if track else 1)
    n_hist = 0
    if track:
        history[0] = 0.5 * w @ gw - corr @ w + 0.5 * yy + alpha * np.abs(w).sum()
        n_hist = 1
    for sweep in range(max_sweeps):
        max_change = 0.0
        for j in range(p):
            d = gram[j, j]
            old = w[j]
            if d <= 0.0:
                new = 0.0
            else:
                rho = corr[j] - gw[j] + d * old
                if rho > alpha:
                    new = (rho - alpha) / d
                elif rho < -alpha:
                    new = (rho + alpha) / d
                else:
                    new = 0.0
            if new != old:
                delta = new - old
                for l in range(p):
                    gw[l] += gram[l, j] * delta
                w[j] = new
                if abs(delta) > max_change:
                    max_change = abs(delta)
        if track:
            history[n_hist] = 0.5 * w @ gw - corr @ w + 0.5 * yy + alpha * np.abs(w).sum()
            n_hist += 1
        if max_change < tol:
            return w, sweep + 1, history[:n_hist]
    return w, -1, history[:n_hist]


def fit_lasso(X, y, alpha: float, fit_intercept: bool = True, tol: float = 1e-7,
              max_sweeps: int = 100_000, track_objective: bool = False) -> LinearModel:
    """Cyclic coordinate descent on (1/2n)||y - Xw - b||^2 + alpha*||w||_1.

    Works on the Gram matrix, so each sweep costs O(p^2) regardless of n.
    """
    if alpha < 0:
        raise ContractError("alpha must be non-negative")
    Xc, yc, x_mean, y_mean = _center(X, y, fit_intercept)
    n, p = Xc.shape
    gram = Xc.T @ Xc / n
    ys = yc.reshape(n, -1)
    weights = np.zeros((p, ys.shape[1]))
    history: List[float] = []
    for col in range(ys.shape[1]):
        corr = Xc.T @ ys[:, col] / n
        yy = float(ys[:, col] @ ys[:, col] / n)
        w, sweeps, hist = _lasso_cd(gram, corr, float(alpha), tol, max_sweeps, np.zeros(p),
                                    track_objective, yy)
        if sweeps < 0:
            raise ConvergenceError(f"lasso did not converge within {max_sweeps} sweeps (alpha={alpha})")
        weights[:, col] = w
        if track_objective:
            history.extend(hist.tolist())
    if yc.ndim == 1:
        weights = weights[:, 0]
    intercept = y_mean - x_mean @ weights
    return LinearModel(weights, intercept, alpha, "lasso", history)


def soft_threshold(value: float, alpha: float) -> float:
    return float(np.sign(value) * max(abs(value) - alpha, 0.0))


# -- trees ----------------------------------------------------------------------

@njit(cache=True)
def _sequential_mean(Y):
    # same summation order as a tree node, so a root-only tree reproduces it exactly
    out = np.zeros(Y.shape[1])
    for r in range(Y.shape[0]):
        for c in range(Y.shape[1]):
            out[c] += Y[r, c]
    return out / Y.shape[0]


@njit(cache=True)
def _build_tree(X, Y, sample_idx, max_depth, max_features, min_leaf, seed):
    np.random.seed(seed)
    n = sample_idx.shape[0]
    p = X.shape[1]
    k = Y.shape[1]
    cap = 2 * n + 1
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    value = np.zeros((cap, k))
    idx = sample_idx.copy()
    st_node = np.empty(cap, np.int64)
    st_start = np.empty(cap, np.int64)
    st_end = np.empty(cap, np.int64)
    st_depth = np.empty(cap, np.int64)
    st_node[0], st_start[0], st_end[0], st_depth[0] = 0, 0, n, 0
    top = 1
    n_nodes = 1
    feats = np.arange(p)
    sums = np.zeros(k)
    left_sum = np.zeros(k)
    while top > 0:
        top -= 1
        node, s, e, d = st_node[top], st_start[top], st_end[top], st_depth[top]
        m = e - s
        sums[:] = 0.0
        sumsq = 0.0
        for ii in range(s, e):
            r = idx[ii]
            for c in range(k):
                sums[c] += Y[r, c]
                sumsq += Y[r, c] * Y[r, c]
        for c in range(k):
            value[node, c] = sums[c] / m
        parent_score = 0.0
        for c in range(k):
            parent_score += sums[c] * sums[c] / m
        sse = sumsq - parent_score
        if (max_depth >= 0 and d >= max_depth) or m < 2 * min_leaf or sse <= 1e-12 * max(sumsq, 1.0):
            continue
        for j in range(max_features):
            r = j + np.random.randint(p - j)
            tmp = feats[j]
            feats[j] = feats[r]
            feats[r] = tmp
        chosen = np.sort(feats[:max_features])
        best_score = parent_score + 1e-12 * max(sumsq, 1.0)
        best_f = -1
        best_thr = 0.0
        vals = np.empty(m)
        for f in chosen:
            for ii in range(m):
                vals[ii] = X[idx[s + ii], f]
            order = np.argsort(vals, kind="mergesort")
            left_sum[:] = 0.0
            for pos in range(m - 1):
                r = idx[s + order[pos]]
                for c in range(k):
                    left_sum[c] += Y[r, c]
                nl = pos + 1
                v = vals[order[pos]]
                vn = vals[order[pos + 1]]
                if v == vn or nl < min_leaf or m - nl < min_leaf:
                    continue
                score = 0.0
                for c in range(k):
                    score += left_sum[c] * left_sum[c] / nl
                    rs = sums[c] - left_sum[c]
                    score += rs * rs / (m - nl)
                if score > best_score:
                    best_score = score
                    best_f = f
                    thr = 0.5 * (v + vn)
                    best_thr = thr if thr < vn else v
        if best_f < 0:
            continue
        i = s
        j = e - 1
        while i <= j:
            if X[idx[i], best_f] <= best_thr:
                i += 1
            else:
                tmp = idx[i]
                idx[i] = idx[j]
                idx[j] = tmp
                j -= 1
        feature[node] = best_f
        threshold[node] = best_thr
        left[node] = n_nodes
        right[node] = n_nodes + 1
        st_node[top], st_start[top], st_end[top], st_depth[top] = n_nodes + 1, i, e, d + 1
        st_node[top + 1], st_start[top + 1], st_end[top + 1], st_depth[top + 1] = n_nodes, s, i, d + 1
        top += 2
        n_nodes += 2
    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), value[:n_nodes].copy())


@njit(cache=True)
def _predict_tree(X, feature, threshold, left, right, value):
    out = np.empty((X.shape[0], value.shape[1]))
    for i in range(X.shape[0]):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = value[node]
    return out


@dataclass
class DecisionTree:
    """Binary tree in array form; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, X) -> np.ndarray:
        return _predict_tree(X, self.feature, self.threshold, self.left, self.right, self.value)

    @property
    def depth(self) -> int:
        depth = np.zeros(len(self.feature), dtype=np.int64)
        for node in range(len(self.feature)):
            if self.feature[node] >= 0:
                depth[self.left[node]] = depth[self.right[node]] = depth[node] + 1
        return int(depth.max())

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))


def fit_tree(X, Y, sample_idx=None, max_depth=None, max_features=None, min_samples_leaf=1,
             seed=0) -> DecisionTree:
    """CART on the summed within-node variance of the columns of ``Y``.

    For one-hot encoded classes that criterion is exactly the Gini impurity.
    Ties between equally good splits go to the lowest feature index, then the
    lowest threshold.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    Y = np.ascontiguousarray(np.asarray(Y, dtype=np.float64).reshape(len(X), -1))
    p = X.shape[1]
    if sample_idx is None:
        sample_idx = np.arange(len(X))
    n_feat = p if max_features is None else max(1, min(int(max_features), p))
    depth = -1 if max_depth is None else int(max_depth)
    arrays = _build_tree(X, Y, np.asarray(sample_idx, dtype=np.int64), depth, n_feat,
                         int(min_samples_leaf), int(seed))
    return DecisionTree(*arrays)


@dataclass
class RandomForest:
    trees: List[DecisionTree]
    task: str
    classes: Optional[np.ndarray]
    n_features: int
    max_depth: Optional[int]
    max_features: Optional[int]
    seed: int
    output_shape: tuple = ()

    def _mean(self, X):
        X = np.ascontiguousarray(_check_width(X, self.n_features))
        preds = np.stack([t.predict(X) for t in self.trees])
        # shifted mean: exact when all trees agree
        return preds[0] + np.mean(preds - preds[0], axis=0)

    def predict_proba(self, X) -> np.ndarray:
        if self.task != "classification":
            raise ContractError("predict_proba needs a classification forest")
        return self._mean(X)

    def predict(self, X) -> np.ndarray:
        """Mean target (regression) or class-1 vote fraction (binary classification)."""
        out = self._mean(X)
        if self.task == "classification":
            return out[:, 1] if out.shape[1] == 2 else out
        return out.reshape((len(out),) + self.output_shape)

    def to_dict(self):
        trees = [{k: encode_array(getattr(t, k)) for k in ("feature", "threshold", "left", "right", "value")}
                 for t in self.trees]
        return envelope("forest", {
            "task": self.task, "n_features": self.n_features, "max_depth": self.max_depth,
            "max_features": self.max_features, "seed": self.seed,
            "output_shape": list(self.output_shape),
            "classes": None if self.classes is None else self.classes.tolist(),
            "trees": trees})

    @classmethod
    def from_dict(cls, doc):
        body = open_envelope(doc, "forest")
        trees = []
        for t in body["trees"]:
            arrays = {k: decode_array(v) for k, v in t.items()}
            for k in ("feature", "left", "right"):
                arrays[k] = arrays[k].astype(np.int64)
            trees.append(DecisionTree(**arrays))
        classes = None if body["classes"] is None else np.asarray(body["classes"])
        return cls(trees, body["task"], classes, body["n_features"], body["max_depth"],
                   body["max_features"], body["seed"], tuple(body["output_shape"]))


def fit_forest(X, y, trees: int = 100, max_depth: Optional[int] = None,
               max_features: Optional[int] = None, task: str = "regression", seed: int = 0,
               bootstrap: bool = True, min_samples_leaf: int = 1) -> RandomForest:
    """Bagged CART trees with ``max_features`` candidate features per split.

    A depth-0 forest has nothing to learn from a resample, so its trees use
    the full sample and all predict the global mean (class frequencies).
    """
    if trees < 1:
        raise ContractError("a forest needs at least one tree")
    if task not in TASKS:
        raise ContractError(f"unknown task {task!r}")
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or len(X) == 0:
        raise DataError(f"cannot fit a forest to data of shape {X.shape}")
    if len(y) != len(X):
        raise DimensionError(f"{len(X)} rows of features but {len(y)} targets")
    classes = None
    output_shape = ()
    if task == "classification":
        classes, codes = np.unique(y, return_inverse=True)
        Y = np.eye(len(classes))[codes]
    else:
        Y = np.asarray(y, dtype=np.float64)
        output_shape = Y.shape[1:]
        Y = Y.reshape(len(X), -1)
    n = len(X)
    use_bootstrap = bootstrap and max_depth != 0
    fitted = []
    for child in np.random.SeedSequence(seed).spawn(trees):
        rng = np.random.default_rng(child)
        idx = rng.integers(0, n, size=n) if use_bootstrap else np.arange(n)
        fitted.append(fit_tree(X, Y, idx, max_depth, max_features, min_samples_leaf,
                               int(rng.integers(0, 2**31 - 1))))
    return RandomForest(fitted, task, classes, X.shape[1], max_depth, max_features, seed, output_shape)


def predict(model, X) -> np.ndarray:
    return model.predict(X)


MODEL_KINDS = {"constant": ConstantPredictor, "linear": LinearModel, "forest": RandomForest}


def model_from_dict(doc: dict):
    kind = doc.get("kind")
    if kind == "network":
        from .layers import Network
        return Network.from_dict(doc)
    if kind not in MODEL_KINDS:
        raise ContractError(f"unknown model kind {kind!r}")
    return MODEL_KINDS[kind].from_dict(doc)


def model_to_json(model) -> str:
    return json.dumps(model.to_dict())


def model_from_json(text: str):
    return model_from_dict(json.loads(text))
