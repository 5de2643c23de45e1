"""Benchmark protocol: grid search, case-study runners, size sweep, result tables."""
from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
import platform
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import baselines as bl
from . import data as dt
from . import layers as ly
from . import metrics as mt
from .errors import ContractError, DataError, DeepBizError, DegenerateTestError, ExperimentError
from .optim import TrainConfig, train

log = logging.getLogger(__name__)

CASES = ("insurance", "tickets", "sales")
ALPHAS = [10.0 ** k for k in range(-3, 4)]

FULL_GRIDS: Dict[str, Dict[str, list]] = {
    "lasso": {"alpha": ALPHAS},
    "ridge": {"alpha": ALPHAS},
    "forest": {"trees": [100, 200, 500], "max_depth": [2, 5, 10, 50, None], "max_features": [1, 3, 5, 10]},
    "single_layer": {"learning_rate": [0.001, 0.005, 0.01, 0.05], "dropout": [0.0, 0.25, 0.5],
                     "batch_size": [32, 64, 256]},
    "deep": {"learning_rate": [0.001, 0.005, 0.01, 0.05], "dropout": [0.0, 0.25, 0.5, 0.75],
             "batch_size": [32, 64, 256]},
}

# per-study hyperparameters used when the grid is skipped
TUNED_DEFAULTS = {
    "insurance": {"batch_size": 256, "learning_rate": 0.001, "dropout": 0.75},
    "tickets": {"batch_size": 32, "learning_rate": 0.001, "dropout": 0.25},
    "sales": {"batch_size": 256, "learning_rate": 0.001, "dropout": 0.0},
}

DESK_DEFAULTS = {
    "insurance": {"n": 20000, "max_epochs": 150},
    "tickets": {"n": 8760, "max_epochs": 250},
    "sales": {"n": 400, "max_epochs": 60},
}

ROSTERS = {
    "insurance": ["majority", "lasso", "ridge", "forest", "single_layer", "dnn2", "dnn3", "dnn4", "dnn5"],
    "tickets": ["mean", "lasso", "ridge", "forest", "single_layer", "gru", "lstm"],
    "sales": ["mean", "lasso", "ridge", "forest", "single_layer", "gru", "lstm"],
}
BASELINE_KEYS = ("majority", "mean", "lasso", "ridge", "forest", "single_layer")
METRICS = {"classification": ("gini", "auc"), "regression": ("mse", "mae")}


# -- grids and search ---------------------------------------------------------------

class HyperGrid:
    """Ordered map of parameter name to candidate values; iterates the Cartesian product."""

    def __init__(self, params: Dict[str, list]):
        for name, values in params.items():
            if not len(values):
                raise ContractError(f"grid parameter {name!r} has no candidates")
        self.params = {k: list(v) for k, v in params.items()}

    def configs(self) -> List[dict]:
        names = list(self.params)
        return [dict(zip(names, combo)) for combo in itertools.product(*self.params.values())]

    def __len__(self):
        return math.prod(len(v) for v in self.params.values())

    def sample(self, k: int, seed: int = 0) -> List[dict]:
        """Up to ``k`` configs drawn without replacement, kept in grid order."""
        configs = self.configs()
        if len(configs) <= k:
            return configs
        keep = np.sort(np.random.default_rng(seed).choice(len(configs), size=k, replace=False))
        return [configs[i] for i in keep]


@dataclass
class Trial:
    config: dict
    score: Optional[float]
    error: Optional[str] = None

    @property
    def failed(self) -> bool:
        return self.error is not None


def grid_search(evaluate: Callable[[dict], float], grid, maximize: bool = False,
                workers: int = 1):
    """Score every config; returns ``(best_config, trials)``.

    A trial that raises (or scores NaN) is recorded as failed and skipped.
    Ties go to the earliest config in grid order.
    """
    configs = grid.configs() if isinstance(grid, HyperGrid) else list(grid)
    if not configs:
        raise ContractError("grid is empty")

    def run(cfg):
        try:
            score = float(evaluate(dict(cfg)))
        except (DeepBizError, ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
            log.info("trial %s failed: %s", cfg, exc)
            return Trial(dict(cfg), None, f"{type(exc).__name__}: {exc}")
        if not math.isfinite(score):
            return Trial(dict(cfg), None, "non-finite score")
        return Trial(dict(cfg), score)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            trials = list(pool.map(run, configs))
    else:
        trials = [run(c) for c in configs]
    best = None
    for t in trials:
        if t.failed:
            continue
        if best is None or (t.score > best.score if maximize else t.score < best.score):
            best = t
    if best is None:
        raise ExperimentError(f"all {len(trials)} trials failed; first error: {trials[0].error}")
    return best.config, trials


def contiguous_folds(n: int, k: int) -> List[np.ndarray]:
    """``k`` consecutive blocks of ``range(n)`` (for time-ordered rows)."""
    if k < 2 or k > n:
        raise ContractError(f"cannot make {k} folds from {n} rows")
    return [np.asarray(b) for b in np.array_split(np.arange(n), k)]


def cv_score(fit: Callable, X, y, folds: Sequence[np.ndarray], score: Callable) -> float:
    """Mean held-out score over ``folds`` with ``fit(X, y) -> model``."""
    n = len(y)
    results = []
    for held in folds:
        mask = np.ones(n, dtype=bool)
        mask[held] = False
        model = fit(X[mask], y[mask])
        results.append(score(bl.predict(model, X[held]), y[held]))
    return float(np.mean(results))


def count_free_parameters(model):
    """Trainable scalar count; forests report ``'n/a'`` and constant predictors ``'---'``."""
    if isinstance(model, bl.RandomForest):
        return "n/a"
    if isinstance(model, bl.ConstantPredictor):
        return "---"
    if isinstance(model, (ly.Network, ly.Layer, bl.LinearModel)):
        return int(model.n_parameters())
    raise ContractError(f"cannot count parameters of {type(model).__name__}")


# -- result table ----------------------------------------------------------------------

@dataclass
class ResultRow:
    model: str
    group: str
    free_parameters: object
    metrics: Dict[str, float]
    p_value: Optional[float] = None
    status: str = "ok"


@dataclass
class ResultTable:
    study: str
    metric_names: List[str]
    rows: List[ResultRow] = field(default_factory=list)

    def row(self, model: str) -> ResultRow:
        for r in self.rows:
            if r.model == model:
                return r
        raise KeyError(model)

    def header(self) -> List[str]:
        return ["model", "group", "free_parameters", *self.metric_names, "p_value", "status"]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.header())
        for r in self.rows:
            vals = [repr(float(r.metrics[m])) if m in r.metrics else "" for m in self.metric_names]
            writer.writerow([r.model, r.group, r.free_parameters, *vals,
                             "" if r.p_value is None else repr(float(r.p_value)), r.status])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path, study: str = "") -> "ResultTable":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            metric_names = header[3:-2]
            table = cls(study, metric_names)
            for rec in reader:
                fp = rec[2]
                table.rows.append(ResultRow(
                    rec[0], rec[1], int(fp) if fp.isdigit() else fp,
                    {m: float(v) for m, v in zip(metric_names, rec[3:-2]) if v != ""},
                    float(rec[-2]) if rec[-2] else None, rec[-1]))
        return table

    def to_text(self) -> str:
        head = ["Model", "Free parameters", *[m.upper() if len(m) <= 3 else m.capitalize()
                                              for m in self.metric_names], "p-value"]
        body = []
        for r in self.rows:
            cells = [r.model, str(r.free_parameters)]
            cells += [f"{r.metrics[m]:.3f}" if m in r.metrics else "failed" for m in self.metric_names]
            cells.append("" if r.p_value is None else f"{r.p_value:.3g}")
            body.append(cells)
        widths = [max(len(row[i]) for row in [head] + body) for i in range(len(head))]
        lines = []
        for k, cells in enumerate([head] + body):
            parts = [cells[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(cells[1:], widths[1:])]
            lines.append("  ".join(parts).rstrip())
            if k == 0:
                lines.append("-" * len(lines[0]))
        if self.study:
            lines.insert(0, f"[{self.study}]")
        return "\n".join(lines) + "\n"


# -- configuration ------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    case: str
    n: Optional[int] = None
    stores: int = 50
    seed: int = 0
    csv_path: Optional[str] = None
    schema_path: Optional[str] = None
    grid: str = "full"  # "full" or "smoke"
    folds: Optional[int] = None
    models: Optional[List[str]] = None
    hidden: int = 64
    recurrent_hidden: int = 32
    max_epochs: Optional[int] = None
    patience: int = 50
    test_fraction: float = 0.1
    workers: int = 1
    out_dir: Optional[str] = None

    def __post_init__(self):
        if self.case not in CASES:
            raise ContractError(f"unknown case study {self.case!r}; expected one of {CASES}")
        if self.grid not in ("full", "smoke"):
            raise ContractError("grid must be 'full' or 'smoke'")
        defaults = DESK_DEFAULTS[self.case]
        if self.n is None:
            self.n = defaults["n"]
        if self.max_epochs is None:
            self.max_epochs = defaults["max_epochs"]
        if self.folds is None:
            self.folds = 10 if self.grid == "full" else 3
        roster = ROSTERS[self.case]
        if self.models is None:
            self.models = list(roster)
        unknown = [m for m in self.models if m not in roster]
        if unknown:
            raise ContractError(f"models {unknown} are not part of the {self.case} roster {roster}")
        self.models = [m for m in roster if m in self.models]  # keep table order
        if not 0 < self.test_fraction < 0.5:
            raise ContractError("test fraction must lie in (0, 0.5)")

    @property
    def task(self) -> str:
        return "classification" if self.case == "insurance" else "regression"

    def grid_for(self, key: str) -> List[dict]:
        family = "deep" if key in ("dnn2", "dnn3", "dnn4", "dnn5", "gru", "lstm") else key
        if family in ("majority", "mean"):
            return [{}]
        if self.grid == "full":
            return HyperGrid(FULL_GRIDS[family]).configs()
        if family == "deep":
            return [dict(TUNED_DEFAULTS[self.case])]
        if family == "single_layer":
            return [dict(TUNED_DEFAULTS[self.case], dropout=0.0)]
        if family == "forest":
            return HyperGrid(dict(FULL_GRIDS["forest"], trees=[100])).sample(8, seed=self.seed)
        return HyperGrid(FULL_GRIDS[family]).sample(8, seed=self.seed)


DISPLAY = {
    "majority": "Majority vote",
    "mean": "Mean value as predictor",
    "lasso": "Lasso",
    "ridge": "Ridge regression",
    "forest": "Random forest",
    "single_layer": "Single-layer neural network",
    "gru": "GRU ({h} hidden units)",
    "lstm": "LSTM ({h} hidden units)",
}


def display_name(key: str, config: ExperimentConfig) -> str:
    if key.startswith("dnn"):
        return f"Deep neural network ({key[3:]} layers, {config.hidden} neurons each)"
    return DISPLAY[key].format(h=config.recurrent_hidden)


# -- study preparation ----------------------------------------------------------------------

@dataclass
class StudyData:
    """Every representation a study's models need, per split."""

    task: str
    tabular: Dict[str, np.ndarray]      # baseline design matrices
    network: Dict[str, object]          # deep-model inputs
    target: Dict[str, np.ndarray]
    ordered: bool                       # rows are time ordered (use contiguous CV folds)
    n_outputs: int
    input_width: int
    vocab_sizes: List[int] = field(default_factory=list)
    n_numeric: int = 0

    def subset(self, split: str, idx) -> "StudyData":
        tab = dict(self.tabular)
        net = dict(self.network)
        tgt = dict(self.target)
        tab[split] = self.tabular[split][idx]
        net[split] = ly.take(self.network[split], idx)
        tgt[split] = self.target[split][idx]
        return StudyData(self.task, tab, net, tgt, self.ordered, self.n_outputs, self.input_width,
                         self.vocab_sizes, self.n_numeric)


def load_dataset(config: ExperimentConfig) -> dt.TabularDataset:
    if config.csv_path is not None:
        if config.schema_path is None:
            raise ContractError("a CSV data source needs a schema file")
        return dt.load_csv(config.csv_path, config.schema_path)
    if config.case == "insurance":
        return dt.synth_insurance(config.n, config.seed)
    if config.case == "tickets":
        return dt.synth_tickets(config.n, config.seed)
    return dt.synth_sales(config.n, config.stores, config.seed)


def _validation_fraction(test_fraction: float) -> float:
    # validation is 10% of the rows left for training
    return 0.1 * (1.0 - test_fraction)


def prepare_insurance(ds: dt.TabularDataset, config: ExperimentConfig) -> StudyData:
    spec = dt.SplitSpec("random", _validation_fraction(config.test_fraction), config.test_fraction,
                        seed=config.seed)
    parts = dt.split(len(ds), spec)
    stats = dt.Standardizer.fit(ds.numeric[parts.train])
    std = dt.standardize(stats, ds)
    onehot = std.one_hot_features()
    tab, net, tgt = {}, {}, {}
    for name in ("train", "val", "test"):
        idx = getattr(parts, name)
        tab[name] = onehot[idx]
        net[name] = (std.numeric[idx], std.categorical[idx])
        tgt[name] = ds.target[idx].astype(np.int64)
    return StudyData("classification", tab, net, tgt, False, 2, onehot.shape[1],
                     ds.vocab_sizes, std.numeric.shape[1])


def _chronological_parts(n_anchor_times: int, test_fraction: float):
    """Boundaries (train_end, val_end) over ``n_anchor_times`` ordered time slots."""
    n_test = max(1, int(round(test_fraction * n_anchor_times)))
    n_val = max(1, int(round(_validation_fraction(test_fraction) * n_anchor_times)))
    train_end = n_anchor_times - n_test - n_val
    if train_end < 1:
        raise ExperimentError(f"only {n_anchor_times} time slots; too few to split")
    return train_end, train_end + n_val


TICKETS_LAGS, TICKETS_WINDOW, TICKETS_HORIZON = 48, 200, 24


def prepare_tickets(ds: dt.TabularDataset, config: ExperimentConfig) -> StudyData:
    """One sample per target day: predict its 24 hourly counts from the past.

    Baselines see 48 lagged counts plus the one-hot weekday of the target
    day; sequence models see the trailing 200 hours, each step holding its
    count and the one-hot hour and weekday of the following hour.  Month is
    left out: in a one-year series the test months never occur in training.
    """
    names = list(ds.categorical_names)
    try:
        cols = [names.index(c) for c in ("hour", "dow")]
    except ValueError:
        raise ContractError("tickets data needs categorical columns hour and dow") from None
    y = ds.target.astype(np.float64)
    n = len(y)
    codes = ds.categorical[:, cols]
    sizes = [ds.vocab_sizes[c] for c in cols]
    first = -(-TICKETS_WINDOW // 24) * 24
    anchors = np.arange(first, n - TICKETS_HORIZON + 1, 24)
    train_end, val_end = _chronological_parts(len(anchors), config.test_fraction)
    fit_hours = slice(0, anchors[train_end])  # hours before the first validation day
    mu, sigma = y[fit_hours].mean(), max(y[fit_hours].std(), 1e-12)
    z = (y - mu) / sigma
    calendar = np.hstack([dt.one_hot_matrix(codes[:, j], k) for j, k in enumerate(sizes)])
    lag_table = dt.build_lags(z, TICKETS_LAGS, TICKETS_HORIZON)
    row_of = {int(a): i for i, a in enumerate(lag_table.anchors)}
    rows = np.array([row_of[int(a)] for a in anchors])
    day_calendar = dt.one_hot_matrix(codes[anchors, 1], sizes[1])
    X = np.hstack([lag_table.numeric[rows], day_calendar])
    Y = lag_table.target[rows]
    next_calendar = np.vstack([calendar[1:], calendar[-1:]])
    steps = np.hstack([z[:, None], next_calendar])
    seqs = dt.build_windows(steps, z, TICKETS_WINDOW, TICKETS_HORIZON, anchors)
    return _time_split(X, seqs.sequences, Y, train_end, val_end, lambda i: i)


def _time_split(X, S, Y, train_end, val_end, slot_of) -> StudyData:
    slots = np.array([slot_of(i) for i in range(len(Y))])
    bounds = {"train": slots < train_end, "val": (slots >= train_end) & (slots < val_end),
              "test": slots >= val_end}
    tab = {k: X[m] for k, m in bounds.items()}
    net = {k: S[m] for k, m in bounds.items()}
    tgt = {k: Y[m] for k, m in bounds.items()}
    return StudyData("regression", tab, net, tgt, True, 1 if Y.ndim == 1 else Y.shape[1],
                     X.shape[1])


SALES_LAGS, SALES_WINDOW = 7, 50


def prepare_sales(ds: dt.TabularDataset, config: ExperimentConfig) -> StudyData:
    """Day-ahead sales per store.

    Baselines see 7 lagged sales plus that day's calendar, promotion and
    store descriptors; sequence models see the trailing 50 days, each step
    holding its sales and the calendar/promotion state of the following day
    along with the static store descriptors.
    """
    need = ["store", "day_of_week", "store_type", "assortment"]
    cat = {c: ds.categorical_names.index(c) for c in need if c in ds.categorical_names}
    num = {c: ds.numeric_names.index(c) for c in ds.numeric_names}
    if len(cat) < len(need) or not {"promo", "state_holiday", "school_holiday",
                                    "competition_distance", "week_of_year"} <= set(num):
        raise ContractError("sales data lacks the expected store/calendar columns")
    store = ds.categorical[:, cat["store"]]
    n_stores = int(store.max()) + 1
    if len(ds) % n_stores:
        raise DataError("sales rows must form a complete store x day grid")
    n_days = len(ds) // n_stores
    order = np.lexsort((store, np.asarray(ds.timestamps) if ds.timestamps is not None else np.arange(len(ds))))
    grid = lambda col: col[order].reshape(n_days, n_stores)  # noqa: E731
    sales = grid(ds.target.astype(np.float64))
    first = SALES_WINDOW
    days = np.arange(first, n_days)
    train_end, val_end = _chronological_parts(len(days), config.test_fraction)
    fit_days = slice(0, days[train_end])
    mu, sigma = sales[fit_days].mean(), max(sales[fit_days].std(), 1e-12)
    z = (sales - mu) / sigma
    dist = np.log1p(grid(ds.numeric[:, num["competition_distance"]]))
    dist = (dist - dist[fit_days].mean()) / max(dist[fit_days].std(), 1e-12)
    dow = dt.one_hot_matrix(grid(ds.categorical[:, cat["day_of_week"]]).ravel(),
                            ds.vocab_sizes[cat["day_of_week"]]).reshape(n_days, n_stores, -1)
    flags = np.stack([grid(ds.numeric[:, num[c]]) for c in ("promo", "state_holiday", "school_holiday")], axis=2)
    week = (grid(ds.numeric[:, num["week_of_year"]]) / 52.0)[:, :, None]
    static = np.concatenate([
        dt.one_hot_matrix(grid(ds.categorical[:, cat[c]]).ravel(), ds.vocab_sizes[cat[c]]).reshape(n_days, n_stores, -1)
        for c in ("store_type", "assortment")] + [dist[:, :, None]], axis=2)
    day_cov = np.concatenate([dow, flags, week], axis=2)
    store_onehot = np.eye(n_stores)
    Xs, Ss, Ys = [], [], []
    for t in days:
        lags = np.stack([z[t - j] for j in range(1, SALES_LAGS + 1)], axis=1)
        Xs.append(np.hstack([lags, day_cov[t], static[t], store_onehot]))
        window = np.concatenate([z[t - SALES_WINDOW:t, :, None], day_cov[t - SALES_WINDOW + 1:t + 1],
                                 static[t - SALES_WINDOW + 1:t + 1]], axis=2)
        Ss.append(np.transpose(window, (1, 0, 2)))
        Ys.append(z[t])
    X = np.concatenate(Xs)
    S = np.concatenate(Ss)
    Y = np.concatenate(Ys)
    return _time_split(X, S, Y, train_end, val_end, lambda i: i // n_stores)


PREPARE = {"insurance": prepare_insurance, "tickets": prepare_tickets, "sales": prepare_sales}


def prepare(config: ExperimentConfig, ds: Optional[dt.TabularDataset] = None) -> StudyData:
    return PREPARE[config.case](ds if ds is not None else load_dataset(config), config)


# -- model families --------------------------------------------------------------------------

def _score_fn(task: str):
    if task == "classification":
        return lambda pred, y: mt.auc(pred, y)
    return lambda pred, y: mt.regression_metrics(pred, y)[0]


def _fit_baseline(key: str, cfg: dict, X, y, task: str, seed: int):
    target = y.astype(np.float64) if task == "classification" and key in ("lasso", "ridge") else y
    if key in ("majority", "mean"):
        return bl.ConstantPredictor.fit(y, task, X.shape[1])
    if key == "lasso":
        return bl.fit_lasso(X, target, cfg["alpha"])
    if key == "ridge":
        return bl.fit_ridge(X, target, cfg["alpha"])
    if key == "forest":
        max_features = min(cfg["max_features"], X.shape[1]) if cfg.get("max_features") else None
        return bl.fit_forest(X, y, trees=cfg["trees"], max_depth=cfg["max_depth"],
                             max_features=max_features, task=task, seed=seed)
    raise ContractError(f"{key!r} is not a baseline family")


def build_network(key: str, data: StudyData, config: ExperimentConfig, dropout: float, seed: int):
    rng = np.random.default_rng(seed)
    task = data.task
    if key == "single_layer":
        layers = [ly.Dense(data.input_width, data.n_outputs, "linear", rng)]
        return ly.Network(layers, task)
    if key.startswith("dnn"):
        depth = int(key[3:])
        tab_in = ly.TabularInput(data.n_numeric, data.vocab_sizes, 6, rng)
        return ly.mlp(tab_in.out_width, [config.hidden] * depth, data.n_outputs, "relu", dropout,
                      batchnorm=True, task=task, input_layer=tab_in, rng=rng)
    if key in ("gru", "lstm"):
        width = data.network["train"].shape[2]
        return ly.sequence_model(width, key, data.n_outputs, config.recurrent_hidden, 32, dropout, rng)
    raise ContractError(f"{key!r} is not a network family")


@dataclass
class FittedModel:
    key: str
    model: object
    config: dict
    curve: object = None
    trials: List[Trial] = field(default_factory=list)


def _network_inputs(key, data: StudyData, split: str):
    return data.tabular[split] if key == "single_layer" else data.network[split]


def _predict(key: str, model, data: StudyData, split: str) -> np.ndarray:
    if isinstance(model, ly.Network):
        out = model.predict(_network_inputs(key, data, split))
        return out[:, 1] if data.task == "classification" else out.reshape(data.target[split].shape)
    return bl.predict(model, data.tabular[split])


def fit_model(key: str, data: StudyData, config: ExperimentConfig, seed: int) -> FittedModel:
    """Tune ``key`` on the training portion and refit it with the winning config."""
    task = data.task
    score = _score_fn(task)
    maximize = task == "classification"
    grid = config.grid_for(key)
    if key in BASELINE_KEYS and key != "single_layer":
        X = np.vstack([data.tabular["train"], data.tabular["val"]])
        y = np.concatenate([data.target["train"], data.target["val"]])
        if len(grid) > 1:
            folds = (contiguous_folds(len(y), config.folds) if data.ordered
                     else dt.kfold(len(y), config.folds, seed,
                                   y if task == "classification" else None))
            best, trials = grid_search(
                lambda cfg: cv_score(lambda a, b: _fit_baseline(key, cfg, a, b, task, seed), X, y, folds, score),
                grid, maximize, config.workers)
        else:
            best, trials = grid[0], []
        return FittedModel(key, _fit_baseline(key, best, X, y, task, seed), best, trials=trials)

    configs = [dict(c) for c in grid]
    kept = []

    def run(cfg):
        net = build_network(key, data, config, cfg["dropout"], seed)
        tc = TrainConfig(learning_rate=cfg["learning_rate"], batch_size=cfg["batch_size"],
                         dropout=cfg["dropout"], max_epochs=config.max_epochs, patience=config.patience,
                         seed=seed, loss="cross-entropy" if task == "classification" else "l2")
        res = train(net, (_network_inputs(key, data, "train"), data.target["train"]),
                    (_network_inputs(key, data, "val"), data.target["val"]), tc)
        value = score(_predict(key, net, data, "val"), data.target["val"])
        if len(configs) == 1:
            kept.append((net, res.curve))
        return value

    best_cfg, trials = grid_search(run, configs, maximize, config.workers)
    # rebuild deterministically rather than keeping every trained network alive
    net = build_network(key, data, config, best_cfg["dropout"], seed)
    tc = TrainConfig(learning_rate=best_cfg["learning_rate"], batch_size=best_cfg["batch_size"],
                     dropout=best_cfg["dropout"], max_epochs=config.max_epochs, patience=config.patience,
                     seed=seed, loss="cross-entropy" if task == "classification" else "l2")
    if len(configs) == 1:
        net, curve = kept[0]
    else:
        res = train(net, (_network_inputs(key, data, "train"), data.target["train"]),
                    (_network_inputs(key, data, "val"), data.target["val"]), tc)
        curve = res.curve
    return FittedModel(key, net, best_cfg, curve, trials)


# -- case study -----------------------------------------------------------------------------------

@dataclass
class StudyOutcome:
    table: ResultTable
    predictions: Dict[str, np.ndarray]
    fitted: Dict[str, FittedModel]
    data: StudyData


def _metric_values(task, pred, y) -> Dict[str, float]:
    if task == "classification":
        a = mt.auc(pred, y)
        return {"gini": mt.gini_from_auc(a), "auc": a}
    mse, mae = mt.regression_metrics(pred, y)
    return {"mse": mse, "mae": mae}


def _per_sample_sq(pred, y):
    return np.mean(np.reshape((pred - y) ** 2, (len(y), -1)), axis=1)


def _significance(task, pred, best_pred, y, seed) -> Optional[float]:
    try:
        if task == "classification":
            return mt.bootstrap_auc_test(pred, best_pred, y, 2000, seed)
        return mt.paired_significance(_per_sample_sq(pred, y), _per_sample_sq(best_pred, y))
    except (DegenerateTestError, ContractError) as exc:
        log.info("significance test skipped: %s", exc)
        return None


def evaluate_roster(config: ExperimentConfig, data: StudyData) -> StudyOutcome:
    task = data.task
    table = ResultTable(config.case, list(METRICS[task]))
    preds: Dict[str, np.ndarray] = {}
    fitted: Dict[str, FittedModel] = {}
    y_test = data.target["test"]
    for key in config.models:
        name = display_name(key, config)
        group = "baseline" if key in BASELINE_KEYS else "deep"
        try:
            fm = fit_model(key, data, config, config.seed)
            pred = _predict(key, fm.model, data, "test")
            vals = _metric_values(task, pred, y_test)
        except (DeepBizError, ArithmeticError, ValueError) as exc:
            log.warning("%s failed: %s", name, exc)
            table.rows.append(ResultRow(name, group, "n/a", {}, None, f"failed: {type(exc).__name__}"))
            continue
        fitted[key], preds[key] = fm, pred
        table.rows.append(ResultRow(name, group, count_free_parameters(fm.model), vals))
    # significance against the best baseline on the test set
    primary = "auc" if task == "classification" else "mse"
    base = [(k, r) for k, r in zip(config.models, table.rows) if r.group == "baseline" and r.metrics]
    if base:
        pick = max if task == "classification" else min
        best_key, best_row = pick(base, key=lambda kr: kr[1].metrics[primary])
        for key, row in zip(config.models, table.rows):
            if row.metrics and row is not best_row:
                row.p_value = _significance(task, preds[key], preds[best_key], y_test, config.seed)
    return StudyOutcome(table, preds, fitted, data)


def _versions() -> dict:
    import numba
    import scipy

    from . import __version__
    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
            "numba": numba.__version__, "deepbiz": __version__}


def write_outcome(outcome: StudyOutcome, config: ExperimentConfig, wall_time: float):
    out = Path(config.out_dir)
    (out / "learning_curves").mkdir(parents=True, exist_ok=True)
    outcome.table.to_csv(out / "results.csv")
    (out / "results.txt").write_text(outcome.table.to_text())
    for key, fm in outcome.fitted.items():
        if fm.curve is not None:
            fm.curve.to_csv(out / "learning_curves" / f"{key}.csv")
    manifest = {
        "config": asdict(config),
        "seeds": {"data": config.seed, "models": config.seed},
        "selected": {k: fm.config for k, fm in outcome.fitted.items()},
        "versions": _versions(),
        "wall_time_seconds": wall_time,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def run_case_study(config: ExperimentConfig, ds: Optional[dt.TabularDataset] = None) -> ResultTable:
    """Run the study's model roster and return its result table.

    When ``config.out_dir`` is set, the table (CSV and text), the
    learning curves and a run manifest are written there.
    """
    return run_case_study_full(config, ds).table


def run_case_study_full(config: ExperimentConfig, ds: Optional[dt.TabularDataset] = None) -> StudyOutcome:
    start = time.perf_counter()
    outcome = evaluate_roster(config, prepare(config, ds))
    if config.out_dir is not None:
        write_outcome(outcome, config, time.perf_counter() - start)
    return outcome


# -- size sweep -----------------------------------------------------------------------------------

@dataclass
class SweepPoint:
    fraction: float
    model: str
    n_train: int
    metric: float


def size_sensitivity_sweep(config: ExperimentConfig, fractions: Sequence[float],
                           models: Sequence[str] = ("forest", None), path=None) -> List[SweepPoint]:
    """Retrain on growing training subsets; score on the fixed test split.

    Time-series studies use a chronological prefix of the training rows,
    the insurance study a seeded random subsample.  ``None`` in ``models``
    stands for the study's first deep model.
    """
    fractions = [float(f) for f in fractions]
    if any(not 0 < f <= 1 for f in fractions) or fractions != sorted(fractions):
        raise ContractError("fractions must be sorted and lie in (0, 1]")
    deep = [k for k in ROSTERS[config.case] if k not in BASELINE_KEYS][0]
    models = [deep if m is None else m for m in models]
    data = prepare(config)
    n_train = len(data.target["train"])
    order = (np.arange(n_train) if data.ordered
             else np.random.default_rng(config.seed).permutation(n_train))
    primary = "auc" if data.task == "classification" else "mse"
    jobs = []
    for f in fractions:
        idx = order[:int(round(f * n_train))]
        if len(idx) < 50:
            warnings.warn(f"fraction {f} leaves {len(idx)} training rows; skipped")
            continue
        sub = data.subset("train", np.sort(idx))
        jobs.extend((f, key, sub, len(idx)) for key in models)

    def run(job):
        f, key, sub, n = job
        fm = fit_model(key, sub, config, config.seed)
        pred = _predict(key, fm.model, sub, "test")
        return SweepPoint(f, key, n, _metric_values(data.task, pred, sub.target["test"])[primary])

    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            points = list(pool.map(run, jobs))
    else:
        points = [run(job) for job in jobs]
    if path is not None:
        write_sweep(points, path, primary)
    return points


def write_sweep(points: Sequence[SweepPoint], path, metric: str = "metric") -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["fraction", "model", "n_train", metric])
    for p in points:
        writer.writerow([repr(p.fraction), p.model, p.n_train, repr(float(p.metric))])
    Path(path).write_text(buf.getvalue())
    return buf.getvalue()
