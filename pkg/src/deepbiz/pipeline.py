"""Train, tune and score models on user-supplied tabular CSV data.

A :class:`TabularPipeline` bundles everything fitted on the training rows
(vocabularies, imputation/scaling statistics and the model) so that another
CSV with the same schema can be scored later.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import baselines as bl
from . import data as dt
from . import experiments as ex
from . import layers as ly
from . import metrics as mt
from .errors import ContractError
from .optim import LearningCurve, TrainConfig, train

MODEL_KINDS = ("constant", "lasso", "ridge", "forest", "single_layer", "mlp")

DEFAULTS: Dict[str, dict] = {
    "constant": {},
    "lasso": {"alpha": 1.0},
    "ridge": {"alpha": 1.0},
    "forest": {"trees": 100, "max_depth": None, "max_features": None},
    "single_layer": {"learning_rate": 0.001, "batch_size": 256, "dropout": 0.0},
    "mlp": {"learning_rate": 0.001, "batch_size": 256, "dropout": 0.25, "hidden": [64, 64]},
}


def _is_network(kind: str) -> bool:
    return kind in ("single_layer", "mlp")


@dataclass
class TabularPipeline:
    schema: dt.Schema
    vocabularies: List[List[str]]
    standardizer: dt.Standardizer
    model: object
    kind: str
    params: dict

    @property
    def task(self) -> str:
        return self.schema.task

    def inputs(self, ds: dt.TabularDataset):
        std = dt.standardize(self.standardizer, ds)
        if self.kind == "mlp":
            return std.numeric, std.categorical
        return std.one_hot_features()

    def predict(self, ds: dt.TabularDataset) -> np.ndarray:
        """Regression predictions, or positive-class scores for binary classification."""
        x = self.inputs(ds)
        if isinstance(self.model, ly.Network):
            out = self.model.predict(x)
            if self.task == "classification":
                return out[:, 1] if out.shape[1] == 2 else out
            return out[:, 0]
        return bl.predict(self.model, x)

    def evaluate(self, ds: dt.TabularDataset) -> mt.MetricReport:
        pred = self.predict(ds)
        if self.task == "classification":
            return mt.classification_report(pred, ds.target)
        return mt.regression_report(pred, ds.target)

    def to_dict(self) -> dict:
        model = self.model.to_dict()
        return ly.envelope("pipeline", {
            "schema": self.schema.to_text(),
            "vocabularies": self.vocabularies,
            "standardizer": {k: ly.encode_array(np.asarray(getattr(self.standardizer, k), dtype=np.float64))
                             for k in ("mean", "std", "median", "indicator")},
            "model": model,
            "model_kind": self.kind,
            "params": self.params,
        })

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "TabularPipeline":
        body = ly.open_envelope(json.loads(text), "pipeline")
        st = {k: ly.decode_array(v) for k, v in body["standardizer"].items()}
        stats = dt.Standardizer(st["mean"], st["std"], st["median"], st["indicator"].astype(bool))
        return cls(dt.Schema.parse(body["schema"]), body["vocabularies"], stats,
                   bl.model_from_dict(body["model"]), body["model_kind"], body["params"])


def _design(ds: dt.TabularDataset, kind: str, stats: dt.Standardizer):
    std = dt.standardize(stats, ds)
    return (std.numeric, std.categorical) if kind == "mlp" else std.one_hot_features()


def _build_network(kind: str, params: dict, ds: dt.TabularDataset, n_numeric: int, width: int, seed: int):
    rng = np.random.default_rng(seed)
    n_out = int(ds.target.max()) + 1 if ds.task == "classification" else 1
    if kind == "single_layer":
        return ly.Network([ly.Dense(width, n_out, "linear", rng)], ds.task)
    tab = ly.TabularInput(n_numeric, ds.vocab_sizes, 6, rng)
    return ly.mlp(tab.out_width, list(params.get("hidden", [64, 64])), n_out, "relu", params["dropout"],
                  batchnorm=True, task=ds.task, input_layer=tab, rng=rng)


def _fit_network(kind, params, train_ds, val_ds, stats, seed, max_epochs, patience):
    x_tr, x_va = _design(train_ds, kind, stats), _design(val_ds, kind, stats)
    width = x_tr.shape[1] if kind == "single_layer" else 0
    n_numeric = x_tr[0].shape[1] if kind == "mlp" else 0
    net = _build_network(kind, params, train_ds, n_numeric, width, seed)
    cls = train_ds.task == "classification"
    y_tr = train_ds.target if cls else train_ds.target[:, None]
    y_va = val_ds.target if cls else val_ds.target[:, None]
    cfg = TrainConfig(learning_rate=params["learning_rate"], batch_size=params["batch_size"],
                      dropout=params["dropout"], max_epochs=max_epochs, patience=patience, seed=seed,
                      loss="cross-entropy" if cls else "l2")
    result = train(net, (x_tr, y_tr), (x_va, y_va), cfg)
    return net, result.curve


def fit_pipeline(ds: dt.TabularDataset, kind: str, params: Optional[dict] = None, seed: int = 0,
                 val_fraction: float = 0.1, max_epochs: int = 100,
                 patience: int = 50) -> Tuple[TabularPipeline, Optional[LearningCurve]]:
    """Fit ``kind`` on ``ds``; networks hold out ``val_fraction`` of rows for early stopping."""
    if kind not in MODEL_KINDS:
        raise ContractError(f"unknown model {kind!r}; expected one of {MODEL_KINDS}")
    params = dict(DEFAULTS[kind], **(params or {}))
    curve = None
    if _is_network(kind):
        parts = dt.split(len(ds), dt.SplitSpec("random", val_fraction, 0.0, seed=seed))
        stats = dt.Standardizer.fit(ds.numeric[parts.train])
        model, curve = _fit_network(kind, params, ds.take(parts.train), ds.take(parts.val), stats, seed,
                                    max_epochs, patience)
    else:
        stats = dt.Standardizer.fit(ds.numeric)
        X = _design(ds, kind, stats)
        key = {"constant": "mean"}.get(kind, kind)
        model = ex._fit_baseline(key, params, X, ds.target, ds.task, seed)
    schema = dt.dataset_schema(ds)
    return TabularPipeline(schema, [list(v) for v in ds.vocabularies], stats, model, kind, params), curve


def tune(ds: dt.TabularDataset, kind: str, grid: List[dict], folds: int = 10, seed: int = 0,
         workers: int = 1, max_epochs: int = 100, patience: int = 50):
    """Grid search: baselines by k-fold CV, networks on a 10% validation split.

    Returns ``(best_config, trials)``; scores are AUC (higher is better) for
    classification and MSE otherwise.
    """
    cls = ds.task == "classification"
    score = (lambda p, y: mt.auc(p, y)) if cls else (lambda p, y: mt.regression_metrics(p, y)[0])
    if _is_network(kind):
        parts = dt.split(len(ds), dt.SplitSpec("random", 0.1, 0.0, seed=seed))
        tr, va = ds.take(parts.train), ds.take(parts.val)
        stats = dt.Standardizer.fit(tr.numeric)

        def evaluate(cfg):
            params = dict(DEFAULTS[kind], **cfg)
            net, _ = _fit_network(kind, params, tr, va, stats, seed, max_epochs, patience)
            pipe = TabularPipeline(dt.dataset_schema(ds), ds.vocabularies, stats, net, kind, params)
            return score(pipe.predict(va), va.target)
    else:
        fold_idx = dt.kfold(len(ds), folds, seed, ds.target if cls else None)

        def evaluate(cfg):
            results = []
            for held in fold_idx:
                keep = np.setdiff1d(np.arange(len(ds)), held)
                pipe, _ = fit_pipeline(ds.take(keep), kind, cfg, seed)
                results.append(score(pipe.predict(ds.take(held)), ds.target[held]))
            return float(np.mean(results))

    return ex.grid_search(evaluate, grid, maximize=cls, workers=workers)


def tuning_grid(kind: str, smoke: bool = False, seed: int = 0) -> List[dict]:
    family = {"mlp": "deep"}.get(kind, kind)
    if kind == "constant":
        return [{}]
    grid = ex.HyperGrid(ex.FULL_GRIDS[family])
    return grid.sample(8, seed) if smoke else grid.configs()
