"""Finite-difference verification of every layer's backward pass."""
from __future__ import annotations

from typing import Callable, Dict

import numpy as np

from . import autodiff as ad
from . import layers as ly

TOLERANCE = 1e-4


def _projected(out: ad.Node, weights: np.ndarray) -> ad.Node:
    # random projection so every output coordinate contributes a distinct gradient
    return ad.sum(out * out.tape.constant(weights))


def _layer_check(layer: ly.Layer, x, mode: str = "eval", seed: int = 0,
                 differentiate_input: bool = True) -> float:
    point = dict(layer.params)
    if differentiate_input:
        point["input"] = x
    tape = ad.Tape()
    probe = layer.forward(x, {k: tape.constant(v) for k, v in layer.params.items()},
                          ly.Context(tape, mode, np.random.default_rng(seed), update_stats=False))
    weights = np.random.default_rng(seed + 1).normal(size=probe.value.shape)

    def f(leaves):
        tape = next(iter(leaves.values())).tape
        ctx = ly.Context(tape, mode, np.random.default_rng(seed), update_stats=False)
        inp = leaves["input"] if differentiate_input else x
        return _projected(layer.forward(inp, {k: leaves[k] for k in layer.params}, ctx), weights)

    return ad.grad_check(f, point)


def _away_from_kink(rng, layer: ly.Dense, n: int) -> np.ndarray:
    # resample until no pre-activation sits within 1e-3 of the ReLU kink
    while True:
        x = rng.normal(size=(n, layer.in_width))
        z = x @ layer.params["weight"].T + layer.params["bias"]
        if np.abs(z).min() > 1e-3:
            return x


def _dense(activation: str, seed: int) -> float:
    rng = np.random.default_rng(seed)
    layer = ly.Dense(4, 3, activation, rng)
    layer.params["bias"][:] = rng.normal(size=3)
    return _layer_check(layer, _away_from_kink(rng, layer, 5), seed=seed)


def _softmax_cross_entropy(seed: int) -> float:
    rng = np.random.default_rng(seed)
    layer = ly.Dense(4, 3, "linear", rng)
    x = rng.normal(size=(6, 4))
    labels = rng.integers(0, 3, size=6)

    def f(leaves):
        ctx = ly.Context(leaves["input"].tape)
        logits = layer.forward(leaves["input"], {k: leaves[k] for k in layer.params}, ctx)
        return ad.softmax_cross_entropy(logits, labels)

    return ad.grad_check(f, dict(layer.params, input=x))


def _embedding(seed: int) -> float:
    rng = np.random.default_rng(seed)
    layer = ly.Embedding(7, 3, rng)
    codes = rng.integers(0, 7, size=10)  # repeats exercise gradient accumulation
    return _layer_check(layer, codes, seed=seed, differentiate_input=False)


def _tabular_input(seed: int) -> float:
    rng = np.random.default_rng(seed)
    layer = ly.TabularInput(2, [4, 3], 2, rng)
    x = (rng.normal(size=(5, 2)), np.stack([rng.integers(0, 4, 5), rng.integers(0, 3, 5)], axis=1))
    return _layer_check(layer, x, seed=seed, differentiate_input=False)


def _dropout(mode: str, seed: int) -> float:
    rng = np.random.default_rng(seed)
    return _layer_check(ly.Dropout(0.5), rng.normal(size=(4, 5)), mode=mode, seed=seed)


def _batchnorm(seed: int) -> float:
    rng = np.random.default_rng(seed)
    layer = ly.BatchNorm(3)
    layer.params["gamma"][:] = rng.uniform(0.5, 1.5, size=3)
    layer.params["beta"][:] = rng.normal(size=3)
    return _layer_check(layer, rng.normal(size=(6, 3)), mode="train", seed=seed)


def _conv2d(seed: int) -> float:
    rng = np.random.default_rng(seed)
    return _layer_check(ly.Conv2D(3, rng), rng.normal(size=(2, 5, 5)), seed=seed)


def _recurrent(cell: str, seed: int, masked: bool = False) -> float:
    rng = np.random.default_rng(seed)
    layer = ly.Recurrent(cell, 3, 4, return_sequences=True, rng=rng)
    x = rng.normal(size=(3, 5, 3))
    if not masked:
        return _layer_check(layer, x, seed=seed)
    mask = np.array([[1, 1, 1, 1, 1], [1, 1, 1, 0, 0], [1, 0, 0, 0, 0]], dtype=float)
    weights = rng.normal(size=(3, 4))

    def f(leaves):
        _, outputs = ly.sequence_forward(layer.cell, leaves["input"],
                                         {k: leaves[k] for k in layer.params}, mask)
        last = outputs[-1]
        return _projected(last, weights)

    return ad.grad_check(f, dict(layer.params, input=x))


def _network(seed: int) -> float:
    rng = np.random.default_rng(seed)
    net = ly.mlp(5, [6, 4], 2, "tanh", dropout=0.3, batchnorm=True, task="classification", rng=rng)
    x = rng.normal(size=(8, 5))
    labels = rng.integers(0, 2, size=8)
    names = list(net.parameters())

    def f(leaves):
        tape = leaves[names[0]].tape
        ctx = ly.Context(tape, "train", np.random.default_rng(seed), update_stats=False)
        h = leaves["input"]
        for i, layer in enumerate(net.layers):
            h = layer.forward(h, {k: leaves[f"{i}.{k}"] for k in layer.params}, ctx)
        return ad.softmax_cross_entropy(h, labels)

    return ad.grad_check(f, dict(net.parameters(), input=x))


CHECKS: Dict[str, Callable[[int], float]] = {
    "dense/sigmoid": lambda s: _dense("sigmoid", s),
    "dense/tanh": lambda s: _dense("tanh", s),
    "dense/relu": lambda s: _dense("relu", s),
    "dense/linear": lambda s: _dense("linear", s),
    "dense/softmax": lambda s: _dense("softmax", s),
    "softmax+cross-entropy": _softmax_cross_entropy,
    "embedding": _embedding,
    "tabular-input": _tabular_input,
    "dropout/eval": lambda s: _dropout("eval", s),
    "dropout/train-fixed-mask": lambda s: _dropout("train", s),
    "batchnorm/train": _batchnorm,
    "conv2d": _conv2d,
    "rnn/5-step": lambda s: _recurrent("rnn", s),
    "gru/5-step": lambda s: _recurrent("gru", s),
    "lstm/5-step": lambda s: _recurrent("lstm", s),
    "gru/5-step-masked": lambda s: _recurrent("gru", s, masked=True),
    "lstm/5-step-masked": lambda s: _recurrent("lstm", s, masked=True),
    "mlp+batchnorm+dropout": _network,
}


def run_suite(seed: int = 0) -> Dict[str, float]:
    """Max relative gradient error per check."""
    return {name: float(check(seed)) for name, check in CHECKS.items()}
