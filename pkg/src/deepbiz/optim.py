"""Gradient-based optimizers, weight decay, early stopping and the epoch loop."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DimensionError, DivergenceError, NumericError
from .layers import Network, n_samples, take
from .metrics import cross_entropy_per_sample

OPTIMIZERS = ("sgd", "momentum", "adagrad", "rmsprop", "adam")
LOSSES = ("l2", "cross-entropy")


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 32
    weight_decay: float = 0.0
    dropout: float = 0.0
    max_epochs: int = 100
    patience: int = 50
    optimizer: str = "adam"
    seed: int = 0
    loss: str = "l2"
    clip_norm: Optional[float] = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ContractError(f"learning rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ContractError(f"batch size must be at least 1, got {self.batch_size}")
        if self.weight_decay < 0:
            raise ContractError(f"weight decay must be non-negative, got {self.weight_decay}")
        if self.patience < 1:
            raise ContractError(f"patience must be at least 1, got {self.patience}")
        if self.optimizer not in OPTIMIZERS:
            raise ContractError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in LOSSES:
            raise ContractError(f"unknown training loss {self.loss!r}")


class Optimizer:
    """Base class; :meth:`step` updates ``params`` in place from ``grads``."""

    def __init__(self, learning_rate: float):
        self.learning_rate = learning_rate
        self.state: Dict[str, Dict[str, np.ndarray]] = {}
        self.steps = 0

    def _slot(self, name, param, *keys):
        slot = self.state.get(name)
        if slot is None:
            slot = self.state[name] = {k: np.zeros_like(param) for k in keys}
        return slot

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]):
        self.steps += 1
        for name, w in params.items():
            g = grads[name]
            if np.shape(g) != w.shape:
                raise DimensionError(f"gradient for {name!r} has shape {np.shape(g)}, "
                                     f"parameter has {w.shape}")
            self._update(name, w, g)

    def _update(self, name, w, g):
        raise NotImplementedError


class SGD(Optimizer):
    def _update(self, name, w, g):
        w -= self.learning_rate * g


class Momentum(Optimizer):
    def __init__(self, learning_rate, momentum: float = 0.9):
        super().__init__(learning_rate)
        self.momentum = momentum

    def _update(self, name, w, g):
        v = self._slot(name, w, "velocity")["velocity"]
        v *= self.momentum
        v += g
        w -= self.learning_rate * v


class Adagrad(Optimizer):
    def __init__(self, learning_rate, eps: float = 1e-8):
        super().__init__(learning_rate)
        self.eps = eps

    def _update(self, name, w, g):
        acc = self._slot(name, w, "sum_sq")["sum_sq"]
        acc += g * g
        w -= self.learning_rate * g / np.sqrt(acc + self.eps)


class RMSProp(Optimizer):
    def __init__(self, learning_rate, decay: float = 0.9, eps: float = 1e-8):
        super().__init__(learning_rate)
        self.decay, self.eps = decay, eps

    def _update(self, name, w, g):
        avg = self._slot(name, w, "mean_sq")["mean_sq"]
        avg *= self.decay
        avg += (1.0 - self.decay) * g * g
        w -= self.learning_rate * g / np.sqrt(avg + self.eps)


class Adam(Optimizer):
    def __init__(self, learning_rate, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(learning_rate)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def _update(self, name, w, g):
        slot = self._slot(name, w, "m", "v")
        m, v = slot["m"], slot["v"]
        m *= self.beta1
        m += (1.0 - self.beta1) * g
        v *= self.beta2
        v += (1.0 - self.beta2) * g * g
        m_hat = m / (1.0 - self.beta1 ** self.steps)
        v_hat = v / (1.0 - self.beta2 ** self.steps)
        w -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(kind: str, learning_rate: float) -> Optimizer:
    classes = {"sgd": SGD, "momentum": Momentum, "adagrad": Adagrad, "rmsprop": RMSProp, "adam": Adam}
    if kind not in classes:
        raise ContractError(f"unknown optimizer {kind!r}; expected one of {OPTIMIZERS}")
    return classes[kind](learning_rate)


def is_decayed(name: str) -> bool:
    """Weight decay skips biases and batch-norm scale/shift."""
    local = name.rsplit(".", 1)[-1]
    return not (local.startswith("bias") or local in ("gamma", "beta"))


def apply_weight_decay(grads: Dict[str, np.ndarray], params: Dict[str, np.ndarray],
                       weight_decay: float) -> Dict[str, np.ndarray]:
    """Add the gradient of (lambda/2)*||W||^2, i.e. lambda*W, to every decayed weight."""
    if weight_decay < 0:
        raise ContractError("weight decay must be non-negative")
    if weight_decay == 0:
        return dict(grads)
    return {k: (g + weight_decay * params[k] if is_decayed(k) else g) for k, g in grads.items()}


def clip_by_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> Dict[str, np.ndarray]:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}


@dataclass
class LearningCurve:
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)

    def __len__(self):
        return len(self.train_loss)

    def append(self, train_loss: float, val_loss: float):
        self.train_loss.append(float(train_loss))
        self.val_loss.append(float(val_loss))

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss"])
        for epoch, (tr, va) in enumerate(zip(self.train_loss, self.val_loss), start=1):
            writer.writerow([epoch, repr(tr), repr(va)])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "LearningCurve":
        curve = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                curve.append(float(row["train_loss"]), float(row["val_loss"]))
        return curve


class EarlyStopping:
    """Tracks the best validation loss; stops after ``patience`` epochs without improvement."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ContractError("patience must be at least 1")
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.wait = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record an epoch; returns True when it is a new best."""
        if val_loss < self.best:
            self.best, self.best_epoch, self.wait = val_loss, epoch, 0
            return True
        self.wait += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.wait >= self.patience


@dataclass
class TrainResult:
    network: Network
    curve: LearningCurve
    best_epoch: int
    stopped_epoch: int


def batch_loss(network: Network, x, y, kind: str, mode: str, rng=None, tape=None):
    out = network.forward(x, mode=mode, tape=tape, rng=rng)
    if kind == "cross-entropy":
        return ad.softmax_cross_entropy(out, y)
    return ad.mse_loss(out, y)


def evaluate_loss(network: Network, x, y, kind: str) -> float:
    pred = network.predict(x)
    if kind == "cross-entropy":
        return float(np.mean(cross_entropy_per_sample(pred, y)))
    with np.errstate(over="ignore", invalid="ignore"):  # divergence is reported by the caller
        return float(np.mean((pred - np.asarray(y).reshape(pred.shape)) ** 2))


def train(network: Network, train_data, val_data, config: TrainConfig,
          val_loss_fn: Optional[Callable[[Network], float]] = None,
          on_epoch: Optional[Callable[[int, Network], None]] = None) -> TrainResult:
    """Minibatch training with early stopping on the validation loss.

    ``train_data`` and ``val_data`` are ``(inputs, targets)`` pairs.  After
    training the network holds the parameters of its best validation epoch.
    ``val_loss_fn`` replaces the validation-loss computation when given.
    """
    x_train, y_train = train_data
    y_train = np.asarray(y_train)
    n = n_samples(x_train)
    if n == 0:
        raise ContractError("training set is empty")
    if val_data is None and val_loss_fn is None:
        raise ContractError("a validation set (or validation loss function) is required")
    rng = np.random.default_rng(config.seed)
    optimizer = make_optimizer(config.optimizer, config.learning_rate)
    params = network.parameters()
    stopper = EarlyStopping(config.patience)
    curve = LearningCurve()
    best_state = network.get_state()
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        try:
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                xb, yb = take(x_train, idx), y_train[idx]
                loss = batch_loss(network, xb, yb, config.loss, "train", rng)
                grads = ad.backward(loss.tape, loss)
                grads = apply_weight_decay(grads, params, config.weight_decay)
                if config.clip_norm is not None:
                    grads = clip_by_global_norm(grads, config.clip_norm)
                optimizer.step(params, grads)
                total += float(loss.value) * len(idx)
            if val_loss_fn is not None:
                val = float(val_loss_fn(network))
            else:
                val = evaluate_loss(network, val_data[0], val_data[1], config.loss)
        except NumericError as exc:
            raise DivergenceError(epoch, config.learning_rate, str(exc)) from exc
        train_loss = total / n
        if not (math.isfinite(train_loss) and math.isfinite(val)):
            raise DivergenceError(epoch, config.learning_rate, "non-finite epoch loss")
        curve.append(train_loss, val)
        if stopper.update(epoch, val):
            best_state = network.get_state()
        if on_epoch is not None:
            on_epoch(epoch, network)
        if stopper.should_stop:
            break
    network.set_state(best_state)
    return TrainResult(network, curve, stopper.best_epoch, epoch)
