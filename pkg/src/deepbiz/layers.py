"""Network building blocks and their composition into a :class:`Network`.

Layers own their parameters as plain float64 arrays.  A forward pass
registers every parameter as a named leaf on a fresh tape, so gradients come
back from :func:`deepbiz.autodiff.backward` keyed by the same names that
:meth:`Network.parameters` uses, and optimizers update the arrays in place.
"""
from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape
from .errors import ContractError, DimensionError

FORMAT_NAME = "deepbiz"
FORMAT_VERSION = 1

MODES = ("train", "eval")


def glorot_uniform(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _rng(seed_or_rng):
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


@dataclass
class Context:
    """Per-forward-pass state shared by all layers."""

    tape: Tape
    mode: str = "eval"
    rng: Optional[np.random.Generator] = None
    mask: Optional[np.ndarray] = None  # (n, steps) validity mask for padded sequences
    update_stats: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {self.mode!r}")


class Layer:
    """Base class.  ``in_width``/``out_width`` of ``None`` mean shape-agnostic."""

    kind = "layer"

    def __init__(self):
        self.params: Dict[str, np.ndarray] = {}
        self.buffers: Dict[str, np.ndarray] = {}

    in_width: Optional[int] = None
    out_width: Optional[int] = None

    def forward(self, x, p: Dict[str, Node], ctx: Context) -> Node:
        raise NotImplementedError

    def config(self) -> dict:
        return {}

    def __call__(self, x, mode: str = "eval", rng=None) -> np.ndarray:
        """Evaluate on arrays outside of training; returns an array."""
        tape = Tape()
        p = {k: tape.constant(v) for k, v in self.params.items()}
        ctx = Context(tape, mode, _rng(rng) if mode == "train" else None)
        return self.forward(x, p, ctx).value

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))


class Dense(Layer):
    """``activation(x @ W.T + b)`` with W of shape (out, in)."""

    kind = "dense"

    def __init__(self, n_in: int, n_out: int, activation: str = "linear", rng=None):
        super().__init__()
        if activation not in ad.ACTIVATIONS:
            raise ContractError(f"unknown activation {activation!r}")
        self.in_width, self.out_width = n_in, n_out
        self.activation = activation
        self.params["weight"] = glorot_uniform(_rng(rng), n_in, n_out, (n_out, n_in))
        self.params["bias"] = np.zeros(n_out)

    def forward(self, x, p, ctx):
        x = _as_node(x, ctx)
        if x.value.ndim != 2 or x.value.shape[1] != self.in_width:
            raise DimensionError(f"dense layer expects (n, {self.in_width}) input, got {x.value.shape}")
        return ad.activation(self.activation, ad.matmul(x, ad.transpose(p["weight"])) + p["bias"])

    def config(self):
        return {"n_in": self.in_width, "n_out": self.out_width, "activation": self.activation}


class Squash(Dense):
    """Dense layer applied independently to every step of an (n, steps, in) batch."""

    kind = "squash"

    def forward(self, x, p, ctx):
        x = _as_node(x, ctx)
        if x.value.ndim != 3:
            raise DimensionError(f"squash expects (n, steps, features) input, got {x.value.shape}")
        n, steps, width = x.value.shape
        flat = super().forward(ad.reshape(x, (n * steps, width)), p, ctx)
        return ad.reshape(flat, (n, steps, self.out_width))


class Embedding(Layer):
    """Trainable lookup table of shape (vocabulary, dim)."""

    kind = "embedding"

    def __init__(self, vocab_size: int, dim: int, rng=None):
        super().__init__()
        if vocab_size < 1 or dim < 1:
            raise ContractError("vocabulary size and dimension must be positive")
        self.vocab_size, self.dim = vocab_size, dim
        self.out_width = dim
        # N(0, 0.01) read as variance 0.01
        self.params["table"] = _rng(rng).normal(0.0, 0.1, size=(vocab_size, dim))

    def forward(self, codes, p, ctx):
        return ad.embedding(p["table"], codes)

    def config(self):
        return {"vocab_size": self.vocab_size, "dim": self.dim}


class TabularInput(Layer):
    """Embeds each categorical column and concatenates with the numeric block.

    Input is a ``(numeric, codes)`` pair of shapes (n, n_numeric) and
    (n, n_categorical).
    """

    kind = "tabular_input"

    def __init__(self, n_numeric: int, vocab_sizes: Sequence[int], dim: int = 6, rng=None):
        super().__init__()
        rng = _rng(rng)
        self.n_numeric = n_numeric
        self.vocab_sizes = [int(k) for k in vocab_sizes]
        self.dim = dim
        self.tables = [Embedding(k, dim, rng) for k in self.vocab_sizes]
        for j, table in enumerate(self.tables):
            self.params[f"emb{j}"] = table.params["table"]
        self.out_width = n_numeric + dim * len(self.vocab_sizes)

    def forward(self, x, p, ctx):
        numeric, codes = x
        numeric = np.asarray(numeric, dtype=np.float64)
        codes = np.asarray(codes)
        if numeric.ndim != 2 or numeric.shape[1] != self.n_numeric:
            raise DimensionError(f"expected {self.n_numeric} numeric columns, got shape {numeric.shape}")
        if codes.ndim != 2 or codes.shape[1] != len(self.vocab_sizes):
            raise DimensionError(f"expected {len(self.vocab_sizes)} categorical columns, "
                                 f"got shape {codes.shape}")
        parts = [ctx.tape.constant(numeric)]
        parts += [ad.embedding(p[f"emb{j}"], codes[:, j]) for j in range(len(self.vocab_sizes))]
        return ad.concat(parts, axis=1)

    def config(self):
        return {"n_numeric": self.n_numeric, "vocab_sizes": self.vocab_sizes, "dim": self.dim}


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by 1/(1-rate) so eval is the identity."""

    kind = "dropout"

    def __init__(self, rate: float):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ContractError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = float(rate)

    def forward(self, x, p, ctx):
        x = _as_node(x, ctx)
        if ctx.mode == "eval" or self.rate == 0.0:
            return x
        if ctx.rng is None:
            raise ContractError("train-mode dropout needs a random generator")
        keep = (ctx.rng.random(x.value.shape) >= self.rate) / (1.0 - self.rate)
        return x * keep

    def config(self):
        return {"rate": self.rate}


class BatchNorm(Layer):
    kind = "batchnorm"

    def __init__(self, width: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.in_width = self.out_width = width
        self.eps, self.momentum = eps, momentum
        self.params["gamma"] = np.ones(width)
        self.params["beta"] = np.zeros(width)
        self.buffers["running_mean"] = np.zeros(width)
        self.buffers["running_var"] = np.ones(width)

    def forward(self, x, p, ctx):
        x = _as_node(x, ctx)
        xv = x.value
        if xv.ndim != 2 or xv.shape[1] != self.in_width:
            raise DimensionError(f"batch norm expects (n, {self.in_width}) input, got {xv.shape}")
        if ctx.mode == "train":
            n = xv.shape[0]
            if n < 2:
                raise ContractError("train-mode batch normalization needs at least 2 rows")
            centered = x - ad.mean(x, axis=0, keepdims=True)
            var = ad.mean(ad.square(centered), axis=0, keepdims=True)
            xhat = centered / ad.sqrt(var + self.eps)
            if ctx.update_stats:
                m = self.momentum
                rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
                rm *= 1.0 - m
                rm += m * xv.mean(axis=0)
                rv *= 1.0 - m
                rv += m * xv.var(axis=0) * n / (n - 1)
        else:
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            xhat = (x - rm) / np.sqrt(rv + self.eps)
        return xhat * p["gamma"] + p["beta"]

    def config(self):
        return {"width": self.in_width, "eps": self.eps, "momentum": self.momentum}


class Conv2D(Layer):
    """Single-kernel same-size convolution of (n, m, m) grids."""

    kind = "conv2d"

    def __init__(self, width: int, rng=None):
        super().__init__()
        if width < 1 or width % 2 == 0:
            raise ContractError(f"kernel width must be odd and positive, got {width}")
        self.width = width
        self.params["kernel"] = glorot_uniform(_rng(rng), width * width, width * width, (width, width))

    def forward(self, x, p, ctx):
        return ad.conv2d(_as_node(x, ctx), p["kernel"])

    def config(self):
        return {"width": self.width}


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, p, ctx):
        x = _as_node(x, ctx)
        return ad.reshape(x, (x.value.shape[0], -1))


class Activation(Layer):
    kind = "activation"

    def __init__(self, activation: str):
        super().__init__()
        if activation not in ad.ACTIVATIONS:
            raise ContractError(f"unknown activation {activation!r}")
        self.activation = activation

    def forward(self, x, p, ctx):
        return ad.activation(self.activation, _as_node(x, ctx))

    def config(self):
        return {"activation": self.activation}


# -- recurrent cells -------------------------------------------------------------

class RNNCell:
    """Plain recurrent cell: h_t = tanh(W [x_t, h_{t-1}] + b)."""

    kind = "rnn"
    gate_names = ("",)

    def __init__(self, n_in: int, hidden: int, rng=None):
        self.n_in, self.hidden = n_in, hidden
        rng = _rng(rng)
        self.params: Dict[str, np.ndarray] = {}
        for gate in self.gate_names:
            suffix = f"_{gate}" if gate else ""
            self.params[f"weight{suffix}"] = glorot_uniform(rng, n_in + hidden, hidden,
                                                            (hidden, n_in + hidden))
            self.params[f"bias{suffix}"] = np.zeros(hidden)

    def _weights(self, p):
        if p is None:
            return tuple(self.params[k] for k in self.params)
        return tuple(p[k] for k in self.params)

    def initial_state(self, n: int, tape: Tape):
        return tape.constant(np.zeros((n, self.hidden)))

    def step(self, x, state, p=None, mask=None):
        """Advance one step; ``state`` is whatever :meth:`initial_state` returned."""
        w, b = self._weights(p)
        new = ad.tanh(ad.matmul(ad.concat([x, state], axis=1), ad.transpose(w)) + b)
        if mask is None:
            return new
        m = np.asarray(mask, dtype=np.float64).reshape(-1, 1)
        return new * m + state * (1.0 - m)

    @staticmethod
    def hidden_of(state):
        return state


class GRUCell(RNNCell):
    """Gated recurrent unit.

    z = sigmoid(W_z [x, h] + b_z), r = sigmoid(W_r [x, h] + b_r),
    h~ = tanh(W_h [x, r*h] + b_h), h' = (1 - z) * h + z * h~.
    """

    kind = "gru"
    gate_names = ("z", "r", "h")

    def step(self, x, state, p=None, mask=None):
        return ad.gru_cell(x, state, self._weights(p), mask)


class LSTMCell(RNNCell):
    """Long short-term memory cell with forget, input and output gates.

    The state is the pair (h, c).
    """

    kind = "lstm"
    gate_names = ("f", "i", "o", "c")

    def initial_state(self, n, tape):
        zeros = tape.constant(np.zeros((n, self.hidden)))
        return zeros, zeros

    def step(self, x, state, p=None, mask=None):
        h, c = state
        both = ad.lstm_cell(x, h, c, self._weights(p), mask)
        return both[:, :self.hidden], both[:, self.hidden:]

    @staticmethod
    def hidden_of(state):
        return state[0]


CELLS = {"rnn": RNNCell, "gru": GRUCell, "lstm": LSTMCell}


def sequence_forward(cell: RNNCell, x, p=None, mask=None, squash=None, squash_params=None):
    """Run ``cell`` over every step of ``x`` starting from a zero state.

    ``x`` is (steps, features) for one sequence or (n, steps, features) for a
    batch.  ``squash`` is an optional per-step :class:`Squash` layer applied
    first.  Returns ``(h_last, outputs)`` where ``outputs`` lists the hidden
    state after each step.
    """
    tape = next((v.tape for v in (p or {}).values()), None) or (x.tape if isinstance(x, Node) else Tape())
    if not isinstance(x, Node):
        x = tape.constant(x)
    single = x.value.ndim == 2
    if single:
        x = ad.reshape(x, (1,) + x.value.shape)
    if x.value.ndim != 3:
        raise DimensionError(f"sequence input must be 2-D or 3-D, got shape {x.value.shape}")
    n, steps, _ = x.value.shape
    if steps < 1:
        raise ContractError("cannot run a recurrent cell over an empty sequence")
    if squash is not None:
        sp = squash_params if squash_params is not None else {k: tape.constant(v) for k, v in squash.params.items()}
        x = squash.forward(x, sp, Context(tape))
    if p is None:
        p = {k: tape.constant(v) for k, v in cell.params.items()}
    state = cell.initial_state(n, tape)
    outputs = []
    for t in range(steps):
        m = None if mask is None else mask[:, t]
        state = cell.step(x[:, t], state, p, m)
        outputs.append(cell.hidden_of(state))
    return cell.hidden_of(state), outputs


class Recurrent(Layer):
    """Recurrent layer over (n, steps, features) input; emits the last hidden state.

    With ``return_sequences`` the per-step hidden states are stacked into
    (n, steps, hidden) instead.
    """

    kind = "recurrent"

    def __init__(self, cell: str, n_in: int, hidden: int, return_sequences: bool = False, rng=None):
        super().__init__()
        if cell not in CELLS:
            raise ContractError(f"unknown cell {cell!r}; expected one of {sorted(CELLS)}")
        self.cell_kind = cell
        self.cell = CELLS[cell](n_in, hidden, rng)
        self.params = self.cell.params
        self.in_width, self.out_width = n_in, hidden
        self.return_sequences = return_sequences

    def forward(self, x, p, ctx):
        x = _as_node(x, ctx)
        if x.value.ndim != 3 or x.value.shape[2] != self.in_width:
            raise DimensionError(f"recurrent layer expects (n, steps, {self.in_width}) input, "
                                 f"got {x.value.shape}")
        last, outputs = sequence_forward(self.cell, x, p, ctx.mask)
        if self.return_sequences:
            return ad.stack(outputs, axis=1)
        return last

    def config(self):
        return {"cell": self.cell_kind, "n_in": self.in_width, "hidden": self.out_width,
                "return_sequences": self.return_sequences}


LAYERS = {cls.kind: cls for cls in (Dense, Squash, Embedding, TabularInput, Dropout, BatchNorm,
                                    Conv2D, Flatten, Activation, Recurrent)}


def _as_node(x, ctx: Context) -> Node:
    return x if isinstance(x, Node) else ctx.tape.constant(x)


# -- inputs ---------------------------------------------------------------------

def pad_sequences(seqs: Sequence[np.ndarray]):
    """Right-pad variable-length (steps, features) arrays; returns (batch, mask)."""
    if not seqs:
        raise ContractError("no sequences given")
    widths = {np.asarray(s).shape[1] for s in seqs}
    if len(widths) != 1:
        raise DimensionError(f"sequences have different step widths: {sorted(widths)}")
    lengths = [len(s) for s in seqs]
    if min(lengths) < 1:
        raise ContractError("empty sequence")
    out = np.zeros((len(seqs), max(lengths), widths.pop()))
    mask = np.zeros((len(seqs), max(lengths)))
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
        mask[i, :len(s)] = 1.0
    return out, mask


def n_samples(x) -> int:
    if isinstance(x, tuple):
        return len(x[0])
    return len(x)


def take(x, idx):
    """Select samples ``idx`` from any supported network input."""
    if isinstance(x, tuple):
        return tuple(np.asarray(part)[idx] for part in x)
    if isinstance(x, list):
        return [x[i] for i in idx]
    return x[idx]


# -- composition ------------------------------------------------------------------

class Network:
    """Ordered stack of layers applied left to right.

    Inputs are an array, a ``(numeric, codes)`` pair for a leading
    :class:`TabularInput`, or a list of variable-length sequences (padded and
    masked internally).
    """

    def __init__(self, layers: List[Layer], task: str = "regression"):
        self.layers = list(layers)
        self.task = task
        width = None
        for i, layer in enumerate(self.layers):
            if layer.in_width is not None and width is not None and layer.in_width != width:
                raise DimensionError(f"layer {i} ({layer.kind}) expects width {layer.in_width} "
                                     f"but receives {width}")
            if layer.out_width is not None:
                width = layer.out_width
            elif layer.kind in ("conv2d", "flatten"):
                width = None

    def parameters(self) -> Dict[str, np.ndarray]:
        """Live parameter arrays keyed ``'<layer index>.<name>'``."""
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.params.items()}

    def buffers(self) -> Dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.buffers.items()}

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.parameters().values()))

    def forward(self, x, mode: str = "eval", tape: Optional[Tape] = None, rng=None,
                update_stats: bool = True) -> Node:
        tape = tape if tape is not None else Tape()
        mask = None
        if isinstance(x, list):
            x, mask = pad_sequences(x)
        ctx = Context(tape, mode, rng, mask, update_stats)
        for i, layer in enumerate(self.layers):
            p = {k: tape.leaf(v, f"{i}.{k}") for k, v in layer.params.items()}
            x = layer.forward(x, p, ctx)
        return x

    def predict(self, x, batch_size: int = 2048) -> np.ndarray:
        """Eval-mode output; class probabilities for classification networks."""
        n = n_samples(x)
        outs = []
        for start in range(0, n, batch_size):
            idx = np.arange(start, min(n, start + batch_size))
            outs.append(self._eval_output(take(x, idx)))
        return np.concatenate(outs, axis=0)

    def _eval_output(self, x):
        tape = Tape()
        mask = None
        if isinstance(x, list):
            x, mask = pad_sequences(x)
        ctx = Context(tape, "eval", None, mask)
        for layer in self.layers:
            p = {k: tape.constant(v) for k, v in layer.params.items()}
            x = layer.forward(x, p, ctx)
        if self.task == "classification":
            return ad.softmax(x).value
        return x.value

    def get_state(self) -> Dict[str, np.ndarray]:
        state = {k: v.copy() for k, v in self.parameters().items()}
        state.update({k: v.copy() for k, v in self.buffers().items()})
        return state

    def set_state(self, state: Dict[str, np.ndarray]):
        for i, layer in enumerate(self.layers):
            for store in (layer.params, layer.buffers):
                for k in store:
                    store[k][...] = state[f"{i}.{k}"]

    # -- serialization --

    def to_dict(self) -> dict:
        layers = []
        for layer in self.layers:
            layers.append({
                "kind": layer.kind,
                "config": layer.config(),
                "params": {k: encode_array(v) for k, v in layer.params.items()},
                "buffers": {k: encode_array(v) for k, v in layer.buffers.items()},
            })
        return envelope("network", {"task": self.task, "layers": layers})

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc: dict) -> "Network":
        body = open_envelope(doc, "network")
        layers = []
        for entry in body["layers"]:
            layer_cls = LAYERS.get(entry["kind"])
            if layer_cls is None:
                raise ContractError(f"unknown layer kind {entry['kind']!r}")
            layer = layer_cls(**entry["config"])
            for k, v in entry["params"].items():
                layer.params[k][...] = decode_array(v)
            for k, v in entry["buffers"].items():
                layer.buffers[k][...] = decode_array(v)
            layers.append(layer)
        return cls(layers, task=body.get("task", "regression"))

    @classmethod
    def from_json(cls, text: str) -> "Network":
        return cls.from_dict(json.loads(text))


def encode_array(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(arr.shape), "dtype": "float64",
            "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def decode_array(doc: dict) -> np.ndarray:
    raw = base64.b64decode(doc["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(doc["shape"]).astype(np.float64)


def envelope(kind: str, body: dict) -> dict:
    return {"format": FORMAT_NAME, "version": FORMAT_VERSION, "kind": kind, **body}


def open_envelope(doc: dict, kind: str) -> dict:
    if doc.get("format") != FORMAT_NAME:
        raise ContractError(f"not a {FORMAT_NAME} document")
    if doc.get("version") != FORMAT_VERSION:
        raise ContractError(f"unsupported document version {doc.get('version')}")
    if doc.get("kind") != kind:
        raise ContractError(f"expected a {kind!r} document, got {doc.get('kind')!r}")
    return doc


# -- standard architectures ----------------------------------------------------------

def mlp(n_in: int, hidden: Sequence[int], n_out: int, activation: str = "relu",
        dropout: float = 0.0, batchnorm: bool = False, task: str = "regression",
        input_layer: Optional[Layer] = None, rng=None) -> Network:
    """Stack of dense layers; the output layer is linear (logits for classification)."""
    rng = _rng(rng)
    layers: List[Layer] = [] if input_layer is None else [input_layer]
    width = n_in
    for h in hidden:
        layers.append(Dense(width, h, activation, rng))
        if batchnorm:
            layers.append(BatchNorm(h))
        if dropout > 0:
            layers.append(Dropout(dropout))
        width = h
    layers.append(Dense(width, n_out, "linear", rng))
    return Network(layers, task=task)


def sequence_model(n_features: int, cell: str, n_out: int, hidden: int = 32, squash: int = 32,
                   dropout: float = 0.0, rng=None) -> Network:
    """Per-step squash layer, recurrent cell, dense read-out of the last hidden state."""
    rng = _rng(rng)
    layers: List[Layer] = [Squash(n_features, squash, "relu", rng),
                           Recurrent(cell, squash, hidden, rng=rng)]
    if dropout > 0:
        layers.append(Dropout(dropout))
    layers.append(Dense(hidden, n_out, "linear", rng))
    return Network(layers)
