"""Elman-style sequential model: forward recurrence, input Jacobians, task loss.

The cell is h_t = act(W_hh h_{t-1} + W_xh x_t + b_h) with a scalar readout
y_t = u . h_{t-1} + w . x_t + c, so output t sees only x_t and the state built
from x_1..x_{t-1}. ``activation`` is "tanh" (default) or "linear"; the linear
variant exists so exactly solvable recurrences can be expressed for checking.

Parameter containers hold plain float64 arrays; during differentiation the
same dataclasses carry graph nodes in the array slots (duck-typed).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, fields, replace

import numpy as np

from . import ndiff as nd
from .ndiff import Node

CHECKPOINT_VERSION = 1


def series_values(x) -> np.ndarray:
    """Accept a TimeSeries/Baseline or a raw (T, d) array."""
    return nd.as_array(getattr(x, "values", x))


@dataclass
class TimeSeries:
    """A T x d input sequence."""

    values: np.ndarray

    def __post_init__(self):
        self.values = nd.as_array(self.values)
        if self.values.ndim != 2 or min(self.values.shape) < 1:
            raise ValueError("time series must be a (T, d) array with T, d >= 1")
        if not np.isfinite(self.values).all():
            raise ValueError("time series entries must be finite")

    @property
    def length(self):
        return self.values.shape[0]

    @property
    def features(self):
        return self.values.shape[1]


@dataclass
class Baseline:
    """Counterpart sequence X' paired with an input; same shape as the input."""

    values: np.ndarray
    kind: str = "user"  # zero | mean | user

    def __post_init__(self):
        self.values = nd.as_array(self.values)


def zero_baseline(t_len: int, d: int) -> Baseline:
    return Baseline(np.zeros((t_len, d)), kind="zero")


def mean_baseline(dataset, t_len: int) -> Baseline:
    """Per-feature mean over all cells of the dataset, tiled to (T, d)."""
    cells = np.concatenate([series_values(x) for x in dataset], axis=0)
    return Baseline(np.tile(cells.mean(axis=0), (t_len, 1)), kind="mean")


@dataclass
class HiddenTrajectory:
    """States h_0..h_T stacked as a (T+1) x h array; row 0 is all zeros."""

    states: np.ndarray


class FlatParams:
    """Mixin for parameter bundles: flatten, rebuild, and lift to graph leaves."""

    def field_names(self):
        return [f.name for f in fields(self) if f.name in self.ARRAY_FIELDS]

    def arrays(self):
        return [nd.value(getattr(self, name)) for name in self.field_names()]

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in self.arrays()]) if self.arrays() else np.zeros(0)

    @property
    def n_params(self) -> int:
        return int(sum(a.size for a in self.arrays()))

    def with_flat(self, vec: np.ndarray):
        vec = nd.as_array(vec)
        out = {}
        i = 0
        for name, arr in zip(self.field_names(), self.arrays()):
            n = arr.size
            out[name] = vec[i:i + n].reshape(arr.shape).copy()
            i += n
        if i != vec.size:
            raise ValueError("flat vector length does not match parameter count")
        return replace(self, **out)

    def leaf_copy(self):
        """Copy with each array replaced by a fresh graph leaf; returns (copy, leaves)."""
        leaves = [Node(a) for a in self.arrays()]
        return replace(self, **dict(zip(self.field_names(), leaves))), leaves

    def grads_from(self, leaf_nodes, loss_node):
        """Adjoints of loss w.r.t. each leaf, packed back into a params bundle."""
        gs = nd.backward(loss_node, leaf_nodes)
        return replace(self, **{name: g.value for name, g in zip(self.field_names(), gs)})


@dataclass
class SeqModelParams(FlatParams):
    w_hh: np.ndarray  # (h, h) recurrence
    w_xh: np.ndarray  # (h, d) input
    b_h: np.ndarray   # (h,)
    u_out: np.ndarray  # (h,) readout of h_{t-1}
    w_out: np.ndarray  # (d,) readout of x_t
    c_out: np.ndarray  # () output bias
    activation: str = "tanh"

    ARRAY_FIELDS = ("w_hh", "w_xh", "b_h", "u_out", "w_out", "c_out")

    def __post_init__(self):
        if self.activation not in ("tanh", "linear"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def hidden(self):
        return nd.value(self.w_hh).shape[0]

    @property
    def features(self):
        return nd.value(self.w_xh).shape[1]


def init_params(hidden: int, features: int, seed: int, activation: str = "tanh") -> SeqModelParams:
    """Seeded uniform init in [-0.5, 0.5]/sqrt(h) for every parameter."""
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(hidden)

    def draw(shape):
        return np.asarray(rng.uniform(-0.5, 0.5, size=shape) * scale)

    return SeqModelParams(
        w_hh=draw((hidden, hidden)),
        w_xh=draw((hidden, features)),
        b_h=draw((hidden,)),
        u_out=draw((hidden,)),
        w_out=draw((features,)),
        c_out=draw(()),
        activation=activation,
    )


def forward_ops(params: SeqModelParams, x):
    """Run the recurrence; operands may be graph nodes or plain arrays.

    Returns (list of T scalar outputs, list of T+1 hidden states).
    """
    xv = nd.value(x) if isinstance(x, Node) else series_values(x)
    t_len, d = xv.shape
    if d != params.features:
        raise ValueError(f"feature mismatch: input has {d}, model expects {params.features}")
    if not isinstance(x, Node):
        x = xv
    h = np.zeros(params.hidden)
    outputs, hiddens = [], [h]
    for t in range(t_len):
        xt = nd.reshape(nd.take_rows(x, t, t + 1), (d,))
        y = nd.add(nd.add(nd.dot(params.u_out, h), nd.dot(params.w_out, xt)), params.c_out)
        pre = nd.add(nd.add(nd.matvec(params.w_hh, h), nd.matvec(params.w_xh, xt)), params.b_h)
        h = nd.tanh(pre) if params.activation == "tanh" else pre
        outputs.append(y)
        hiddens.append(h)
    return outputs, hiddens


def forward(params: SeqModelParams, x):
    """Outputs y_1..y_T and the hidden trajectory, as plain arrays."""
    outs, hiddens = forward_ops(params, x)
    y = np.array([float(nd.value(o)) for o in outs])
    states = np.stack([nd.value(h) for h in hiddens])
    return y, HiddenTrajectory(states)


def input_jacobian(params: SeqModelParams, x) -> np.ndarray:
    """J[t][s, k] = d outputs[t] / d X[s, k]; zero for s > t by construction."""
    xn = Node(series_values(x))
    outs, _ = forward_ops(params, xn)
    rows = [nd.backward(o, xn).value for o in outs]
    return np.stack(rows)


def task_loss(params: SeqModelParams, batch):
    """Mean squared error over all (sample, t), and its parameter gradient.

    `batch` is a list of (series, target) pairs with length-T targets.
    """
    batch = list(batch)
    if not batch:
        raise ValueError("task_loss: empty batch")
    lifted, leaves = params.leaf_copy()
    total = 0.0
    count = 0
    for x, target in batch:
        target = nd.as_array(target)
        outs, _ = forward_ops(lifted, x)
        if target.shape != (len(outs),):
            raise ValueError("target length must match series length")
        for t, o in enumerate(outs):
            total = nd.add(total, nd.square(nd.sub(o, float(target[t]))))
            count += 1
    loss = nd.mul(total, 1.0 / count)
    grads = params.grads_from(leaves, loss)
    return float(nd.value(loss)), grads


def predictions_mse(params: SeqModelParams, dataset) -> float:
    """MSE of the forward pass over a list of (series, target) pairs."""
    total, count = 0.0, 0
    for x, target in dataset:
        y, _ = forward(params, x)
        target = nd.as_array(target)
        total += float(np.sum((y - target) ** 2))
        count += y.size
    return total / count


# ---------------------------------------------------------------------------
# checkpoints: JSON with named flat arrays and shapes


def _pack_arrays(bundle: FlatParams):
    return {
        name: {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
        for name, arr in zip(bundle.field_names(), bundle.arrays())
    }


def _unpack_array(entry):
    return np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])


def save_checkpoint(path, params: SeqModelParams, role: str = "model", extra: dict | None = None):
    payload = {
        "version": CHECKPOINT_VERSION,
        "role": role,
        "h": params.hidden,
        "d": params.features,
        "T_free": True,
        "activation": params.activation,
        "params": _pack_arrays(params),
    }
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_checkpoint(path) -> SeqModelParams:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("role", "model") != "model":
        raise ValueError(f"checkpoint {path} holds role {payload.get('role')!r}, expected a model")
    raw = payload["params"]
    kwargs = {name: _unpack_array(raw[name]) for name in SeqModelParams.ARRAY_FIELDS}
    return SeqModelParams(activation=payload.get("activation", "tanh"), **kwargs)
