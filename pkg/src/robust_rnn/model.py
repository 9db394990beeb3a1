"""Basic recurrent network, its activations, losses and checkpoints.

The network is

    h_t = A x_{t-1} + B u_t + b
    x_t = sigma(h_t)
    y_t = C x_t + c

with ``A`` (n x n), ``B`` (n x d), ``C`` (m x n). Batched arrays put the batch
axis first and time second: inputs ``(batch, T, d)``.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .linalg import operator_norm

__all__ = [
    "Activation",
    "RnnParams",
    "Trajectory",
    "LossKind",
    "Aggregation",
    "LossSpec",
    "init_params",
    "forward",
    "forward_batch",
    "softmax",
    "cross_entropy",
    "loss_value",
    "mse",
    "loss_gradient",
    "sequence_loss",
    "lipschitz_constants",
    "save_params",
    "load_params",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_VERSION = 1


class Activation(enum.Enum):
    RELU = "relu"
    TANH = "tanh"
    IDENTITY = "identity"

    @property
    def lipschitz(self) -> float:
        return 1.0

    def __call__(self, h):
        if self is Activation.RELU:
            return np.maximum(h, 0.0)
        if self is Activation.TANH:
            return np.tanh(h)
        return np.array(h, dtype=np.float64, copy=True)

    def derivative(self, h):
        # ReLU'(0) is taken as 0
        if self is Activation.RELU:
            return (h > 0.0).astype(np.float64)
        if self is Activation.TANH:
            return 1.0 - np.tanh(h) ** 2
        return np.ones_like(h, dtype=np.float64)

    def second_derivative(self, h):
        if self is Activation.TANH:
            th = np.tanh(h)
            return -2.0 * th * (1.0 - th**2)
        return np.zeros_like(h, dtype=np.float64)


def _finite(name, arr, ndim):
    arr = np.array(arr, dtype=np.float64)
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


@dataclass(frozen=True)
class RnnParams:
    A: np.ndarray
    B: np.ndarray
    b: np.ndarray
    C: np.ndarray
    c: np.ndarray
    activation: Activation = Activation.RELU

    def __post_init__(self):
        for name, ndim in (("A", 2), ("B", 2), ("b", 1), ("C", 2), ("c", 1)):
            object.__setattr__(self, name, _finite(name, getattr(self, name), ndim))
        object.__setattr__(self, "activation", Activation(self.activation))
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ValueError(f"A must be square, got {self.A.shape}")
        if self.B.shape[0] != n or self.b.shape != (n,):
            raise ValueError("B and b must have n rows")
        if self.C.shape[1] != n or self.c.shape != (self.C.shape[0],):
            raise ValueError("C must have n columns and c must match its rows")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def d(self) -> int:
        return self.B.shape[1]

    @property
    def m(self) -> int:
        return self.C.shape[0]

    def arrays(self):
        return self.A, self.B, self.b, self.C, self.c

    def replace(self, **changes) -> "RnnParams":
        fields = dict(A=self.A, B=self.B, b=self.b, C=self.C, c=self.c, activation=self.activation)
        fields.update(changes)
        return RnnParams(**fields)

    @classmethod
    def zeros(cls, n, d, m, activation=Activation.RELU) -> "RnnParams":
        return cls(np.zeros((n, n)), np.zeros((n, d)), np.zeros(n), np.zeros((m, n)), np.zeros(m), activation)


def init_params(n, d, m, activation=Activation.RELU, rng=None, seed=0, recurrent="glorot") -> RnnParams:
    """Glorot-uniform weights (limit sqrt(6 / (fan_in + fan_out))), zero biases.

    ``recurrent="identity"`` starts ``A`` at the identity instead; ``B`` and
    ``C`` are drawn exactly as in the default, so the two variants share
    their input and output weights for a given seed.
    """
    if recurrent not in ("glorot", "identity"):
        raise ValueError("recurrent init must be 'glorot' or 'identity'")
    if rng is None:
        rng = np.random.default_rng(seed)

    def glorot(rows, cols):
        limit = math.sqrt(6.0 / (rows + cols))
        return rng.uniform(-limit, limit, size=(rows, cols))

    A, B, C = glorot(n, n), glorot(n, d), glorot(m, n)
    if recurrent == "identity":
        A = np.eye(n)
    return RnnParams(A, B, np.zeros(n), C, np.zeros(m), Activation(activation))


@dataclass(frozen=True)
class Trajectory:
    """Clean pass of one sequence.

    ``states`` has T + 1 rows (``states[0]`` is ``x_0``); ``pre[t-1]`` and
    ``outputs[t-1]`` belong to step ``t``.
    """

    inputs: np.ndarray
    pre: np.ndarray
    states: np.ndarray
    outputs: np.ndarray

    @property
    def T(self) -> int:
        return self.inputs.shape[0]


def forward_batch(params: RnnParams, inputs, x0=None):
    """Run a batch of sequences.

    Returns ``(pre, states, outputs)`` with shapes ``(B, T, n)``,
    ``(B, T + 1, n)`` and ``(B, T, m)``.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 3 or inputs.shape[2] != params.d:
        raise ValueError(f"inputs must be (batch, T, {params.d}), got {inputs.shape}")
    batch, T, _ = inputs.shape
    n = params.n
    pre = np.empty((batch, T, n))
    states = np.empty((batch, T + 1, n))
    if x0 is None:
        states[:, 0] = 0.0
    else:
        x0 = np.asarray(x0, dtype=np.float64)
        if x0.shape[-1] != n:
            raise ValueError(f"x0 must have dimension {n}")
        states[:, 0] = x0
    drive = inputs @ params.B.T + params.b
    act = params.activation
    for t in range(T):
        h = states[:, t] @ params.A.T + drive[:, t]
        pre[:, t] = h
        states[:, t + 1] = act(h)
    outputs = states[:, 1:] @ params.C.T + params.c
    return pre, states, outputs


def forward(params: RnnParams, inputs, x0=None) -> Trajectory:
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2:
        raise ValueError(f"inputs must be (T, d), got shape {inputs.shape}")
    pre, states, outputs = forward_batch(params, inputs[None], None if x0 is None else np.asarray(x0)[None])
    return Trajectory(inputs.copy(), pre[0], states[0], outputs[0])


class LossKind(enum.Enum):
    CROSS_ENTROPY = "cross_entropy"
    MSE = "mse"


class Aggregation(enum.Enum):
    FINAL = "final"
    SUM = "sum"


@dataclass(frozen=True)
class LossSpec:
    """Loss kind, its Lipschitz constant in ``y`` and time aggregation.

    Cross-entropy is globally Lipschitz with constant sqrt(2) (its gradient is
    ``softmax(y) - e_i``). Squared error is not, so a constant valid on the
    region of interest has to be supplied.
    """

    kind: LossKind = LossKind.CROSS_ENTROPY
    lipschitz: float = math.sqrt(2.0)
    aggregation: Aggregation = Aggregation.FINAL

    def __post_init__(self):
        object.__setattr__(self, "kind", LossKind(self.kind))
        object.__setattr__(self, "aggregation", Aggregation(self.aggregation))
        if not self.lipschitz > 0:
            raise ValueError("lipschitz constant must be positive")

    @classmethod
    def mse(cls, lipschitz: float, aggregation=Aggregation.SUM) -> "LossSpec":
        return cls(LossKind.MSE, lipschitz, aggregation)


def _logsumexp(y, axis=-1):
    top = np.max(y, axis=axis, keepdims=True)
    return np.squeeze(top, axis) + np.log(np.sum(np.exp(y - top), axis=axis))


def softmax(y, axis=-1):
    z = np.exp(y - np.max(y, axis=axis, keepdims=True))
    return z / np.sum(z, axis=axis, keepdims=True)


def cross_entropy(y, label) -> float:
    """``-y[label] + log sum_j exp(y[j])``; broadcasts over leading axes."""
    y = np.asarray(y, dtype=np.float64)
    label = np.asarray(label)
    if np.any(label < 0) or np.any(label >= y.shape[-1]):
        raise ValueError(f"label out of range for {y.shape[-1]} classes")
    picked = np.take_along_axis(y, label[..., None].astype(np.intp), axis=-1)[..., 0]
    out = _logsumexp(y) - picked
    return float(out) if out.ndim == 0 else out


def mse(y, target) -> float:
    y = np.asarray(y, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if y.shape != target.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {target.shape}")
    out = np.sum((y - target) ** 2, axis=-1)
    return float(out) if out.ndim == 0 else out


def loss_value(spec: LossSpec, y, target):
    if spec.kind is LossKind.CROSS_ENTROPY:
        return cross_entropy(y, target)
    return mse(y, target)


def loss_gradient(spec: LossSpec, y, target) -> np.ndarray:
    """Gradient of one loss term with respect to the output ``y``."""
    y = np.asarray(y, dtype=np.float64)
    if spec.kind is LossKind.CROSS_ENTROPY:
        label = np.asarray(target).astype(np.intp)
        if np.any(label < 0) or np.any(label >= y.shape[-1]):
            raise ValueError("label out of range")
        g = softmax(y)
        np.put_along_axis(g, label[..., None], np.take_along_axis(g, label[..., None], axis=-1) - 1.0, axis=-1)
        return g
    target = np.asarray(target, dtype=np.float64)
    if target.shape != y.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {target.shape}")
    return 2.0 * (y - target)


def sequence_loss(spec: LossSpec, outputs, target):
    """Aggregate loss of output sequence(s) ``(..., T, m)``.

    For ``FINAL`` aggregation ``target`` describes the last step only (a label,
    or an m-vector for MSE); for ``SUM`` it has a time axis.
    """
    outputs = np.asarray(outputs, dtype=np.float64)
    if spec.aggregation is Aggregation.FINAL:
        return loss_value(spec, outputs[..., -1, :], target)
    per_step = loss_value(spec, outputs, target)
    return np.sum(per_step, axis=-1)


def lipschitz_constants(params: RnnParams, tol: float = 1e-10):
    """``(lambda, kappa_u, kappa_G) = (k_s ||A||, k_s ||B||, ||C||)``."""
    ks = params.activation.lipschitz
    return (
        ks * operator_norm(params.A, tol=tol),
        ks * operator_norm(params.B, tol=tol),
        operator_norm(params.C, tol=tol),
    )


def save_params(path, params: RnnParams) -> None:
    """Write a JSON checkpoint; floats are stored as shortest round-trip reprs."""
    record = {
        "format": "robust_rnn.checkpoint",
        "format_version": CHECKPOINT_VERSION,
        "n": params.n,
        "d": params.d,
        "m": params.m,
        "activation": params.activation.value,
        "A": params.A.tolist(),
        "B": params.B.tolist(),
        "b": params.b.tolist(),
        "C": params.C.tolist(),
        "c": params.c.tolist(),
    }
    Path(path).write_text(json.dumps(record, indent=None, separators=(",", ":")) + "\n")


def load_params(path) -> RnnParams:
    record = json.loads(Path(path).read_text())
    if record.get("format") != "robust_rnn.checkpoint":
        raise ValueError(f"{path}: not a robust_rnn checkpoint")
    version = record.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    params = RnnParams(
        np.array(record["A"], dtype=np.float64).reshape(record["n"], record["n"]),
        np.array(record["B"], dtype=np.float64).reshape(record["n"], record["d"]),
        np.array(record["b"], dtype=np.float64),
        np.array(record["C"], dtype=np.float64).reshape(record["m"], record["n"]),
        np.array(record["c"], dtype=np.float64),
        Activation(record["activation"]),
    )
    return params
