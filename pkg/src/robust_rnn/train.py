"""Backpropagation through time for the loss and for both robustness
regularisers, plus a mini-batch SGD trainer with four regimes.

Covariance regulariser
----------------------
For one sequence the regulariser is ``Phi = sum_t w_t Tr(C P_t C^T)`` with

    M_t = A P_{t-1} A^T + B Sigma_t B^T,     P_t = D_t M_t D_t,

``D_t = diag(d_t)``, ``d_t = sigma'(h_t)``. Writing ``G_t = dPhi/dP_t``:

    G_t   = w_t C^T C + A^T D_{t+1} G_{t+1} D_{t+1} A
    dA   += 2 (D_t G_t D_t) A P_{t-1}
    dB   += 2 (D_t G_t D_t) B Sigma_t
    dC   += 2 w_t C P_t
    dh_t  = 2 ((G_t * M_t) d_t) * sigma''(h_t)

and ``dh_t`` is pushed back through the state recursion exactly like a loss
adjoint. The last term vanishes for ReLU and identity activations.
"""
from __future__ import annotations

import enum
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .linalg import ConvergenceError, clip_singular_values, make_rng, operator_norm, power_method
from .model import (
    Aggregation,
    LossKind,
    LossSpec,
    RnnParams,
    Trajectory,
    forward_batch,
    loss_gradient,
    loss_value,
)
from .robustness import NoiseSpec, basic_bound_from_norms

__all__ = [
    "Regime",
    "MuDecay",
    "TrainConfig",
    "GradientSet",
    "EpochRecord",
    "TrainLog",
    "TrainingDiverged",
    "DegenerateSingularValueWarning",
    "batch_loss_grad",
    "batch_covariance_grad",
    "bptt_loss_grad",
    "covariance_regularizer",
    "covariance_reg_grad",
    "upper_bound_regularizer",
    "upper_bound_reg_grad",
    "regularizer_weight",
    "step_size_at",
    "train",
    "evaluate_dataset",
]


class Regime(enum.Enum):
    REGULAR = "regular"
    STABLE = "stable"
    ESTIMATOR = "estimator"
    UPPER_BOUND = "upperbound"


class MuDecay(enum.Enum):
    EPOCH = "epoch"  # mu / current epoch index
    TOTAL = "total"  # mu / total number of epochs


class DegenerateSingularValueWarning(RuntimeWarning):
    """The top singular value looked repeated; the norm subgradient is not unique."""


class TrainingDiverged(FloatingPointError):
    """Non-finite loss or parameters; ``params`` is the last finite iterate."""

    def __init__(self, message, params, log):
        super().__init__(message)
        self.params = params
        self.log = log


@dataclass(frozen=True)
class GradientSet:
    dA: np.ndarray
    dB: np.ndarray
    db: np.ndarray
    dC: np.ndarray
    dc: np.ndarray

    @classmethod
    def zeros(cls, params: RnnParams) -> "GradientSet":
        return cls(*(np.zeros_like(a) for a in params.arrays()))

    def arrays(self):
        return self.dA, self.dB, self.db, self.dC, self.dc

    def __add__(self, other: "GradientSet") -> "GradientSet":
        return GradientSet(*(a + b for a, b in zip(self.arrays(), other.arrays())))

    def __mul__(self, k: float) -> "GradientSet":
        return GradientSet(*(k * a for a in self.arrays()))

    __rmul__ = __mul__

    def norm(self) -> float:
        return math.sqrt(sum(float(np.sum(a * a)) for a in self.arrays()))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


# ---------------------------------------------------------------- loss


def _output_seed(spec: LossSpec, outputs, targets):
    """Per-sample loss and its gradient w.r.t. every output ``(B, T, m)``."""
    seed = np.zeros_like(outputs)
    if spec.aggregation is Aggregation.FINAL:
        values = np.atleast_1d(loss_value(spec, outputs[:, -1], targets))
        seed[:, -1] = loss_gradient(spec, outputs[:, -1], targets)
    else:
        values = np.sum(np.atleast_2d(loss_value(spec, outputs, targets)), axis=-1)
        seed[:] = loss_gradient(spec, outputs, targets)
    return values, seed


def _backprop_states(params: RnnParams, inputs, pre, states, grad_x, grad_h, out: list):
    """Push adjoints back through ``h_t = A x_{t-1} + B u_t + b``.

    ``grad_x[:, t]`` is the direct adjoint of ``x_{t+1}``, ``grad_h[:, t]``
    a direct adjoint of ``h_{t+1}`` (either may be None). Accumulates into
    ``out = [dA, dB, db]``.
    """
    batch, T, n = pre.shape
    deriv = params.activation.derivative(pre)
    carry = np.zeros((batch, n))
    dH = np.empty_like(pre)
    for t in range(T - 1, -1, -1):
        gx = carry if grad_x is None else carry + grad_x[:, t]
        gh = gx * deriv[:, t]
        if grad_h is not None:
            gh = gh + grad_h[:, t]
        dH[:, t] = gh
        carry = gh @ params.A
    out[0] += np.einsum("bti,btj->ij", dH, states[:, :-1])
    out[1] += np.einsum("bti,btj->ij", dH, inputs)
    out[2] += dH.sum(axis=(0, 1))


def batch_loss_grad(params: RnnParams, inputs, targets, spec: LossSpec, cache=None):
    """Per-sample losses ``(B,)`` and the gradient of their *sum*."""
    if cache is None:
        cache = forward_batch(params, inputs)
    pre, states, outputs = cache
    values, seed = _output_seed(spec, outputs, targets)
    dC = np.einsum("bti,btj->ij", seed, states[:, 1:])
    dc = seed.sum(axis=(0, 1))
    grad_x = seed @ params.C
    acc = [np.zeros_like(params.A), np.zeros_like(params.B), np.zeros_like(params.b)]
    _backprop_states(params, inputs, pre, states, grad_x, None, acc)
    return values, GradientSet(acc[0], acc[1], acc[2], dC, dc)


def bptt_loss_grad(params: RnnParams, traj: Trajectory, spec: LossSpec, target) -> GradientSet:
    """Exact gradient of one sequence's loss."""
    cache = (traj.pre[None], traj.states[None], traj.outputs[None])
    target = np.asarray(target)[None]
    return batch_loss_grad(params, traj.inputs[None], target, spec, cache)[1]


# ---------------------------------------------------------- covariance


def _left(Ml, X):
    """``Ml @ X[b]`` for every b, as one matrix product."""
    batch, n, k = X.shape
    return (Ml @ X.transpose(1, 0, 2).reshape(n, batch * k)).reshape(Ml.shape[0], batch, k).transpose(1, 0, 2)


def _right(X, Mr):
    """``X[b] @ Mr`` for every b, as one matrix product."""
    batch, r, n = X.shape
    return (X.reshape(batch * r, n) @ Mr).reshape(batch, r, Mr.shape[1])


def _batch_sum_product(X, Y):
    """``sum_b X[b] @ Y[b]``."""
    batch, r, n = X.shape
    return X.transpose(1, 0, 2).reshape(r, batch * n) @ Y.reshape(batch * n, Y.shape[2])


def _gate(d):
    """``d d^T`` for every row of ``d``, the congruence mask of ``D_t``."""
    return d[:, :, None] * d[:, None, :]


def _step_weights(weights, T):
    if weights is None:
        return np.ones(T)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (T,):
        raise ValueError(f"weights must have length {T}")
    return weights


def batch_covariance_grad(params: RnnParams, inputs, noise: NoiseSpec, cache=None, weights=None, curvature=True):
    """Per-sample ``sum_t w_t Tr(R_t)`` ``(B,)`` and the gradient of their sum.

    ``curvature=False`` drops the ``sigma''`` chain through ``D_t``; it exists
    only to demonstrate that the term matters.
    """
    if noise.d != params.d:
        raise ValueError("noise dimension does not match the network input")
    if cache is None:
        cache = forward_batch(params, inputs)
    pre, states, _ = cache
    batch, T, n = pre.shape
    w = _step_weights(weights, T)
    A, B, C = params.A, params.B, params.C
    act = params.activation
    deriv = act.derivative(pre)
    CtC = C.T @ C
    gamma = noise.gamma(n)

    # forward: keep M_t; P_t = (d d^T) * M_t is recovered on demand
    M = np.empty((batch, T, n, n))
    P_prev = np.broadcast_to(gamma, (batch, n, n))
    values = np.zeros(batch)
    sumP = np.zeros((n, n))
    ctc_flat = CtC.ravel()
    for t in range(T):
        drive = B @ noise.sigma(t + 1) @ B.T
        Mt = _right(_left(A, P_prev), A.T) + drive
        M[:, t] = Mt
        Pt = Mt * _gate(deriv[:, t])
        values += w[t] * (Pt.reshape(batch, -1) @ ctc_flat)
        sumP += w[t] * Pt.sum(axis=0)
        P_prev = Pt

    dA = np.zeros_like(A)
    dB = np.zeros_like(B)
    dC = 2.0 * C @ sumP
    need_h = curvature and act.name == "TANH"
    grad_h = np.zeros_like(pre) if need_h else None
    carry = np.zeros((batch, n, n))
    for t in range(T - 1, -1, -1):
        dt = deriv[:, t]
        G = carry + w[t] * CtC
        H = G * _gate(dt)
        HA = _right(H, A)
        if t == 0:
            dA += 2.0 * HA.sum(axis=0) @ gamma
        else:
            dA += 2.0 * _batch_sum_product(HA, M[:, t - 1] * _gate(deriv[:, t - 1]))
        dB += 2.0 * H.sum(axis=0) @ B @ noise.sigma(t + 1)
        if need_h:
            gd = 2.0 * np.einsum("bij,bij,bj->bi", G, M[:, t], dt)
            grad_h[:, t] = gd * act.second_derivative(pre[:, t])
        carry = _left(A.T, HA)

    acc = [dA, dB, np.zeros_like(params.b)]
    if need_h:
        _backprop_states(params, inputs, pre, states, None, grad_h, acc)
    return values, GradientSet(acc[0], acc[1], acc[2], dC, np.zeros_like(params.c))


def covariance_regularizer(params: RnnParams, traj: Trajectory, noise: NoiseSpec, weights=None) -> float:
    cache = (traj.pre[None], traj.states[None], traj.outputs[None])
    return float(batch_covariance_grad(params, traj.inputs[None], noise, cache, weights)[0][0])


def covariance_reg_grad(params: RnnParams, traj: Trajectory, noise: NoiseSpec, weights=None, curvature=True) -> GradientSet:
    """Exact gradient of ``sum_t Tr(R_t)`` along one clean trajectory."""
    cache = (traj.pre[None], traj.states[None], traj.outputs[None])
    return batch_covariance_grad(params, traj.inputs[None], noise, cache, weights, curvature)[1]


# ---------------------------------------------------------- upper bound


def regularizer_weight(mu: float, epoch: int, total_epochs: int | None = None, decay: MuDecay = MuDecay.EPOCH) -> float:
    """Effective weight ``mu / N_e`` of the bound regulariser at a 1-based epoch."""
    if epoch < 1:
        raise ValueError("epochs are counted from 1")
    if MuDecay(decay) is MuDecay.TOTAL:
        if not total_epochs:
            raise ValueError("total decay needs the total number of epochs")
        return mu / total_epochs
    return mu / epoch


def _bound_terms(norm_a, norm_b, norm_c, noise: NoiseSpec, horizon: int):
    """``sum_{t=1..horizon} Omega_t`` and its partial derivatives in the three norms."""
    g = noise.trace_gamma()
    a2, b2, c2 = norm_a**2, norm_b**2, norm_c**2
    inner = 0.0  # sum_t (a^{2t} g + b^2 sum_i a^{2i} s_{t-i})
    d_inner_a = 0.0
    d_inner_b = 0.0
    for t in range(1, horizon + 1):
        i = np.arange(t)
        s = np.array([noise.trace_sigma(t - k) for k in i])
        pows = a2**i
        inner += a2**t * g + b2 * float(np.sum(pows * s))
        # d(a^{2i})/da = 2 i a^{2i-1}; the i = 0 term is constant
        dpows = np.where(i > 0, 2.0 * i * norm_a ** np.maximum(2 * i - 1, 0), 0.0)
        d_inner_a += 2.0 * t * norm_a ** (2 * t - 1) * g + b2 * float(np.sum(dpows * s))
        d_inner_b += 2.0 * norm_b * float(np.sum(pows * s))
    return c2 * inner, c2 * d_inner_a, c2 * d_inner_b, 2.0 * norm_c * inner


def _norm(m) -> float:
    return operator_norm(m)


def upper_bound_regularizer(params: RnnParams, noise: NoiseSpec, horizon: int) -> float:
    """``sum_{t=1..horizon} Omega_t`` for the basic network."""
    norms = [_norm(m) for m in (params.A, params.B, params.C)]
    return float(sum(basic_bound_from_norms(*norms, noise, t) for t in range(1, horizon + 1)))


def _norm_subgradient(m, tol, max_iters, slow_after):
    try:
        sigma, u, v, iters = power_method(m, tol, max_iters)
    except ConvergenceError as exc:
        # repeated top singular value: any top pair is a valid subgradient
        iters = exc.iterations
        left, s, right = np.linalg.svd(m)
        sigma, u, v = float(s[0]), left[:, 0], right[0]
    if iters > slow_after:
        warnings.warn(
            f"power iteration needed {iters} iterations; top singular value may be repeated",
            DegenerateSingularValueWarning,
            stacklevel=3,
        )
    return sigma, np.outer(u, v)


def upper_bound_reg_grad(
    params: RnnParams,
    noise: NoiseSpec,
    t_horizon: int,
    epoch: int,
    mu: float,
    tol: float = 1e-12,
    max_iters: int = 500,
) -> GradientSet:
    """Subgradient of ``(mu / epoch) * sum_{t=1..t_horizon} Omega_t``.

    ``d||M|| / dM = u1 v1^T`` from the top singular pair; biases get zero.
    Pass ``epoch = N_total`` for the constant ``mu / N_total`` reading.
    """
    if mu == 0:
        return GradientSet.zeros(params)
    if params.activation.lipschitz != 1.0:
        raise ValueError("the basic-network bound assumes a 1-Lipschitz activation")
    weight = regularizer_weight(mu, epoch)
    slow_after = max_iters // 4
    na, ga = _norm_subgradient(params.A, tol, max_iters, slow_after)
    nb, gb = _norm_subgradient(params.B, tol, max_iters, slow_after)
    nc, gc = _norm_subgradient(params.C, tol, max_iters, slow_after)
    with np.errstate(over="raise", invalid="raise"):
        try:
            _, da, db, dc = _bound_terms(na, nb, nc, noise, t_horizon)
        except (FloatingPointError, OverflowError) as exc:
            raise FloatingPointError(f"bound gradient overflows at ||A|| = {na:.3g}") from exc
    return GradientSet(
        weight * da * ga,
        weight * db * gb,
        np.zeros_like(params.b),
        weight * dc * gc,
        np.zeros_like(params.c),
    )


# ---------------------------------------------------------------- train


@dataclass(frozen=True)
class TrainConfig:
    regime: Regime = Regime.REGULAR
    mu: float = 0.0
    epochs: int = 30
    batch_size: int = 64
    step_size: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    gradient_clip_norm: float | None = 5.0
    noise: NoiseSpec | None = None
    mu_decay: MuDecay = MuDecay.EPOCH
    reg_weights: str = "all"  # covariance regulariser on every step, or "final"
    schedule: str = "constant"  # or "cosine": step size annealed per epoch towards 0

    def __post_init__(self):
        object.__setattr__(self, "regime", Regime(self.regime))
        object.__setattr__(self, "mu_decay", MuDecay(self.mu_decay))
        if not self.step_size >= 0:
            raise ValueError("step_size must be non-negative")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.mu < 0:
            raise ValueError("mu must be non-negative")
        if self.gradient_clip_norm is not None and not self.gradient_clip_norm > 0:
            raise ValueError("gradient_clip_norm must be positive")
        if self.reg_weights not in ("all", "final"):
            raise ValueError("reg_weights must be 'all' or 'final'")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError("schedule must be 'constant' or 'cosine'")
        if self.regime in (Regime.ESTIMATOR, Regime.UPPER_BOUND) and self.noise is None:
            raise ValueError(f"regime {self.regime.value} needs a noise specification")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    test_loss: float
    test_accuracy: float
    regularizer: float
    reg_weight: float
    norm_a: float
    wall_time: float = field(default=0.0, compare=False)


CSV_COLUMNS = ("epoch", "train_loss", "train_accuracy", "test_loss", "test_accuracy", "regularizer", "reg_weight", "norm_a")


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i) -> EpochRecord:
        return self.records[i]

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records])

    @staticmethod
    def csv_header() -> str:
        return ",".join(CSV_COLUMNS) + "\n"

    @staticmethod
    def csv_row(rec: EpochRecord) -> str:
        return ",".join(repr(float(getattr(rec, c))) if c != "epoch" else str(rec.epoch) for c in CSV_COLUMNS) + "\n"

    def to_csv(self) -> str:
        """Numeric columns only; wall times are kept out so reruns compare equal."""
        return self.csv_header() + "".join(self.csv_row(r) for r in self.records)


def _targets(dataset: Dataset, spec: LossSpec):
    if spec.kind is LossKind.CROSS_ENTROPY:
        if dataset.labels is None:
            raise ValueError("cross-entropy training needs labels")
        return dataset.labels
    if dataset.targets is None:
        raise ValueError("squared-error training needs targets")
    if spec.aggregation is Aggregation.FINAL:
        return dataset.targets[:, -1]
    return dataset.targets


def evaluate_dataset(params: RnnParams, dataset: Dataset, spec: LossSpec, chunk: int = 2000):
    """Mean loss and (for labelled sets) final-step argmax accuracy."""
    targets = _targets(dataset, spec)
    total, correct = 0.0, 0
    for start in range(0, len(dataset), chunk):
        sl = slice(start, start + chunk)
        _, _, outputs = forward_batch(params, dataset.inputs[sl])
        total += float(np.sum(np.atleast_1d(_output_seed(spec, outputs, targets[sl])[0])))
        if dataset.labels is not None:
            correct += int(np.sum(np.argmax(outputs[:, -1], axis=1) == dataset.labels[sl]))
    acc = correct / len(dataset) if dataset.labels is not None else math.nan
    return total / len(dataset), acc


def step_size_at(cfg: TrainConfig, epoch: int) -> float:
    """Step size used throughout 1-based ``epoch``."""
    if cfg.schedule == "cosine":
        return cfg.step_size * 0.5 * (1.0 + math.cos(math.pi * (epoch - 1) / cfg.epochs))
    return cfg.step_size


def _clip(grad: GradientSet, max_norm):
    if max_norm is None:
        return grad
    norm = grad.norm()
    if norm > max_norm:
        return grad * (max_norm / norm)
    return grad


def train(
    params0: RnnParams,
    dataset: Dataset,
    cfg: TrainConfig,
    testset: Dataset | None = None,
    spec: LossSpec | None = None,
    on_epoch=None,
):
    """Mini-batch SGD with heavy-ball momentum.

    Batch gradients are means over samples (accumulated in sample-index
    order). Regimes add: nothing (REGULAR); singular-value clipping of ``A``
    to 1 after every update (STABLE); ``mu * mean_b sum_t Tr(R_t)``
    (ESTIMATOR); ``(mu / N_e) * sum_t Omega_t`` (UPPER_BOUND).

    Returns ``(params, TrainLog)``; raises :class:`TrainingDiverged` on a
    non-finite loss or update.
    """
    spec = spec or LossSpec()
    if cfg.regime is Regime.UPPER_BOUND and params0.activation.lipschitz != 1.0:
        raise ValueError("bound regularisation needs a 1-Lipschitz activation")
    targets = _targets(dataset, spec)
    N, T = len(dataset), dataset.T
    rng = make_rng(cfg.seed)
    arrays = [a.copy() for a in params0.arrays()]
    velocity = [np.zeros_like(a) for a in arrays]
    params = params0
    if cfg.regime is Regime.STABLE:
        arrays[0] = clip_singular_values(arrays[0], 1.0)
        params = params.replace(A=arrays[0])
    weights = None
    if cfg.reg_weights == "final":
        weights = np.zeros(T)
        weights[-1] = 1.0
    log = TrainLog()

    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        order = rng.permutation(N)
        reg_sum, reg_batches = 0.0, 0
        lr = step_size_at(cfg, epoch)
        if cfg.regime is Regime.UPPER_BOUND:
            reg_w = regularizer_weight(cfg.mu, epoch, cfg.epochs, cfg.mu_decay)
        elif cfg.regime is Regime.ESTIMATOR:
            reg_w = cfg.mu
        else:
            reg_w = 0.0
        for start in range(0, N, cfg.batch_size):
            idx = np.sort(order[start : start + cfg.batch_size])
            inputs = dataset.inputs[idx]
            k = len(idx)
            cache = forward_batch(params, inputs)
            losses, grad = batch_loss_grad(params, inputs, targets[idx], spec, cache)
            grad = grad * (1.0 / k)
            if not np.all(np.isfinite(losses)):
                raise TrainingDiverged(f"non-finite loss in epoch {epoch}", params, log)
            if cfg.regime is Regime.ESTIMATOR and cfg.mu > 0:
                phi, g_reg = batch_covariance_grad(params, inputs, cfg.noise, cache, weights)
                grad = grad + g_reg * (cfg.mu / k)
                reg_sum += float(np.mean(phi))
                reg_batches += 1
            elif cfg.regime is Regime.UPPER_BOUND and cfg.mu > 0:
                decay_epoch = cfg.epochs if cfg.mu_decay is MuDecay.TOTAL else epoch
                try:
                    grad = grad + upper_bound_reg_grad(params, cfg.noise, T, decay_epoch, cfg.mu)
                except FloatingPointError as exc:
                    raise TrainingDiverged(str(exc), params, log) from exc
            grad = _clip(grad, cfg.gradient_clip_norm)
            if not grad.is_finite():
                raise TrainingDiverged(f"non-finite gradient in epoch {epoch}", params, log)
            for a, v, g in zip(arrays, velocity, grad.arrays()):
                v *= cfg.momentum
                v -= lr * g
                a += v
            if not all(np.all(np.isfinite(a)) for a in arrays):
                raise TrainingDiverged(f"non-finite parameters in epoch {epoch}", params, log)
            if cfg.regime is Regime.STABLE:
                arrays[0] = clip_singular_values(arrays[0], 1.0)
            params = RnnParams(*arrays, params0.activation)

        if cfg.regime is Regime.UPPER_BOUND:
            regularizer = upper_bound_regularizer(params, cfg.noise, T)
        elif reg_batches:
            regularizer = reg_sum / reg_batches
        else:
            regularizer = 0.0
        train_loss, train_acc = evaluate_dataset(params, dataset, spec)
        if not math.isfinite(train_loss):
            raise TrainingDiverged(f"non-finite training loss after epoch {epoch}", params, log)
        if testset is not None:
            test_loss, test_acc = evaluate_dataset(params, testset, spec)
        else:
            test_loss, test_acc = math.nan, math.nan
        record = EpochRecord(
            epoch, train_loss, train_acc, test_loss, test_acc, regularizer, reg_w,
            _norm(params.A), time.perf_counter() - started,
        )
        log.records.append(record)
        if on_epoch is not None:
            on_epoch(record, params)
    return params, log
