"""Noise propagation through a trained network.

Two routes to the robustness measure ``rho_t = E||y~_t - y_t||^2``:

* a linearised covariance recursion along the clean trajectory,
  ``P_t = J_t P_{t-1} J_t^T + K_t Sigma_t K_t^T`` with ``J_t = D_t A``,
  ``K_t = D_t B`` and ``D_t = diag(sigma'(h_t))``, read out as
  ``rho_t ~ Tr(C P_t C^T)``;
* Lipschitz upper bounds built from the spectral norms of ``A``, ``B``, ``C``.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from .linalg import operator_norm
from .model import RnnParams, Trajectory, lipschitz_constants

__all__ = [
    "NoiseSpec",
    "CovarianceTrace",
    "BoundReport",
    "Certificate",
    "covariance_step",
    "propagate_covariance",
    "upper_bound_general",
    "upper_bound_basic",
    "basic_bound_from_norms",
    "steady_state_general",
    "steady_state_basic",
    "stability_certificate",
    "bound_report",
]

PSD_TOL = 1e-9


def _check_psd(name, mat, tol=1e-10):
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got {mat.shape}")
    if not np.all(np.isfinite(mat)):
        raise ValueError(f"{name} has non-finite entries")
    mat = 0.5 * (mat + mat.T)
    scale = max(1.0, float(np.max(np.abs(mat))))
    if np.linalg.eigvalsh(mat)[0] < -tol * scale:
        raise ValueError(f"{name} is not positive semidefinite")
    return mat


@dataclass(frozen=True)
class NoiseSpec:
    """Input noise ``w_t ~ N(0, Sigma_t)`` and initial-state spread ``Gamma``.

    ``input_cov`` is either one ``(d, d)`` matrix used at every step or a
    ``(T, d, d)`` stack where entry ``t - 1`` is ``Sigma_t``. ``init_cov``
    defaults to zero (deterministic ``x_0``) once ``n`` is known.
    """

    input_cov: np.ndarray
    init_cov: np.ndarray | None = None

    def __post_init__(self):
        cov = np.asarray(self.input_cov, dtype=np.float64)
        if cov.ndim == 2:
            cov = _check_psd("input_cov", cov)
        elif cov.ndim == 3:
            cov = np.stack([_check_psd(f"input_cov[{i}]", c) for i, c in enumerate(cov)])
        else:
            raise ValueError("input_cov must be (d, d) or (T, d, d)")
        object.__setattr__(self, "input_cov", cov)
        if self.init_cov is not None:
            object.__setattr__(self, "init_cov", _check_psd("init_cov", self.init_cov))

    @classmethod
    def isotropic(cls, omega: float, d: int, n: int | None = None, gamma: float = 0.0) -> "NoiseSpec":
        if omega < 0 or gamma < 0:
            raise ValueError("noise amplitudes must be non-negative")
        init = None if n is None else gamma * np.eye(n)
        return cls(omega * np.eye(d), init)

    @property
    def d(self) -> int:
        return self.input_cov.shape[-1]

    @property
    def time_varying(self) -> bool:
        return self.input_cov.ndim == 3

    def sigma(self, t: int) -> np.ndarray:
        """``Sigma_t`` for 1-based step ``t``."""
        if not self.time_varying:
            return self.input_cov
        if not 1 <= t <= self.input_cov.shape[0]:
            raise IndexError(f"no input covariance for step {t}")
        return self.input_cov[t - 1]

    def trace_sigma(self, t: int) -> float:
        return float(np.trace(self.sigma(t)))

    def gamma(self, n: int) -> np.ndarray:
        if self.init_cov is None:
            return np.zeros((n, n))
        if self.init_cov.shape != (n, n):
            raise ValueError(f"init_cov must be ({n}, {n})")
        return self.init_cov

    def trace_gamma(self) -> float:
        return 0.0 if self.init_cov is None else float(np.trace(self.init_cov))


def _table(header, rows) -> str:
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(_fmt(v) for v in row) + "\n")
    return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v)


@dataclass(frozen=True)
class CovarianceTrace:
    """Estimated state covariances ``P[0..T]``, output covariances
    ``R[0..T-1]`` (step ``t`` at index ``t - 1``) and ``rho_hat``.

    ``bias`` is the squared mean shift; it is held at zero because the clean
    trajectory is used as the estimate of the noisy mean.
    """

    P: np.ndarray
    R: np.ndarray
    rho_hat: np.ndarray
    bias: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.bias is None:
            object.__setattr__(self, "bias", np.zeros_like(self.rho_hat))

    @property
    def T(self) -> int:
        return self.R.shape[0]

    def to_csv(self) -> str:
        rows = [
            (t, self.rho_hat[t - 1], np.trace(self.R[t - 1]), self.bias[t - 1], np.trace(self.P[t]))
            for t in range(1, self.T + 1)
        ]
        return _table(("t", "rho_hat", "trace_R", "bias", "trace_P"), rows)


def _symmetrize(m):
    return 0.5 * (m + m.swapaxes(-1, -2))


def covariance_step(params: RnnParams, h_t, P_prev, sigma_t) -> np.ndarray:
    """One step of the linearised state-covariance recursion."""
    h_t = np.asarray(h_t, dtype=np.float64)
    P_prev = np.asarray(P_prev, dtype=np.float64)
    sigma_t = np.asarray(sigma_t, dtype=np.float64)
    n, d = params.n, params.d
    if h_t.shape != (n,) or P_prev.shape != (n, n) or sigma_t.shape != (d, d):
        raise ValueError(
            f"expected h_t ({n},), P_prev ({n}, {n}), sigma_t ({d}, {d}); "
            f"got {h_t.shape}, {P_prev.shape}, {sigma_t.shape}"
        )
    gain = params.activation.derivative(h_t)
    jx = gain[:, None] * params.A
    ju = gain[:, None] * params.B
    return _symmetrize(jx @ P_prev @ jx.T + ju @ sigma_t @ ju.T)


def _floor_psd(m, where):
    w, v = np.linalg.eigh(m)
    scale = max(1.0, float(np.max(np.abs(w))))
    if w[0] < -PSD_TOL * scale:
        raise FloatingPointError(f"{where}: covariance lost positive semidefiniteness (min eigenvalue {w[0]:.3e})")
    if w[0] < 0.0:
        return (v * np.clip(w, 0.0, None)) @ v.T
    return m


def propagate_covariance(params: RnnParams, traj: Trajectory, noise: NoiseSpec, floor: bool = True) -> CovarianceTrace:
    """Run the covariance recursion along a clean trajectory.

    ``P_0 = Gamma``; ``R_t = C P_t C^T``; ``rho_hat_t = Tr(R_t)``. With
    ``floor`` set, eigenvalues that drift slightly below zero are clipped.
    """
    if noise.d != params.d:
        raise ValueError("noise dimension does not match the network input")
    T, n = traj.T, params.n
    P = np.empty((T + 1, n, n))
    R = np.empty((T, params.m, params.m))
    P[0] = noise.gamma(n)
    for t in range(1, T + 1):
        P[t] = covariance_step(params, traj.pre[t - 1], P[t - 1], noise.sigma(t))
        if floor:
            P[t] = _floor_psd(P[t], f"step {t}")
        R[t - 1] = _symmetrize(params.C @ P[t] @ params.C.T)
    rho = np.einsum("tii->t", R)
    return CovarianceTrace(P, R, np.maximum(rho, 0.0))


def _log_geometric_terms(log_ratio, weights):
    """``log(sum_i ratio^i * weights[i])`` for non-negative weights."""
    weights = np.asarray(weights, dtype=np.float64)
    mask = weights > 0
    if not np.any(mask):
        return -np.inf
    idx = np.nonzero(mask)[0]
    if log_ratio == -np.inf:
        return math.log(weights[0]) if mask[0] else -np.inf
    logs = idx * log_ratio + np.log(weights[idx])
    top = np.max(logs)
    return float(top + np.log(np.sum(np.exp(logs - top))))


def _bound_value(gain_sq, input_coef, noise: NoiseSpec, t: int, trace_gamma: float, output_sq: float, cap: float):
    """``output_sq * (gain_sq^t Tr(Gamma) + input_coef * sum_i gain_sq^i Tr(Sigma_{t-i}))``.

    Evaluated in the log domain; returns ``inf`` above ``cap``.
    """
    if t < 0:
        raise ValueError("t must be non-negative")
    log_gain = -np.inf if gain_sq == 0 else math.log(gain_sq)
    parts = []
    if trace_gamma > 0:
        parts.append((0.0 if t == 0 else t * log_gain) + math.log(trace_gamma))
    if t >= 1 and input_coef > 0:
        traces = [noise.trace_sigma(t - i) for i in range(t)]
        s = _log_geometric_terms(log_gain, traces)
        if s > -np.inf:
            parts.append(math.log(input_coef) + s)
    parts = [p for p in parts if p > -np.inf]
    if not parts or output_sq == 0:
        return 0.0
    parts = np.array(parts)
    top = np.max(parts)
    total = math.log(output_sq) + top + math.log(np.sum(np.exp(parts - top)))
    if total > math.log(cap):
        return math.inf
    return math.exp(total)


def upper_bound_general(lam, kappa_u, kappa_g, noise: NoiseSpec, t: int, printed_form: bool = False, cap: float = 1e300) -> float:
    """General Lipschitz bound on ``rho_t``.

    ``kappa_G^2 ((2 lam^2)^t Tr(Gamma) + 2 kappa_u^2 sum_{i<t} (2 lam^2)^i Tr(Sigma_{t-i}))``.
    ``printed_form=True`` swaps the input coefficient ``2 kappa_u^2`` for
    ``kappa_u``.
    """
    if min(lam, kappa_u, kappa_g) < 0:
        raise ValueError("Lipschitz constants must be non-negative")
    coef = kappa_u if printed_form else 2.0 * kappa_u**2
    return _bound_value(2.0 * lam**2, coef, noise, t, noise.trace_gamma(), kappa_g**2, cap)


def basic_bound_from_norms(norm_a, norm_b, norm_c, noise: NoiseSpec, t: int, cap: float = 1e300) -> float:
    """``||C||^2 (||A||^{2t} Tr(Gamma) + sum_{i<t} ||A||^{2i} ||B||^2 Tr(Sigma_{t-i}))``."""
    return _bound_value(norm_a**2, norm_b**2, noise, t, noise.trace_gamma(), norm_c**2, cap)


def upper_bound_basic(params: RnnParams, noise: NoiseSpec, t: int, cap: float = 1e300) -> float:
    """Tighter bound for the basic network with a 1-Lipschitz activation."""
    if params.activation.lipschitz != 1.0:
        raise ValueError("the basic-network bound assumes a 1-Lipschitz activation")
    norms = [operator_norm(m) for m in (params.A, params.B, params.C)]
    return basic_bound_from_norms(*norms, noise, t, cap)


def steady_state_general(lam, kappa_u, kappa_g, trace_sigma: float) -> float:
    """Limit of the general bound for constant noise; ``inf`` unless ``lam < 1/sqrt(2)``."""
    ratio = 2.0 * lam**2
    if ratio >= 1.0:
        return math.inf
    return 2.0 * (kappa_u * kappa_g) ** 2 * trace_sigma / (1.0 - ratio)


def steady_state_basic(norm_a, norm_b, norm_c, trace_sigma: float) -> float:
    """``(||B|| ||C|| / sqrt(1 - ||A||^2))^2 Tr(Sigma)``; ``inf`` unless ``||A|| < 1``."""
    if norm_a >= 1.0:
        return math.inf
    return (norm_b * norm_c) ** 2 * trace_sigma / (1.0 - norm_a**2)


@dataclass(frozen=True)
class Certificate:
    """Outcome of the post-training stability test; truthy when certified."""

    certified: bool
    specnorm_a_lt_1: bool
    horizon: int
    omega: float
    reference: float

    def __bool__(self):
        return self.certified


def stability_certificate(params: RnnParams, noise: NoiseSpec, horizon: int) -> Certificate:
    """Check ``Omega_t < ||C||^2 (Tr(Gamma) + t ||B||^2 Tr(Sigma))`` at ``t = horizon``.

    When the right-hand side vanishes (no noise reaches the output) the test
    carries no information and the direct check ``||A|| < 1`` decides.
    """
    if noise.time_varying:
        raise ValueError("the stability test assumes a constant input covariance")
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    na, nb, nc = (operator_norm(m) for m in (params.A, params.B, params.C))
    omega = basic_bound_from_norms(na, nb, nc, noise, horizon)
    reference = nc**2 * (noise.trace_gamma() + horizon * nb**2 * noise.trace_sigma(1))
    direct = na < 1.0
    certified = omega < reference if reference > 0 else direct
    return Certificate(bool(certified), bool(direct), horizon, omega, reference)


@dataclass(frozen=True)
class BoundReport:
    t: np.ndarray
    general: np.ndarray
    basic: np.ndarray
    steady_general: float
    steady_basic: float
    lam: float
    kappa_u: float
    kappa_g: float
    norm_a: float
    lambda_lt_inv_sqrt2: bool
    specnorm_a_lt_1: bool

    def to_csv(self) -> str:
        rows = list(zip(self.t, self.general, self.basic))
        return _table(("t", "bound_general", "bound_basic"), rows)


def bound_report(params: RnnParams, noise: NoiseSpec, T: int, printed_form: bool = False) -> BoundReport:
    lam, ku, kg = lipschitz_constants(params)
    na = operator_norm(params.A)
    nb = operator_norm(params.B)
    ts = np.arange(1, T + 1)
    general = np.array([upper_bound_general(lam, ku, kg, noise, int(t), printed_form) for t in ts])
    basic = np.array([basic_bound_from_norms(na, nb, kg, noise, int(t)) for t in ts])
    if noise.time_varying:
        ss_general = ss_basic = math.nan
    else:
        tr = noise.trace_sigma(1)
        ss_general = steady_state_general(lam, ku, kg, tr)
        ss_basic = steady_state_basic(na, nb, kg, tr)
    return BoundReport(
        ts, general, basic, ss_general, ss_basic, lam, ku, kg, na,
        bool(lam < 1.0 / math.sqrt(2.0)), bool(na < 1.0),
    )
