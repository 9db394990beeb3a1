"""Monte Carlo ground truth for the robustness measure and noise sweeps."""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .linalg import gaussian_factor, worker_rng
from .model import LossSpec, RnnParams, forward_batch, loss_value
from .robustness import NoiseSpec, _table

__all__ = [
    "McEstimate",
    "SweepPoint",
    "SweepResult",
    "noisy_outputs",
    "mc_rho",
    "mc_rho_trace",
    "mc_expected_loss",
    "classify",
    "noise_sweep",
    "threshold_extract",
    "DEFAULT_OMEGAS",
]

DEFAULT_OMEGAS = tuple(np.round(np.arange(0.0, 3.0 + 1e-9, 0.25), 10))


@dataclass(frozen=True)
class McEstimate:
    mean: float
    std_error: float
    samples: int

    def __post_init__(self):
        if self.samples < 2:
            raise ValueError("a Monte Carlo estimate needs at least 2 samples")

    @classmethod
    def from_samples(cls, values) -> "McEstimate":
        values = np.asarray(values, dtype=np.float64)
        k = values.shape[0]
        if k < 2:
            raise ValueError("a Monte Carlo estimate needs at least 2 samples")
        if np.all(values == values[0]):
            # summation round-off would otherwise give a tiny nonzero spread
            return cls(float(values[0]), 0.0, k)
        return cls(float(np.mean(values)), float(np.std(values, ddof=1) / math.sqrt(k)), k)


def noisy_outputs(params: RnnParams, inputs, noise: NoiseSpec, n_samples: int, rng, x0=None, chunk: int = 20_000):
    """Outputs of ``n_samples`` independent noisy runs of one input sequence.

    Each run draws fresh ``w_1..w_T`` and ``x~_0 ~ N(x_0, Gamma)``. Returns
    ``(clean (T, m), noisy (n_samples, T, m))``.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    T, d = inputs.shape
    n = params.n
    x0 = np.zeros(n) if x0 is None else np.asarray(x0, dtype=np.float64)
    _, _, clean = forward_batch(params, inputs[None], x0[None])
    factors = [gaussian_factor(noise.sigma(t)) for t in range(1, T + 1)] if noise.time_varying else None
    factor = None if factors else gaussian_factor(noise.input_cov)
    gamma_factor = gaussian_factor(noise.gamma(n))
    if not gamma_factor.any() and not any(f.any() for f in (factors or [factor])):
        # deterministic runs; copying avoids batch-shape round-off
        return clean[0], np.broadcast_to(clean, (n_samples, T, params.m)).copy()
    out = np.empty((n_samples, T, params.m))
    for start in range(0, n_samples, chunk):
        k = min(chunk, n_samples - start)
        z0 = rng.standard_normal((k, n))
        z = rng.standard_normal((k, T, d))
        if factors:
            w = np.stack([z[:, t] @ factors[t].T for t in range(T)], axis=1)
        else:
            w = z @ factor.T
        _, _, y = forward_batch(params, inputs[None] + w, x0 + z0 @ gamma_factor.T)
        out[start : start + k] = y
    return clean[0], out


def mc_rho_trace(params: RnnParams, inputs, noise: NoiseSpec, n_samples: int, rng, x0=None):
    """``McEstimate`` of ``E||y~_t - y_t||^2`` for every step, from one set of runs."""
    clean, noisy = noisy_outputs(params, inputs, noise, n_samples, rng, x0)
    sq = np.sum((noisy - clean) ** 2, axis=-1)
    return [McEstimate.from_samples(sq[:, t]) for t in range(sq.shape[1])]


def mc_rho(params: RnnParams, inputs, x0, noise: NoiseSpec, t: int, n_samples: int, rng) -> McEstimate:
    """Monte Carlo estimate of ``rho_t`` (``t`` is 1-based)."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if not 1 <= t <= inputs.shape[0]:
        raise ValueError(f"t must lie in 1..{inputs.shape[0]}")
    clean, noisy = noisy_outputs(params, inputs[:t], noise, n_samples, rng, x0)
    return McEstimate.from_samples(np.sum((noisy[:, -1] - clean[-1]) ** 2, axis=-1))


def mc_expected_loss(params: RnnParams, inputs, target, spec: LossSpec, noise: NoiseSpec, n_samples: int, rng, x0=None):
    """Per-step clean losses, noisy expected losses and MC ``rho_t``.

    ``target`` has a time axis (labels ``(T,)`` or vectors ``(T, m)``).
    Returns ``(clean_loss (T,), expected_loss [McEstimate], rho [McEstimate],
    noisy_outputs)``.
    """
    clean, noisy = noisy_outputs(params, inputs, noise, n_samples, rng, x0)
    target = np.asarray(target)
    clean_loss = np.asarray(loss_value(spec, clean, target), dtype=np.float64)
    noisy_loss = np.asarray(loss_value(spec, noisy, np.broadcast_to(target, noisy.shape[:2] + target.shape[1:])))
    sq = np.sum((noisy - clean) ** 2, axis=-1)
    T = clean.shape[0]
    return (
        clean_loss,
        [McEstimate.from_samples(noisy_loss[:, t]) for t in range(T)],
        [McEstimate.from_samples(sq[:, t]) for t in range(T)],
        noisy,
    )


def classify(params: RnnParams, inputs, chunk: int = 4000) -> np.ndarray:
    """Argmax of the final output; ties go to the lowest class index."""
    inputs = np.asarray(inputs, dtype=np.float64)
    labels = np.empty(inputs.shape[0], dtype=np.int64)
    for start in range(0, inputs.shape[0], chunk):
        _, _, y = forward_batch(params, inputs[start : start + chunk])
        labels[start : start + chunk] = np.argmax(y[:, -1], axis=1)
    return labels


@dataclass(frozen=True)
class SweepPoint:
    omega: float
    misclassification_pct: float
    rho_final: McEstimate


@dataclass(frozen=True)
class SweepResult:
    points: tuple
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        omegas = [p.omega for p in self.points]
        if any(b <= a for a, b in zip(omegas, omegas[1:])):
            raise ValueError("sweep amplitudes must be strictly increasing")

    @property
    def omegas(self) -> np.ndarray:
        return np.array([p.omega for p in self.points])

    @property
    def misclassification(self) -> np.ndarray:
        return np.array([p.misclassification_pct for p in self.points])

    def to_csv(self) -> str:
        rows = [(p.omega, p.misclassification_pct, p.rho_final.mean, p.rho_final.std_error) for p in self.points]
        return _table(("omega", "misclassification_pct", "rho_mc_mean", "rho_mc_stderr"), rows)


def _sweep_point(params: RnnParams, inputs, labels, clean_final, omega, n_repeats, seed, index):
    rng = worker_rng(seed, index)
    wrong = 0
    sq = []
    scale = math.sqrt(omega)
    for _ in range(n_repeats):
        noisy = inputs + scale * rng.standard_normal(inputs.shape) if omega > 0 else inputs
        _, _, y = forward_batch(params, noisy)
        wrong += int(np.sum(np.argmax(y[:, -1], axis=1) != labels))
        sq.append(np.sum((y[:, -1] - clean_final) ** 2, axis=-1))
    pct = 100.0 * wrong / (n_repeats * len(labels))
    sq = np.concatenate(sq)
    return SweepPoint(float(omega), pct, McEstimate.from_samples(sq))


def noise_sweep(params: RnnParams, testset: Dataset, omegas=DEFAULT_OMEGAS, n_repeats: int = 1, seed: int = 0, workers: int = 1) -> SweepResult:
    """Misclassification under ``Sigma = omega I`` input noise for each amplitude.

    Amplitude ``k`` uses the stream ``worker_rng(seed, k)`` so results do not
    depend on ``workers``. ``rho_final`` is the mean over test samples and
    repeats of ``||y~_T - y_T||^2``.
    """
    if testset is None or len(testset) == 0:
        raise ValueError("empty test set")
    if testset.labels is None:
        raise ValueError("noise sweeps need a labelled test set")
    omegas = [float(w) for w in omegas]
    if any(w < 0 for w in omegas):
        raise ValueError("noise amplitudes must be non-negative")
    if n_repeats < 1:
        raise ValueError("n_repeats must be at least 1")
    inputs, labels = testset.inputs, testset.labels
    _, _, clean = forward_batch(params, inputs)
    clean_final = clean[:, -1]
    jobs = [(params, inputs, labels, clean_final, w, n_repeats, seed, k) for k, w in enumerate(omegas)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            points = list(pool.map(_sweep_point, *zip(*jobs)))
    else:
        points = [_sweep_point(*job) for job in jobs]
    meta = {"seed": seed, "n_repeats": n_repeats, "test_samples": len(testset)}
    return SweepResult(tuple(points), meta)


def threshold_extract(sweep: SweepResult, target_pct: float) -> float:
    """Smallest amplitude at which misclassification reaches ``target_pct``,
    linearly interpolated between the bracketing sweep points."""
    omegas, pct = sweep.omegas, sweep.misclassification
    if len(omegas) == 0:
        raise ValueError("empty sweep")
    if pct[0] >= target_pct:
        raise ValueError(
            f"target {target_pct}% is not above the first sweep value "
            f"({pct[0]:.3f}% at omega={omegas[0]}); sweep range is [{pct.min():.3f}, {pct.max():.3f}]%"
        )
    for k in range(1, len(omegas)):
        if pct[k] >= target_pct:
            lo, hi = pct[k - 1], pct[k]
            frac = (target_pct - lo) / (hi - lo)
            return float(omegas[k - 1] + frac * (omegas[k] - omegas[k - 1]))
    raise ValueError(
        f"target {target_pct}% never reached; sweep range is [{pct.min():.3f}, {pct.max():.3f}]% "
        f"over omega in [{omegas[0]}, {omegas[-1]}]"
    )
