"""Dense linear algebra helpers: spectral norms, singular value clipping and
Gaussian sampling.

Matrices and vectors are plain float64 numpy arrays. Random streams are
``numpy.random.Generator`` objects built from an integer seed; worker streams
are derived with :func:`worker_rng`, which uses the seed-sequence spawn key
``(index,)`` so that worker ``k`` of seed ``s`` always sees the same stream no
matter how many workers exist.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "ConvergenceError",
    "make_rng",
    "worker_rng",
    "spectral_norm",
    "operator_norm",
    "top_singular_pair",
    "power_method",
    "clip_singular_values",
    "gaussian_factor",
    "sample_gaussian",
]


class ConvergenceError(RuntimeError):
    """An iterative routine stopped before reaching its tolerance.

    ``best`` holds the last iterate (for the power method a tuple
    ``(sigma, u, v)``) and ``residual`` its relative residual.
    """

    def __init__(self, message, best=None, residual=float("nan"), iterations=0):
        super().__init__(message)
        self.best = best
        self.residual = residual
        self.iterations = iterations


def make_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed)))


def worker_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream number ``index`` derived from ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(index),)))


def _as_matrix(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError(f"expected a non-empty 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    return m


def _fallback_start(k: int) -> np.ndarray:
    # fixed pseudo-random direction, used when the all-ones start is annihilated
    v = np.random.default_rng(0x5EED).standard_normal(k)
    return v / np.linalg.norm(v)


def top_singular_pair(m, tol: float = 1e-10, max_iters: int = 10_000):
    """Largest singular value and unit singular vectors ``(sigma, u, v)``.

    See :func:`power_method`.
    """
    return power_method(m, tol, max_iters)[:3]


def power_method(m, tol: float = 1e-10, max_iters: int = 10_000):
    """Largest singular value and its singular vectors by power iteration.

    Iterates ``v <- m^T m v`` from the normalised all-ones vector and stops once
    ``||m^T u - sigma v|| <= tol * sigma`` (``m v = sigma u`` holds by
    construction). Returns ``(sigma, u, v, iterations)``.

    Raises :class:`ConvergenceError` carrying the best iterate when the
    tolerance is not met within ``max_iters`` iterations.
    """
    m = _as_matrix(m)
    if tol <= 0:
        raise ValueError("tol must be positive")
    rows, cols = m.shape
    scale = np.max(np.abs(m))
    if scale == 0.0:
        u = np.zeros(rows)
        u[0] = 1.0
        v = np.zeros(cols)
        v[0] = 1.0
        return 0.0, u, v, 0
    # power iteration on a rescaled copy keeps huge/tiny entries in range
    ms = m / scale

    v = np.full(cols, 1.0 / np.sqrt(cols))
    mv = ms @ v
    if np.linalg.norm(mv) <= 1e-12 * np.linalg.norm(ms):
        v = _fallback_start(cols)
        mv = ms @ v

    sigma, u, residual = 0.0, None, np.inf
    for it in range(1, max_iters + 1):
        sigma = np.linalg.norm(mv)
        if sigma == 0.0:
            # stagnated in the null space; restart from the fallback direction
            v = _fallback_start(cols)
            mv = ms @ v
            continue
        u = mv / sigma
        w = ms.T @ u
        residual = np.linalg.norm(w - sigma * v) / sigma
        if residual <= tol:
            return float(sigma * scale), u, v, it
        v = w / np.linalg.norm(w)
        mv = ms @ v

    raise ConvergenceError(
        f"power iteration did not reach tol={tol:g} in {max_iters} iterations "
        f"(residual {residual:.3e})",
        best=(float(sigma * scale), u, v),
        residual=float(residual),
        iterations=max_iters,
    )


def spectral_norm(m, tol: float = 1e-10, max_iters: int = 10_000) -> float:
    """Operator 2-norm (largest singular value) of ``m``."""
    return top_singular_pair(m, tol=tol, max_iters=max_iters)[0]


def operator_norm(m, tol: float = 1e-10, max_iters: int = 10_000) -> float:
    """Spectral norm that also copes with a clustered top of the spectrum.

    Tries :func:`spectral_norm` first. Clipped or near-orthogonal matrices
    often have several singular values within ``1e-6`` of the top, where power
    iteration stalls; the value is then taken from a dense SVD instead.
    """
    try:
        return spectral_norm(m, tol, max_iters)
    except ConvergenceError:
        try:
            return float(np.linalg.svd(_as_matrix(m), compute_uv=False)[0])
        except np.linalg.LinAlgError as exc:
            raise ConvergenceError(f"SVD failed: {exc}") from exc


def clip_singular_values(m, cap: float) -> np.ndarray:
    """Return ``U min(S, cap) V^T``.

    When every singular value is already at most ``cap`` the input is returned
    unchanged (as a copy), so clipping an admissible matrix is an exact no-op.
    """
    m = _as_matrix(m)
    if not cap > 0:
        raise ValueError("cap must be positive")
    try:
        u, s, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceError(f"SVD failed: {exc}") from exc
    if s[0] <= cap:
        return m.copy()
    return (u * np.minimum(s, cap)) @ vt


def gaussian_factor(cov, neg_tol: float = 1e-10) -> np.ndarray:
    """A square factor ``L`` with ``L L^T = cov`` for a PSD covariance.

    Cholesky is tried first; singular (semidefinite) matrices fall back to an
    eigendecomposition with tiny negative eigenvalues floored at zero.
    """
    cov = _as_matrix(cov)
    if cov.shape[0] != cov.shape[1]:
        raise ValueError(f"covariance must be square, got {cov.shape}")
    cov = 0.5 * (cov + cov.T)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    w, vecs = np.linalg.eigh(cov)
    if w[0] < -neg_tol:
        raise ValueError(f"covariance is indefinite (min eigenvalue {w[0]:.3e})")
    return vecs * np.sqrt(np.clip(w, 0.0, None))


def sample_gaussian(rng: np.random.Generator, mean, cov, size=None) -> np.ndarray:
    """Draw from ``N(mean, cov)``.

    ``size`` adds leading sample dimensions, e.g. ``size=(k,)`` gives a
    ``(k, dim)`` array. A zero covariance returns ``mean`` exactly.
    """
    mean = np.asarray(mean, dtype=np.float64)
    factor = gaussian_factor(cov)
    if factor.shape[0] != mean.shape[-1]:
        raise ValueError("mean and covariance dimensions differ")
    shape = (mean.shape[-1],) if size is None else tuple(np.atleast_1d(size)) + (mean.shape[-1],)
    z = rng.standard_normal(shape)
    return mean + z @ factor.T
