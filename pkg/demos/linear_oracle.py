"""
Covariance propagation against brute force
==========================================

For a linear recurrent network the propagated covariance is exact, so its
trace should sit inside the Monte Carlo error bars at every step. With a
tanh network the estimate is a first-order approximation and drifts.
"""
import numpy as np

from robust_rnn.evaluate import mc_rho_trace
from robust_rnn.model import Activation, RnnParams, forward
from robust_rnn.robustness import NoiseSpec, propagate_covariance

rng = np.random.default_rng(0)
n, d, m, T = 6, 3, 2, 12
A = 0.8 * rng.standard_normal((n, n)) / np.sqrt(n)
B = rng.standard_normal((n, d))
C = rng.standard_normal((m, n))
u = rng.standard_normal((T, d))
noise = NoiseSpec(0.3 * np.eye(d))

for act in (Activation.IDENTITY, Activation.TANH):
    p = RnnParams(A, B, np.zeros(n), C, np.zeros(m), act)
    rho_hat = propagate_covariance(p, forward(p, u), noise).rho_hat
    mc = mc_rho_trace(p, u, noise, 50_000, np.random.default_rng(1))
    print(f"\n{act.value}")
    print(" t   estimate   monte carlo   z")
    for t in range(T):
        z = (rho_hat[t] - mc[t].mean) / mc[t].std_error
        print(f"{t + 1:2d}  {rho_hat[t]:9.4f}  {mc[t].mean:9.4f} +- {mc[t].std_error:.4f}  {z:+.1f}")
