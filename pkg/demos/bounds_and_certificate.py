"""
How loose are the norm bounds?
==============================

Clip the recurrent matrix to a few spectral norms and compare the norm-based
bound on the output variance with a Monte Carlo estimate. Below norm 1 the
bound settles to its steady state; above it the bound grows geometrically
and the certificate stops holding.
"""
import numpy as np

from robust_rnn.evaluate import mc_rho_trace
from robust_rnn.linalg import clip_singular_values
from robust_rnn.model import Activation, init_params
from robust_rnn.robustness import NoiseSpec, bound_report, stability_certificate

T = 28
noise = NoiseSpec(np.eye(4))
u = np.random.default_rng(3).standard_normal((T, 4))
base = init_params(16, 4, 3, Activation.RELU, seed=2)

for cap in (0.5, 0.9, 0.99, 1.2):
    A = clip_singular_values(3.0 * base.A, cap)
    p = base.replace(A=A)
    report = bound_report(p, noise, T)
    mc = mc_rho_trace(p, u, noise, 20_000, np.random.default_rng(4))
    cert = stability_certificate(p, noise, T)
    print(
        f"||A|| = {report.norm_a:.2f}: rho_T ~ {mc[-1].mean:8.3f}, basic bound {report.basic[-1]:11.4g}, "
        f"steady state {report.steady_basic:9.4g}, certified {'yes' if cert.certified else 'no'}"
    )
