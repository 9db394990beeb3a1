import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_params, random_psd
from oracles import linear_output_covariance, scalar_linear_rho
from robust_rnn.linalg import clip_singular_values, spectral_norm
from robust_rnn.model import Activation, RnnParams, forward
from robust_rnn.robustness import (
    NoiseSpec,
    bound_report,
    covariance_step,
    propagate_covariance,
    stability_certificate,
    steady_state_basic,
    steady_state_general,
    upper_bound_basic,
    upper_bound_general,
)


def scalar(a=0.5, b_in=1.0, c_out=1.0, act=Activation.IDENTITY, bias=0.0):
    return RnnParams([[a]], [[b_in]], [bias], [[c_out]], [0.0], act)


def unit_noise(d=1):
    return NoiseSpec(np.eye(d))


# covariance_step


def test_step_scalar_identity():
    p = covariance_step(scalar(), np.array([0.3]), np.zeros((1, 1)), np.eye(1))
    assert p[0, 0] == pytest.approx(1.0)


def test_step_dead_relu_gates_everything():
    p = scalar(act=Activation.RELU)
    out = covariance_step(p, np.array([-2.0]), np.array([[5.0]]), np.array([[3.0]]))
    assert out[0, 0] == 0.0


def test_step_noiseless_is_zero(rng):
    p = random_params(rng, 4, 3, 2)
    out = covariance_step(p, rng.standard_normal(4), np.zeros((4, 4)), np.zeros((3, 3)))
    assert not out.any()


def test_step_dimension_mismatch(rng):
    p = random_params(rng, 4, 3, 2)
    with pytest.raises(ValueError):
        covariance_step(p, np.zeros(4), np.zeros((3, 3)), np.eye(3))
    with pytest.raises(ValueError):
        covariance_step(p, np.zeros(4), np.zeros((4, 4)), np.eye(2))


def test_step_is_symmetric(rng):
    p = random_params(rng, 6, 3, 2)
    out = covariance_step(p, rng.standard_normal(6), random_psd(rng, 6), random_psd(rng, 3))
    assert np.array_equal(out, out.T)


# propagate_covariance


def test_propagate_zero_noise(rng):
    p = random_params(rng, 4, 3, 2)
    traj = forward(p, rng.standard_normal((5, 3)))
    cov = propagate_covariance(p, traj, NoiseSpec(np.zeros((3, 3))))
    assert not cov.P.any() and not cov.R.any() and not cov.rho_hat.any()


def test_propagate_scalar_geometric():
    traj = forward(scalar(), np.zeros((3, 1)))
    cov = propagate_covariance(scalar(), traj, unit_noise())
    np.testing.assert_allclose(cov.rho_hat, [1.0, 1.25, 1.3125], rtol=1e-14)
    np.testing.assert_allclose(cov.rho_hat, scalar_linear_rho(0.5, 1.0, 1.0, 1.0, 3), rtol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_propagate_exact_for_linear_maps(seed):
    rng = np.random.default_rng(seed)
    n, d, m, T = 5, 3, 4, 12
    p = random_params(rng, n, d, m, Activation.IDENTITY, scale=0.9)
    sigmas = np.stack([random_psd(rng, d) for _ in range(T)])
    gamma = random_psd(rng, n, 0.5)
    traj = forward(p, rng.standard_normal((T, d)))
    cov = propagate_covariance(p, traj, NoiseSpec(sigmas, gamma))
    expected = linear_output_covariance(p.A, p.B, p.C, sigmas, gamma)
    scale = np.max(np.abs(expected))
    np.testing.assert_allclose(cov.R, expected, rtol=1e-10, atol=1e-10 * scale)
    np.testing.assert_allclose(cov.rho_hat, np.trace(expected, axis1=1, axis2=2), rtol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(list(Activation)))
def test_propagate_preserves_psd(seed, act):
    rng = np.random.default_rng(seed)
    p = random_params(rng, 6, 3, 2, act, scale=1.2)
    traj = forward(p, rng.standard_normal((10, 3)))
    cov = propagate_covariance(p, traj, NoiseSpec(random_psd(rng, 3), random_psd(rng, 6)), floor=False)
    for P in cov.P:
        assert np.array_equal(P, P.T)
        assert np.linalg.eigvalsh(P)[0] >= -1e-9 * max(1.0, np.abs(P).max())
    assert np.all(cov.rho_hat >= 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 2.0))
def test_rho_hat_monotone_in_noise(seed, eps):
    rng = np.random.default_rng(seed)
    p = random_params(rng, 5, 3, 2, Activation.TANH)
    traj = forward(p, rng.standard_normal((8, 3)))
    sigma = random_psd(rng, 3)
    lo = propagate_covariance(p, traj, NoiseSpec(sigma)).rho_hat
    hi = propagate_covariance(p, traj, NoiseSpec(sigma + eps * np.eye(3))).rho_hat
    assert np.all(hi >= lo - 1e-12 * np.maximum(1.0, lo))


def test_trace_to_csv():
    cov = propagate_covariance(scalar(), forward(scalar(), np.zeros((3, 1))), unit_noise())
    lines = cov.to_csv().strip().splitlines()
    assert lines[0] == "t,rho_hat,trace_R,bias,trace_P"
    assert lines[3].startswith("3,1.3125,1.3125,0.0,")


def test_noise_spec_rejects_indefinite():
    with pytest.raises(ValueError):
        NoiseSpec(np.diag([1.0, -1.0]))
    with pytest.raises(ValueError):
        NoiseSpec(np.eye(2), -np.eye(3))


def test_noise_spec_time_varying_index():
    spec = NoiseSpec(np.stack([np.eye(2), 2 * np.eye(2)]))
    assert spec.trace_sigma(2) == 4.0
    with pytest.raises(IndexError):
        spec.sigma(3)


# bounds


def test_general_bound_single_term():
    noise = NoiseSpec(np.diag([0.5, 1.5]))
    for t in (1, 4, 50):
        assert upper_bound_general(0.0, 1.3, 0.7, noise, t) == pytest.approx(2 * 0.7**2 * 1.3**2 * 2.0)


def test_general_bound_zero_noise():
    assert upper_bound_general(0.9, 1.0, 1.0, NoiseSpec(np.zeros((2, 2))), 10) == 0.0


def test_general_bound_geometric_limit():
    noise = unit_noise()
    assert upper_bound_general(0.5, 1.0, 1.0, noise, 200) == pytest.approx(4.0, rel=1e-12)
    assert steady_state_general(0.5, 1.0, 1.0, 1.0) == pytest.approx(4.0)
    assert steady_state_general(0.8, 1.0, 1.0, 1.0) == math.inf


def test_general_bound_printed_form():
    noise = unit_noise()
    assert upper_bound_general(0.0, 3.0, 1.0, noise, 5, printed_form=True) == pytest.approx(3.0)
    assert upper_bound_general(0.0, 3.0, 1.0, noise, 5) == pytest.approx(18.0)


def test_general_bound_overflow_is_inf():
    noise = unit_noise()
    assert upper_bound_general(10.0, 1.0, 1.0, noise, 500) == math.inf
    assert upper_bound_general(10.0, 1.0, 1.0, noise, 10) == pytest.approx(
        2 * sum(200.0**i for i in range(10)), rel=1e-12
    )


def test_basic_bound_zero_a():
    p = RnnParams(np.zeros((2, 2)), 2 * np.eye(2), np.zeros(2), 3 * np.eye(2), np.zeros(2), Activation.RELU)
    noise = NoiseSpec(np.diag([1.0, 0.5]))
    for t in (1, 7):
        assert upper_bound_basic(p, noise, t) == pytest.approx(9 * 4 * 1.5)


def test_basic_bound_geometric_limit():
    p = scalar(a=0.5, act=Activation.RELU)
    assert upper_bound_basic(p, unit_noise(), 200) == pytest.approx(4 / 3, rel=1e-12)
    assert steady_state_basic(0.5, 1.0, 1.0, 1.0) == pytest.approx(4 / 3)
    assert steady_state_basic(1.0, 1.0, 1.0, 1.0) == math.inf


def test_basic_bound_with_initial_spread():
    p = scalar(a=0.5, act=Activation.TANH)
    noise = NoiseSpec(np.eye(1), 2 * np.eye(1))
    # ||A||^{2t} Tr(Gamma) + sum_{i<t} ||A||^{2i}
    assert upper_bound_basic(p, noise, 2) == pytest.approx(0.0625 * 2 + 1.25)


def test_basic_bound_uses_matching_sigma_index():
    p = scalar(a=0.5, act=Activation.IDENTITY)
    noise = NoiseSpec(np.array([[[1.0]], [[0.0]], [[0.0]]]))
    # only w_1 is noisy; its effect at t=3 has passed through A twice
    assert upper_bound_basic(p, noise, 3) == pytest.approx(0.0625)
    cov = propagate_covariance(p, forward(p, np.zeros((3, 1))), noise)
    assert cov.rho_hat[2] == pytest.approx(0.0625)


@pytest.mark.parametrize("seed", range(100))
def test_basic_bound_dominates_estimate(seed):
    rng = np.random.default_rng(1000 + seed)
    act = list(Activation)[seed % 3]
    p = random_params(rng, 5, 3, 2, act, scale=1.5)
    p = p.replace(A=clip_singular_values(p.A, 0.95))
    noise = NoiseSpec(random_psd(rng, 3))
    rho = propagate_covariance(p, forward(p, rng.standard_normal((15, 3))), noise).rho_hat
    bounds = np.array([upper_bound_basic(p, noise, t) for t in range(1, 16)])
    assert np.all(rho <= bounds * (1 + 1e-9) + 1e-12)


def test_general_bound_dominates_basic(rng):
    p = random_params(rng, 5, 3, 2, Activation.RELU)
    report = bound_report(p, unit_noise(3), 20)
    assert np.all(report.general >= report.basic * (1 - 1e-12))


def test_bound_report_fields(rng):
    p = random_params(rng, 5, 3, 2, Activation.TANH)
    p = p.replace(A=clip_singular_values(p.A, 0.6))
    report = bound_report(p, unit_noise(3), 40)
    assert report.specnorm_a_lt_1 and report.lambda_lt_inv_sqrt2
    assert report.steady_basic >= report.basic[-1]
    assert report.to_csv().splitlines()[0] == "t,bound_general,bound_basic"
    assert len(report.to_csv().strip().splitlines()) == 41


# stability certificate


def test_certificate_zero_a():
    p = RnnParams(np.zeros((3, 3)), np.ones((3, 2)), np.zeros(3), np.ones((2, 3)), np.zeros(2))
    assert stability_certificate(p, unit_noise(2), 10)


def test_certificate_zero_model_falls_back_to_direct_check():
    cert = stability_certificate(RnnParams.zeros(3, 2, 2), unit_noise(2), 10)
    assert cert.certified and cert.specnorm_a_lt_1 and cert.reference == 0.0


def test_certificate_unstable():
    p = scalar(a=2.0)
    cert = stability_certificate(p, unit_noise(), 30)
    assert not cert and not cert.specnorm_a_lt_1
    assert stability_certificate(p, unit_noise(), 1).certified is False


@pytest.mark.parametrize("seed", range(5))
def test_certificate_after_clipping(seed):
    rng = np.random.default_rng(seed)
    p = random_params(rng, 6, 3, 2, scale=2.0)
    p = p.replace(A=clip_singular_values(p.A, 0.99))
    cert = stability_certificate(p, unit_noise(3), 30)
    assert cert.certified and cert.specnorm_a_lt_1 == (spectral_norm(p.A) < 1)


def test_certificate_rejects_time_varying():
    with pytest.raises(ValueError):
        stability_certificate(scalar(), NoiseSpec(np.ones((2, 1, 1))), 2)
