import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gdinfer import gd
from gdinfer.inference import (DegenerateBias, TooFewSamples, bias_estimate,
                               bias_from_information, confidence_intervals, debiased_iterate,
                               gen_error_estimate, half_squared_error, loocv_gen_error,
                               resolve_metric, run_with_inference, sigma_w_hat,
                               signal_strength_onebit, squared_error, variance_estimate,
                               variance_via_gen_error, z_hat)
from gdinfer.onsager import InferenceUnavailable, OnsagerEstimates, omega_hat
from gdinfer.problem import LossSpec, NoiseSpec, ZeroSignalStrength

from builders import make_instance, manual_instance


def first_step(inst, init=None):
    init = np.zeros(inst.n) if init is None else init
    est = OnsagerEstimates(inst)
    traj = gd.run(inst, 1, init, hooks=[est])
    return traj, est


# -- debiasing --------------------------------------------------------------------


@pytest.mark.parametrize("eta", [0.3, 1.0])
@pytest.mark.parametrize("model", ["single_index", "one_bit"])
def test_first_debiased_iterate_is_scaled_back_projection(eta, model):
    inst = make_instance(model=model, eta=eta)
    traj, est = first_step(inst)
    mu_db = debiased_iterate(traj, omega_hat(est.tau_hat))
    np.testing.assert_allclose(mu_db, inst.A.T @ inst.Y / inst.phi, atol=1e-10)


def test_zero_residual_leaves_start_unchanged():
    base = make_instance()
    init = np.random.default_rng(0).standard_normal(base.n)
    inst = manual_instance(base.A, base.A @ init, 0.3)
    traj, est = first_step(inst, init)
    np.testing.assert_allclose(debiased_iterate(traj, omega_hat(est.tau_hat)), init, atol=1e-12)


def test_debiased_iterate_against_explicit_sum():
    inst = make_instance(prox="l1", lam=0.05)
    est = OnsagerEstimates(inst)
    traj = gd.run(inst, 4, np.random.default_rng(1).standard_normal(inst.n), hooks=[est])
    omega = omega_hat(est.tau_hat)
    explicit = traj.iterates[3] + sum(omega[3, s] * traj.etas[s] * inst.A.T @ traj.residuals[s]
                                      for s in range(4))
    np.testing.assert_allclose(debiased_iterate(traj, omega), explicit, atol=1e-12)


# -- variance ---------------------------------------------------------------------


def test_variance_is_zero_without_residuals():
    base = make_instance()
    inst = manual_instance(base.A, np.zeros(base.m), 0.3)
    traj, est = first_step(inst)
    assert variance_estimate(traj, omega_hat(est.tau_hat), inst.phi) == 0.0


def test_first_variance_formula():
    inst = make_instance(loss="pseudo_huber")
    traj, est = first_step(inst, np.random.default_rng(2).standard_normal(inst.n))
    omega = omega_hat(est.tau_hat)
    r = traj.residuals[0]
    expected = omega[0, 0] ** 2 * inst.phi * inst.eta ** 2 * (r @ r) / inst.m
    assert variance_estimate(traj, omega, inst.phi) ** 2 == pytest.approx(expected, rel=1e-12)


def test_first_variance_from_zero_start():
    inst = make_instance()
    traj, est = first_step(inst)
    expected = (inst.Y @ inst.Y) / inst.m / inst.phi
    assert variance_estimate(traj, omega_hat(est.tau_hat), inst.phi) ** 2 == pytest.approx(expected, rel=1e-12)


def test_sigma_w_is_positive_semidefinite():
    inst = make_instance(model="one_bit", loss="logistic")
    traj = gd.run(inst, 6, np.zeros(inst.n))
    assert np.linalg.eigvalsh(sigma_w_hat(traj, inst.phi)).min() >= -1e-12


@pytest.mark.parametrize("E, phi, expected", [(0.0, 1.2, 0.0), (0.6, 1.2, 0.5)])
def test_variance_via_gen_error(E, phi, expected):
    assert variance_via_gen_error(E, phi) == pytest.approx(expected)


def test_squared_loss_variance_equals_previous_gen_error_over_phi():
    inst = make_instance(m=120, n=100)
    _, _, report = run_with_inference(inst, 10, np.random.default_rng(3).standard_normal(inst.n),
                                      metric="squared")
    for t in range(2, 11):
        rec = report[t]
        assert rec.sigma_db ** 2 == pytest.approx(report[t - 1].gen_err / inst.phi, rel=1e-10)
        assert rec.sigma_db_gen == pytest.approx(rec.sigma_db, rel=1e-10)


# -- bias -----------------------------------------------------------------------------


def test_linear_bias_is_one():
    assert bias_estimate("linear") == 1.0


def test_one_bit_bias_at_zero_signal():
    assert bias_estimate("one_bit_squared", signal_strength=0.0) == pytest.approx(2 / np.sqrt(2 * np.pi))
    assert bias_estimate("one_bit_squared", signal_strength=0.0) == pytest.approx(0.79788, abs=1e-5)


def test_one_bit_bias_gaussian_noise():
    b = bias_estimate("one_bit_squared", signal_strength=np.sqrt(5), noise=NoiseSpec("gaussian", 1.0))
    assert b == pytest.approx(2 / np.sqrt(2 * np.pi * 6))


def test_generic_bias_clipped_radicand():
    mu = np.array([1.0, -1.0, 1.0, -1.0])
    assert bias_estimate("generic", mu_db=mu, sigma_db=1.0, signal_strength=2.0) == 0.0


def test_generic_bias_moment_matching():
    mu = np.full(4, 3.0)
    b = bias_estimate("generic", mu_db=mu, sigma_db=np.sqrt(5.0), signal_strength=2.0)
    assert b == pytest.approx(1.0)
    assert bias_estimate("generic", mu_db=mu, sigma_db=np.sqrt(5.0), signal_strength=2.0,
                         sign=-1) == pytest.approx(-1.0)


def test_generic_bias_needs_signal_strength():
    with pytest.raises(ZeroSignalStrength):
        bias_estimate("generic", mu_db=np.ones(3), sigma_db=0.1, signal_strength=0.0)


def test_unknown_bias_mode():
    with pytest.raises(ValueError):
        bias_estimate("quadratic")


@settings(max_examples=200)
@given(st.integers(1, 10), st.integers(0, 2**32 - 1))
def test_bias_from_information_linear_identity(t, seed):
    rng = np.random.default_rng(seed)
    tau = np.tril(rng.standard_normal((t, t)), -1)
    tau[np.diag_indices(t)] = rng.choice([-1, 1], t) * rng.uniform(0.2, 2.0, t)
    delta = -tau.sum(axis=1)
    assert bias_from_information(tau, delta) == pytest.approx(1.0, abs=1e-10)


# -- intervals ----------------------------------------------------------------------


@pytest.mark.parametrize("b, width", [(1.0, 3.91993), (2.0, 1.95996), (-2.0, 1.95996)])
def test_interval_widths(b, width):
    lo, hi = confidence_intervals(np.zeros(3), b, 1.0, 0.05)
    np.testing.assert_allclose(hi - lo, width, atol=1e-5)


def test_point_intervals_with_zero_sigma():
    mu = np.array([1.0, -2.0])
    lo, hi = confidence_intervals(mu, 2.0, 0.0)
    np.testing.assert_array_equal(lo, mu / 2)
    np.testing.assert_array_equal(hi, mu / 2)


def test_degenerate_bias_rejected():
    with pytest.raises(DegenerateBias):
        confidence_intervals(np.zeros(2), 1e-12, 1.0)


# -- generalization error -------------------------------------------------------------


def test_z_hat_with_zero_rho_row():
    inst = make_instance()
    traj = gd.run(inst, 3, np.zeros(inst.n))
    np.testing.assert_array_equal(z_hat(traj, np.zeros((3, 3))), traj.fitted[3])


def test_z_hat_first_step():
    inst = make_instance()
    traj, est = first_step(inst)
    np.testing.assert_allclose(z_hat(traj, est.rho_hat), traj.fitted[1] - inst.eta * inst.Y, atol=1e-12)


def test_z_hat_with_zero_residuals():
    base = make_instance()
    init = np.random.default_rng(4).standard_normal(base.n)
    inst = manual_instance(base.A, base.A @ init, 0.3)
    est = OnsagerEstimates(inst)
    traj = gd.run(inst, 3, init, hooks=[est])
    np.testing.assert_allclose(z_hat(traj, est.rho_hat), traj.fitted[3], atol=1e-12)


def test_gen_error_estimate_examples():
    Y = np.array([1.0, -2.0, 0.5])
    assert gen_error_estimate(Y, Y, squared_error) == 0.0
    assert gen_error_estimate(Y, 0 * Y, lambda z, y: np.full_like(z, 3.5)) == 3.5


def test_resolve_metric():
    inst = make_instance(loss="pseudo_huber")
    assert resolve_metric("squared") is squared_error
    assert resolve_metric("half_squared") is half_squared_error
    assert resolve_metric("loss", inst) == inst.loss.value
    with pytest.raises(ValueError):
        resolve_metric("absolute")


# -- one-bit signal strength ------------------------------------------------------------


def back_projection_with_norm(target, m=1):
    # A^T Y = (a, 0) with Y = ones, so ||A^T Y||^2 / m = a^2 / m
    A = np.zeros((m, 2))
    A[0, 0] = np.sqrt(target * m)
    return A, np.ones(m)


def test_signal_strength_clipped_at_zero():
    A, Y = back_projection_with_norm(1.0)
    assert signal_strength_onebit(A, Y, 1.2) == 0.0


def test_signal_strength_inversion():
    A, Y = back_projection_with_norm(1 + (2 * 1.2 / np.pi) * 0.5)
    assert signal_strength_onebit(A, Y, 1.2) == pytest.approx(1.0)


# -- leave-one-out -------------------------------------------------------------------------


def test_loocv_two_samples_by_hand():
    A = np.array([[1.0, 0.5], [0.2, -1.0]])
    Y = np.array([1.0, 2.0])
    eta = 0.4
    inst = manual_instance(A, Y, eta)
    mu0 = np.array([0.3, -0.1])
    err = 0.0
    for i in range(2):
        j = 1 - i
        r = A[j] @ mu0 - Y[j]
        mu1 = mu0 - eta * A[j] * r
        err += (Y[i] - A[i] @ mu1) ** 2
    assert loocv_gen_error(inst, 1, mu0)[0] == pytest.approx(err / 4, rel=1e-12)


def test_loocv_zero_data():
    base = make_instance(m=12, n=10)
    inst = manual_instance(base.A, np.zeros(12), 0.3)
    np.testing.assert_array_equal(loocv_gen_error(inst, 5, np.zeros(10)), 0.0)


def test_loocv_needs_two_samples():
    with pytest.raises(TooFewSamples):
        loocv_gen_error(manual_instance([[1.0]], [1.0], 0.3), 1, np.zeros(1))


def test_loocv_times_are_cumulative():
    inst = make_instance(m=10, n=10)
    err, times = loocv_gen_error(inst, 4, np.zeros(10), return_times=True)
    assert err.shape == times.shape == (4,)
    assert np.all(np.diff(times) >= 0)


# -- report -----------------------------------------------------------------------------


def test_report_records_every_iteration():
    inst = make_instance(prox="l1", lam=0.05)
    traj, est, report = run_with_inference(inst, 5, np.zeros(inst.n))
    assert len(report) == 5 and [r.t for r in report.records] == [1, 2, 3, 4, 5]
    rec = report[5]
    assert rec.available and rec.b_db == 1.0
    assert np.all(rec.ci_lo <= rec.ci_hi)
    assert rec.tau_diag == est.tau_hat[4, 4]
    assert np.isnan(report[1].sigma_db_gen)


def test_unavailable_inference_is_recorded_or_raised():
    # x + sin x has zero slope and curvature at pi, so the first curvature average vanishes
    loss = LossSpec("single_index_squared", link="x_plus_sin")
    inst = manual_instance(np.ones((4, 1)), [1.0, 2.0, 3.0, 4.0], 0.3, loss=loss)
    init = np.array([np.pi])
    kw = dict(bias_mode="generic", signal_strength=1.0)
    _, _, report = run_with_inference(inst, 1, init, **kw)
    assert not report[1].available and "near-zero" in report[1].reason
    assert np.isfinite(report[1].gen_err)
    with pytest.raises(InferenceUnavailable):
        run_with_inference(inst, 1, init, strict=True, **kw)


def test_known_bias_mode():
    inst = make_instance(model="one_bit", loss="logistic")
    _, _, report = run_with_inference(inst, 2, np.zeros(inst.n), bias_mode="known", known_bias=0.4)
    assert report[2].b_db == 0.4
