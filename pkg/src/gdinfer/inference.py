"""Debiased iterates, variance and bias estimates, confidence intervals and
generalization-error estimates built from a trajectory and its Onsager estimates."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import gd
from .numerics import std_normal_quantile
from .onsager import InferenceUnavailable, OnsagerEstimates, omega_hat
from .problem import NoiseSpec, ProblemInstance, ZeroSignalStrength, expected_normal_density

BIAS_TOL = 1e-8


class DegenerateBias(ArithmeticError):
    pass


class TooFewSamples(ValueError):
    pass


def debiased_iterate(traj: gd.Trajectory, omega: np.ndarray) -> np.ndarray:
    """mu^(t-1) + sum_s omega[t, s] * eta_{s-1} * A^T r^(s), with t = dim(omega)."""
    t = omega.shape[0]
    coef = omega[t - 1] * np.asarray(traj.etas[:t])
    return traj.iterates[t - 1] + coef @ traj.back_grad_matrix(t)


def sigma_w_hat(traj: gd.Trajectory, phi: float, t: int | None = None) -> np.ndarray:
    t = traj.t if t is None else t
    R = traj.residual_matrix(t)
    eta = np.asarray(traj.etas[:t])
    return phi * np.outer(eta, eta) * (R @ R.T) / R.shape[1]


def variance_estimate(traj: gd.Trajectory, omega: np.ndarray, phi: float) -> float:
    """sigma_db_hat: quadratic form of the last row of omega in Sigma_W_hat."""
    t = omega.shape[0]
    w = omega[t - 1]
    v = float(w @ sigma_w_hat(traj, phi, t) @ w)
    return float(np.sqrt(max(v, 0.0)))


def variance_via_gen_error(gen_err_prev: float, phi: float) -> float:
    """Squared-loss shortcut: variance equals (squared-error generalization error) / phi."""
    return gen_err_prev / phi


def bias_estimate(mode: str, *, mu_db=None, sigma_db: float | None = None,
                  signal_strength: float | None = None, noise: NoiseSpec | None = None,
                  sign: float = 1.0) -> float:
    """Scale b_db multiplying mu* in the law of the debiased iterate.

    modes: ``linear`` (exactly 1), ``generic`` (moment matching against a
    known or estimated signal strength), ``one_bit_squared`` (twice the
    expected N(0, sigma^2) density at the noise).
    """
    if mode == "linear":
        return 1.0
    if mode == "generic":
        if signal_strength is None or not signal_strength > 0:
            raise ZeroSignalStrength("generic bias estimate needs a positive signal strength")
        mu_db = np.asarray(mu_db)
        rad = mu_db @ mu_db / mu_db.size - sigma_db ** 2
        return sign * float(np.sqrt(max(rad, 0.0))) / signal_strength
    if mode == "one_bit_squared":
        noise = noise or NoiseSpec("gaussian", 1.0)
        return 2.0 * expected_normal_density(noise, signal_strength or 0.0)
    raise ValueError(f"unknown bias mode {mode!r}")


def bias_from_information(tau: np.ndarray, delta: np.ndarray) -> float:
    """b_db = -(tau^{-1} delta)_t from Onsager matrix tau^[t] and information parameters delta_1..t."""
    tau = np.atleast_2d(np.asarray(tau, dtype=float))
    t = tau.shape[0]
    return -float(omega_hat(tau, iteration=t)[t - 1] @ np.asarray(delta, dtype=float)[:t])


def confidence_intervals(mu_db: np.ndarray, b: float, sigma: float, alpha: float = 0.05):
    """Per-coordinate intervals for mu*: mu_db / b -/+ sigma z_{alpha/2} / |b|."""
    if not abs(b) >= BIAS_TOL:
        raise DegenerateBias(f"bias estimate {b!r} too close to zero")
    half = sigma * std_normal_quantile(alpha / 2) / abs(b)
    center = np.asarray(mu_db) / b
    return center - half, center + half


def z_hat(traj: gd.Trajectory, rho: np.ndarray) -> np.ndarray:
    """A mu^(t) + sum_s eta_{s-1} rho[t, s] r^(s), with t = dim(rho)."""
    t = rho.shape[0]
    coef = np.asarray(traj.etas[:t]) * rho[t - 1]
    return traj.fitted[t] + coef @ traj.residual_matrix(t)


def squared_error(x, y):
    return (x - y) ** 2


def half_squared_error(x, y):
    return 0.5 * (x - y) ** 2


def resolve_metric(name: str | Callable, inst: ProblemInstance | None = None) -> Callable:
    if callable(name):
        return name
    if name == "squared":
        return squared_error
    if name == "half_squared":
        return half_squared_error
    if name == "loss":
        return inst.loss.value
    raise ValueError(f"unknown generalization metric {name!r}")


def gen_error_estimate(Z: np.ndarray, Y: np.ndarray, H: Callable = squared_error) -> float:
    return float(np.mean(H(Z, Y)))


def signal_strength_onebit(A: np.ndarray, Y: np.ndarray, phi: float) -> float:
    """Plug-in sigma_mu* for sign observations with N(0, 1) noise."""
    m = A.shape[0]
    g = A.T @ Y
    q = np.pi / (2 * phi) * max(g @ g / m - 1.0, 0.0)
    q = min(q, 1.0 - 1e-6)
    return float(np.sqrt(q / (1 - q)))


def loocv_gen_error(inst: ProblemInstance, T: int, init: np.ndarray, return_times: bool = False):
    """Leave-one-out estimate (1/2m) sum_i (Y_i - A_i mu_[-i]^(t))^2 for t = 1..T.

    Each of the m reruns is a full GD run with one row masked out. With
    ``return_times`` also returns cumulative wall time after each iteration,
    summed over reruns.
    """
    m = inst.m
    if m < 2:
        raise TooFewSamples("leave-one-out needs at least two samples")
    err = np.zeros(T)
    elapsed = np.zeros(T)
    w = np.ones(m)
    for i in range(m):
        w[i] = 0.0
        t0 = time.perf_counter()
        traj = gd.start(inst, init)
        for t in range(T):
            gd.gd_step(traj, inst, weights=w)
            err[t] += (inst.Y[i] - traj.fitted[-1][i]) ** 2
            t1 = time.perf_counter()
            elapsed[t] += t1 - t0
            t0 = t1
        w[i] = 1.0
    err /= 2 * m
    if return_times:
        return err, np.cumsum(elapsed)
    return err


# ---------------------------------------------------------------------------
# per-iteration report


@dataclass
class InferenceRecord:
    t: int
    available: bool
    mu_db: np.ndarray | None = None
    sigma_db: float = np.nan
    sigma_db_gen: float = np.nan
    b_db: float = np.nan
    ci_lo: np.ndarray | None = None
    ci_hi: np.ndarray | None = None
    z_hat: np.ndarray | None = None
    gen_err: float = np.nan
    gen_err_sq: float = np.nan
    tau_diag: float = np.nan
    rho_diag: float = np.nan
    reason: str = ""

    @property
    def ci_len(self) -> float:
        if self.ci_lo is None:
            return np.nan
        return float(np.mean(self.ci_hi - self.ci_lo))


@dataclass
class InferenceReport:
    records: list[InferenceRecord] = field(default_factory=list)

    def __getitem__(self, t: int) -> InferenceRecord:
        return self.records[t - 1]

    def __len__(self):
        return len(self.records)


class Inferencer:
    """GD hook producing one InferenceRecord per step.

    bias_mode: linear | generic | one_bit_squared | known (``known_bias``).
    metric: H used for the generalization-error estimate.
    """

    def __init__(self, inst: ProblemInstance, estimates: OnsagerEstimates, *, alpha: float = 0.05,
                 bias_mode: str = "linear", signal_strength: float | None = None,
                 known_bias: float | None = None, metric="loss", keep_vectors: bool = True,
                 strict: bool = False):
        self.inst = inst
        self.est = estimates
        self.alpha = alpha
        self.bias_mode = bias_mode
        self.signal_strength = signal_strength
        self.known_bias = known_bias
        self.H = resolve_metric(metric, inst)
        self.keep_vectors = keep_vectors
        self.strict = strict
        self.report = InferenceReport()

    def _bias(self, mu_db, sigma):
        if self.bias_mode == "known":
            return float(self.known_bias)
        return bias_estimate(self.bias_mode, mu_db=mu_db, sigma_db=sigma,
                             signal_strength=self.signal_strength, noise=self.inst.noise)

    def __call__(self, traj: gd.Trajectory, inst: ProblemInstance | None = None) -> None:
        t = traj.t
        if self.est.t != t:
            self.est.update(traj)
        tau, rho = self.est.tau_hat, self.est.rho_hat
        rec = InferenceRecord(t=t, available=True, tau_diag=tau[t - 1, t - 1], rho_diag=rho[t - 1, t - 1])
        Z = z_hat(traj, rho)
        Y = self.inst.Y
        rec.gen_err = gen_error_estimate(Z, Y, self.H)
        rec.gen_err_sq = gen_error_estimate(Z, Y, squared_error)
        prev = self.report.records[-1].gen_err_sq if self.report.records else np.nan
        rec.sigma_db_gen = np.sqrt(max(variance_via_gen_error(prev, self.inst.phi), 0.0)) if t > 1 else np.nan
        try:
            omega = omega_hat(tau, iteration=t)
            mu_db = debiased_iterate(traj, omega)
            rec.sigma_db = variance_estimate(traj, omega, self.inst.phi)
            rec.b_db = self._bias(mu_db, rec.sigma_db)
            lo, hi = confidence_intervals(mu_db, rec.b_db, rec.sigma_db, self.alpha)
            if self.keep_vectors:
                rec.mu_db, rec.ci_lo, rec.ci_hi = mu_db, lo, hi
            else:
                rec.mu_db = mu_db[:1]
                rec.ci_lo, rec.ci_hi = lo, hi
        except (InferenceUnavailable, DegenerateBias, ZeroSignalStrength) as exc:
            if self.strict:
                raise
            rec.available = False
            rec.reason = str(exc)
        if self.keep_vectors:
            rec.z_hat = Z
        self.report.records.append(rec)


def run_with_inference(inst: ProblemInstance, T: int, init: np.ndarray, **kwargs):
    """GD with the Onsager estimator and inference hook attached."""
    est = OnsagerEstimates(inst, T)
    inf = Inferencer(inst, est, **kwargs)
    traj = gd.run(inst, T, init, hooks=[est, inf])
    return traj, est, inf.report
