"""Monte Carlo state evolution for proximal gradient descent.

The oracle tracks two persistent Gaussian sample clouds:

* z-side: draws of (z0, z1, ..., z_t) paired with a sample index k, hence a
  noise value xi_k and a label y = F(z0, xi_k);
* w-side: draws of (w1, ..., w_t) paired with a coordinate l, hence mu*_l
  and mu0_l.

Both covariances are Gram matrices of sample histories (Omega values on the
w-cloud give Sigma_Z, Upsilon values on the z-cloud give Sigma_W), so their
Cholesky factors grow one row at a time by orthogonalizing the newest
history column. Earlier columns of the clouds never change. Indices are stratified (k = i mod m, l = i mod n), so
averages over the finite populations are exact in the index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .inference import bias_from_information
from .numerics import GramFactor, RngStream, RowBuffer, pad_corner, resolvent_last_row, tri_inverse
from .onsager import InferenceUnavailable, omega_hat, shift_right
from .problem import (LossSpec, ModelSpec, NoiseSpec, ProblemInstance, ProxSpec,
                      ZeroSignalStrength, expected_normal_density, noise_second_moment, step_size)

DEFAULT_SAMPLES = 100_000


class CovarianceProjectionFailed(ArithmeticError):
    pass


@dataclass
class SEState:
    t: int
    sigma_z: np.ndarray  # (t+2) x (t+2), indices 0..t+1
    sigma_w: np.ndarray  # t x t
    tau: np.ndarray
    rho: np.ndarray
    delta: np.ndarray
    N: int


def _mean_se(x: np.ndarray, axis=0):
    n = x.shape[axis]
    return x.mean(axis=axis), x.std(axis=axis, ddof=1) / np.sqrt(n)


def theta_upsilon_eval(z: np.ndarray, y: np.ndarray, rho: np.ndarray, loss: LossSpec, eta):
    """Evaluate Theta_s, Upsilon_s (s = 1..t) and the Jacobian dUpsilon/dz.

    z: (N, t+1) columns z0..z_t; y: (N,) labels; rho: (t-1) x (t-1).
    Returns Theta (N, t), Upsilon (N, t) and J (N, t, t) with
    J[i, r, s] = d Upsilon_r / d z_s, obtained from one dense solve per sample.
    """
    N, t = z.shape[0], z.shape[1] - 1
    theta = np.zeros((N, t))
    ups = np.zeros((N, t))
    curv = np.zeros((N, t))
    for s in range(t):
        theta[:, s] = z[:, s + 1] + (ups[:, :s] @ rho[s - 1, :s] if s else 0.0)
        e = step_size(eta, s)
        ups[:, s] = -e * loss.d1(theta[:, s], y)
        curv[:, s] = -e * loss.d11(theta[:, s], y)
    O = pad_corner(rho)
    I = np.eye(t)
    J = np.empty((N, t, t))
    for i in range(N):
        L = np.diag(curv[i])
        J[i] = np.linalg.solve(I - L @ O, L)
    return theta, ups, J


def delta_model_specific(model: ModelSpec, loss: LossSpec, tau_row: np.ndarray,
                         signal_strength: float | None = None,
                         noise: NoiseSpec | None = None, xi: np.ndarray | None = None):
    """Closed-form information parameter where one exists, else None.

    Linear model with a loss depending on x - y only: -sum_s tau_{t,s}.
    Sign observations fitted with squared loss: -2 E g_sigma(xi) sum_s tau_{t,s},
    with the expectation over ``xi`` values if given, else over ``noise``.
    """
    tau_row = np.asarray(tau_row, dtype=float)
    if model.is_linear and (loss.kind in ("squared", "pseudo_huber")
                            or (loss.kind == "single_index_squared" and loss.link == "identity")):
        return -float(tau_row.sum())
    if model.kind == "one_bit" and loss.kind == "squared":
        if signal_strength is None or not signal_strength > 0:
            raise ZeroSignalStrength("one-bit information parameter needs a positive signal strength")
        return -2.0 * mean_normal_density(signal_strength, noise, xi) * float(tau_row.sum())
    return None


def mean_normal_density(sigma: float, noise: NoiseSpec | None = None, xi: np.ndarray | None = None) -> float:
    """E g_sigma(xi): over the given xi values, or in closed form / quadrature over ``noise``."""
    if xi is not None:
        return float(np.mean(np.exp(-0.5 * (xi / sigma) ** 2)) / (sigma * np.sqrt(2 * np.pi)))
    return expected_normal_density(noise or NoiseSpec("gaussian", 1.0), sigma)


class StateEvolution:
    """Oracle state evolution, advanced one iteration at a time.

    mu_star, mu0 define the coordinate population; ``xi`` (length m) fixes the
    noise population, otherwise each z-sample draws fresh noise from ``noise``.
    """

    def __init__(self, *, loss: LossSpec, model: ModelSpec, prox: ProxSpec, eta,
                 m: int, n: int, mu_star: np.ndarray, mu0: np.ndarray,
                 noise: NoiseSpec | None = None, xi: np.ndarray | None = None,
                 N: int = DEFAULT_SAMPLES, rng: RngStream | None = None,
                 delta_route: str = "auto"):
        self.loss, self.model, self.prox, self.eta = loss, model, prox, eta
        self.m, self.n, self.phi = m, n, m / n
        self.noise = noise or NoiseSpec("gaussian", 1.0)
        self.delta_route = delta_route
        rng = rng or RngStream(0)
        self._zrng = rng.child(0).generator
        self._wrng = rng.child(1).generator
        mu_star = np.asarray(mu_star, dtype=float)
        mu0 = np.asarray(mu0, dtype=float)
        if mu_star.shape != (n,) or mu0.shape != (n,):
            raise ValueError("mu_star and mu0 must have length n")

        self.Nz = m * -(-N // m)
        self.Nw = n * -(-N // n)
        if xi is not None:
            xi = np.asarray(xi, dtype=float)
            self.xi = np.tile(xi, self.Nz // m)
            self.noise_var = float(np.mean(xi ** 2))
            self._xi_pop = xi
        else:
            self.xi = self.noise.sample(self.Nz, rng.child(2))
            self.noise_var = noise_second_moment(self.noise)
            self._xi_pop = None
        self.mu_star_w = np.tile(mu_star, self.Nw // n)
        self.mu0_w = np.tile(mu0, self.Nw // n)
        self.sigma_star2 = float(mu_star @ mu_star / n)

        # Sigma_Z^[1] is exact: the w-cloud tiles the coordinate population
        s01 = float(mu_star @ mu0 / n)
        s11 = float(mu0 @ mu0 / n)
        self.sigma_z = np.array([[self.sigma_star2, s01], [s01, s11]])
        self._gz = GramFactor(self.Nw)
        self._gz.append(self.mu_star_w)
        self._gz.append(self.mu0_w)
        self._ez = RowBuffer(self.Nz)  # innovations of the z-cloud, one row per column of Sigma_Z
        self._ez.append(self._zrng.standard_normal(self.Nz))
        self._ez.append(self._zrng.standard_normal(self.Nz))
        self.z0 = self._z_column(0)
        self._z_next = self._z_column(1)
        self.y = model.labels(self.z0, self.xi)

        self.t = 0
        self.tau = np.zeros((0, 0))
        self.rho = np.zeros((0, 0))
        self.tau_se = np.zeros((0, 0))
        self.rho_se = np.zeros((0, 0))
        self.delta = np.zeros(0)
        self.delta_ibp = np.zeros(0)
        self.delta_closed = np.zeros(0)
        self.sigma_w = np.zeros((0, 0))
        self.sigma_w_se = np.zeros((0, 0))
        self.tau_diag_direct = np.zeros(0)  # -phi eta E d11(Theta_s, y)
        self.tau_diag_direct_se = np.zeros(0)
        self.gen_err = []  # oracle generalization error at t (uses z_{t+1})
        self.rho_prev_for_closed = []  # rho^[t-1] used at iteration t
        # per-sample histories, one row per iteration
        self._ups = RowBuffer(self.Nz)
        self._curv = RowBuffer(1 if loss.constant_curvature else self.Nz)
        self._gw = GramFactor(self.Nz)
        self._ew = RowBuffer(self.Nw)
        self._omega = RowBuffer(self.Nw)  # Omega_{-1} = mu*, Omega_0 = mu0, Omega_1, ...
        self._omega.append(self.mu_star_w)
        self._omega.append(self.mu0_w)
        self._pderiv = RowBuffer(1 if prox.kind == "identity" else self.Nw)
        self._curv_shared = loss.constant_curvature
        self._prox_shared = prox.kind == "identity"

    @classmethod
    def from_instance(cls, inst: ProblemInstance, mu0: np.ndarray, *, N: int = DEFAULT_SAMPLES,
                      rng: RngStream | None = None, fresh_noise: bool = False, **kw):
        return cls(loss=inst.loss, model=inst.model, prox=inst.prox, eta=inst.eta, m=inst.m, n=inst.n,
                   mu_star=inst.mu_star, mu0=mu0, noise=inst.noise,
                   xi=None if fresh_noise else inst.xi, N=N, rng=rng, **kw)

    # -- helpers --------------------------------------------------------------

    def _z_column(self, s: int) -> np.ndarray:
        return self._gz.L[s, :s + 1] @ self._ez.view(s + 1)

    @staticmethod
    def _append_row(M: np.ndarray, row: np.ndarray) -> np.ndarray:
        t = M.shape[0] + 1
        out = np.zeros((t, t))
        out[:t - 1, :t - 1] = M
        out[t - 1, :len(row)] = row
        return out

    @staticmethod
    def _append_sym(M: np.ndarray, row: np.ndarray) -> np.ndarray:
        t = M.shape[0] + 1
        out = np.zeros((t, t))
        out[:t - 1, :t - 1] = M
        out[t - 1, :] = row
        out[:, t - 1] = row
        return out

    @property
    def state(self) -> SEState:
        return SEState(self.t, self.sigma_z.copy(), self.sigma_w.copy(), self.tau.copy(),
                       self.rho.copy(), self.delta.copy(), self.Nz)

    # -- one iteration ----------------------------------------------------------

    def advance(self) -> SEState:
        t = self.t + 1
        eta = step_size(self.eta, t - 1)
        phi = self.phi

        # (S1) Theta_t, Upsilon_t on the z-cloud
        zt = self._z_next
        theta = zt + self.rho[t - 2, :t - 1] @ self._ups.view() if t > 1 else zt.copy()
        ups = -eta * self.loss.d1(theta, self.y)
        curv_full = -eta * self.loss.d11(theta, self.y)
        self._ups.append(ups)
        self._curv.append(curv_full[:1] if self._curv_shared else curv_full)

        # tau row t
        rows = resolvent_last_row(self._curv.view().T, pad_corner(self.rho))
        tau_row, tau_row_se = _mean_se(rows) if rows.shape[0] > 1 else (rows[0], np.zeros(t))
        tau_row, tau_row_se = phi * tau_row, phi * tau_row_se
        self.tau = self._append_row(self.tau, tau_row)
        self.tau_se = self._append_row(self.tau_se, tau_row_se)
        d_mean, d_se = _mean_se(curv_full) if curv_full.size > 1 else (curv_full.mean(), 0.0)
        self.tau_diag_direct = np.append(self.tau_diag_direct, phi * d_mean)
        self.tau_diag_direct_se = np.append(self.tau_diag_direct_se, phi * d_se)

        # information parameter
        dl_ibp = np.nan
        if self.sigma_star2 > 0:
            corr = tau_row @ self.sigma_z[0, 1:t + 1]
            dl_ibp = phi / self.sigma_star2 * (np.mean(self.z0 * ups) - corr / phi)
        dl_closed = None
        if self.delta_route != "ibp" and self.sigma_star2 > 0:
            dl_closed = delta_model_specific(self.model, self.loss, tau_row, np.sqrt(self.sigma_star2),
                                             self.noise, self._xi_pop)
        if dl_closed is not None:
            dl = dl_closed
        elif self.sigma_star2 > 0:
            dl = dl_ibp
        else:
            dl = 0.0  # mu* = 0: delta multiplies a zero vector
        self.delta = np.append(self.delta, dl)
        self.delta_ibp = np.append(self.delta_ibp, dl_ibp)
        self.delta_closed = np.append(self.delta_closed, np.nan if dl_closed is None else dl_closed)

        # (S2) Sigma_W row t
        prods = self._ups.view() * ups
        sw_row, sw_se = _mean_se(prods, axis=1)
        sw_row, sw_se = phi * sw_row, phi * sw_se
        self.sigma_w = self._append_sym(self.sigma_w, sw_row)
        self.sigma_w_se = self._append_sym(self.sigma_w_se, sw_se)
        cw_row = self._gw.append(np.sqrt(phi) * ups)
        self._ew.append(self._wrng.standard_normal(self.Nw))
        wt = cw_row @ self._ew.view()

        # (S3) Delta_t and Omega_t on the w-cloud
        coef = tau_row.copy()
        coef[t - 1] += 1.0
        delta_in = wt + dl * self.mu_star_w + coef @ self._omega.view()[1:]  # Omega_{s-1}, s = 1..t
        omega_t = self.prox.apply(delta_in, eta)
        p = self.prox.deriv(delta_in[:1] if self._prox_shared else delta_in, eta)
        self._pderiv.append(p)
        self._omega.append(omega_t)

        # rho row t
        rows = resolvent_last_row(self._pderiv.view().T, shift_right(self.tau + np.eye(t)))
        rho_row, rho_row_se = _mean_se(rows) if rows.shape[0] > 1 else (rows[0], np.zeros(t))
        self.rho_prev_for_closed.append(self.rho.copy())
        self.rho = self._append_row(self.rho, rho_row)
        self.rho_se = self._append_row(self.rho_se, rho_row_se)

        # Sigma_Z row t+1: E Omega_t Omega_{s-1}, s = 0..t+1
        sz_row = self._omega.view() @ omega_t / self.Nw
        self.sigma_z = self._append_sym(self.sigma_z, sz_row)
        self._gz.append(omega_t)
        if not np.all(np.isfinite(self._gz.L[-1])):
            raise CovarianceProjectionFailed(f"non-finite covariance row at iteration {t}")
        self._ez.append(self._zrng.standard_normal(self.Nz))
        self._z_next = self._z_column(t + 1)

        self.t = t
        return self.state

    def run(self, T: int) -> "StateEvolution":
        while self.t < T:
            self.advance()
        return self

    # -- oracle outputs ---------------------------------------------------------

    def oracle_debias_params(self, t: int | None = None):
        """(b_db, sigma_db) at iteration t from omega = tau^{-1}."""
        t = self.t if t is None else t
        omega = omega_hat(self.tau[:t, :t], iteration=t)
        b = bias_from_information(self.tau[:t, :t], self.delta[:t])
        v = float(omega[t - 1] @ self.sigma_w[:t, :t] @ omega[t - 1])
        return b, float(np.sqrt(max(v, 0.0)))

    def sigma_db_sq_mc(self, t: int | None = None):
        """sigma_db^2 as a per-sample mean, with its Monte Carlo standard error."""
        t = self.t if t is None else t
        omega = omega_hat(self.tau[:t, :t], iteration=t)
        u = omega[t - 1] @ self._ups.view(t)
        mean, se = _mean_se(u * u)
        return self.phi * mean, self.phi * se

    def oracle_gen_error(self, t: int | None = None, H=None) -> float:
        """E H(z_{t+1}, F(z0, xi)); default H is the squared error."""
        t = self.t if t is None else t
        if t > self.t:
            raise ValueError(f"state only advanced to {self.t}")
        z = self._z_column(t + 1)
        H = H or (lambda x, y: (x - y) ** 2)
        return float(np.mean(H(z, self.y)))

    # -- closed forms for the linear model with squared loss ---------------------

    def _linear_checks(self, t: int):
        if not (self.model.is_linear and self.loss.constant_curvature and self.loss.kind == "squared"):
            raise ValueError("closed forms need the linear model with squared loss")
        eta = step_size(self.eta, 0)
        M = np.eye(t) + eta * pad_corner(self.rho_prev_for_closed[t - 1])
        return eta, M

    def omega_closed(self, t: int) -> np.ndarray:
        eta, M = self._linear_checks(t)
        return -M / (self.phi * eta)

    def sigma_e(self, t: int) -> np.ndarray:
        S = self.sigma_z
        idx = np.arange(1, t + 1)
        return (S[np.ix_(idx, idx)] - S[idx, 0][:, None] - S[0, idx][None, :] + S[0, 0]
                + self.noise_var)

    def sigma_w_closed(self, t: int) -> np.ndarray:
        eta, M = self._linear_checks(t)
        Minv = tri_inverse(M)
        return self.phi * eta ** 2 * Minv @ self.sigma_e(t) @ Minv.T

    def sigma_db_sq_closed(self, t: int) -> float:
        self._linear_checks(t)
        return self.sigma_e(t)[t - 1, t - 1] / self.phi


def oracle_debias_params(state: SEState, t: int | None = None):
    """(b_db, sigma_db) from a state snapshot."""
    t = state.t if t is None else t
    omega = omega_hat(state.tau[:t, :t], iteration=t)
    b = bias_from_information(state.tau[:t, :t], state.delta[:t])
    v = float(omega[t - 1] @ state.sigma_w[:t, :t] @ omega[t - 1])
    return b, float(np.sqrt(max(v, 0.0)))


__all__ = ["StateEvolution", "SEState", "theta_upsilon_eval", "delta_model_specific",
           "oracle_debias_params", "CovarianceProjectionFailed", "ZeroSignalStrength",
           "InferenceUnavailable", "mean_normal_density"]
