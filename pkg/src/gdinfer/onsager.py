"""Data-driven Onsager correction matrices along a gradient descent run.

Both matrices are lower triangular and nested in t, so each GD step only
adds one row. Row t of either matrix is the last row of a resolvent
``(I - diag(d) K)^{-1} diag(d)`` averaged over samples (for tau) or over
coordinates (for rho); ``numerics.resolvent_last_row`` evaluates it for all
samples at once.
"""

from __future__ import annotations

import numpy as np

from .gd import Trajectory
from .numerics import RowBuffer, pad_corner, resolvent_last_row, tri_inverse
from .problem import ProblemInstance

DIAG_TOL = 1e-8


class InferenceUnavailable(ArithmeticError):
    def __init__(self, iteration: int, index: int, value: float):
        self.iteration, self.index, self.value = iteration, index, value
        super().__init__(f"tau_hat at iteration {iteration} has near-zero diagonal entry "
                         f"{index + 1}: {value!r}")


class SingularSystem(ArithmeticError):
    pass


def shift_right(M: np.ndarray) -> np.ndarray:
    """Columns moved one place left: out[:, j] = M[:, j+1], last column zero."""
    out = np.zeros_like(M)
    out[:, :-1] = M[:, 1:]
    return out


class OnsagerEstimates:
    """Running tau_hat / rho_hat for one trajectory.

    Per-coordinate rho_hat_l never needs to be stored as a matrix: it is
    determined by the prox-derivative history of coordinate l and the shared
    tau_hat, so only the n x t derivative history is kept.
    """

    def __init__(self, inst: ProblemInstance, T: int | None = None):
        self.phi = inst.phi
        self.shared_curvature = inst.loss.constant_curvature
        self.shared_prox = inst.prox.kind == "identity"
        cap = T or 8
        self.tau = np.zeros((cap, cap))
        self.rho = np.zeros((cap, cap))
        self.t = 0
        # -eta_{s-1} h^(s) and P'(prox input of step s), one row per step
        self._curv = RowBuffer(1 if self.shared_curvature else inst.m, cap)
        self._pderiv = RowBuffer(1 if self.shared_prox else inst.n, cap)
        self._prox = inst.prox

    def _grow(self):
        cap = self.tau.shape[0]
        if self.t < cap:
            return
        new = 2 * cap
        for name in ("tau", "rho"):
            M = np.zeros((new, new))
            M[:cap, :cap] = getattr(self, name)
            setattr(self, name, M)

    @property
    def tau_hat(self) -> np.ndarray:
        return self.tau[:self.t, :self.t].copy()

    @property
    def rho_hat(self) -> np.ndarray:
        return self.rho[:self.t, :self.t].copy()

    def update_tau_hat(self, traj: Trajectory) -> np.ndarray:
        """Append row t of tau_hat; needs rho_hat through t-1."""
        t = self.t + 1
        eta = traj.etas[t - 1]
        h = traj.curvatures[t - 1]
        self._curv.append(-eta * (h[:1] if self.shared_curvature else h))
        D = self._curv.view().T
        K = np.zeros((t, t))
        K[1:, :-1] = self.rho[:t - 1, :t - 1]
        rows = resolvent_last_row(D, K)
        self._grow()
        self.tau[t - 1, :t] = self.phi * rows.mean(axis=0)
        return self.tau[t - 1, :t]

    def update_rho_hat(self, traj: Trajectory) -> np.ndarray:
        """Append row t of rho_hat; needs tau_hat through t."""
        t = self.t + 1
        eta = traj.etas[t - 1]
        pin = traj.prox_inputs[t - 1]
        p = self._prox.deriv(pin[:1] if self.shared_prox else pin, eta)
        self._pderiv.append(p)
        D = self._pderiv.view().T
        K = shift_right(self.tau[:t, :t])
        K[np.arange(1, t), np.arange(t - 1)] += 1.0  # shifted identity of tau + I
        rows = resolvent_last_row(D, K)
        self.rho[t - 1, :t] = rows.mean(axis=0)
        return self.rho[t - 1, :t]

    def coordinate_rho_rows(self) -> np.ndarray:
        """Last rows of every per-coordinate rho_hat_l, shape (n, t)."""
        t = self.t
        K = shift_right(self.tau[:t, :t] + np.eye(t))
        return resolvent_last_row(self._pderiv.view().T, K)

    def update(self, traj: Trajectory, inst: ProblemInstance | None = None) -> None:
        """GD hook: extend both matrices by the step just taken."""
        if traj.t != self.t + 1:
            raise ValueError(f"estimator at t={self.t} cannot absorb trajectory at t={traj.t}")
        self.update_tau_hat(traj)
        self.update_rho_hat(traj)
        self.t += 1

    __call__ = update


def full_recompute(traj: Trajectory, inst: ProblemInstance, t: int | None = None):
    """The Onsager recursion evaluated literally: dense per-sample and per-coordinate solves
    at every iteration, with per-coordinate rho matrices carried forward.

    O(m t^3) per iteration; for equivalence testing on small instances.
    Returns lists of tau_hat^[s], rho_hat^[s] for s = 1..t.
    """
    t = traj.t if t is None else t
    m, n, phi = inst.m, inst.n, inst.phi
    rho_prev = np.zeros((0, 0))
    rho_coords = [np.zeros((0, 0)) for _ in range(n)]
    taus, rhos = [], []
    for s in range(1, t + 1):
        I = np.eye(s)
        O = pad_corner(rho_prev)
        tau = np.zeros((s, s))
        for k in range(m):
            L = np.diag([-traj.etas[q] * traj.curvatures[q][k] for q in range(s)])
            tau += np.linalg.solve(I - L @ O, L)
        tau *= phi / m
        rho = np.zeros((s, s))
        for ell in range(n):
            P = np.diag([inst.prox.deriv(traj.prox_inputs[q][ell], traj.etas[q]) for q in range(s)])
            R = P @ (I + (tau + I) @ pad_corner(rho_coords[ell]))
            rho_coords[ell] = R
            rho += R
        rho /= n
        taus.append(tau)
        rhos.append(rho)
        rho_prev = rho
    return taus, rhos


def omega_hat(tau: np.ndarray, iteration: int | None = None) -> np.ndarray:
    """Inverse of tau_hat, refusing near-singular diagonals."""
    tau = np.atleast_2d(np.asarray(tau, dtype=float))
    d = np.abs(np.diag(tau))
    if d.size == 0:
        raise ValueError("empty tau")
    thr = DIAG_TOL * max(1.0, float(d.max()))
    bad = np.flatnonzero(~(d >= thr))
    if bad.size:
        it = tau.shape[0] if iteration is None else iteration
        raise InferenceUnavailable(it, int(bad[0]), float(tau[bad[0], bad[0]]))
    return tri_inverse(tau)
