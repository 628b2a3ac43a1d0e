"""Proximal gradient descent with cached per-iteration quantities."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .numerics import RowBuffer
from .problem import ProblemInstance


class NonFiniteIterate(FloatingPointError):
    pass


def _frozen(x: np.ndarray) -> np.ndarray:
    x.setflags(write=False)
    return x


class Trajectory:
    """Iterates mu^(0..t) together with everything later stages read back.

    Index conventions (s counts completed steps, starting at 1):
      iterates[s]      mu^(s), s = 0..t
      fitted[s]        A mu^(s)
      residuals[s-1]   r^(s) = d1(A mu^(s-1), Y)
      curvatures[s-1]  h^(s) = d11(A mu^(s-1), Y)
      prox_inputs[s-1] mu^(s-1) - eta_{s-1} A^T r^(s)
      back_grads[s-1]  A^T r^(s)
      etas[s-1]        eta_{s-1}
    """

    def __init__(self, init: np.ndarray, fitted0: np.ndarray):
        self.iterates = [_frozen(np.array(init, dtype=float))]
        self.fitted = [_frozen(np.array(fitted0, dtype=float))]
        self.residuals: list[np.ndarray] = []
        self.curvatures: list[np.ndarray] = []
        self.prox_inputs: list[np.ndarray] = []
        self.back_grads: list[np.ndarray] = []
        self.etas: list[float] = []
        self._res = RowBuffer(len(fitted0))
        self._grads = RowBuffer(len(init))

    def residual_matrix(self, t: int | None = None) -> np.ndarray:
        """(t, m) array whose row s-1 is r^(s)."""
        return self._res.view(t)

    def back_grad_matrix(self, t: int | None = None) -> np.ndarray:
        """(t, n) array whose row s-1 is A^T r^(s)."""
        return self._grads.view(t)

    @property
    def t(self) -> int:
        """Number of completed steps."""
        return len(self.etas)

    @property
    def current(self) -> np.ndarray:
        return self.iterates[-1]


def start(inst: ProblemInstance, init: np.ndarray) -> Trajectory:
    init = np.asarray(init, dtype=float)
    if init.shape != (inst.n,):
        raise ValueError(f"init has shape {init.shape}, expected ({inst.n},)")
    return Trajectory(init, inst.A @ init)


def gd_step(traj: Trajectory, inst: ProblemInstance, weights: np.ndarray | None = None) -> Trajectory:
    """Append one proximal gradient step.

    ``weights`` (length m, optional) rescales each sample's gradient
    contribution; a zero weight drops the row, which is how leave-one-out
    reruns share the design matrix.
    """
    s = traj.t
    eta = inst.step(s)
    x = traj.fitted[-1]
    r = inst.loss.d1(x, inst.Y)
    h = inst.loss.d11(x, inst.Y)
    if weights is not None:
        r = r * weights
        h = h * weights
    g = inst.A.T @ r
    pin = traj.current - eta * g
    mu = inst.prox.apply(pin, eta)
    if not np.all(np.isfinite(mu)):
        raise NonFiniteIterate(f"non-finite iterate at step {s + 1} (eta={eta})")
    traj._res.append(r)
    traj._grads.append(g)
    traj.residuals.append(_frozen(r))
    traj.curvatures.append(_frozen(np.asarray(h, dtype=float)))
    traj.back_grads.append(_frozen(g))
    traj.prox_inputs.append(_frozen(pin))
    traj.etas.append(eta)
    traj.iterates.append(_frozen(mu))
    traj.fitted.append(_frozen(inst.A @ mu))
    return traj


Hook = Callable[[Trajectory, ProblemInstance], None]


def run(inst: ProblemInstance, T: int, init: np.ndarray, hooks: Iterable[Hook] = (),
        weights: np.ndarray | None = None) -> Trajectory:
    """Run ``T`` steps from ``init``, calling each hook after every step."""
    if T < 1:
        raise ValueError("T must be at least 1")
    hooks = list(hooks)
    traj = start(inst, init)
    for _ in range(T):
        gd_step(traj, inst, weights)
        for hook in hooks:
            hook(traj, inst)
    return traj


def initial_point(kind: str, n: int, rng) -> np.ndarray:
    if kind == "gaussian":
        return rng.generator.standard_normal(n)
    if kind == "zero":
        return np.zeros(n)
    raise ValueError(f"unknown init {kind!r}")
