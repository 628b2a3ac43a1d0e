"""Data model and generators for the ERM setting Y_i = F(<A_i, mu*>, xi_i)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate, stats
from scipy.special import expit

from .numerics import RngStream


class InvalidConfig(ValueError):
    pass


class ZeroSignalStrength(ValueError):
    pass


# ---------------------------------------------------------------------------
# link functions for the single-index model


def _sigmoid(x):
    return expit(x)


def _sigmoid_d(x):
    s = expit(x)
    return s * (1 - s)


def _sigmoid_dd(x):
    s = expit(x)
    return s * (1 - s) * (1 - 2 * s)


LINKS: dict[str, tuple[Callable, Callable, Callable]] = {
    "identity": (lambda x: x, lambda x: np.ones_like(x), lambda x: np.zeros_like(x)),
    "sigmoid": (_sigmoid, _sigmoid_d, _sigmoid_dd),
    "x_plus_sin": (lambda x: x + np.sin(x), lambda x: 1 + np.cos(x), lambda x: -np.sin(x)),
}


def _check_link(link: str) -> None:
    if link not in LINKS:
        raise InvalidConfig(f"unknown link {link!r}; expected one of {sorted(LINKS)}")


# ---------------------------------------------------------------------------
# specs


@dataclass(frozen=True)
class DesignSpec:
    distribution: str = "gaussian"  # gaussian | rademacher | student_t
    m: int = 1200
    n: int = 1000
    df: float = 10.0

    def __post_init__(self):
        if self.distribution not in ("gaussian", "rademacher", "student_t"):
            raise InvalidConfig(f"unknown design distribution {self.distribution!r}")
        if self.m < 1 or self.n < 1:
            raise InvalidConfig("m and n must be positive")
        if self.distribution == "student_t" and self.df <= 2:
            raise InvalidConfig("student_t design needs df > 2 for a finite variance")

    def sample(self, rng: RngStream) -> np.ndarray:
        g = rng.generator
        shape = (self.m, self.n)
        if self.distribution == "gaussian":
            A0 = g.standard_normal(shape)
        elif self.distribution == "rademacher":
            A0 = 2.0 * g.integers(0, 2, size=shape) - 1.0
        else:
            A0 = g.standard_t(self.df, size=shape) * np.sqrt((self.df - 2) / self.df)
        return A0 / np.sqrt(self.n)


@dataclass(frozen=True)
class SignalSpec:
    kind: str = "half_normal"  # half_normal | fixed | zero
    variance: float = 5.0
    vector: tuple | None = None

    def sample(self, n: int, rng: RngStream) -> np.ndarray:
        if self.kind == "half_normal":
            return np.abs(rng.generator.normal(0.0, np.sqrt(self.variance), n))
        if self.kind == "zero":
            return np.zeros(n)
        if self.kind == "fixed":
            v = np.asarray(self.vector, dtype=float)
            if v.shape != (n,):
                raise InvalidConfig(f"fixed signal has length {v.size}, expected {n}")
            return v.copy()
        raise InvalidConfig(f"unknown signal kind {self.kind!r}")


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "gaussian"  # gaussian | student_t | logistic
    param: float = 1.0  # variance for gaussian, df for student_t

    def __post_init__(self):
        if self.kind not in ("gaussian", "student_t", "logistic"):
            raise InvalidConfig(f"unknown noise kind {self.kind!r}")
        if self.kind == "gaussian" and self.param < 0:
            raise InvalidConfig("gaussian noise variance must be nonnegative")
        if self.kind == "student_t" and self.param <= 0:
            raise InvalidConfig("student_t noise needs df > 0")

    def sample(self, size, rng: RngStream) -> np.ndarray:
        g = rng.generator
        if self.kind == "gaussian":
            return g.normal(0.0, np.sqrt(self.param), size)
        if self.kind == "student_t":
            return g.standard_t(self.param, size)
        return g.logistic(0.0, 1.0, size)


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "single_index"  # single_index | one_bit
    link: str = "identity"

    def __post_init__(self):
        if self.kind not in ("single_index", "one_bit"):
            raise InvalidConfig(f"unknown model {self.kind!r}")
        _check_link(self.link)

    @property
    def is_linear(self) -> bool:
        return self.kind == "single_index" and self.link == "identity"

    def labels(self, z, xi) -> np.ndarray:
        """F(z, xi); sign(0) is taken as +1."""
        if self.kind == "one_bit":
            return np.where(np.asarray(z) + xi >= 0, 1.0, -1.0)
        return LINKS[self.link][0](np.asarray(z, dtype=float)) + xi


@dataclass(frozen=True)
class LossSpec:
    """Loss L(x, y) and its partial derivatives in the fitted value x."""

    kind: str = "squared"  # squared | pseudo_huber | logistic | single_index_squared
    delta: float = 1.0
    link: str = "identity"

    def __post_init__(self):
        if self.kind not in ("squared", "pseudo_huber", "logistic", "single_index_squared"):
            raise InvalidConfig(f"unknown loss {self.kind!r}")
        if self.kind == "pseudo_huber" and self.delta <= 0:
            raise InvalidConfig("pseudo_huber needs delta > 0")
        _check_link(self.link)

    @property
    def constant_curvature(self) -> bool:
        # d11 identical for every sample: the Onsager update needs a single shared solve
        return self.kind == "squared" or (self.kind == "single_index_squared" and self.link == "identity")

    def value(self, x, y):
        if self.kind == "squared":
            return 0.5 * (x - y) ** 2
        if self.kind == "pseudo_huber":
            d = self.delta
            return d * d * (np.sqrt(1 + ((x - y) / d) ** 2) - 1)
        if self.kind == "logistic":
            return np.logaddexp(0.0, -x * y)
        f = LINKS[self.link][0]
        return 0.5 * (f(x) - y) ** 2

    def d1(self, x, y):
        if self.kind == "squared":
            return x - y
        if self.kind == "pseudo_huber":
            u = x - y
            return u / np.sqrt(1 + (u / self.delta) ** 2)
        if self.kind == "logistic":
            return -y * expit(-x * y)
        f, fd, _ = LINKS[self.link]
        return (f(x) - y) * fd(x)

    def d11(self, x, y):
        if self.kind == "squared":
            return np.ones(np.broadcast(x, y).shape)
        if self.kind == "pseudo_huber":
            return (1 + ((x - y) / self.delta) ** 2) ** -1.5
        if self.kind == "logistic":
            s = expit(x * y)
            return y * y * s * (1 - s)
        f, fd, fdd = LINKS[self.link]
        return fd(x) ** 2 + (f(x) - y) * fdd(x)

    def d12(self, x, y):
        if self.kind == "squared":
            return -np.ones(np.broadcast(x, y).shape)
        if self.kind == "pseudo_huber":
            return -self.d11(x, y)
        if self.kind == "logistic":
            # (e^{xy}(xy - 1) - 1) / (e^{xy} + 1)^2, written with sigmoids for stability
            u = x * y
            s = expit(-u)
            return -s + u * s * (1 - s)
        return -LINKS[self.link][1](x)


@dataclass(frozen=True)
class ProxSpec:
    """Separable proximal map; ``threshold`` is eta * lambda for the current step."""

    kind: str = "identity"  # identity | l1
    lam: float = 0.0

    def __post_init__(self):
        if self.kind not in ("identity", "l1"):
            raise InvalidConfig(f"unknown prox {self.kind!r}")
        if self.lam < 0:
            raise InvalidConfig("prox.lambda must be nonnegative")

    def apply(self, x, eta: float = 1.0):
        if self.kind == "identity":
            return np.asarray(x, dtype=float).copy()
        thr = eta * self.lam
        return np.sign(x) * np.maximum(np.abs(x) - thr, 0.0)

    def deriv(self, x, eta: float = 1.0):
        if self.kind == "identity":
            return np.ones(np.shape(x))
        # derivative at the kink |x| = thr is taken as 0
        return (np.abs(x) > eta * self.lam).astype(float)


def prox_apply(prox: ProxSpec, x, eta: float = 1.0):
    return prox.apply(x, eta)


def prox_deriv(prox: ProxSpec, x, eta: float = 1.0):
    return prox.deriv(x, eta)


def loss_d1(loss: LossSpec, x, y):
    return loss.d1(x, y)


def loss_d11(loss: LossSpec, x, y):
    return loss.d11(x, y)


def loss_d12(loss: LossSpec, x, y):
    return loss.d12(x, y)


# ---------------------------------------------------------------------------
# problem instance


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    A: np.ndarray
    mu_star: np.ndarray
    xi: np.ndarray
    Y: np.ndarray
    loss: LossSpec
    prox: ProxSpec
    model: ModelSpec
    eta: float | tuple = 0.3
    noise: NoiseSpec = field(default_factory=NoiseSpec)

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def n(self) -> int:
        return self.A.shape[1]

    @property
    def phi(self) -> float:
        return self.m / self.n

    @property
    def signal_strength(self) -> float:
        """sigma_{mu*} = ||mu*|| / sqrt(n)."""
        return float(np.sqrt(self.mu_star @ self.mu_star / self.n))

    def step(self, s: int) -> float:
        """Step size eta_s used to produce iterate s + 1."""
        return step_size(self.eta, s)


def step_size(eta, s: int) -> float:
    """eta_s from a constant or a schedule; a short schedule repeats its last entry."""
    if isinstance(eta, (tuple, list, np.ndarray)):
        return float(eta[min(s, len(eta) - 1)])
    return float(eta)


def generate_instance(
    design: DesignSpec,
    signal: SignalSpec,
    noise: NoiseSpec,
    model: ModelSpec,
    loss: LossSpec,
    prox: ProxSpec,
    eta,
    rng: RngStream,
) -> ProblemInstance:
    """Draw (A, mu*, xi) from independent sub-streams of ``rng`` and label the data."""
    A = design.sample(rng.child(0))
    mu_star = signal.sample(design.n, rng.child(1))
    xi = noise.sample(design.m, rng.child(2))
    Y = model.labels(A @ mu_star, xi)
    for a in A, mu_star, xi, Y:
        a.setflags(write=False)
    return ProblemInstance(A=A, mu_star=mu_star, xi=xi, Y=Y, loss=loss, prox=prox,
                           model=model, eta=eta, noise=noise)


def noise_second_moment(noise: NoiseSpec) -> float:
    if noise.kind == "gaussian":
        return noise.param
    if noise.kind == "logistic":
        return np.pi ** 2 / 3
    return noise.param / (noise.param - 2) if noise.param > 2 else np.inf


def expected_normal_density(noise: NoiseSpec, sigma: float) -> float:
    """E g_sigma(xi) for xi drawn from ``noise``; g_sigma is the N(0, sigma^2) density."""
    if noise.kind == "gaussian":
        return 1.0 / np.sqrt(2 * np.pi * (sigma ** 2 + noise.param))
    dist = stats.logistic() if noise.kind == "logistic" else stats.t(noise.param)
    if sigma == 0:
        return float(dist.pdf(0.0))
    val, _ = integrate.quad(lambda x: stats.norm.pdf(x, scale=sigma) * dist.pdf(x), -np.inf, np.inf)
    return float(val)
