"""Model-agnostic pieces: parameter transforms, observation series and the
state-space model contract used by the particle filter and the samplers."""

from __future__ import annotations

import csv
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DomainError

_KINDS = ("identity", "log", "atanh")


def check_unconstrained(x):
    """Return ``x`` as a float vector, rejecting NaN and infinities."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("unconstrained parameters must be a vector")
    if not np.all(np.isfinite(x)):
        raise DomainError("unconstrained parameters must be finite")
    return x


@dataclass(frozen=True)
class ParameterTransform:
    """Componentwise bijection between constrained and unconstrained spaces.

    Each component is one of ``"identity"`` (real line), ``"log"`` (positive
    half-line, ``x = log(theta)``) or ``"atanh"`` (open interval (-1, 1),
    ``x = atanh(theta)``).
    """

    kinds: tuple

    def __post_init__(self):
        object.__setattr__(self, "kinds", tuple(self.kinds))
        for k in self.kinds:
            if k not in _KINDS:
                raise ValueError(f"unknown transform kind {k!r}")

    @property
    def size(self):
        return len(self.kinds)

    def _masks(self):
        kinds = np.array(self.kinds)
        return kinds == "log", kinds == "atanh"

    def forward(self, theta):
        """Constrained to unconstrained."""
        theta = np.asarray(theta, dtype=float)
        if theta.shape[-1] != self.size:
            raise ValueError(f"expected {self.size} parameters, got {theta.shape[-1]}")
        is_log, is_atanh = self._masks()
        if np.any(np.isnan(theta)):
            raise DomainError("constrained parameters contain NaN")
        if np.any(theta[..., is_log] <= 0):
            raise DomainError("log-transformed parameters must be positive")
        if np.any(np.abs(theta[..., is_atanh]) >= 1):
            raise DomainError("atanh-transformed parameters must lie in (-1, 1)")
        x = theta.copy()
        x[..., is_log] = np.log(theta[..., is_log])
        x[..., is_atanh] = np.arctanh(theta[..., is_atanh])
        return x

    def inverse(self, x):
        """Unconstrained to constrained."""
        x = np.asarray(x, dtype=float)
        is_log, is_atanh = self._masks()
        theta = x.copy()
        with np.errstate(over="ignore"):  # huge x maps to inf, which the prior rejects
            theta[..., is_log] = np.exp(x[..., is_log])
        theta[..., is_atanh] = np.tanh(x[..., is_atanh])
        return theta

    def jacobian_diag(self, x):
        """``d theta_i / d x_i`` for every component."""
        x = np.asarray(x, dtype=float)
        is_log, is_atanh = self._masks()
        d = np.ones_like(x)
        d[..., is_log] = np.exp(x[..., is_log])
        d[..., is_atanh] = 1.0 / np.cosh(x[..., is_atanh]) ** 2
        return d

    def log_jacobian(self, x):
        """``log |det d theta / d x|`` of the inverse map."""
        x = np.asarray(x, dtype=float)
        is_log, is_atanh = self._masks()
        v = x[..., is_atanh]
        # log sech^2 v, stable for large |v|
        log_sech2 = 2.0 * (math.log(2.0) - np.abs(v) - np.log1p(np.exp(-2.0 * np.abs(v))))
        return np.sum(x[..., is_log], axis=-1) + np.sum(log_sech2, axis=-1)

    def grad_log_jacobian(self, x):
        x = np.asarray(x, dtype=float)
        is_log, is_atanh = self._masks()
        g = np.zeros_like(x)
        g[..., is_log] = 1.0
        g[..., is_atanh] = -2.0 * np.tanh(x[..., is_atanh])
        return g


def to_unconstrained(transform, theta):
    return transform.forward(theta)


def to_constrained(transform, x):
    return transform.inverse(x)


@dataclass(frozen=True)
class ObservationSeries:
    """A ``T x n_z`` block of observations without missing values."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] < 1:
            raise ValueError("observations must be a non-empty T x n_z array")
        if not np.all(np.isfinite(v)):
            raise ValueError("observations contain missing or non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def T(self):
        return self.values.shape[0]

    @property
    def n_z(self):
        return self.values.shape[1]

    def __len__(self):
        return self.T

    def head(self, T):
        return ObservationSeries(self.values[:T])

    def to_csv(self, path):
        """Write ``t,z`` rows (``t`` is 1-based). Multivariate columns are ``z1..zk``."""
        header = ["t", "z"] if self.n_z == 1 else ["t"] + [f"z{i + 1}" for i in range(self.n_z)]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for t, row in enumerate(self.values, start=1):
                writer.writerow([t] + [repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path):
        with open(Path(path), newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if not header or header[0] != "t" or len(header) < 2:
                raise ValueError(f"{path}: expected a header starting with 't,z'")
            rows = [[float(v) for v in r[1:]] for r in reader if r]
        return cls(np.array(rows, dtype=float))


def as_series(z):
    return z if isinstance(z, ObservationSeries) else ObservationSeries(z)


class StateSpaceModel(ABC):
    """Contract for a state-space model parameterized on the unconstrained scale.

    All density methods are vectorized over particles: ``states`` has shape
    ``(N, n_s)`` and gradient methods return ``(N, n_params)`` arrays holding
    derivatives with respect to the unconstrained parameters. Sampling is
    reparameterized: callers pass the standard normal and uniform variates,
    which keeps filter runs reproducible independently of evaluation order.
    """

    param_names: Sequence[str] = ()
    transform: ParameterTransform
    state_dim: int = 1
    obs_dim: int = 1

    @property
    def n_params(self):
        return len(self.param_names)

    # prior -----------------------------------------------------------------

    @abstractmethod
    def log_prior_constrained(self, theta):
        """Log prior density of the constrained parameters."""

    @abstractmethod
    def grad_log_prior_constrained(self, theta):
        """Gradient of :meth:`log_prior_constrained` with respect to ``theta``."""

    def log_prior(self, x):
        """Log prior density on the unconstrained scale (Jacobian included)."""
        x = check_unconstrained(x)
        theta = self.transform.inverse(x)
        lp = self.log_prior_constrained(theta)
        if lp == -np.inf:
            return -np.inf
        return float(lp + self.transform.log_jacobian(x))

    def grad_log_prior(self, x):
        x = check_unconstrained(x)
        theta = self.transform.inverse(x)
        g = np.asarray(self.grad_log_prior_constrained(theta), dtype=float)
        return g * self.transform.jacobian_diag(x) + self.transform.grad_log_jacobian(x)

    # dynamics --------------------------------------------------------------

    @abstractmethod
    def sample_initial(self, x, normals, uniforms):
        """Draw initial states from normals ``(N, n_s)`` and uniforms ``(N,)``."""

    @abstractmethod
    def initial_logdensity(self, x, states):
        ...

    @abstractmethod
    def grad_initial_logdensity(self, x, states):
        ...

    @abstractmethod
    def sample_transition(self, x, prev, normals, uniforms):
        ...

    @abstractmethod
    def transition_logdensity(self, x, new, prev):
        """Log density of the new state given its parent, row by row."""

    @abstractmethod
    def grad_transition_logdensity(self, x, new, prev):
        ...

    @abstractmethod
    def observation_logdensity(self, x, states, z_t):
        ...

    @abstractmethod
    def grad_observation_logdensity(self, x, states, z_t):
        ...

    @abstractmethod
    def simulate(self, x, T, rng):
        """Return ``(states, ObservationSeries)`` for ``T`` time steps."""


def numerical_gradient(func, x, rel_step=1e-6):
    """Central finite differences with step ``rel_step * (1 + |x_i|)``."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        h = rel_step * (1.0 + abs(x[i]))
        up = x.copy()
        dn = x.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (func(up) - func(dn)) / (2.0 * h)
    return g
