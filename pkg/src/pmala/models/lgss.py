"""Linear Gaussian state-space model with an exact Kalman likelihood and score.

    z_t = alpha + beta s_t + tau nu_t
    s_t = mu + phi s_{t-1} + sigma eta_t,   s_0 ~ N(mu / (1 - phi), sigma^2 / (1 - phi^2))

Parameters are ordered ``(alpha, beta, tau, mu, phi, sigma)`` and mapped to the
unconstrained scale by ``(id, id, log, id, atanh, log)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
from scipy.special import betaln, gammaln

from ..errors import DomainError, NumericalError
from ..ssm import ObservationSeries, ParameterTransform, StateSpaceModel, as_series

PARAM_NAMES = ("alpha", "beta", "tau", "mu", "phi", "sigma")
TRANSFORM = ParameterTransform(("identity", "identity", "log", "identity", "atanh", "log"))
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class LgssParams:
    alpha: float
    beta: float
    tau: float
    mu: float
    phi: float
    sigma: float

    def __post_init__(self):
        if not abs(self.phi) < 1:
            raise DomainError(f"|phi| must be < 1, got {self.phi}")
        if not self.tau > 0:
            raise DomainError(f"tau must be positive, got {self.tau}")
        if not self.sigma > 0:
            raise DomainError(f"sigma must be positive, got {self.sigma}")

    def as_array(self):
        return np.array([self.alpha, self.beta, self.tau, self.mu, self.phi, self.sigma])

    @classmethod
    def from_array(cls, theta):
        return cls(*(float(v) for v in theta))

    @classmethod
    def from_unconstrained(cls, x):
        return cls.from_array(TRANSFORM.inverse(np.asarray(x, dtype=float)))

    def to_unconstrained(self):
        return TRANSFORM.forward(self.as_array())

    @property
    def stationary_mean(self):
        return self.mu / (1.0 - self.phi)

    @property
    def stationary_var(self):
        return self.sigma**2 / (1.0 - self.phi**2)


TRUE_PARAMS = LgssParams(0.2, 1.0, 1.0, 0.1, 0.9, 0.15)


def _coerce_params(params):
    if isinstance(params, LgssParams):
        return params
    return LgssParams.from_array(params)


def lgss_simulate(params, T, rng):
    """Simulate ``T`` steps; returns ``(states, ObservationSeries)``.

    The pre-sample state is drawn from the stationary distribution.
    """
    p = _coerce_params(params)
    if T < 1:
        raise ValueError("T must be at least 1")
    rng = np.random.default_rng(rng)
    s_prev = p.stationary_mean + math.sqrt(p.stationary_var) * rng.standard_normal()
    eta = rng.standard_normal(T)
    nu = rng.standard_normal(T)
    states = np.empty(T)
    for t in range(T):
        s_prev = p.mu + p.phi * s_prev + p.sigma * eta[t]
        states[t] = s_prev
    z = p.alpha + p.beta * states + p.tau * nu
    return states, ObservationSeries(z)


# ---------------------------------------------------------------------------
# Kalman filter with forward sensitivities


@numba.njit(cache=True)
def _kalman(theta, z, want_grad):
    a, b, tau, mu, phi, sig = theta[0], theta[1], theta[2], theta[3], theta[4], theta[5]
    t2 = tau * tau
    s2 = sig * sig
    one_m = 1.0 - phi
    stat = 1.0 - phi * phi
    m = mu / one_m
    P = s2 / stat
    dm = np.zeros(6)
    dP = np.zeros(6)
    dm[3] = 1.0 / one_m
    dm[4] = mu / (one_m * one_m)
    dP[4] = 2.0 * phi * s2 / (stat * stat)
    dP[5] = 2.0 * sig / stat
    ll = 0.0
    dll = np.zeros(6)
    dv = np.zeros(6)
    dF = np.zeros(6)
    dK = np.zeros(6)
    log2pi = math.log(2.0 * math.pi)
    for t in range(z.shape[0]):
        v = z[t] - a - b * m
        F = b * b * P + t2
        ll += -0.5 * (log2pi + math.log(F) + v * v / F)
        Kg = P * b / F
        mf = m + Kg * v
        Pf = P * t2 / F
        if want_grad:
            for k in range(6):
                dv[k] = -b * dm[k]
                dF[k] = b * b * dP[k]
            dv[0] -= 1.0
            dv[1] -= m
            dF[1] += 2.0 * b * P
            dF[2] += 2.0 * tau
            for k in range(6):
                dll[k] += -0.5 * (dF[k] / F + 2.0 * v * dv[k] / F - v * v * dF[k] / (F * F))
                dK[k] = dP[k] * b / F - P * b * dF[k] / (F * F)
            dK[1] += P / F
            for k in range(6):
                dmf = dm[k] + dK[k] * v + Kg * dv[k]
                # Pf = P t2 / F
                dPf = dP[k] * t2 / F - P * t2 * dF[k] / (F * F)
                if k == 2:
                    dPf += P * 2.0 * tau / F
                dm[k] = phi * dmf
                dP[k] = phi * phi * dPf
                if k == 3:
                    dm[k] += 1.0
                if k == 4:
                    dm[k] += mf
                    dP[k] += 2.0 * phi * Pf
                if k == 5:
                    dP[k] += 2.0 * sig
        m = mu + phi * mf
        P = phi * phi * Pf + s2
    return ll, dll


def _kalman_checked(params, z, want_grad):
    theta = _coerce_params(params).as_array()
    zz = np.ascontiguousarray(as_series(z).values[:, 0], dtype=float)
    ll, dll = _kalman(theta, zz, want_grad)
    if not math.isfinite(ll) or (want_grad and not np.all(np.isfinite(dll))):
        raise NumericalError("non-finite value in the Kalman recursion")
    return theta, ll, dll


def kalman_loglik(params, z):
    """Exact log p(z_{1:T} | params) by the Kalman predict/update recursion."""
    return float(_kalman_checked(params, z, False)[1])


def kalman_score(params, z):
    """Gradient of :func:`kalman_loglik` with respect to the unconstrained parameters."""
    return kalman_loglik_and_score(params, z)[1]


def kalman_loglik_and_score(params, z):
    theta, ll, dll = _kalman_checked(params, z, True)
    return float(ll), dll * TRANSFORM.jacobian_diag(TRANSFORM.forward(theta))


def lgss_moments(params, T):
    """Mean vector and covariance matrix of ``z_{1:T}`` (dense; for checking)."""
    p = _coerce_params(params)
    idx = np.arange(T)
    cov_s = p.stationary_var * p.phi ** np.abs(idx[:, None] - idx[None, :])
    mean = np.full(T, p.alpha + p.beta * p.stationary_mean)
    cov = p.beta**2 * cov_s + p.tau**2 * np.eye(T)
    return mean, cov


# ---------------------------------------------------------------------------
# particle-filter interface


@dataclass(frozen=True)
class LgssPrior:
    """Prior hyperparameters.

    ``(alpha, beta) | tau ~ N((0.3, 1.2), tau^2 diag(0.25, 0.5))``,
    ``tau^2 ~ IG(1, 7/20)``, ``mu ~ N(0.15, 0.5)``, ``(phi + 1)/2 ~ Beta(20, 5)``,
    ``sigma^2 ~ IG(2, 1/40)``. Normal scales are variances.
    """

    alpha_mean: float = 0.3
    alpha_scale: float = 0.25
    beta_mean: float = 1.2
    beta_scale: float = 0.5
    tau2_shape: float = 1.0
    tau2_rate: float = 7.0 / 20.0
    mu_mean: float = 0.15
    mu_var: float = 0.5
    phi_a: float = 20.0
    phi_b: float = 5.0
    sigma2_shape: float = 2.0
    sigma2_rate: float = 1.0 / 40.0


def _log_ig_sd(sd, shape, rate):
    # density of sd when sd^2 ~ InverseGamma(shape, rate)
    v = sd * sd
    return (shape * math.log(rate) - gammaln(shape) - (shape + 1.0) * math.log(v)
            - rate / v + math.log(2.0 * sd))


def _dlog_ig_sd(sd, shape, rate):
    return -2.0 * (shape + 1.0) / sd + 2.0 * rate / sd**3 + 1.0 / sd


def _log_normal(x, mean, var):
    return -0.5 * (_LOG_2PI + math.log(var) + (x - mean) ** 2 / var)


class LinearGaussianSSM(StateSpaceModel):
    param_names = PARAM_NAMES
    transform = TRANSFORM
    state_dim = 1
    obs_dim = 1

    def __init__(self, prior=None):
        self.prior = prior or LgssPrior()

    def __repr__(self):
        return f"LinearGaussianSSM(prior={self.prior!r})"

    # prior -----------------------------------------------------------------

    def prior_terms(self, theta):
        """Independent log-prior factors on the constrained scale."""
        a, b, tau, mu, phi, sig = (float(v) for v in theta)
        h = self.prior
        if tau * tau <= 0 or sig * sig <= 0 or abs(phi) >= 1:
            return dict.fromkeys(("alpha|tau", "beta|tau", "tau", "mu", "phi", "sigma"), -np.inf)
        u = 0.5 * (phi + 1.0)
        return {
            "alpha|tau": _log_normal(a, h.alpha_mean, h.alpha_scale * tau * tau),
            "beta|tau": _log_normal(b, h.beta_mean, h.beta_scale * tau * tau),
            "tau": _log_ig_sd(tau, h.tau2_shape, h.tau2_rate),
            "mu": _log_normal(mu, h.mu_mean, h.mu_var),
            "phi": ((h.phi_a - 1.0) * math.log(u) + (h.phi_b - 1.0) * math.log1p(-u)
                    - betaln(h.phi_a, h.phi_b) - math.log(2.0)),
            "sigma": _log_ig_sd(sig, h.sigma2_shape, h.sigma2_rate),
        }

    def log_prior_constrained(self, theta):
        return float(sum(self.prior_terms(theta).values()))

    def grad_log_prior_constrained(self, theta):
        a, b, tau, mu, phi, sig = (float(v) for v in theta)
        h = self.prior
        t2 = tau * tau
        ra, rb = a - h.alpha_mean, b - h.beta_mean
        g = np.empty(6)
        g[0] = -ra / (h.alpha_scale * t2)
        g[1] = -rb / (h.beta_scale * t2)
        g[2] = (-2.0 / tau + ra**2 / (h.alpha_scale * tau**3) + rb**2 / (h.beta_scale * tau**3)
                + _dlog_ig_sd(tau, h.tau2_shape, h.tau2_rate))
        g[3] = -(mu - h.mu_mean) / h.mu_var
        u = 0.5 * (phi + 1.0)
        g[4] = 0.5 * ((h.phi_a - 1.0) / u - (h.phi_b - 1.0) / (1.0 - u))
        g[5] = _dlog_ig_sd(sig, h.sigma2_shape, h.sigma2_rate)
        return g

    # dynamics --------------------------------------------------------------

    @staticmethod
    def params(x):
        return TRANSFORM.inverse(np.asarray(x, dtype=float))

    def sample_initial(self, x, normals, uniforms=None):
        a, b, tau, mu, phi, sig = self.params(x)
        m = mu / (1.0 - phi)
        sd = sig / math.sqrt(1.0 - phi * phi)
        return m + sd * normals[:, :1]

    def initial_logdensity(self, x, states):
        a, b, tau, mu, phi, sig = self.params(x)
        m = mu / (1.0 - phi)
        P = sig * sig / (1.0 - phi * phi)
        r = states[:, 0] - m
        return -0.5 * (_LOG_2PI + math.log(P) + r * r / P)

    def grad_initial_logdensity(self, x, states):
        a, b, tau, mu, phi, sig = self.params(x)
        one_m = 1.0 - phi
        stat = 1.0 - phi * phi
        m = mu / one_m
        P = sig * sig / stat
        r = states[:, 0] - m
        dlp = -0.5 / P + 0.5 * r * r / (P * P)
        g = np.zeros((states.shape[0], 6))
        g[:, 3] = r / P / one_m
        dphi = r / P * mu / one_m**2 + dlp * 2.0 * phi * sig * sig / stat**2
        g[:, 4] = dphi * stat
        g[:, 5] = -1.0 + r * r / P
        return g

    def sample_transition(self, x, prev, normals, uniforms=None):
        a, b, tau, mu, phi, sig = self.params(x)
        return mu + phi * prev[:, :1] + sig * normals[:, :1]

    def transition_logdensity(self, x, new, prev):
        a, b, tau, mu, phi, sig = self.params(x)
        d = new[:, 0] - mu - phi * prev[:, 0]
        return -0.5 * (_LOG_2PI + 2.0 * math.log(sig) + d * d / (sig * sig))

    def grad_transition_logdensity(self, x, new, prev):
        a, b, tau, mu, phi, sig = self.params(x)
        s2 = sig * sig
        d = new[:, 0] - mu - phi * prev[:, 0]
        g = np.zeros((new.shape[0], 6))
        g[:, 3] = d / s2
        g[:, 4] = d * prev[:, 0] / s2 * (1.0 - phi * phi)
        g[:, 5] = -1.0 + d * d / s2
        return g

    def observation_logdensity(self, x, states, z_t):
        a, b, tau, mu, phi, sig = self.params(x)
        e = float(np.ravel(z_t)[0]) - a - b * states[:, 0]
        return -0.5 * (_LOG_2PI + 2.0 * math.log(tau) + e * e / (tau * tau))

    def grad_observation_logdensity(self, x, states, z_t):
        a, b, tau, mu, phi, sig = self.params(x)
        t2 = tau * tau
        e = float(np.ravel(z_t)[0]) - a - b * states[:, 0]
        g = np.zeros((states.shape[0], 6))
        g[:, 0] = e / t2
        g[:, 1] = e * states[:, 0] / t2
        g[:, 2] = -1.0 + e * e / t2
        return g

    def simulate(self, x, T, rng):
        return lgss_simulate(LgssParams.from_unconstrained(x), T, rng)
