"""Two-component mixture of autoregressive experts observed with noise.

    z_t = s_t + tau nu_t
    s_t = psi_j + phi_j s_{t-1} + sigma_j eta_t,  j = J_t in {1, 2}
    P(J_t = 1 | s_{t-1}, s_{t-2}) = logistic(xi_1 + xi_2 s_{t-1} + xi_3 (s_{t-1} - s_{t-2}))

The latent state carried by the filter is the pair ``(s_t, s_{t-1})`` so that the
gate has both lags available. Parameters are ordered
``(tau, psi1, psi2, phi1, phi2, sigma1, sigma2, xi1, xi2, xi3)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit, logsumexp

from ..errors import DomainError
from ..ssm import ObservationSeries, ParameterTransform, StateSpaceModel, check_unconstrained

PARAM_NAMES = ("tau", "psi1", "psi2", "phi1", "phi2", "sigma1", "sigma2", "xi1", "xi2", "xi3")
TRANSFORM = ParameterTransform(
    ("log", "identity", "identity", "atanh", "atanh", "log", "log", "identity", "identity", "identity")
)
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class MixtureExpertsParams:
    tau: float
    psi1: float
    psi2: float
    phi1: float
    phi2: float
    sigma1: float
    sigma2: float
    xi1: float
    xi2: float
    xi3: float

    def __post_init__(self):
        if not (self.tau > 0 and self.sigma1 > 0 and self.sigma2 > 0):
            raise DomainError("tau, sigma1 and sigma2 must be positive")
        if not (abs(self.phi1) < 1 and abs(self.phi2) < 1):
            raise DomainError("|phi_j| must be < 1")
        if not satisfies_ordering(self.as_array()):
            raise DomainError("expert means must satisfy psi1 (1 - phi1) < psi2 (1 - phi2)")

    def as_array(self):
        return np.array([self.tau, self.psi1, self.psi2, self.phi1, self.phi2,
                         self.sigma1, self.sigma2, self.xi1, self.xi2, self.xi3])

    @classmethod
    def from_array(cls, theta):
        return cls(*(float(v) for v in theta))

    @classmethod
    def from_unconstrained(cls, x):
        return cls.from_array(TRANSFORM.inverse(np.asarray(x, dtype=float)))

    def to_unconstrained(self):
        return TRANSFORM.forward(self.as_array())


def satisfies_ordering(theta):
    """The identifiability constraint ``psi1 (1 - phi1) < psi2 (1 - phi2)``."""
    theta = np.asarray(theta, dtype=float)
    return bool(theta[1] * (1.0 - theta[3]) < theta[2] * (1.0 - theta[4]))


DEFAULT_PARAMS = MixtureExpertsParams(
    tau=0.3, psi1=-0.2, psi2=0.4, phi1=0.5, phi2=0.6,
    sigma1=0.5, sigma2=0.3, xi1=0.0, xi2=-1.0, xi3=0.5,
)


def gate_probability(theta, s_prev, s_prev2):
    """``P(J_t = 1)`` given the two lagged states."""
    xi1, xi2, xi3 = theta[7], theta[8], theta[9]
    return expit(xi1 + xi2 * s_prev + xi3 * (s_prev - s_prev2))


def mixture_simulate(params, T, rng, init_mean=0.0, init_sd=1.0):
    """Simulate ``T >= 2`` steps; returns ``(states, regimes, ObservationSeries)``.

    ``s_0`` is drawn from ``N(init_mean, init_sd^2)`` and also serves as ``s_{-1}``.
    Regimes are coded 1 and 2.
    """
    if not isinstance(params, MixtureExpertsParams):
        params = MixtureExpertsParams.from_array(params)
    if T < 2:
        raise ValueError("T must be at least 2")
    theta = params.as_array()
    rng = np.random.default_rng(rng)
    s0 = init_mean + init_sd * rng.standard_normal()
    gate_u = rng.random(T)
    eta = rng.standard_normal(T)
    nu = rng.standard_normal(T)
    states = np.empty(T)
    regimes = np.empty(T, dtype=int)
    s1, s2 = s0, s0
    psi = theta[1:3]
    phi = theta[3:5]
    sig = theta[5:7]
    for t in range(T):
        j = 0 if gate_u[t] < gate_probability(theta, s1, s2) else 1
        s_new = psi[j] + phi[j] * s1 + sig[j] * eta[t]
        states[t] = s_new
        regimes[t] = j + 1
        s1, s2 = s_new, s1
    z = states + params.tau * nu
    return states, regimes, ObservationSeries(z)


class MixtureExpertsSSM(StateSpaceModel):
    """Mixture of AR experts with a Gaussian prior on the unconstrained scale.

    Parameters
    ----------
    prior_mean, prior_sd : float or array of length 10
        Independent normal prior for the unconstrained parameters. Points that
        violate the ordering constraint get log prior ``-inf``.
    init_mean, init_sd : float
        Distribution of the pre-sample state ``s_0``.
    """

    param_names = PARAM_NAMES
    transform = TRANSFORM
    state_dim = 2
    obs_dim = 1

    def __init__(self, prior_mean=0.0, prior_sd=5.0, init_mean=0.0, init_sd=1.0):
        self.prior_mean = np.broadcast_to(np.asarray(prior_mean, dtype=float), (10,)).copy()
        self.prior_sd = np.broadcast_to(np.asarray(prior_sd, dtype=float), (10,)).copy()
        if np.any(self.prior_sd <= 0):
            raise ValueError("prior_sd must be positive")
        if not init_sd > 0:
            raise ValueError("init_sd must be positive")
        self.init_mean = float(init_mean)
        self.init_sd = float(init_sd)

    def __repr__(self):
        return (f"MixtureExpertsSSM(init_mean={self.init_mean}, init_sd={self.init_sd})")

    # prior -----------------------------------------------------------------

    def log_prior(self, x):
        x = check_unconstrained(x)
        if not satisfies_ordering(TRANSFORM.inverse(x)):
            return -np.inf
        r = (x - self.prior_mean) / self.prior_sd
        return float(np.sum(-0.5 * (_LOG_2PI + r * r) - np.log(self.prior_sd)))

    def grad_log_prior(self, x):
        x = check_unconstrained(x)
        return -(x - self.prior_mean) / self.prior_sd**2

    def log_prior_constrained(self, theta):
        try:
            x = TRANSFORM.forward(theta)
        except DomainError:
            return -np.inf
        lp = self.log_prior(x)
        return lp if lp == -np.inf else lp - float(TRANSFORM.log_jacobian(x))

    def grad_log_prior_constrained(self, theta):
        x = TRANSFORM.forward(theta)
        return (self.grad_log_prior(x) - TRANSFORM.grad_log_jacobian(x)) / TRANSFORM.jacobian_diag(x)

    # expert mixture pieces --------------------------------------------------

    @staticmethod
    def params(x):
        return TRANSFORM.inverse(np.asarray(x, dtype=float))

    @staticmethod
    def _components(theta, prev):
        """Gate log-probabilities and expert means for each particle."""
        s1, s2 = prev[:, 0], prev[:, 1]
        eta = theta[7] + theta[8] * s1 + theta[9] * (s1 - s2)
        logp = np.stack([log_expit(eta), log_expit(-eta)], axis=1)
        means = theta[1:3][None, :] + theta[3:5][None, :] * s1[:, None]
        return logp, means, eta

    def _mix_logdensity(self, theta, s_new, prev):
        logp, means, _ = self._components(theta, prev)
        sig = theta[5:7][None, :]
        d = s_new[:, None] - means
        comp = logp - 0.5 * (_LOG_2PI + 2.0 * np.log(sig) + d * d / sig**2)
        return logsumexp(comp, axis=1), comp, d

    def _mix_grad(self, theta, s_new, prev):
        lse, comp, d = self._mix_logdensity(theta, s_new, prev)
        r = np.exp(comp - lse[:, None])
        logp, _, _ = self._components(theta, prev)
        p1 = np.exp(logp[:, 0])
        sig2 = theta[5:7][None, :] ** 2
        s1, s2 = prev[:, 0], prev[:, 1]
        g = np.zeros((s_new.shape[0], 10))
        g[:, 1:3] = r * d / sig2
        g[:, 3:5] = r * d * s1[:, None] / sig2 * (1.0 - theta[3:5][None, :] ** 2)
        g[:, 5:7] = r * (-1.0 + d * d / sig2)
        gate = r[:, 0] - p1
        g[:, 7] = gate
        g[:, 8] = gate * s1
        g[:, 9] = gate * (s1 - s2)
        return g

    # dynamics --------------------------------------------------------------

    def _initial_prev(self, s0):
        return np.column_stack([s0, s0])

    def sample_initial(self, x, normals, uniforms):
        s0 = self.init_mean + self.init_sd * normals[:, 1]
        return self.sample_transition(x, self._initial_prev(s0), normals, uniforms)

    def initial_logdensity(self, x, states):
        s0 = states[:, 1]
        r = (s0 - self.init_mean) / self.init_sd
        lp0 = -0.5 * (_LOG_2PI + r * r) - math.log(self.init_sd)
        return lp0 + self.transition_logdensity(x, states, self._initial_prev(s0))

    def grad_initial_logdensity(self, x, states):
        return self.grad_transition_logdensity(x, states, self._initial_prev(states[:, 1]))

    def sample_transition(self, x, prev, normals, uniforms):
        theta = self.params(x)
        logp, means, _ = self._components(theta, prev)
        j = (uniforms >= np.exp(logp[:, 0])).astype(int)
        rows = np.arange(prev.shape[0])
        s_new = means[rows, j] + theta[5:7][j] * normals[:, 0]
        return np.column_stack([s_new, prev[:, 0]])

    def transition_logdensity(self, x, new, prev):
        # the lagged component is copied, so only s_t carries density
        return self._mix_logdensity(self.params(x), new[:, 0], prev)[0]

    def grad_transition_logdensity(self, x, new, prev):
        return self._mix_grad(self.params(x), new[:, 0], prev)

    def observation_logdensity(self, x, states, z_t):
        tau = math.exp(float(x[0]))
        e = float(np.ravel(z_t)[0]) - states[:, 0]
        return -0.5 * (_LOG_2PI + 2.0 * math.log(tau) + e * e / (tau * tau))

    def grad_observation_logdensity(self, x, states, z_t):
        tau = math.exp(float(x[0]))
        e = float(np.ravel(z_t)[0]) - states[:, 0]
        g = np.zeros((states.shape[0], 10))
        g[:, 0] = -1.0 + e * e / (tau * tau)
        return g

    def simulate(self, x, T, rng):
        states, _, z = mixture_simulate(MixtureExpertsParams.from_unconstrained(x), T, rng,
                                        self.init_mean, self.init_sd)
        return states, z
