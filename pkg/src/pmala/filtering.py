"""Auxiliary particle filter with pluggable proposals.

Every run pre-draws its random numbers as three arrays, in this order:
resampling uniforms ``(T, N)``, proposal uniforms ``(T, N)`` and proposal
normals ``(T, N, n_s)``. Particle ``i`` at step ``t`` only ever reads row
``t``, column ``i`` of each array, so the result does not depend on the order
in which particles are processed, and the compiled LGSS path reproduces the
generic one from the same stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.special import logsumexp

from .errors import DegenerateFilterError, NumericalError, UnsupportedModelError
from .models.lgss import LinearGaussianSSM
from .models.mixture import MixtureExpertsSSM
from .score import DEFAULT_SHRINKAGE, ScoreRecursionState, final_score, init_score, score_increment, update_score
from .ssm import as_series, check_unconstrained

_LOG_2PI = math.log(2.0 * math.pi)
RESAMPLING_SCHEMES = ("multinomial", "stratified", "systematic")


@dataclass
class ParticleCloud:
    """Particles, normalized weights, parent indices and score means at one step."""

    states: np.ndarray
    weights: np.ndarray
    ancestors: np.ndarray
    score_means: np.ndarray | None = None

    def __post_init__(self):
        if self.states.shape[0] != self.weights.shape[0]:
            raise ValueError("states and weights disagree on N")

    @property
    def n_particles(self):
        return self.weights.shape[0]

    def to_csv(self, path):
        """Debug dump: ``i,ancestor,weight,s1..sk``."""
        n_s = self.states.shape[1]
        header = "i,ancestor,weight," + ",".join(f"s{j + 1}" for j in range(n_s))
        with open(path, "w") as fh:
            fh.write(header + "\n")
            for i in range(self.n_particles):
                vals = ",".join(repr(float(v)) for v in self.states[i])
                fh.write(f"{i},{int(self.ancestors[i])},{float(self.weights[i])!r},{vals}\n")


@dataclass
class FilterOutput:
    log_likelihood: float
    score: np.ndarray | None
    cloud: ParticleCloud
    log_normalizers: np.ndarray
    history: dict | None = field(default=None, repr=False)


# ---------------------------------------------------------------------------
# resampling


def resample_indices(probabilities, uniforms, scheme="multinomial"):
    """Map uniforms on [0, 1) to indices drawn from ``probabilities``.

    ``probabilities`` need not be normalized. For ``"multinomial"`` each
    uniform gives one independent draw. ``"stratified"`` uses
    ``(i + u_i) / N`` and ``"systematic"`` uses ``(i + u_0) / N``.
    """
    p = np.asarray(probabilities, dtype=float)
    u = np.asarray(uniforms, dtype=float)
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("resampling probabilities must be finite and non-negative")
    cdf = np.cumsum(p)
    total = cdf[-1]
    if not total > 0:
        raise ValueError("resampling probabilities sum to zero")
    n = u.shape[0]
    if scheme == "multinomial":
        pos = u
    elif scheme == "stratified":
        pos = (np.arange(n) + u) / n
    elif scheme == "systematic":
        pos = (np.arange(n) + u[0]) / n
    else:
        raise ValueError(f"unknown resampling scheme {scheme!r}")
    idx = np.searchsorted(cdf, pos * total, side="right")
    return np.minimum(idx, p.shape[0] - 1)


# ---------------------------------------------------------------------------
# proposal adapters


class ProposalAdapter:
    """First-stage weights and state proposal for the auxiliary filter.

    The base class is the bootstrap filter: first-stage weights equal the
    previous weights, the proposal is the transition density and the second-stage
    weight reduces to the observation density.
    """

    name = "bootstrap"

    def __init__(self, model):
        self.model = model

    def check_model(self, model):
        if model is not self.model:
            raise UnsupportedModelError("adapter was built for a different model")

    # step 1
    def propose_initial(self, x, z_t, normals, uniforms):
        return self.model.sample_initial(x, normals, uniforms)

    def initial_log_weights(self, x, states, z_t):
        return self.model.observation_logdensity(x, states, z_t)

    # steps t >= 2
    def log_aux_weights(self, x, states, log_w, z_t):
        return log_w

    def propose(self, x, prev, z_t, normals, uniforms):
        return self.model.sample_transition(x, prev, normals, uniforms)

    def log_proposal(self, x, new, prev, z_t):
        return self.model.transition_logdensity(x, new, prev)

    def log_weights(self, x, new, prev, z_t, log_w_parent, log_xi_parent):
        return self.model.observation_logdensity(x, new, z_t)


class _GenericAdapter(ProposalAdapter):
    """Second-stage weights by the full auxiliary formula."""

    def initial_log_weights(self, x, states, z_t):
        m = self.model
        return (m.initial_logdensity(x, states) + m.observation_logdensity(x, states, z_t)
                - self.log_proposal_initial(x, states, z_t))

    def log_proposal_initial(self, x, states, z_t):
        raise NotImplementedError

    def log_weights(self, x, new, prev, z_t, log_w_parent, log_xi_parent):
        m = self.model
        return (log_w_parent + m.observation_logdensity(x, new, z_t)
                + m.transition_logdensity(x, new, prev) - log_xi_parent
                - self.log_proposal(x, new, prev, z_t))


def bootstrap_adapter(model):
    return ProposalAdapter(model)


class LgssFullyAdapted(_GenericAdapter):
    """Conditional-posterior proposal for the linear Gaussian model."""

    name = "fully-adapted"

    def _pieces(self, x, prior_mean, prior_var, z_t):
        a, b, tau, mu, phi, sig = self.model.params(x)
        t2 = tau * tau
        z = float(np.ravel(z_t)[0])
        pred_var = b * b * prior_var + t2
        log_pred = -0.5 * (_LOG_2PI + np.log(pred_var) + (z - a - b * prior_mean) ** 2 / pred_var)
        post_var = prior_var * t2 / pred_var
        post_mean = prior_mean + prior_var * b / pred_var * (z - a - b * prior_mean)
        return log_pred, post_mean, post_var

    def _initial_prior(self, x):
        a, b, tau, mu, phi, sig = self.model.params(x)
        return mu / (1.0 - phi), sig * sig / (1.0 - phi * phi)

    def _transition_prior(self, x, prev):
        a, b, tau, mu, phi, sig = self.model.params(x)
        return mu + phi * prev[:, 0], sig * sig

    def predictive_logdensity(self, x, prev, z_t):
        """``log p(z_t | s_{t-1})`` per particle."""
        m, v = self._transition_prior(x, prev)
        return self._pieces(x, m, v, z_t)[0]

    def propose_initial(self, x, z_t, normals, uniforms):
        m, v = self._initial_prior(x)
        _, pm, pv = self._pieces(x, m, v, z_t)
        return pm + np.sqrt(pv) * normals[:, :1]

    def log_proposal_initial(self, x, states, z_t):
        m, v = self._initial_prior(x)
        _, pm, pv = self._pieces(x, m, v, z_t)
        r = states[:, 0] - pm
        return -0.5 * (_LOG_2PI + np.log(pv) + r * r / pv)

    def log_aux_weights(self, x, states, log_w, z_t):
        return log_w + self.predictive_logdensity(x, states, z_t)

    def propose(self, x, prev, z_t, normals, uniforms):
        m, v = self._transition_prior(x, prev)
        _, pm, pv = self._pieces(x, m, v, z_t)
        return (pm + np.sqrt(pv) * normals[:, 0])[:, None]

    def log_proposal(self, x, new, prev, z_t):
        m, v = self._transition_prior(x, prev)
        _, pm, pv = self._pieces(x, m, v, z_t)
        r = new[:, 0] - pm
        return -0.5 * (_LOG_2PI + np.log(pv) + r * r / pv)


def fully_adapted_adapter_lgss(model):
    if not isinstance(model, LinearGaussianSSM):
        raise UnsupportedModelError("the LGSS fully adapted proposal needs a LinearGaussianSSM")
    return LgssFullyAdapted(model)


class MixtureFullyAdapted(_GenericAdapter):
    """Per-expert Gaussian conjugacy mixed over the gate probabilities.

    At the first step ``s_0`` is drawn from its prior and ``s_1`` from the
    adapted conditional given ``s_0``, so first-step weights are ``p(z_1 | s_0)``.
    """

    name = "fully-adapted"

    def _mixture(self, x, prev, z_t):
        """Predictive log-density, posterior component probabilities, means and variances."""
        theta = self.model.params(x)
        tau2 = theta[0] ** 2
        z = float(np.ravel(z_t)[0])
        logp, means, _ = self.model._components(theta, prev)
        s2 = theta[5:7][None, :] ** 2
        pred_var = s2 + tau2
        log_pred_j = logp - 0.5 * (_LOG_2PI + np.log(pred_var) + (z - means) ** 2 / pred_var)
        log_pred = logsumexp(log_pred_j, axis=1)
        post_prob = np.exp(log_pred_j - log_pred[:, None])
        post_var = np.broadcast_to(s2 * tau2 / pred_var, means.shape)
        post_mean = post_var * (means / s2 + z / tau2)
        return log_pred, post_prob, post_mean, post_var

    def predictive_logdensity(self, x, prev, z_t):
        return self._mixture(x, prev, z_t)[0]

    def _conditional_logdensity(self, x, s_new, prev, z_t):
        _, prob, pm, pv = self._mixture(x, prev, z_t)
        r = s_new[:, None] - pm
        comp = np.log(prob) - 0.5 * (_LOG_2PI + np.log(pv) + r * r / pv)
        return logsumexp(comp, axis=1)

    def _draw(self, x, prev, z_t, normals, uniforms):
        _, prob, pm, pv = self._mixture(x, prev, z_t)
        j = (uniforms >= prob[:, 0]).astype(int)
        rows = np.arange(prev.shape[0])
        s_new = pm[rows, j] + np.sqrt(pv[rows, j]) * normals[:, 0]
        return np.column_stack([s_new, prev[:, 0]])

    def propose_initial(self, x, z_t, normals, uniforms):
        m = self.model
        s0 = m.init_mean + m.init_sd * normals[:, 1]
        return self._draw(x, np.column_stack([s0, s0]), z_t, normals, uniforms)

    def log_proposal_initial(self, x, states, z_t):
        m = self.model
        s0 = states[:, 1]
        r = (s0 - m.init_mean) / m.init_sd
        lp0 = -0.5 * (_LOG_2PI + r * r) - math.log(m.init_sd)
        return lp0 + self._conditional_logdensity(x, states[:, 0], np.column_stack([s0, s0]), z_t)

    def log_aux_weights(self, x, states, log_w, z_t):
        return log_w + self.predictive_logdensity(x, states, z_t)

    def propose(self, x, prev, z_t, normals, uniforms):
        return self._draw(x, prev, z_t, normals, uniforms)

    def log_proposal(self, x, new, prev, z_t):
        return self._conditional_logdensity(x, new[:, 0], prev, z_t)


def fully_adapted_adapter_mixture(model):
    if not isinstance(model, MixtureExpertsSSM):
        raise UnsupportedModelError("the mixture fully adapted proposal needs a MixtureExpertsSSM")
    return MixtureFullyAdapted(model)


def make_adapter(model, kind):
    """Build an adapter from its configuration name."""
    if kind == "bootstrap":
        return bootstrap_adapter(model)
    if kind == "fully-adapted":
        if isinstance(model, LinearGaussianSSM):
            return fully_adapted_adapter_lgss(model)
        if isinstance(model, MixtureExpertsSSM):
            return fully_adapted_adapter_mixture(model)
        raise UnsupportedModelError(f"no fully adapted proposal for {type(model).__name__}")
    raise ValueError(f"unknown adapter {kind!r}")


# ---------------------------------------------------------------------------
# filter


def draw_filter_randomness(rng, T, n_particles, state_dim):
    res_u = rng.random((T, n_particles))
    prop_u = rng.random((T, n_particles))
    normals = rng.standard_normal((T, n_particles, state_dim))
    return res_u, prop_u, normals


def _normalize(log_w, step):
    if np.any(np.isnan(log_w)):
        raise NumericalError(f"NaN weight at step {step}")
    top = np.max(log_w)
    if top == -np.inf:
        raise DegenerateFilterError(step)
    if top == np.inf:
        raise NumericalError(f"infinite weight at step {step}")
    lse = top + math.log(np.sum(np.exp(log_w - top)))
    return lse, np.exp(log_w - lse)


def run_apf(model, x, z, n_particles, adapter=None, rng=None, with_score=False,
            shrinkage=DEFAULT_SHRINKAGE, resampling="multinomial", keep_history=False,
            engine="auto"):
    """Run the auxiliary particle filter.

    Parameters
    ----------
    model : StateSpaceModel
    x : array_like
        Unconstrained parameters.
    z : ObservationSeries or array_like
    n_particles : int
    adapter : ProposalAdapter, optional
        Defaults to the bootstrap filter.
    rng : numpy Generator or seed
    with_score : bool
        Also run the shrinkage score recursion.
    shrinkage : float
        ``zeta`` in (0, 1].
    resampling : str
        ``"multinomial"`` (default), ``"stratified"`` or ``"systematic"``.
    keep_history : bool
        Store per-step states, ancestors, weights and score increments.
    engine : {"auto", "python", "numba"}
        ``"auto"`` uses the compiled path for the linear Gaussian model when no
        history is requested.

    Returns
    -------
    FilterOutput

    Raises
    ------
    DegenerateFilterError
        If every weight is zero at some step.
    NumericalError
        If a weight is NaN.
    """
    x = check_unconstrained(x)
    z = as_series(z)
    if n_particles < 1:
        raise ValueError("need at least one particle")
    if not 0.0 < shrinkage <= 1.0:
        raise ValueError("shrinkage must lie in (0, 1]")
    if resampling not in RESAMPLING_SCHEMES:
        raise ValueError(f"unknown resampling scheme {resampling!r}")
    adapter = adapter or bootstrap_adapter(model)
    adapter.check_model(model)
    rng = np.random.default_rng(rng)
    T = z.T
    N = int(n_particles)
    res_u, prop_u, normals = draw_filter_randomness(rng, T, N, model.state_dim)

    fast = (type(model) is LinearGaussianSSM and type(adapter) in (ProposalAdapter, LgssFullyAdapted)
            and resampling == "multinomial" and not keep_history)
    if engine == "numba" and not fast:
        raise ValueError("the compiled path only covers the LGSS model without history")
    if engine == "numba" or (engine == "auto" and fast):
        return _run_lgss_numba(model, x, z, N, adapter, res_u, prop_u, normals, with_score, shrinkage)

    zv = z.values
    states = adapter.propose_initial(x, zv[0], normals[0], prop_u[0])
    log_w_tilde = adapter.initial_log_weights(x, states, zv[0])
    lse, w = _normalize(log_w_tilde, 1)
    log_norm = np.empty(T)
    log_norm[0] = lse - math.log(N)
    ancestors = np.arange(N)
    score_state = init_score(model, x, states, zv[0], shrinkage) if with_score else None
    hist = None
    if keep_history:
        hist = {"states": [states], "ancestors": [ancestors], "weights": [w],
                "increments": [score_state.means] if with_score else []}

    for t in range(1, T):
        log_w = np.log(w)
        log_xi = adapter.log_aux_weights(x, states, log_w, zv[t])
        xi_lse, xi = _normalize(log_xi, t + 1)
        ancestors = resample_indices(xi, res_u[t], resampling)
        prev = states[ancestors]
        states = adapter.propose(x, prev, zv[t], normals[t], prop_u[t])
        log_w_tilde = adapter.log_weights(x, states, prev, zv[t], log_w[ancestors],
                                          np.log(xi[ancestors]))
        lse, w_new = _normalize(log_w_tilde, t + 1)
        log_norm[t] = lse - math.log(N)
        if with_score:
            inc = score_increment(model, x, states, prev, zv[t])
            score_state = update_score(score_state, ancestors, w, inc)
            if keep_history:
                hist["increments"].append(inc)
        w = w_new
        if keep_history:
            hist["states"].append(states)
            hist["ancestors"].append(ancestors)
            hist["weights"].append(w)

    score = final_score(score_state, w) if with_score else None
    cloud = ParticleCloud(states, w, ancestors, score_state.means if with_score else None)
    return FilterOutput(float(np.sum(log_norm)), score, cloud, log_norm, hist)


# ---------------------------------------------------------------------------
# compiled LGSS path


@numba.njit(cache=True)
def _lse(v):
    top = -np.inf
    for i in range(v.shape[0]):
        if v[i] > top:
            top = v[i]
    if top == -np.inf or top == np.inf or top != top:
        return top
    s = 0.0
    for i in range(v.shape[0]):
        s += math.exp(v[i] - top)
    return top + math.log(s)


@numba.njit(cache=True)
def _lgss_kernel(xu, z, res_u, normals, adapted, with_score, zeta, out_norm, out_score, out_w, out_s,
                 out_anc):
    """Returns 0 on success, ``-(step)`` on degeneracy, ``step`` on NaN."""
    a = xu[0]
    b = xu[1]
    tau = math.exp(xu[2])
    mu = xu[3]
    phi = math.tanh(xu[4])
    sig = math.exp(xu[5])
    t2 = tau * tau
    s2 = sig * sig
    dphi = 1.0 - phi * phi
    T = z.shape[0]
    N = res_u.shape[1]
    log2pi = math.log(2.0 * math.pi)
    logN = math.log(N)

    s = np.empty(N)
    lw = np.empty(N)
    m0 = mu / (1.0 - phi)
    P0 = s2 / dphi
    if adapted:
        F = b * b * P0 + t2
        pv = P0 * t2 / F
        for i in range(N):
            e0 = z[0] - a - b * m0
            pm = m0 + P0 * b / F * e0
            s[i] = pm + math.sqrt(pv) * normals[0, i, 0]
            r = s[i] - m0
            lq = -0.5 * (log2pi + math.log(pv) + (s[i] - pm) ** 2 / pv)
            lmu = -0.5 * (log2pi + math.log(P0) + r * r / P0)
            e = z[0] - a - b * s[i]
            lw[i] = lmu + (-0.5 * (log2pi + 2.0 * math.log(tau) + e * e / t2)) - lq
    else:
        for i in range(N):
            s[i] = m0 + math.sqrt(P0) * normals[0, i, 0]
            e = z[0] - a - b * s[i]
            lw[i] = -0.5 * (log2pi + 2.0 * math.log(tau) + e * e / t2)
    m = np.zeros((N, 6))
    if with_score:
        for i in range(N):
            e = z[0] - a - b * s[i]
            r = s[i] - m0
            m[i, 0] = e / t2
            m[i, 1] = e * s[i] / t2
            m[i, 2] = -1.0 + e * e / t2
            m[i, 3] = r / P0 / (1.0 - phi)
            dlp = -0.5 / P0 + 0.5 * r * r / (P0 * P0)
            m[i, 4] = (r / P0 * mu / (1.0 - phi) ** 2 + dlp * 2.0 * phi * s2 / (dphi * dphi)) * dphi
            m[i, 5] = -1.0 + r * r / P0
    lse = _lse(lw)
    if lse != lse:
        return 1
    if lse == -np.inf:
        return -1
    out_norm[0] = lse - logN
    w = np.empty(N)
    for i in range(N):
        w[i] = math.exp(lw[i] - lse)
    anc = np.arange(N)
    xi = np.empty(N)
    lxi = np.empty(N)
    cdf = np.empty(N)
    snew = np.empty(N)
    mnew = np.zeros((N, 6))
    shared = np.zeros(6)
    F = b * b * s2 + t2
    pv = s2 * t2 / F
    for t in range(1, T):
        for i in range(N):
            lxi[i] = math.log(w[i])
            if adapted:
                pmean = mu + phi * s[i]
                e = z[t] - a - b * pmean
                lxi[i] += -0.5 * (log2pi + math.log(F) + e * e / F)
        xl = _lse(lxi)
        if xl != xl:
            return t + 1
        if xl == -np.inf:
            return -(t + 1)
        acc = 0.0
        for i in range(N):
            xi[i] = math.exp(lxi[i] - xl)
            acc += xi[i]
            cdf[i] = acc
        for i in range(N):
            k = np.searchsorted(cdf, res_u[t, i] * cdf[N - 1], side="right")
            if k > N - 1:
                k = N - 1
            anc[i] = k
        for i in range(N):
            k = anc[i]
            prev = s[k]
            pmean = mu + phi * prev
            if adapted:
                pm = pmean + s2 * b / F * (z[t] - a - b * pmean)
                snew[i] = pm + math.sqrt(pv) * normals[t, i, 0]
                e = z[t] - a - b * snew[i]
                d = snew[i] - pmean
                lg = -0.5 * (log2pi + 2.0 * math.log(tau) + e * e / t2)
                lf = -0.5 * (log2pi + 2.0 * math.log(sig) + d * d / s2)
                lq = -0.5 * (log2pi + math.log(pv) + (snew[i] - pm) ** 2 / pv)
                lw[i] = math.log(w[k]) + lg + lf - math.log(xi[k]) - lq
            else:
                snew[i] = pmean + sig * normals[t, i, 0]
                e = z[t] - a - b * snew[i]
                lw[i] = -0.5 * (log2pi + 2.0 * math.log(tau) + e * e / t2)
        if with_score:
            for j in range(6):
                acc = 0.0
                for i in range(N):
                    acc += w[i] * m[i, j]
                shared[j] = acc
            for i in range(N):
                k = anc[i]
                prev = s[k]
                e = z[t] - a - b * snew[i]
                d = snew[i] - mu - phi * prev
                mnew[i, 0] = zeta * m[k, 0] + (1.0 - zeta) * shared[0] + e / t2
                mnew[i, 1] = zeta * m[k, 1] + (1.0 - zeta) * shared[1] + e * snew[i] / t2
                mnew[i, 2] = zeta * m[k, 2] + (1.0 - zeta) * shared[2] + (-1.0 + e * e / t2)
                mnew[i, 3] = zeta * m[k, 3] + (1.0 - zeta) * shared[3] + d / s2
                mnew[i, 4] = zeta * m[k, 4] + (1.0 - zeta) * shared[4] + d * prev / s2 * dphi
                mnew[i, 5] = zeta * m[k, 5] + (1.0 - zeta) * shared[5] + (-1.0 + d * d / s2)
            for i in range(N):
                for j in range(6):
                    m[i, j] = mnew[i, j]
        for i in range(N):
            s[i] = snew[i]
        lse = _lse(lw)
        if lse != lse:
            return t + 1
        if lse == -np.inf:
            return -(t + 1)
        out_norm[t] = lse - logN
        for i in range(N):
            w[i] = math.exp(lw[i] - lse)
    for j in range(6):
        acc = 0.0
        for i in range(N):
            acc += w[i] * m[i, j]
        out_score[j] = acc
    for i in range(N):
        out_w[i] = w[i]
        out_s[i] = s[i]
        out_anc[i] = anc[i]
    return 0


def _run_lgss_numba(model, x, z, N, adapter, res_u, prop_u, normals, with_score, shrinkage):
    T = z.T
    out_norm = np.empty(T)
    out_score = np.empty(6)
    out_w = np.empty(N)
    out_s = np.empty(N)
    out_anc = np.empty(N, dtype=np.int64)
    code = _lgss_kernel(x, np.ascontiguousarray(z.values[:, 0]), res_u, normals,
                        isinstance(adapter, LgssFullyAdapted), with_score, float(shrinkage),
                        out_norm, out_score, out_w, out_s, out_anc)
    if code < 0:
        raise DegenerateFilterError(-code)
    if code > 0:
        raise NumericalError(f"NaN weight at step {code}")
    if with_score and not np.all(np.isfinite(out_score)):
        raise NumericalError("non-finite score estimate")
    cloud = ParticleCloud(out_s[:, None], out_w, out_anc, None)
    return FilterOutput(float(np.sum(out_norm)), out_score if with_score else None, cloud, out_norm)
