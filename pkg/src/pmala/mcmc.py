"""Pseudo-marginal Metropolis-Hastings kernels on the unconstrained scale.

Three proposal kinds share one code path:

* ``random-walk``: ``y = x + lambda L Z``
* ``langevin``: ``y = x + (lambda^2 / 2) V g(x) + lambda L Z`` with ``g`` the particle
  estimate of the log-posterior gradient
* ``idealized-langevin``: as above with an exact gradient and a noisy likelihood

``L`` is the Cholesky factor of the preconditioner ``V``. The estimates attached
to the current state are reused unchanged until a proposal is accepted.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cholesky, solve_triangular

from .errors import ConfigError, DegenerateFilterError, NumericalError
from .filtering import bootstrap_adapter, run_apf
from .score import DEFAULT_SHRINKAGE
from .ssm import as_series, check_unconstrained

KINDS = ("random-walk", "langevin", "idealized-langevin")
# (c, p) in lambda^2 = gamma^2 c n^{-p}
SCALING_RULES = {
    "random-walk": (2.562**2, 1.0),
    "langevin": (1.125**2, 1.0 / 3.0),
    "idealized-langevin": (1.125**2, 1.0 / 3.0),
}


@dataclass(frozen=True)
class Evaluation:
    """Log-posterior estimate and gradient estimate at one point."""

    log_post: float
    grad: np.ndarray | None = None
    log_lik: float = -np.inf
    degenerate: bool = False

    @property
    def finite(self):
        return math.isfinite(self.log_post)


@dataclass(frozen=True)
class ChainState:
    x: np.ndarray
    log_post: float
    grad: np.ndarray | None
    aux: dict = field(default_factory=dict)


@dataclass(frozen=True)
class KernelConfig:
    """Proposal kind, scaling multiplier and preconditioner.

    The squared step size follows the dimension rule
    ``lambda^2 = gamma^2 c n^{-p}`` with ``(c, p) = (2.562^2, 1)`` for the random
    walk and ``(1.125^2, 1/3)`` for the Langevin kinds, unless ``step2`` is given.
    """

    kind: str
    gamma: float
    V: np.ndarray
    step2: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown kernel kind {self.kind!r}")
        if not self.gamma > 0:
            raise ConfigError("gamma must be positive")
        V = np.atleast_2d(np.asarray(self.V, dtype=float))
        if V.shape[0] != V.shape[1] or not np.allclose(V, V.T, rtol=1e-10, atol=1e-14):
            raise ConfigError("preconditioner must be a symmetric square matrix")
        try:
            L = cholesky(V, lower=True)
        except np.linalg.LinAlgError as exc:
            raise ConfigError("preconditioner is not positive definite") from exc
        object.__setattr__(self, "V", V)
        object.__setattr__(self, "_chol", L)

    @property
    def n(self):
        return self.V.shape[0]

    @property
    def chol(self):
        return self._chol

    @property
    def lambda2(self):
        if self.step2 is not None:
            return float(self.step2)
        c, p = SCALING_RULES[self.kind]
        return self.gamma**2 * c * self.n ** (-p)

    @property
    def uses_gradient(self):
        return self.kind != "random-walk"


def _drift(config, grad):
    if not config.uses_gradient:
        return 0.0
    if grad is None or not np.all(np.isfinite(grad)):
        raise NumericalError("Langevin proposal needs a finite gradient estimate")
    return 0.5 * config.lambda2 * (config.V @ grad)


def propose(state, config, rng=None, normals=None):
    """Draw ``y`` from the proposal at ``state``; returns ``(y, log q(y | x))``."""
    if normals is None:
        normals = np.random.default_rng(rng).standard_normal(config.n)
    lam = math.sqrt(config.lambda2)
    y = state.x + _drift(config, state.grad) + lam * (config.chol @ normals)
    return y, proposal_logdensity(y, state, config)


def proposal_logdensity(y, state, config):
    """``log q(y | x)`` for the Gaussian proposal centred at ``x + drift(x)``."""
    lam2 = config.lambda2
    r = y - state.x - _drift(config, state.grad)
    if lam2 == 0:
        return 0.0 if np.all(r == 0) else -np.inf
    w = solve_triangular(config.chol, r, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(config.chol))) + config.n * math.log(lam2)
    return float(-0.5 * (config.n * math.log(2.0 * math.pi) + logdet + w @ w / lam2))


def acceptance_log_ratio(current, proposed, log_q_forward, log_q_reverse):
    """``log pi^(y) - log pi^(x) + log q(x | y) - log q(y | x)``; ``-inf`` if ``y`` is degenerate."""
    if not math.isfinite(proposed.log_post):
        return -np.inf
    return proposed.log_post - current.log_post + log_q_reverse - log_q_forward


# ---------------------------------------------------------------------------
# targets


class ParticlePosterior:
    """Posterior estimate from a particle filter run plus the prior.

    Parameters
    ----------
    model : StateSpaceModel
    z : ObservationSeries
    n_particles : int
    adapter : ProposalAdapter, optional
    shrinkage : float
        Score shrinkage ``zeta``.
    gradient : {"particle", "exact", None}
        Source of the gradient estimate. ``"exact"`` calls ``exact_score(x)``
        and gives the idealized Langevin setting.
    exact_score : callable, optional
    """

    def __init__(self, model, z, n_particles, adapter=None, shrinkage=DEFAULT_SHRINKAGE,
                 gradient="particle", exact_score=None):
        self.model = model
        self.z = as_series(z)
        if self.z.n_z != model.obs_dim:
            raise ConfigError("data dimension does not match the model")
        self.n_particles = int(n_particles)
        self.adapter = adapter or bootstrap_adapter(model)
        if self.adapter.model is not model:
            raise ConfigError("filter adapter was built for a different model")
        self.shrinkage = shrinkage
        if gradient not in ("particle", "exact", None):
            raise ConfigError(f"unknown gradient source {gradient!r}")
        if gradient == "exact" and exact_score is None:
            raise ConfigError("exact gradient requested without an exact score")
        self.gradient = gradient
        self.exact_score = exact_score

    @property
    def provides_gradient(self):
        return self.gradient is not None

    def evaluate(self, x, rng):
        lp = self.model.log_prior(x)
        if not math.isfinite(lp):
            return Evaluation(-np.inf)
        try:
            out = run_apf(self.model, x, self.z, self.n_particles, self.adapter, rng,
                          with_score=self.gradient == "particle", shrinkage=self.shrinkage)
        except (DegenerateFilterError, NumericalError):
            return Evaluation(-np.inf, degenerate=True)
        grad = None
        if self.gradient == "particle":
            grad = out.score + self.model.grad_log_prior(x)
        elif self.gradient == "exact":
            grad = np.asarray(self.exact_score(x), dtype=float) + self.model.grad_log_prior(x)
        if grad is not None and not np.all(np.isfinite(grad)):
            return Evaluation(-np.inf, degenerate=True)
        return Evaluation(out.log_likelihood + lp, grad, out.log_likelihood)


class ExactLgssPosterior:
    """Kalman likelihood and score for the linear Gaussian model (no noise)."""

    provides_gradient = True

    def __init__(self, model, z):
        from .models.lgss import LgssParams, LinearGaussianSSM, kalman_loglik_and_score

        if not isinstance(model, LinearGaussianSSM):
            raise ConfigError("the exact posterior needs the linear Gaussian model")
        self.model = model
        self.z = as_series(z)
        self._params = LgssParams.from_unconstrained
        self._kalman = kalman_loglik_and_score

    def score(self, x):
        return self._kalman(self._params(x), self.z)[1]

    def evaluate(self, x, rng=None):
        lp = self.model.log_prior(x)
        if not math.isfinite(lp):
            return Evaluation(-np.inf)
        try:
            ll, g = self._kalman(self._params(x), self.z)
        except (NumericalError, ValueError):
            return Evaluation(-np.inf, degenerate=True)
        return Evaluation(ll + lp, g + self.model.grad_log_prior(x), ll)


class DensityTarget:
    """Exact target given by a log density and its gradient."""

    provides_gradient = True

    def __init__(self, logpdf, grad):
        self.logpdf = logpdf
        self.grad = grad

    def evaluate(self, x, rng=None):
        lp = float(self.logpdf(x))
        if not math.isfinite(lp):
            return Evaluation(-np.inf)
        return Evaluation(lp, np.asarray(self.grad(x), dtype=float), lp)


# ---------------------------------------------------------------------------
# chain


@dataclass
class ChainTrace:
    """Chain output. Row ``j`` is the state after iteration ``j + 1``."""

    states: np.ndarray
    log_post: np.ndarray
    accepted: np.ndarray
    proposal_sq_jumps: np.ndarray
    seconds: float
    burn_in: int = 0
    x0: np.ndarray | None = None

    def __post_init__(self):
        J = self.states.shape[0]
        if not (self.log_post.shape[0] == self.accepted.shape[0] == self.proposal_sq_jumps.shape[0] == J):
            raise ValueError("trace arrays disagree on length")

    def __len__(self):
        return self.states.shape[0]

    def post_burn_in(self):
        b = self.burn_in
        return ChainTrace(self.states[b:], self.log_post[b:], self.accepted[b:],
                          self.proposal_sq_jumps[b:], self.seconds, 0,
                          self.states[b - 1] if b > 0 else self.x0)

    @property
    def acceptance_rate(self):
        return float(np.mean(self.accepted)) if len(self) else float("nan")


def _initial_state(target, x0, rng, attempts=100):
    for _ in range(attempts):
        ev = target.evaluate(x0, rng)
        if ev.finite:
            return ChainState(x0, ev.log_post, ev.grad, {"log_lik": ev.log_lik})
    raise DegenerateFilterError(0, f"no finite posterior estimate at the initial point after {attempts} attempts")


def run_chain(target, kernel, iterations, x0, rng=None, burn_in=0):
    """Run a pseudo-marginal chain.

    Parameters
    ----------
    target : object with ``evaluate(x, rng)`` and ``provides_gradient``
    kernel : KernelConfig
    iterations : int
        Total number of iterations ``J``, burn-in included.
    x0 : array_like
        Initial unconstrained point.
    rng : numpy Generator or seed
    burn_in : int
        Iterations to discard in summaries; stored on the trace.

    Returns
    -------
    ChainTrace
    """
    if iterations < 1:
        raise ValueError("need at least one iteration")
    if not 0 <= burn_in < iterations:
        raise ValueError("burn-in must lie in [0, iterations)")
    if kernel.uses_gradient and not target.provides_gradient:
        raise ConfigError(f"{kernel.kind} kernel needs a target with gradient estimates")
    x0 = check_unconstrained(x0)
    if x0.shape[0] != kernel.n:
        raise ConfigError("preconditioner dimension does not match the parameters")
    rng = np.random.default_rng(rng)
    n = kernel.n
    states = np.empty((iterations, n))
    log_post = np.empty(iterations)
    accepted = np.zeros(iterations, dtype=bool)
    jumps = np.empty(iterations)

    start = time.perf_counter()
    current = _initial_state(target, x0, rng)
    for j in range(iterations):
        y, log_fwd = propose(current, kernel, normals=rng.standard_normal(n))
        jumps[j] = float(np.sum((y - current.x) ** 2))
        ev = target.evaluate(y, rng) if np.all(np.isfinite(y)) else Evaluation(-np.inf)
        u = rng.random()
        if ev.finite:
            cand = ChainState(y, ev.log_post, ev.grad, {"log_lik": ev.log_lik})
            log_rev = proposal_logdensity(current.x, cand, kernel)
            ratio = acceptance_log_ratio(current, cand, log_fwd, log_rev)
            if u == 0.0 or math.log(u) < ratio:
                current = cand
                accepted[j] = True
        states[j] = current.x
        log_post[j] = current.log_post
    seconds = time.perf_counter() - start
    return ChainTrace(states, log_post, accepted, jumps, seconds, burn_in, x0)


def pilot_covariance(trace, burn_in=None):
    """Sample covariance of the post-burn-in states with a small ridge.

    Raises
    ------
    ValueError
        For a trace shorter than ``10 n`` or one with no spread.
    """
    b = trace.burn_in if burn_in is None else burn_in
    X = np.asarray(trace.states)[b:]
    n = X.shape[1]
    if X.shape[0] < 10 * n:
        raise ValueError(f"pilot trace has {X.shape[0]} rows, need at least {10 * n}")
    C = np.atleast_2d(np.cov(X, rowvar=False))
    tr = float(np.trace(C))
    if not tr > 0 or not math.isfinite(tr):
        raise ValueError("pilot trace is constant; run longer or start elsewhere")
    C = 0.5 * (C + C.T) + (1e-8 * tr / n) * np.eye(n)
    try:
        cholesky(C, lower=True)
    except np.linalg.LinAlgError as exc:
        raise ValueError("pilot covariance is not positive definite after regularization") from exc
    return C


def write_trace_csv(trace, path):
    n = trace.states.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "accept", "logpost"] + [f"x{i + 1}" for i in range(n)])
        for j in range(len(trace)):
            w.writerow([j + 1, int(trace.accepted[j]), repr(float(trace.log_post[j]))]
                       + [repr(float(v)) for v in trace.states[j]])


def trace_summary(trace):
    """Acceptance rate, ESJD and wall-clock time of the post-burn-in part."""
    from .diagnostics import esjd

    post = trace.post_burn_in()
    return {
        "iterations": len(trace),
        "burn_in": trace.burn_in,
        "acceptance_rate": post.acceptance_rate,
        "esjd": esjd(post),
        "seconds": trace.seconds,
    }


def write_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")

