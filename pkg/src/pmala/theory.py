"""Limiting acceptance rates and efficiencies for particle Langevin proposals.

Everything here refers to the high-dimensional product-target setting: the
log target is a sum of ``n`` iid one-dimensional terms ``g``, the
log-likelihood estimate carries additive Gaussian noise with variance
``sigma2`` and the gradient estimate of each component carries an error
``n**-kappa * (b(x) + tau * U)``.

Three regimes are distinguished by the decay exponent ``kappa`` of the
gradient error::

    kappa <  1/3   regime 1   alpha = 2 Phi(-sqrt(l^2 K*^2 + 2 s2) / 2)
    kappa == 1/3   regime 2   alpha = 2 Phi(-sqrt(l^6 K^2 + 2 l^4 K** + l^2 K*^2 + 2 s2) / 2)
    kappa >  1/3   regime 3   alpha = 2 Phi(-sqrt(l^6 K^2 + 2 s2) / 2)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np
from scipy import integrate, optimize
from scipy.special import log_ndtr, ndtr, ndtri

from .errors import DomainError, NumericalError

KAPPA_CRITICAL = 1.0 / 3.0
_KAPPA_TOL = 1e-12


def gaussian_min_exp_moment(a, b):
    """Return ``E[min(1, exp(U))]`` for ``U ~ N(a, b**2)``.

    Uses the closed form ``Phi(a/b) + exp(a + b^2/2) Phi(-b - a/b)``, with the
    second term evaluated in log space so that large ``a`` does not overflow.
    ``b == 0`` gives ``min(1, exp(a))``.
    """
    a = float(a)
    b = float(b)
    if b < 0:
        raise DomainError(f"standard deviation must be non-negative, got {b}")
    if b == 0.0:
        return min(1.0, math.exp(min(a, 0.0)))
    first = ndtr(a / b)
    second = math.exp(a + 0.5 * b * b + log_ndtr(-b - a / b))
    return float(min(1.0, first + second))


@dataclass(frozen=True)
class Roughness:
    """Roughness constants of the target and of the gradient error.

    Attributes
    ----------
    K : float
        Target roughness, ``sqrt(E[5 g'''^2 - 3 g''^3] / 48)``.
    k_star_sq : float
        ``E[b^2] + tau^2 / 2``, the squared gradient-error scale.
    k_starstar : float
        ``-E[b' g''] / 4``; may be negative.
    """

    K: float
    k_star_sq: float = 0.0
    k_starstar: float = 0.0

    def __post_init__(self):
        if not self.K > 0:
            raise DomainError(f"K must be positive, got {self.K}")
        if self.k_star_sq < 0:
            raise DomainError(f"K*^2 must be non-negative, got {self.k_star_sq}")

    def regime2_quadratic(self, ell):
        """``l^6 K^2 + 2 l^4 K** + l^2 K*^2``, the regime-2 variance term."""
        ell = np.asarray(ell, dtype=float)
        return (ell**6 * self.K**2 + 2.0 * ell**4 * self.k_starstar
                + ell**2 * self.k_star_sq)

    def is_feasible(self, rtol=1e-9):
        """Check the bound ``K**^2 <= K*^2 K^2``."""
        bound = self.k_star_sq * self.K**2
        return self.k_starstar**2 <= bound * (1.0 + rtol) + 1e-300


@dataclass(frozen=True)
class RegimeSpec:
    """A limiting regime: gradient-error decay ``kappa``, roughness and noise."""

    kappa: float
    roughness: Roughness
    sigma2: float = 0.0

    def __post_init__(self):
        if self.kappa < 0:
            raise DomainError(f"kappa must be non-negative, got {self.kappa}")
        if self.sigma2 < 0:
            raise DomainError(f"sigma2 must be non-negative, got {self.sigma2}")

    @property
    def index(self):
        """1, 2 or 3 according to the position of ``kappa`` relative to 1/3."""
        if abs(self.kappa - KAPPA_CRITICAL) <= _KAPPA_TOL:
            return 2
        return 1 if self.kappa < KAPPA_CRITICAL else 3


def _two_phi_half(total):
    return 2.0 * ndtr(-0.5 * np.sqrt(total))


def alpha_regime1(ell, sigma2, k_star_sq):
    ell = np.asarray(ell, dtype=float)
    return _two_phi_half(ell**2 * k_star_sq + 2.0 * sigma2)


def alpha_regime3(ell, sigma2, K):
    ell = np.asarray(ell, dtype=float)
    return _two_phi_half(ell**6 * K**2 + 2.0 * sigma2)


def alpha_regime2(ell, sigma2, roughness):
    quad = roughness.regime2_quadratic(ell)
    if np.any(quad < 0):
        raise DomainError(
            "l^6 K^2 + 2 l^4 K** + l^2 K*^2 is negative; the roughness "
            "constants are infeasible at this scaling")
    return _two_phi_half(quad + 2.0 * sigma2)


def _scalar(value):
    value = np.asarray(value)
    return float(value) if value.ndim == 0 else value


def limiting_acceptance(regime, ell):
    """Limiting expected acceptance rate of the particle Langevin proposal."""
    if np.any(np.asarray(ell) < 0):
        raise DomainError("scaling ell must be non-negative")
    r = regime.roughness
    idx = regime.index
    if idx == 1:
        out = alpha_regime1(ell, regime.sigma2, r.k_star_sq)
    elif idx == 2:
        out = alpha_regime2(ell, regime.sigma2, r)
    else:
        out = alpha_regime3(ell, regime.sigma2, r.K)
    return _scalar(out)


def efficiency(regime, ell):
    """Cost-adjusted efficiency ``sigma2 * ell^2 * alpha`` (up to a constant)."""
    ell_arr = np.asarray(ell, dtype=float)
    return _scalar(regime.sigma2 * ell_arr**2 * limiting_acceptance(regime, ell))


class OptimalParams(NamedTuple):
    ell: float
    sigma2: float
    alpha: float


def _optimal_a():
    # stationary point of (8/3) log a + log Phi(-a)
    def score(a):
        return 8.0 / (3.0 * a) - math.exp(-0.5 * a * a - 0.5 * math.log(2 * math.pi)
                                         - log_ndtr(-a))
    return optimize.brentq(score, 0.5, 3.0, xtol=1e-15, rtol=4 * np.finfo(float).eps)


def optimal_params(K):
    """Efficiency-maximizing scaling, noise variance and acceptance in regime 3.

    Returns
    -------
    OptimalParams
        ``ell ~ 1.125 K^(-1/3)``, ``sigma2 ~ 3.038`` and ``alpha ~ 0.1547``.
    """
    if not K > 0:
        raise DomainError(f"K must be positive, got {K}")
    a = _optimal_a()
    # b^2 = 2 sigma2 = 3 a^2 and a^2 = K^2 ell^6
    sigma2 = 1.5 * a * a
    ell = (a / K) ** (1.0 / 3.0)
    alpha = 2.0 * float(ndtr(-a))
    return OptimalParams(ell, sigma2, alpha)


# ---------------------------------------------------------------------------
# roughness constants by quadrature


def _expect(func, weight, tol):
    def integrand(x):
        return func(x) * weight(x)

    value, err = integrate.quad(integrand, -np.inf, np.inf, epsabs=tol, epsrel=tol,
                                limit=400)
    if err <= max(100 * tol, 1e-8 * abs(value)):
        return value
    # fallback: split the line and integrate the pieces separately
    edges = [-np.inf, -50.0, -10.0, -3.0, 0.0, 3.0, 10.0, 50.0, np.inf]
    value, err = 0.0, 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        v, e = integrate.quad(integrand, lo, hi, epsabs=tol, epsrel=tol, limit=400)
        value += v
        err += e
    if err > max(100 * tol, 1e-8 * abs(value)):
        raise NumericalError(f"quadrature did not converge (error estimate {err:.3g})")
    return value


def roughness_from_density(logpdf, d2, d3, bias=None, dbias=None, tau=0.0, tol=1e-10):
    """Compute the roughness constants of a one-dimensional target.

    Parameters
    ----------
    logpdf : callable
        ``g(x)``, log density of the target component (normalized or not).
    d2, d3 : callable
        Second and third derivatives of ``g``.
    bias, dbias : callable, optional
        Gradient bias ``b(x)`` and its derivative. Zero when omitted.
    tau : float
        Standard deviation of the gradient noise.
    """
    if tau < 0:
        raise DomainError("tau must be non-negative")
    if (bias is None) != (dbias is None):
        raise ValueError("bias and dbias must be given together")
    z = _expect(lambda x: 1.0, lambda x: math.exp(logpdf(x)), tol)
    if not z > 0 or not math.isfinite(z):
        raise NumericalError("target density does not integrate to a positive value")

    def dens(x):
        return math.exp(logpdf(x)) / z

    k2 = _expect(lambda x: 5.0 * d3(x) ** 2 - 3.0 * d2(x) ** 3, dens, tol) / 48.0
    if k2 <= 0:
        raise DomainError("E[5 g'''^2 - 3 g''^3] must be positive")
    if bias is None:
        k_star_sq = 0.5 * tau * tau
        k_ss = 0.0
    else:
        k_star_sq = _expect(lambda x: bias(x) ** 2, dens, tol) + 0.5 * tau * tau
        k_ss = -0.25 * _expect(lambda x: dbias(x) * d2(x), dens, tol)
    return Roughness(math.sqrt(k2), k_star_sq, k_ss)


# ---------------------------------------------------------------------------
# maximin acceptance rate


class MaximinResult(NamedTuple):
    alpha: float
    worst_efficiency: float


def _acceptance_gap(alpha):
    # total variance term that yields acceptance alpha: 2 Phi(-s/2) = alpha
    s = -2.0 * ndtri(0.5 * alpha)
    return s * s


def _solve_ell2(h, k2, kss, ks2, rtol=1e-12):
    """Solve ``k2 v^3 + 2 kss v^2 + ks2 v = h`` for ``v = ell^2`` (all inputs >= 0).

    The cubic is convex and increasing on ``v >= 0``, so Newton's method started
    from an upper bound decreases monotonically onto the root.
    """
    h = np.asarray(h, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        hi_lin = np.where(ks2 > 0, h / np.where(ks2 > 0, ks2, 1.0), np.inf)
        hi_cub = np.where(k2 > 0, np.cbrt(h / np.where(k2 > 0, k2, 1.0)), np.inf)
    v = np.minimum(hi_lin, hi_cub)
    for _ in range(100):
        f = ((k2 * v + 2.0 * kss) * v + ks2) * v - h
        df = (3.0 * k2 * v + 4.0 * kss) * v + ks2
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.where(df > 0, f / df, 0.0)
        v = np.maximum(v - step, 0.0)
        if np.all(np.abs(step) <= rtol * np.maximum(v, 1e-300)):
            break
    return v


def _golden_max(fun, lo, hi, iters=80):
    """Vectorized golden-section maximization on elementwise brackets."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = np.array(lo, dtype=float), np.array(hi, dtype=float)
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = fun(c), fun(d)
    for _ in range(iters):
        left = fc > fd
        a, b = np.where(left, a, c), np.where(left, d, b)
        c, d = (np.where(left, b - invphi * (b - a), d),
                np.where(left, c, a + invphi * (b - a)))
        fc, fd = fun(c), fun(d)
    x = 0.5 * (a + b)
    return x, fun(x)


@dataclass(frozen=True)
class RegimeFamily:
    """Normalized regimes spanning all three limiting cases with ``K** >= 0``.

    Scaling ``ell`` leaves relative efficiencies unchanged, so regime 2 is
    normalized to ``K = 1`` with ``K*^2 = q`` and ``K** = rho * sqrt(q)``,
    ``rho`` in ``[0, 1]`` (the feasibility bound). Regime 1 (pure ``K*``) and
    regime 3 (pure ``K``) are appended as the two extremes.
    """

    k2: np.ndarray
    kss: np.ndarray
    ks2: np.ndarray

    @classmethod
    def grid(cls, n_q=50, n_rho=50, q_range=(1e-4, 1e4)):
        q = np.geomspace(q_range[0], q_range[1], n_q)
        rho = np.linspace(0.0, 1.0, n_rho)
        qq, rr = np.meshgrid(q, rho, indexing="ij")
        k2 = np.concatenate([np.ones(qq.size), [0.0, 1.0]])
        ks2 = np.concatenate([qq.ravel(), [1.0, 0.0]])
        kss = np.concatenate([rr.ravel() * np.sqrt(qq.ravel()), [0.0, 0.0]])
        return cls(k2, kss, ks2)

    def jump(self, alpha, sigma2):
        """Limiting squared-jump ``ell(alpha)^2 * alpha`` for each regime."""
        alpha = np.asarray(alpha, dtype=float)
        h = _acceptance_gap(alpha) - 2.0 * sigma2
        h = np.maximum(h, 0.0)
        v = _solve_ell2(h, self.k2[:, None], self.kss[:, None], self.ks2[:, None])
        return v * alpha


def max_acceptance(sigma):
    """Upper end ``2 Phi(-sigma / sqrt 2)`` of attainable acceptance rates."""
    return float(2.0 * ndtr(-sigma / math.sqrt(2.0)))


def maximin_acceptance(sigma, family=None, n_alpha=400):
    """Acceptance rate maximizing the worst-case relative efficiency.

    Parameters
    ----------
    sigma : float
        Standard deviation of the log-target noise.
    family : RegimeFamily, optional
        Discretized regime set; defaults to a 50 x 50 regime-2 grid plus the
        regime 1 and regime 3 extremes.

    Returns
    -------
    MaximinResult
        The maximin acceptance rate and the worst-case relative efficiency.
    """
    if not sigma > 0:
        raise DomainError(f"sigma must be positive, got {sigma}")
    family = family or RegimeFamily.grid()
    sigma2 = sigma * sigma
    a_max = max_acceptance(sigma)
    # work on t = log(alpha / (a_max - alpha)) to keep the bracket open
    def to_alpha(t):
        return a_max / (1.0 + np.exp(-np.asarray(t)))

    t_grid = np.linspace(-12.0, 12.0, n_alpha)
    jumps = family.jump(to_alpha(t_grid), sigma2)
    best = np.argmax(jumps, axis=1)
    lo = t_grid[np.maximum(best - 1, 0)]
    hi = t_grid[np.minimum(best + 1, n_alpha - 1)]

    def per_regime(t):
        h = _acceptance_gap(to_alpha(t)) - 2.0 * sigma2
        v = _solve_ell2(np.maximum(h, 0.0), family.k2, family.kss, family.ks2)
        return v * to_alpha(t)

    _, j_max = _golden_max(per_regime, lo, hi)

    def worst(t):
        t = np.atleast_1d(t)
        return np.min(family.jump(to_alpha(t), sigma2) / j_max[:, None], axis=0)

    w_grid = worst(t_grid)
    k = int(np.argmax(w_grid))
    lo = t_grid[max(k - 1, 0)]
    hi = t_grid[min(k + 1, n_alpha - 1)]
    res = optimize.minimize_scalar(lambda t: -worst(t)[0], bounds=(lo, hi),
                                   method="bounded", options={"xatol": 1e-10})
    t_best = res.x if -res.fun >= w_grid[k] else t_grid[k]
    return MaximinResult(float(to_alpha(t_best)), float(worst(t_best)[0]))


# ---------------------------------------------------------------------------
# product-target simulation


def _standard_normal(rng, size):
    return rng.standard_normal(size)


@dataclass(frozen=True)
class GradientErrorModel:
    """Per-component gradient error ``n**-kappa * (b(x) + tau * U)``.

    The noise sampler is checked on construction: 10^5 draws must have mean 0
    and variance 1 within three standard errors.
    """

    kappa: float = 1.0
    bias: Optional[Callable] = None
    tau: float = 0.0
    noise: Callable = field(default=_standard_normal)

    def __post_init__(self):
        if self.kappa < 0:
            raise DomainError("kappa must be non-negative")
        if self.tau < 0:
            raise DomainError("tau must be non-negative")
        draws = np.asarray(self.noise(np.random.default_rng(20240601), 100_000), float)
        m = draws.mean()
        v = draws.var()
        se_mean = math.sqrt(v / draws.size)
        se_var = math.sqrt(max(np.mean((draws - m) ** 4) - v * v, 0.0) / draws.size)
        if abs(m) > 3 * se_mean or abs(v - 1.0) > 3 * se_var:
            raise DomainError("gradient noise sampler must have mean 0 and variance 1")

    def step_exponent(self):
        """Exponent ``p`` in ``lambda_n = ell * n**-p``."""
        return 1.0 / 6.0 + max(0.0, KAPPA_CRITICAL - self.kappa)

    def jump_exponent(self):
        """Exponent ``e`` such that ``n**-e * J_n`` has a finite limit."""
        return min(2.0 * self.kappa, 2.0 / 3.0)

    def perturb(self, x, n, rng):
        if self.bias is None and self.tau == 0.0:
            return np.zeros_like(x)
        out = np.zeros_like(x) if self.bias is None else np.asarray(self.bias(x), float)
        if self.tau > 0:
            out = out + self.tau * self.noise(rng, x.shape)
        return out * float(n) ** (-self.kappa)


class LimitSimulation(NamedTuple):
    acceptance: float
    acceptance_se: float
    scaled_esjd: float
    n_nonfinite: int


def simulate_limit(n, ell, sigma2, grad, logpdf, sampler, error=None, reps=1000,
                   rng=None, chunk=None):
    """Monte Carlo acceptance rate of the proposal on an iid product target.

    Each replicate draws ``X ~ f^n``, ``W ~ N(sigma2/2, sigma2)``, the proposal
    ``Y = X + lam Z + lam^2/2 * (g'(X) + error)``, ``V ~ N(-sigma2/2, sigma2)``
    and evaluates the exact log Metropolis-Hastings ratio. The reverse proposal
    density uses an independent gradient-error draw at ``Y``.

    Returns
    -------
    LimitSimulation
        Mean acceptance probability with its standard error, the mean
        acceptance-weighted squared jump scaled by ``n**-jump_exponent``, and
        the number of replicates rejected for non-finite ratios.
    """
    if reps < 1:
        raise ValueError("reps must be positive")
    error = error or GradientErrorModel()
    rng = np.random.default_rng(rng)
    lam = ell * float(n) ** (-error.step_exponent())
    lam2 = lam * lam
    sd = math.sqrt(sigma2)
    chunk = chunk or max(1, min(reps, 2_000_000 // max(n, 1)))
    probs = np.empty(reps)
    jumps = np.empty(reps)
    nonfinite = 0
    done = 0
    while done < reps:
        m = min(chunk, reps - done)
        x = sampler(rng, (m, n))
        z = rng.standard_normal((m, n))
        drift_x = grad(x) + error.perturb(x, n, rng)
        y = x + lam * z + 0.5 * lam2 * drift_x
        drift_y = grad(y) + error.perturb(y, n, rng)
        w = 0.5 * sigma2 + sd * rng.standard_normal(m)
        v = -0.5 * sigma2 + sd * rng.standard_normal(m)
        fwd = (y - x - 0.5 * lam2 * drift_x) ** 2
        rev = (x - y - 0.5 * lam2 * drift_y) ** 2
        with np.errstate(invalid="ignore", over="ignore"):
            log_ratio = (np.sum(logpdf(y) - logpdf(x), axis=1)
                         + np.sum(fwd - rev, axis=1) / (2.0 * lam2) + v - w)
        bad = ~np.isfinite(log_ratio)
        nonfinite += int(bad.sum())
        p = np.exp(np.minimum(np.where(bad, -np.inf, log_ratio), 0.0))
        probs[done:done + m] = p
        jumps[done:done + m] = np.sum((y - x) ** 2, axis=1) * p
        done += m
    scale = float(n) ** (-error.jump_exponent())
    return LimitSimulation(float(probs.mean()), float(probs.std(ddof=1) / math.sqrt(reps))
                           if reps > 1 else float("nan"),
                           float(jumps.mean() * scale), nonfinite)


# ---------------------------------------------------------------------------
# tables


def efficiency_surface(K, ells, sigma2s):
    """Rows ``(ell, sigma2, alpha, eff)`` with efficiency relative to the optimum."""
    opt = optimal_params(K)
    best = efficiency(RegimeSpec(1.0, Roughness(K), opt.sigma2), opt.ell)
    rows = []
    for s2 in sigma2s:
        regime = RegimeSpec(1.0, Roughness(K), float(s2))
        for ell in ells:
            a = limiting_acceptance(regime, float(ell))
            rows.append((float(ell), float(s2), a, float(s2) * ell**2 * a / best))
    return rows


def maximin_curve(sigmas, family=None):
    """Rows ``(sigma, alpha_maximin, worst_eff)``."""
    family = family or RegimeFamily.grid()
    return [(float(s),) + tuple(maximin_acceptance(float(s), family)) for s in sigmas]
