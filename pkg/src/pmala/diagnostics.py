"""Chain and estimator diagnostics: ESS, ESJD, log-likelihood noise studies and
the decomposition of a proposed log-posterior change into gradient-move,
gradient-error and estimator-noise parts."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import stats
from scipy.linalg import cholesky

from .errors import ConfigError, DegenerateFilterError, NumericalError
from .filtering import bootstrap_adapter, run_apf
from .score import DEFAULT_SHRINKAGE
from .ssm import as_series


class EssResult(NamedTuple):
    value: float
    degenerate: bool
    capped: bool


def autocorrelation(series):
    """Sample autocorrelations at all lags (FFT, biased normalization)."""
    x = np.asarray(series, dtype=float)
    x = x - x.mean()
    n = x.shape[0]
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n] / n
    return acov / acov[0]


def ess(series):
    """Effective sample size by Geyer's initial monotone sequence.

    Returns an :class:`EssResult`. A constant series gives ``(0, True, False)``.
    Estimates above the chain length (antithetic chains) are capped at ``J``, and
    estimates above the number of constant runs are capped at that number: a
    chain that moved ``m`` times holds at most ``m + 1`` distinct draws.
    """
    x = np.asarray(series, dtype=float)
    J = x.shape[0]
    if J < 10:
        raise ValueError("need at least 10 draws")
    if np.ptp(x) == 0:
        return EssResult(0.0, True, False)
    rho = autocorrelation(x)
    n_pairs = J // 2
    gamma = rho[0:2 * n_pairs:2] + rho[1:2 * n_pairs:2]
    total = 0.0
    running = np.inf
    for g in gamma:
        if g <= 0:
            break
        running = min(running, g)
        total += running
    tau = -1.0 + 2.0 * total
    runs = 1 + int(np.count_nonzero(np.diff(x)))
    value = J / tau if tau > 0 else np.inf
    if value > runs:
        return EssResult(float(runs), False, True)
    return EssResult(value, False, False)


def min_ess(states):
    """Smallest ESS over the columns of a ``J x n`` array."""
    states = np.asarray(states, dtype=float)
    return min(ess(states[:, i]).value for i in range(states.shape[1]))


def esjd(trace):
    """Mean squared jump ``||x_{j+1} - x_j||^2`` over consecutive rows.

    Accepts a :class:`~pmala.mcmc.ChainTrace` or a ``J x n`` array.
    """
    X = np.asarray(getattr(trace, "states", trace), dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] < 2:
        raise ValueError("need at least two states")
    return float(np.mean(np.sum(np.diff(X, axis=0) ** 2, axis=1)))


# ---------------------------------------------------------------------------
# noise study


@dataclass
class NoiseStudyReport:
    """Replicated log-likelihood estimates summarized per point and particle count.

    ``rows`` holds dicts with ``point_id, N, var_logpost, skew, kurt, mean`` and,
    when an exact reference was supplied, ``mean_error``.
    """

    rows: list
    slope: float
    dropped: list = field(default_factory=list)

    def variance_table(self):
        """Mean over points of ``log10 var`` for each ``N``."""
        Ns = sorted({r["N"] for r in self.rows})
        return {N: float(np.mean([math.log10(r["var_logpost"]) for r in self.rows if r["N"] == N]))
                for N in Ns}

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["point_id", "N", "var_logpost", "skew", "kurt"])
            for r in self.rows:
                w.writerow([r["point_id"], r["N"], repr(r["var_logpost"]), repr(r["skew"]), repr(r["kurt"])])

    def to_dict(self):
        return {"slope": self.slope, "dropped": self.dropped,
                "log10_var_by_N": {str(k): v for k, v in self.variance_table().items()},
                "rows": self.rows}


def noise_study(model, z, points, n_grid, replicates, rng, adapter=None, exact=None):
    """Replicate the filter at each point for each particle count.

    Parameters
    ----------
    points : (P, n) array
        Unconstrained parameter points.
    n_grid : sequence of int
    replicates : int
        At least 100.
    exact : callable, optional
        ``x -> log p(z | x)``; adds the mean estimation error to each row.

    Returns
    -------
    NoiseStudyReport
        ``slope`` is the least-squares slope of mean ``log10 var`` against
        ``log10 N`` (``nan`` for a single particle count).
    """
    if replicates < 100:
        raise ValueError("need at least 100 replicates")
    z = as_series(z)
    adapter = adapter or bootstrap_adapter(model)
    rng = np.random.default_rng(rng)
    rows, dropped = [], []
    for pid, x in enumerate(np.atleast_2d(points)):
        ref = exact(x) if exact is not None else None
        block = []
        try:
            for N in n_grid:
                ll = np.array([run_apf(model, x, z, int(N), adapter, rng).log_likelihood
                               for _ in range(replicates)])
                row = {"point_id": pid, "N": int(N), "var_logpost": float(np.var(ll, ddof=1)),
                       "skew": float(stats.skew(ll)), "kurt": float(stats.kurtosis(ll)),
                       "mean": float(np.mean(ll))}
                if ref is not None:
                    row["mean_error"] = float(np.mean(ll) - ref)
                block.append(row)
        except (DegenerateFilterError, NumericalError) as exc:
            warnings.warn(f"dropping point {pid}: {exc}", RuntimeWarning, stacklevel=2)
            dropped.append(pid)
            continue
        rows.extend(block)
    report = NoiseStudyReport(rows, float("nan"), dropped)
    table = report.variance_table()
    if len(table) >= 2:
        report.slope = float(np.polyfit(np.log10(list(table)), list(table.values()), 1)[0])
    return report


# ---------------------------------------------------------------------------
# regime diagnostics


@dataclass
class RegimeDeltas:
    point_id: np.ndarray
    delta_a: np.ndarray
    delta_b: np.ndarray
    delta_c: np.ndarray

    def medians(self):
        return {"deltaA": float(np.median(np.abs(self.delta_a))),
                "deltaB": float(np.median(np.abs(self.delta_b))),
                "deltaC": float(np.median(np.abs(self.delta_c)))}

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rep", "deltaA", "deltaB", "deltaC"])
            for i in range(self.delta_a.shape[0]):
                w.writerow([i + 1, repr(float(self.delta_a[i])), repr(float(self.delta_b[i])),
                            repr(float(self.delta_c[i]))])


class _HighNReference:
    """Single large-N filter run per point, treated as exact."""

    def __init__(self, model, z, n_particles, adapter, shrinkage, rng):
        self.model, self.z, self.N = model, z, n_particles
        self.adapter, self.shrinkage, self.rng = adapter, shrinkage, rng

    def __call__(self, x):
        out = run_apf(self.model, x, self.z, self.N, self.adapter, self.rng, with_score=True,
                      shrinkage=self.shrinkage)
        return (out.log_likelihood + self.model.log_prior(x),
                out.score + self.model.grad_log_prior(x))


def kalman_reference(model, z):
    """Exact ``x -> (log pi(x), grad log pi(x))`` for the linear Gaussian model."""
    from .mcmc import ExactLgssPosterior

    target = ExactLgssPosterior(model, z)

    def ref(x):
        ev = target.evaluate(x)
        return ev.log_post, ev.grad

    return ref


def regime_deltas(model, z, points, replicates, step, rng, n_particles, adapter=None,
                  shrinkage=DEFAULT_SHRINKAGE, V=None, exact_ref="auto", estimate_gradient=None):
    """Split the change in log posterior along a Langevin proposal.

    With ``x* = x + lambda L Z + (lambda^2/2) V grad log pi(x)`` and ``x'`` the same
    move with the estimated gradient, returns per replicate
    ``dA = log pi(x*) - log pi(x)``, ``dB = log pi(x') - log pi(x*)`` and
    ``dC = log pi^(x') - log pi(x')``. The log posterior at ``x`` is taken as
    exact and the same ``Z`` is used for ``x*`` and ``x'``.

    Parameters
    ----------
    step : float
        ``lambda``.
    exact_ref : "auto", "high-n" or callable
        ``x -> (log pi(x), grad log pi(x))``. ``"auto"`` uses the Kalman filter
        for the linear Gaussian model and a filter with ``100 n_particles``
        otherwise.
    estimate_gradient : callable, optional
        ``x -> grad estimate``; defaults to one particle filter run.
    """
    from .models.lgss import LinearGaussianSSM

    z = as_series(z)
    rng = np.random.default_rng(rng)
    adapter = adapter or bootstrap_adapter(model)
    if exact_ref == "auto":
        exact_ref = kalman_reference(model, z) if isinstance(model, LinearGaussianSSM) else "high-n"
    if exact_ref == "high-n":
        exact_ref = _HighNReference(model, z, 100 * int(n_particles), adapter, shrinkage, rng)
    if not callable(exact_ref):
        raise ConfigError("regime diagnostics need an exact reference")
    points = np.atleast_2d(points)
    n = points.shape[1]
    V = np.eye(n) if V is None else np.asarray(V, dtype=float)
    L = cholesky(V, lower=True)
    lam2 = step * step

    def estimate(x):
        out = run_apf(model, x, z, n_particles, adapter, rng, with_score=True, shrinkage=shrinkage)
        return out.log_likelihood + model.log_prior(x), out.score + model.grad_log_prior(x)

    grad_est = estimate_gradient or (lambda x: estimate(x)[1])
    pid, dA, dB, dC = [], [], [], []
    for p, x in enumerate(points):
        lp_x, g_x = exact_ref(x)
        for _ in range(replicates):
            noise = step * (L @ rng.standard_normal(n))
            g_hat = grad_est(x)
            x_star = x + noise + 0.5 * lam2 * (V @ g_x)
            x_prime = x + noise + 0.5 * lam2 * (V @ g_hat)
            lp_star = exact_ref(x_star)[0]
            lp_prime = exact_ref(x_prime)[0]
            lp_hat = estimate(x_prime)[0]
            pid.append(p)
            dA.append(lp_star - lp_x)
            dB.append(lp_prime - lp_star)
            dC.append(lp_hat - lp_prime)
    return RegimeDeltas(np.array(pid), np.array(dA), np.array(dB), np.array(dC))


def write_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
