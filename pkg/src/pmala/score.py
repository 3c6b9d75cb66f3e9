"""O(N) score estimation by Fisher's identity with kernel shrinkage.

Each particle carries a running mean ``m_t^(i)`` of the complete-data score. At
every step the parent's mean is shrunk towards the weighted average of all means
by a factor ``zeta`` before the new gradient increment is added. With
``zeta = 1`` this is plain accumulation along the ancestral path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError

DEFAULT_SHRINKAGE = 0.95


@dataclass(frozen=True)
class ScoreRecursionState:
    """Per-particle score means ``(N, n)`` and the shrinkage factor."""

    means: np.ndarray
    zeta: float = DEFAULT_SHRINKAGE

    def __post_init__(self):
        if not 0.0 < self.zeta <= 1.0:
            raise ValueError(f"shrinkage must lie in (0, 1], got {self.zeta}")


def _check_rows(m):
    bad = ~np.all(np.isfinite(m), axis=1)
    if np.any(bad):
        raise NumericalError(f"non-finite score gradient at particle {int(np.argmax(bad))}")
    return m


def init_score(model, x, states, z_1, zeta=DEFAULT_SHRINKAGE):
    """``m_1 = grad log g(z_1 | s_1) + grad log mu(s_1)`` for every particle."""
    m = model.grad_observation_logdensity(x, states, z_1) + model.grad_initial_logdensity(x, states)
    return ScoreRecursionState(_check_rows(m), zeta)


def score_increment(model, x, new_states, parent_states, z_t):
    """Gradient of ``log g(z_t | s_t) + log f(s_t | s_{t-1})`` per particle."""
    return _check_rows(
        model.grad_observation_logdensity(x, new_states, z_t)
        + model.grad_transition_logdensity(x, new_states, parent_states)
    )


def update_score(state, ancestors, prev_weights, increment):
    """One shrinkage step.

    Parameters
    ----------
    state : ScoreRecursionState
        Means at time ``t - 1``.
    ancestors : (N,) int array
        Resampled parent index of each new particle.
    prev_weights : (N,) array
        Normalized weights at ``t - 1``.
    increment : (N, n) array
        Output of :func:`score_increment` for the new particles.
    """
    zeta = state.zeta
    shared = prev_weights @ state.means
    m = zeta * state.means[ancestors] + (1.0 - zeta) * shared + increment
    return ScoreRecursionState(m, zeta)


def final_score(state, weights):
    """Weighted average of the particle means."""
    return np.asarray(weights) @ state.means


def ancestral_path_sums(increments, ancestors):
    """Sum score increments along each surviving particle's ancestral path.

    ``increments[t]`` is ``(N, n)`` and ``ancestors[t]`` holds the parents used at
    step ``t`` (``ancestors[0]`` is ignored). Summation runs forward in time, so
    the result agrees bit for bit with the ``zeta = 1`` recursion.
    """
    T = len(increments)
    N = increments[0].shape[0]
    # trace each final particle back to its lineage
    lineage = np.empty((T, N), dtype=int)
    lineage[T - 1] = np.arange(N)
    for t in range(T - 1, 0, -1):
        lineage[t - 1] = ancestors[t][lineage[t]]
    total = increments[0][lineage[0]]
    for t in range(1, T):
        total = total + increments[t][lineage[t]]
    return total


def score_variance_study(model, x, z, n_particles, zeta, T_grid, replicates, rng, adapter=None):
    """Per-component variance of the score estimate for each series length.

    Returns
    -------
    dict
        ``T`` mapped to an ``(n,)`` vector of sample variances.
    """
    from .filtering import bootstrap_adapter, run_apf
    from .ssm import as_series

    if replicates < 50:
        raise ValueError("need at least 50 replicates")
    z = as_series(z)
    adapter = adapter or bootstrap_adapter(model)
    rng = np.random.default_rng(rng)
    out = {}
    for T in T_grid:
        zT = z.head(int(T))
        scores = np.array([
            run_apf(model, x, zT, n_particles, adapter, rng, with_score=True, shrinkage=zeta).score
            for _ in range(replicates)
        ])
        out[int(T)] = scores.var(axis=0, ddof=1)
    return out
