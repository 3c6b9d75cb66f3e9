"""Acceptance suite: one test per criterion, each reporting a single pass/fail line.

The lines are collected by the ``report`` fixture and printed in the
"acceptance criteria" section of the pytest terminal summary.
"""

import csv
import math
import time

import numpy as np
import pytest
import yaml
from scipy.stats import norm

from pmala.cli import main
from pmala.diagnostics import ess, noise_study, regime_deltas
from pmala.filtering import make_adapter, run_apf
from pmala.mcmc import (ChainState, ExactLgssPosterior, KernelConfig, acceptance_log_ratio,
                        pilot_covariance, proposal_logdensity, run_chain)
from pmala.models import TRUE_PARAMS, LgssParams, LinearGaussianSSM, kalman_loglik, kalman_score, lgss_simulate
from pmala.score import ancestral_path_sums, score_variance_study
from pmala.theory import (GradientErrorModel, RegimeSpec, Roughness, alpha_regime1, gaussian_min_exp_moment,
                          limiting_acceptance, maximin_acceptance, maximin_curve, optimal_params,
                          roughness_from_density, simulate_limit)

MODEL = LinearGaussianSSM()
X_TRUE = TRUE_PARAMS.to_unconstrained()


def _gauss_limit(**kw):
    return simulate_limit(grad=lambda x: -x, logpdf=lambda x: -0.5 * x * x,
                          sampler=lambda rng, size: rng.standard_normal(size), **kw)


@pytest.fixture(scope="module")
def z500():
    return lgss_simulate(TRUE_PARAMS, 500, 1)[1]


@pytest.fixture(scope="module")
def reference(z500):
    """Exact-likelihood random-walk pilot and a long reference chain on the T = 500 series."""
    target = ExactLgssPosterior(MODEL, z500)
    V = 0.01 * np.eye(6)
    x0 = X_TRUE
    for stage in range(3):
        tr = run_chain(target, KernelConfig("random-walk", 0.6, V), 20_000, x0, 100 + stage, burn_in=2000)
        V = pilot_covariance(tr)
        x0 = tr.states[-1]
    long = run_chain(target, KernelConfig("random-walk", 0.6, V), 400_000, x0, 200, burn_in=10_000)
    return {"V": V, "states": long.post_burn_in().states}


def _mean_var_se(X):
    """Per-column mean and variance with ESS-based standard errors."""
    m = X.mean(axis=0)
    sq = (X - m) ** 2
    v = sq.mean(axis=0)
    se_m = np.array([X[:, i].std() / math.sqrt(ess(X[:, i]).value) for i in range(X.shape[1])])
    se_v = np.array([sq[:, i].std() / math.sqrt(ess(sq[:, i]).value) for i in range(X.shape[1])])
    return m, v, se_m, se_v


# ---------------------------------------------------------------- theory


def test_c01_closed_form_optimum(report):
    t0 = time.perf_counter()
    opt = optimal_params(1.0)
    secs = time.perf_counter() - t0
    ok = (abs(opt.ell - 1.125) <= 0.001 and abs(opt.sigma2 - 3.038) <= 0.005
          and abs(opt.alpha - 0.1547) <= 0.0005 and secs < 1)
    report(1, ok, f"ell={opt.ell:.4f} sigma2={opt.sigma2:.4f} alpha={opt.alpha:.5f} ({secs:.3f}s)")


def test_c02_maximin(report):
    t0 = time.perf_counter()
    at_opt = maximin_acceptance(math.sqrt(3.038))
    curve = maximin_curve(np.linspace(0.5, 3.0, 11))
    secs = time.perf_counter() - t0
    worst = min(r[2] for r in curve)
    worst_sigma = min(curve, key=lambda r: r[2])[0]
    ok = 0.10 <= at_opt.alpha <= 0.12 and worst >= 0.90 and secs < 30
    report(2, ok, f"maximin alpha={at_opt.alpha:.4f}; worst efficiency {worst:.4f} "
                  f"at sigma={worst_sigma:.2f} ({secs:.1f}s)")


def test_c03_roughness_constants(report):
    t0 = time.perf_counter()
    plain = roughness_from_density(lambda x: -0.5 * x * x, lambda x: -1.0, lambda x: 0.0)
    biased = roughness_from_density(lambda x: -0.5 * x * x, lambda x: -1.0, lambda x: 0.0,
                                    bias=lambda x: -x, dbias=lambda x: -1.0)
    secs = time.perf_counter() - t0
    ok = (abs(plain.K - 0.25) <= 1e-6 and abs(biased.k_star_sq - 1.0) <= 1e-6
          and abs(biased.k_starstar + 0.25) <= 1e-6 and secs < 1)
    report(3, ok, f"K={plain.K:.8f} K*^2={biased.k_star_sq:.8f} K**={biased.k_starstar:.8f} ({secs:.3f}s)")


def test_c04_regime2_exact_acceptance(report):
    t0 = time.perf_counter()
    spec = RegimeSpec(1 / 3, Roughness(0.25, 1.0, -0.25), 0.0)
    at2 = limiting_acceptance(spec, 2.0)
    at1 = limiting_acceptance(spec, 1.0)
    # independent path: E[min(1, e^U)] with U ~ N(-s/2, s) and s the regime-2 variance term
    s = 1 / 16 - 1 / 2 + 1
    alt = gaussian_min_exp_moment(-s / 2, math.sqrt(s))
    closed = 2 * norm.cdf(-0.5 * math.sqrt(s))
    secs = time.perf_counter() - t0
    ok = at2 == 1.0 and abs(at1 - alt) <= 1e-12 and abs(at1 - closed) <= 1e-12 and secs < 1
    report(4, ok, f"alpha(2)={at2!r} alpha(1)={at1:.15f} alt={alt:.15f} ({secs:.3f}s)")


@pytest.mark.slow
def test_c05_limit_simulation(report):
    t0 = time.perf_counter()
    res = _gauss_limit(n=800, ell=1.786, sigma2=3.038, reps=20_000, rng=5)
    secs = time.perf_counter() - t0
    ok = abs(res.acceptance - 0.1547) <= 0.015
    report(5, ok, f"acceptance={res.acceptance:.4f} (se {res.acceptance_se:.4f}) target 0.1547 ({secs:.0f}s)")


@pytest.mark.slow
def test_c06_regime1_simulation(report):
    t0 = time.perf_counter()
    err = GradientErrorModel(kappa=0.0, tau=1.0)
    worst, parts = 0.0, []
    for k, (ell, s2) in enumerate([(e, s) for e in (0.5, 1.0, 2.0) for s in (0.0, 3.0)]):
        res = _gauss_limit(n=500, ell=ell, sigma2=s2, error=err, reps=20_000, rng=60 + k)
        theory = float(alpha_regime1(ell, s2, 0.5))
        worst = max(worst, abs(res.acceptance - theory))
        parts.append(f"({ell:g},{s2:g}):{res.acceptance:.3f}/{theory:.3f}")
    secs = time.perf_counter() - t0
    report(6, worst <= 0.02, f"max |emp - limit|={worst:.4f}; " + " ".join(parts) + f" ({secs:.0f}s)")


# ---------------------------------------------------------------- particle filter and score


def test_c07_unbiasedness(report):
    _, z = lgss_simulate(TRUE_PARAMS, 50, 7)
    exact = kalman_loglik(TRUE_PARAMS, z)
    t0 = time.perf_counter()
    rng = np.random.default_rng(70)
    ok, parts = True, []
    for N in (5, 20):
        r = np.exp([run_apf(MODEL, X_TRUE, z, N, None, rng).log_likelihood - exact for _ in range(2000)])
        se = r.std(ddof=1) / math.sqrt(r.size)
        ok &= abs(r.mean() - 1) <= 3 * se
        parts.append(f"N={N}: mean={r.mean():.4f} se={se:.4f}")
    secs = time.perf_counter() - t0
    report(7, ok and secs < 120, "; ".join(parts) + f" ({secs:.1f}s)")


def test_c08_noise_model(report, z500, reference):
    # the noise model describes the posterior bulk, so both checks use posterior points
    ad = make_adapter(MODEL, "fully-adapted")
    post = reference["states"]
    x_mean = post.mean(axis=0)
    t0 = time.perf_counter()
    exact = kalman_loglik(LgssParams.from_unconstrained(x_mean), z500)
    rng = np.random.default_rng(80)
    d = np.array([run_apf(MODEL, x_mean, z500, 20, ad, rng).log_likelihood for _ in range(1000)]) - exact
    se = d.std(ddof=1) / math.sqrt(d.size)
    shape_ok = abs(d.mean() + 0.5 * d.var(ddof=1)) <= 3 * se
    points = post[np.linspace(0, post.shape[0] - 1, 5).astype(int)]
    rep = noise_study(MODEL, z500, points, [10, 20, 40, 80, 160, 320], 200, 81, ad)
    secs = time.perf_counter() - t0
    ok = shape_ok and abs(rep.slope + 1) <= 0.15 and secs < 300
    report(8, ok, f"mean={d.mean():.4f} -var/2={-0.5 * d.var(ddof=1):.4f} se={se:.4f}; "
                  f"slope={rep.slope:.3f} ({secs:.0f}s)")


def test_c09_score_correctness(report):
    t0 = time.perf_counter()
    exact_paths = True
    for seed in range(20):
        _, z = lgss_simulate(TRUE_PARAMS, 10, seed)
        out = run_apf(MODEL, X_TRUE, z, 1 + seed % 5, rng=seed, with_score=True, shrinkage=1.0,
                      keep_history=True)
        sums = ancestral_path_sums(out.history["increments"], out.history["ancestors"])
        exact_paths &= bool(np.array_equal(sums, out.cloud.score_means))

    _, z = lgss_simulate(TRUE_PARAMS, 100, 1)
    ad = make_adapter(MODEL, "fully-adapted")
    rng = np.random.default_rng(90)
    S = np.array([run_apf(MODEL, X_TRUE, z, 500, ad, rng, with_score=True, shrinkage=0.95).score
                  for _ in range(200)])
    # the estimate is on the unconstrained scale, like the Kalman score
    zscores = (S.mean(axis=0) - kalman_score(TRUE_PARAMS, z)) / (S.std(axis=0, ddof=1) / math.sqrt(200))
    secs = time.perf_counter() - t0
    ok = exact_paths and np.all(np.abs(zscores) <= 3) and secs < 300
    report(9, ok, f"path sums exact={exact_paths}; shrinkage z-scores={np.round(zscores, 1).tolist()} "
                  f"({secs:.0f}s)")


def test_c10_score_variance_growth(report):
    _, z = lgss_simulate(TRUE_PARAMS, 200, 1)
    ad = make_adapter(MODEL, "fully-adapted")
    Ts = [25, 50, 100, 200]
    t0 = time.perf_counter()
    slopes = {}
    for zeta in (1.0, 0.95):
        v = score_variance_study(MODEL, X_TRUE, z, 500, zeta, Ts, 200, 100, ad)
        per_component = np.polyfit(np.log(Ts), np.log([v[T] for T in Ts]), 1)[0]
        slopes[zeta] = float(np.median(per_component))
    secs = time.perf_counter() - t0
    ok = abs(slopes[1.0] - 2) <= 0.3 and abs(slopes[0.95] - 1) <= 0.3 and secs < 600
    report(10, ok, f"median slope zeta=1: {slopes[1.0]:.2f}, zeta=0.95: {slopes[0.95]:.2f} ({secs:.0f}s)")


# ---------------------------------------------------------------- sampler


def _toy_flux_check(rng):
    """Detailed balance of the pseudo-marginal Langevin kernel on an enumerable noise toy.

    The log-posterior estimate at ``x`` is ``-x^2/2 + w_k`` and the gradient
    estimate is ``-x + e_k`` with ``k`` drawn from ``p``; the weights satisfy
    ``sum p_k exp(w_k) = 1``. The extended target is
    ``pi(x) p_k exp(w_k)``, and the probability flux between any two extended
    states must balance.
    """
    p = np.array([0.5, 0.3, 0.2])
    w = np.array([0.2, -0.1, 0.0])
    w[2] = math.log((1 - p[0] * math.exp(w[0]) - p[1] * math.exp(w[1])) / p[2])
    e = np.array([0.3, -0.5, 1.0])
    cfg = KernelConfig("langevin", 1.0, np.eye(1), step2=0.7)
    worst = 0.0
    for _ in range(200):
        x, y = rng.normal(size=1), rng.normal(size=1)
        for k in range(3):
            for j in range(3):
                sx = ChainState(x, float(-0.5 * x @ x + w[k]), -x + e[k])
                sy = ChainState(y, float(-0.5 * y @ y + w[j]), -y + e[j])
                fwd, rev = proposal_logdensity(y, sx, cfg), proposal_logdensity(x, sy, cfg)
                a_xy = min(0.0, acceptance_log_ratio(sx, sy, fwd, rev))
                a_yx = min(0.0, acceptance_log_ratio(sy, sx, rev, fwd))
                flux_xy = sx.log_post + math.log(p[k]) + fwd + math.log(p[j]) + a_xy
                flux_yx = sy.log_post + math.log(p[j]) + rev + math.log(p[k]) + a_yx
                worst = max(worst, abs(flux_xy - flux_yx))
    return worst


@pytest.mark.slow
def test_c11_kernel_exactness(report, z500, reference):
    t0 = time.perf_counter()
    flux_gap = _toy_flux_check(np.random.default_rng(110))
    target = ExactLgssPosterior(MODEL, z500)
    ref = reference["states"]
    tr = run_chain(target, KernelConfig("langevin", 0.5, reference["V"]), 100_000, ref[-1], 111,
                   burn_in=5000)
    X = tr.post_burn_in().states
    m1, v1, sm1, sv1 = _mean_var_se(X)
    m0, v0, sm0, sv0 = _mean_var_se(ref)
    zm = (m1 - m0) / np.hypot(sm1, sm0)
    zv = (v1 - v0) / np.hypot(sv1, sv0)
    secs = time.perf_counter() - t0
    ok = flux_gap < 1e-10 and np.all(np.abs(zm) <= 3) and np.all(np.abs(zv) <= 3)
    report(11, ok, f"flux gap={flux_gap:.1e}; mean z={np.round(zm, 2).tolist()} var z={np.round(zv, 2).tolist()} "
                   f"accept={tr.post_burn_in().acceptance_rate:.3f} ({secs:.0f}s)")


def test_c12_regime_diagnostics(report, z500, reference):
    ad = make_adapter(MODEL, "fully-adapted")
    post = reference["states"]
    points = post[np.linspace(0, post.shape[0] - 1, 5).astype(int)]
    step = math.sqrt(KernelConfig("langevin", 1.0, np.eye(6)).lambda2)
    t0 = time.perf_counter()
    d = regime_deltas(MODEL, z500, points, 100, step, 120, 20, ad, 0.95, reference["V"])
    secs = time.perf_counter() - t0
    med = d.medians()
    ok = (med["deltaB"] < 0.1 * med["deltaA"] and med["deltaA"] / 3 <= med["deltaC"] <= 3 * med["deltaA"]
          and secs < 600)
    report(12, ok, f"median |dA|={med['deltaA']:.3f} |dB|={med['deltaB']:.3f} |dC|={med['deltaC']:.3f} "
                   f"({secs:.0f}s)")


# ---------------------------------------------------------------- end-to-end


def _sweep_config(out, seed, kind, N, gammas, v_source):
    return {
        "model": {"name": "lgss"},
        "data": {"simulate": {"seed": 1, "T": 500}},
        "filter": {"N": N, "adapter": "fully-adapted", "zeta": 0.95},
        "kernel": {"kind": kind, "gamma": gammas, "V": v_source},
        "run": {"iterations": 20_000, "burn_in": 2000, "seed": seed},
        "output": {"dir": str(out)},
        "pilot": {"iterations": 20_000, "burn_in": 2000, "stages": 3, "exact": True},
    }


def _read_aggregate(path):
    with open(path) as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def _sweep_attempt(tmp, seed):
    gammas = [0.5, 1.0, 1.5, 2.0]
    lang_dir = tmp / f"langevin-{seed}"
    cfg = tmp / f"langevin-{seed}.yaml"
    cfg.write_text(yaml.safe_dump(_sweep_config(lang_dir, seed, "langevin", [5, 10, 20, 40], gammas,
                                                {"source": "pilot"})))
    assert main(["pilot", "--config", str(cfg)]) == 0
    assert main(["sweep", "--config", str(cfg)]) == 0
    rows = _read_aggregate(lang_dir / "aggregate.csv")
    best = max(rows, key=lambda r: r["min_ess_per_sec"])
    N = int(best["N"])
    rw_cfg = tmp / f"rw-{seed}.yaml"
    rw_cfg.write_text(yaml.safe_dump(_sweep_config(tmp / f"rw-{seed}", seed, "random-walk", [N], gammas,
                                                   {"source": "file", "path": str(lang_dir / "pilot.json")})))
    assert main(["sweep", "--config", str(rw_cfg)]) == 0
    rw_best = max(_read_aggregate(tmp / f"rw-{seed}" / "aggregate.csv"), key=lambda r: r["min_ess_per_sec"])
    lang_at_N = max((r for r in rows if int(r["N"]) == N), key=lambda r: r["min_ess_per_sec"])
    ok = (1.2 <= best["sigma2"] <= 3.8 and 0.75 <= best["gamma"] <= 1.75 and 0.10 <= best["accept"] <= 0.25
          and lang_at_N["min_ess_per_sec"] >= rw_best["min_ess_per_sec"])
    detail = (f"seed {seed}: best N={N} gamma={best['gamma']:g} sigma2={best['sigma2']:.2f} "
              f"accept={best['accept']:.3f}; ESS/s langevin={lang_at_N['min_ess_per_sec']:.2f} "
              f"rw={rw_best['min_ess_per_sec']:.2f}")
    return ok, detail


@pytest.mark.slow
def test_c13_end_to_end_sweep(report, tmp_path):
    # soft criterion: one rerun with a fresh seed if the first attempt misses the bands
    t0 = time.perf_counter()
    ok, detail = _sweep_attempt(tmp_path, 2024)
    if not ok:
        ok, second = _sweep_attempt(tmp_path, 2025)
        detail = f"{detail} | rerun {second}"
    secs = time.perf_counter() - t0
    report(13, ok and secs < 1800, f"{detail} ({secs:.0f}s)")
