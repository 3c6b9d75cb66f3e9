"""Config-driven experiments behind the command-line interface.

Every random stream is derived from ``run.seed`` (or ``data.simulate.seed``)
and a fixed tag, so reruns reproduce all CSV and JSON outputs. Wall-clock
measurements go to ``*.timing.json`` sidecars and to the ``min_ess_per_sec``
column of the sweep aggregate.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import theory
from .config import ExperimentConfig, emit
from .diagnostics import ess, noise_study, regime_deltas
from .errors import ConfigError, DegenerateFilterError, NumericalError
from .filtering import make_adapter, run_apf
from .mcmc import (SCALING_RULES, ExactLgssPosterior, KernelConfig, ParticlePosterior, pilot_covariance,
                   run_chain, write_trace_csv)
from .models.lgss import TRUE_PARAMS, LgssParams, LinearGaussianSSM, kalman_loglik, lgss_simulate
from .models.mixture import DEFAULT_PARAMS as MIXTURE_PARAMS
from .models.mixture import MixtureExpertsParams, MixtureExpertsSSM, mixture_simulate
from .ssm import ObservationSeries

TAG_PILOT, TAG_SWEEP, TAG_SIGMA2, TAG_DIAGNOSE = 1, 2, 3, 4
AGGREGATE_HEADER = ["N", "gamma", "accept", "esjd", "min_ess_per_sec", "sigma2"]


def stream(seed, *key):
    """Independent generator for ``(seed, key...)``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


def _gamma_key(gamma):
    return int(round(gamma * 1e6))


def write_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_sidecar(path, **extra):
    info = {"created": datetime.now(timezone.utc).isoformat(timespec="seconds")}
    info.update(extra)
    write_json(info, path)


# ---------------------------------------------------------------------------
# model and data


def build_model(cfg):
    m = cfg.model
    if m["name"] == "lgss":
        return LinearGaussianSSM()
    kwargs = {k: m[k] for k in ("prior_mean", "prior_sd", "init_mean", "init_sd") if k in m}
    return MixtureExpertsSSM(**kwargs)


def true_params(cfg):
    """Constrained parameters used for simulation, or ``None`` for file data."""
    sim = cfg.data.get("simulate")
    if sim is None:
        return None
    if "params" in sim:
        cls = LgssParams if cfg.model["name"] == "lgss" else MixtureExpertsParams
        try:
            return cls.from_array(sim["params"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"data.simulate.params: {exc}") from None
    return TRUE_PARAMS if cfg.model["name"] == "lgss" else MIXTURE_PARAMS


def simulate_series(cfg):
    sim = cfg.data["simulate"]
    params = true_params(cfg)
    rng = np.random.default_rng(sim["seed"])
    if cfg.model["name"] == "lgss":
        return lgss_simulate(params, sim["T"], rng)[1]
    if sim["T"] < 2:
        raise ConfigError("the mixture model needs T >= 2")
    model = build_model(cfg)
    return mixture_simulate(params, sim["T"], rng, model.init_mean, model.init_sd)[2]


def load_data(cfg):
    if "path" in cfg.data:
        try:
            return ObservationSeries.from_csv(cfg.data["path"])
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot load data: {exc}") from None
    return simulate_series(cfg)


def _out_dir(cfg):
    d = Path(cfg.output["dir"])
    d.mkdir(parents=True, exist_ok=True)
    return d


def _reference_point(cfg, pilot=None):
    """Pilot posterior mean when available, else the generating parameters."""
    if pilot is not None:
        return np.asarray(pilot["mean"], dtype=float)
    p = true_params(cfg)
    if p is not None:
        return p.to_unconstrained()
    raise ConfigError("file data needs a pilot run to define the reference point")


def _initial_point(cfg, pilot=None):
    if "x0" in cfg.run:
        return np.asarray(cfg.run["x0"], dtype=float)
    return _reference_point(cfg, pilot)


# ---------------------------------------------------------------------------
# commands


def cmd_simulate_data(cfg):
    """Write ``data.csv`` and a ``data.json`` record of the generating setup."""
    if "simulate" not in cfg.data:
        raise ConfigError("simulate-data needs a data.simulate block")
    out = _out_dir(cfg)
    z = simulate_series(cfg)
    z.to_csv(out / "data.csv")
    model = build_model(cfg)
    write_json({"model": cfg.model["name"], "seed": cfg.data["simulate"]["seed"],
                "T": cfg.data["simulate"]["T"],
                "params": dict(zip(model.param_names, true_params(cfg).as_array().tolist()))},
               out / "data.json")
    _write_sidecar(out / "data.timing.json")
    return out / "data.csv"


def _pilot_target(cfg, model, z):
    if cfg.pilot["exact"]:
        return ExactLgssPosterior(model, z)
    N = cfg.pilot.get("N", max(cfg.filter["N"]))
    return ParticlePosterior(model, z, N, make_adapter(model, cfg.filter["adapter"]),
                             cfg.filter["zeta"], gradient=None)


def cmd_pilot(cfg):
    """Staged random-walk pilot; writes ``pilot.json`` with the covariance estimate."""
    model = build_model(cfg)
    z = load_data(cfg)
    out = _out_dir(cfg)
    target = _pilot_target(cfg, model, z)
    n = model.n_params
    V = cfg.pilot["initial_scale"] * np.eye(n)
    x0 = _initial_point(cfg)
    stages = []
    for s in range(cfg.pilot["stages"]):
        trace = run_chain(target, KernelConfig("random-walk", 1.0, V), cfg.pilot["iterations"], x0,
                          stream(cfg.run["seed"], TAG_PILOT, s), burn_in=cfg.pilot["burn_in"])
        try:
            V = pilot_covariance(trace)
        except ValueError as exc:
            raise RuntimeError(f"pilot stage {s + 1} failed ({exc}); "
                               "increase pilot.iterations or change the starting point") from None
        x0 = trace.states[-1]
        stages.append(trace.post_burn_in().acceptance_rate)
    post = trace.states[trace.burn_in:]
    thin = post[np.linspace(0, post.shape[0] - 1, min(100, post.shape[0])).astype(int)]
    result = {
        "param_names": list(model.param_names),
        "V": V.tolist(),
        "mean": post.mean(axis=0).tolist(),
        "last": trace.states[-1].tolist(),
        "acceptance_rates": stages,
        "sample": thin.tolist(),
    }
    write_json(result, out / "pilot.json")
    if cfg.output["traces"]:
        write_trace_csv(trace, out / "pilot_trace.csv")
    _write_sidecar(out / "pilot.timing.json", seconds=trace.seconds)
    return result


def load_pilot(cfg):
    """Pilot record from the output directory, else from a pilot-format ``kernel.V`` file."""
    path = Path(cfg.output["dir"]) / "pilot.json"
    if path.exists():
        return json.loads(path.read_text(encoding="utf-8"))
    src = cfg.kernel["V"]
    if src["source"] == "file":
        try:
            obj = json.loads(Path(src["path"]).read_text(encoding="utf-8"))
        except (OSError, ValueError):
            return None
        if isinstance(obj, dict) and "mean" in obj:
            return obj
    return None


def load_preconditioner(cfg):
    src = cfg.kernel["V"]
    if src["source"] == "file":
        try:
            obj = json.loads(Path(src["path"]).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read preconditioner: {exc}") from None
        return np.asarray(obj["V"] if isinstance(obj, dict) else obj, dtype=float)
    pilot = load_pilot(cfg)
    if pilot is None:
        raise RuntimeError("no pilot.json in the output directory; run the pilot command first")
    return np.asarray(pilot["V"], dtype=float)


def estimate_sigma2(model, z, x, n_particles, adapter, runs, rng):
    """Sample variance of the log-likelihood estimate over repeated filter runs."""
    ll = [run_apf(model, x, z, n_particles, adapter, rng).log_likelihood for _ in range(runs)]
    return float(np.var(ll, ddof=1))


def _run_cell(args):
    cfg_dict, N, gamma, chain, V, x0 = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    model = build_model(cfg)
    z = load_data(cfg)
    kind = cfg.kernel["kind"]
    gradient = {"random-walk": None, "langevin": "particle", "idealized-langevin": "exact"}[kind]
    exact_score = None
    if gradient == "exact":
        exact_score = ExactLgssPosterior(model, z).score
    cell = {"N": N, "gamma": gamma, "chain": chain, "kind": kind}
    try:
        target = ParticlePosterior(model, z, N, make_adapter(model, cfg.filter["adapter"]),
                                   cfg.filter["zeta"], gradient=gradient, exact_score=exact_score)
        kernel = KernelConfig(kind, gamma, np.asarray(V))
        trace = run_chain(target, kernel, cfg.run["iterations"], np.asarray(x0),
                          stream(cfg.run["seed"], TAG_SWEEP, N, _gamma_key(gamma), chain),
                          burn_in=cfg.run["burn_in"])
    except (ConfigError, DegenerateFilterError, NumericalError, ValueError) as exc:
        cell["error"] = str(exc)
        return cell, None, None
    post = trace.post_burn_in()
    ess_vals = [ess(post.states[:, i]) for i in range(post.states.shape[1])]
    cell.update({
        "acceptance_rate": post.acceptance_rate,
        "esjd": float(np.mean(np.sum(np.diff(np.vstack([post.x0, post.states]), axis=0) ** 2, axis=1))),
        "ess": [e.value for e in ess_vals],
        "min_ess": min(e.value for e in ess_vals),
        "lambda2": kernel.lambda2,
    })
    timing = {"seconds": trace.seconds, "min_ess_per_sec": cell["min_ess"] / trace.seconds}
    return cell, timing, trace


def _cell_name(N, gamma, chain):
    return f"N{N}_g{gamma:g}_c{chain}"


def cmd_sweep(cfg, workers=1):
    """One chain per ``(N, gamma, chain)`` cell plus the aggregate table."""
    model = build_model(cfg)
    z = load_data(cfg)
    out = _out_dir(cfg)
    cells_dir = out / "cells"
    cells_dir.mkdir(exist_ok=True)
    pilot = load_pilot(cfg)
    V = load_preconditioner(cfg)
    if V.shape != (model.n_params, model.n_params):
        raise ConfigError(f"preconditioner must be {model.n_params}x{model.n_params}")
    x0 = _initial_point(cfg, pilot)
    x_ref = _reference_point(cfg, pilot)
    adapter = make_adapter(model, cfg.filter["adapter"])
    sigma2 = {}
    for N in cfg.filter["N"]:
        try:
            sigma2[N] = estimate_sigma2(model, z, x_ref, N, adapter, cfg.run["sigma2_runs"],
                                        stream(cfg.run["seed"], TAG_SIGMA2, N))
        except (DegenerateFilterError, NumericalError):
            sigma2[N] = float("nan")

    jobs = [(cfg.to_dict(), int(N), float(g), c, V.tolist(), x0.tolist())
            for N in cfg.filter["N"] for g in cfg.kernel["gamma"] for c in range(cfg.run["chains"])]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        results = [_run_cell(j) for j in jobs]

    rows = []
    timing_all = {}
    for (cell, timing, trace) in results:
        N, g, c = cell["N"], cell["gamma"], cell["chain"]
        name = _cell_name(N, g, c)
        cell["sigma2"] = sigma2[N]
        write_json(cell, cells_dir / f"{name}.json")
        if timing is not None:
            write_json(timing, cells_dir / f"{name}.timing.json")
            timing_all[name] = timing
        if trace is not None and cfg.output["traces"]:
            write_trace_csv(trace, cells_dir / f"{name}.csv")
        rows.append([N, g, cell.get("acceptance_rate", float("nan")), cell.get("esjd", float("nan")),
                     timing["min_ess_per_sec"] if timing else float("nan"), sigma2[N]])
    with open(out / "aggregate.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AGGREGATE_HEADER)
        for r in rows:
            w.writerow([r[0], repr(r[1])] + [repr(float(v)) for v in r[2:]])
    (out / "config.yaml").write_text(emit(cfg), encoding="utf-8")
    _write_sidecar(out / "sweep.timing.json", cells=timing_all)
    return rows


def cmd_diagnose(cfg):
    """Noise study over ``diagnose.N_grid`` and regime deltas at ``diagnose.N``."""
    model = build_model(cfg)
    z = load_data(cfg)
    out = _out_dir(cfg)
    d = cfg.diagnose
    pilot = load_pilot(cfg)
    x_ref = _reference_point(cfg, pilot)
    rng = stream(cfg.run["seed"], TAG_DIAGNOSE)
    if pilot is not None and pilot.get("sample"):
        sample = np.asarray(pilot["sample"])
        points = sample[np.linspace(0, sample.shape[0] - 1, d["points"]).astype(int)]
        V = np.asarray(pilot["V"])
    else:
        points = np.atleast_2d(x_ref)
        V = np.eye(model.n_params) * 0.01
    adapter = make_adapter(model, cfg.filter["adapter"])
    exact = None
    if isinstance(model, LinearGaussianSSM):
        exact = lambda x: kalman_loglik(LgssParams.from_unconstrained(x), z)  # noqa: E731
    report = noise_study(model, z, points, d["N_grid"], d["replicates"], rng, adapter, exact)
    report.to_csv(out / "noise.csv")
    write_json(report.to_dict(), out / "noise.json")

    c, p = SCALING_RULES["langevin"]
    step = math.sqrt(d["gamma"] ** 2 * c * model.n_params ** (-p))
    deltas = regime_deltas(model, z, points, d["delta_replicates"], step, rng, d["N"], adapter,
                           cfg.filter["zeta"], V)
    deltas.to_csv(out / "deltas.csv")
    med = deltas.medians()
    summary = {"medians": med, "step": step, "N": d["N"],
               "regime3_signature": bool(med["deltaB"] < 0.1 * med["deltaA"]
                                         and med["deltaA"] / 3 <= med["deltaC"] <= 3 * med["deltaA"])}
    write_json(summary, out / "deltas.json")
    _write_sidecar(out / "diagnose.timing.json")
    return report, deltas


def cmd_theory(out_dir, K=1.0, ell_max=None, n_ell=100, sigma2_max=10.0, n_sigma2=100,
               sigma_min=0.5, sigma_max=3.0, n_sigma=11):
    """Efficiency surface and maximin curve tables."""
    if K <= 0 or n_ell < 1 or n_sigma2 < 1 or n_sigma < 1 or sigma_min <= 0 or sigma_max < sigma_min \
            or sigma2_max <= 0:
        raise ConfigError("invalid theory ranges")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ell_max = ell_max or 5.0 * K ** (-1.0 / 3.0)
    ells = np.linspace(ell_max / n_ell, ell_max, n_ell)
    s2s = np.linspace(sigma2_max / n_sigma2, sigma2_max, n_sigma2)
    surface = theory.efficiency_surface(K, ells, s2s)
    with open(out / "surface.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ell", "sigma2", "alpha", "eff"])
        for r in surface:
            w.writerow([repr(float(v)) for v in r])
    sigmas = np.linspace(sigma_min, sigma_max, n_sigma)
    curve = theory.maximin_curve(sigmas)
    with open(out / "maximin.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sigma", "alpha_maximin", "worst_eff"])
        for r in curve:
            w.writerow([repr(float(v)) for v in r])
    opt = theory.optimal_params(K)
    write_json({"K": K, "ell_opt": opt.ell, "sigma2_opt": opt.sigma2, "alpha_opt": opt.alpha},
               out / "optimum.json")
    return surface, curve


def default_workers():
    return max(1, (os.cpu_count() or 1))
