import csv
import json

import numpy as np
import pytest
import yaml

from pmala.cli import main
from pmala.config import ExperimentConfig, emit, load_config, parse
from pmala.errors import ConfigError


def _base(tmp_path, **over):
    cfg = {
        "model": {"name": "lgss"},
        "data": {"simulate": {"seed": 1, "T": 40}},
        "filter": {"N": [5, 10]},
        "kernel": {"kind": "langevin", "gamma": [0.5, 1.0]},
        "run": {"iterations": 60, "burn_in": 10, "seed": 3},
        "output": {"dir": str(tmp_path / "out")},
        "pilot": {"iterations": 200, "burn_in": 20, "stages": 1, "exact": True},
        "diagnose": {"points": 2, "N_grid": [5, 10], "replicates": 100, "N": 10, "delta_replicates": 3},
    }
    for k, v in over.items():
        cfg[k] = {**cfg.get(k, {}), **v} if isinstance(v, dict) else v
    return cfg


def _write(tmp_path, cfg, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


# ---------------------------------------------------------------- config

def test_roundtrip(tmp_path):
    cfg = ExperimentConfig.from_dict(_base(tmp_path))
    assert parse(emit(cfg)) == cfg
    assert cfg.filter["zeta"] == 0.95 and cfg.filter["adapter"] == "bootstrap"


@pytest.mark.parametrize("mutate", [
    lambda c: c["run"].update(extra=1),
    lambda c: c.update(unknown={}),
    lambda c: c["kernel"].update(gamma=[]),
    lambda c: c["kernel"].update(kind="hmc"),
    lambda c: c["run"].update(burn_in=60),
    lambda c: c["data"].update(path="x.csv"),
    lambda c: c["data"]["simulate"].update(T=0),
    lambda c: c["filter"].update(zeta=0.0),
    lambda c: c["kernel"].update(V={"source": "file"}),
    lambda c: c.update(model={"name": "mixture-experts"}),
])
def test_invalid_configs(tmp_path, mutate):
    cfg = _base(tmp_path)
    mutate(cfg)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(cfg)


def test_unreadable_and_malformed(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    with pytest.raises(ConfigError):
        parse("model: [unclosed")
    with pytest.raises(ConfigError):
        parse("- a list")


def test_seed_and_output_overrides(tmp_path):
    cfg = ExperimentConfig.from_dict(_base(tmp_path))
    assert cfg.with_seed(9).run["seed"] == 9
    assert cfg.with_output("elsewhere").output["dir"] == "elsewhere"


# ---------------------------------------------------------------- CLI

def test_simulate_data_is_byte_identical(tmp_path):
    path = _write(tmp_path, _base(tmp_path))
    assert main(["simulate-data", "--config", path, "--out", str(tmp_path / "a")]) == 0
    assert main(["simulate-data", "--config", path, "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "data.csv").read_bytes()
    assert a == (tmp_path / "b" / "data.csv").read_bytes()
    assert a.splitlines()[0] == b"t,z"
    assert len(a.splitlines()) == 41


def test_invalid_input_exit_code(tmp_path, capsys):
    cfg = _base(tmp_path)
    cfg["data"]["simulate"]["T"] = 0
    assert main(["simulate-data", "--config", _write(tmp_path, cfg)]) == 2
    cfg = _base(tmp_path, kernel={"gamma": []})
    assert main(["sweep", "--config", _write(tmp_path, cfg)]) == 2
    assert main(["theory", "--out", str(tmp_path / "t"), "--K", "-1"]) == 2
    assert "error" in capsys.readouterr().err


def test_runtime_failure_exit_code(tmp_path):
    # sweeping before any pilot run has written a preconditioner
    assert main(["sweep", "--config", _write(tmp_path, _base(tmp_path))]) == 3


def test_pilot_sweep_diagnose_pipeline(tmp_path):
    path = _write(tmp_path, _base(tmp_path))
    out = tmp_path / "out"
    assert main(["pilot", "--config", path]) == 0
    pilot = json.loads((out / "pilot.json").read_text())
    V = np.array(pilot["V"])
    assert V.shape == (6, 6)
    assert np.allclose(V, V.T) and np.all(np.linalg.eigvalsh(V) > 0)

    assert main(["sweep", "--config", path]) == 0
    with open(out / "aggregate.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["N", "gamma", "accept", "esjd", "min_ess_per_sec", "sigma2"]
    assert len(rows) == 1 + 2 * 2
    first = sorted(p.name for p in (out / "cells").glob("*.json") if "timing" not in p.name)
    cells = {p: (out / "cells" / p).read_bytes() for p in first}
    assert main(["sweep", "--config", path]) == 0
    assert all((out / "cells" / p).read_bytes() == b for p, b in cells.items())
    assert parse((out / "config.yaml").read_text()) == load_config(path)

    assert main(["diagnose", "--config", path]) == 0
    deltas = json.loads((out / "deltas.json").read_text())
    assert set(deltas["medians"]) == {"deltaA", "deltaB", "deltaC"}
    assert (out / "noise.csv").read_text().splitlines()[0] == "point_id,N,var_logpost,skew,kurt"


def test_sweep_with_workers_matches_serial(tmp_path):
    base = _base(tmp_path)
    path = _write(tmp_path, base)
    assert main(["pilot", "--config", path]) == 0
    assert main(["sweep", "--config", path]) == 0
    serial = {p.name: p.read_bytes() for p in (tmp_path / "out" / "cells").glob("N*_c0.json")}
    assert main(["sweep", "--config", path, "--workers", "2"]) == 0
    assert all((tmp_path / "out" / "cells" / k).read_bytes() == v for k, v in serial.items())


def test_sweep_reads_reference_point_from_pilot_file(tmp_path):
    # a sweep elsewhere that takes V from a pilot file also takes its posterior mean
    path = _write(tmp_path, _base(tmp_path))
    assert main(["pilot", "--config", path]) == 0
    assert main(["sweep", "--config", path]) == 0
    pilot_file = str(tmp_path / "out" / "pilot.json")
    other = _base(tmp_path, kernel={"kind": "random-walk", "V": {"source": "file", "path": pilot_file}},
                  output={"dir": str(tmp_path / "rw")})
    assert main(["sweep", "--config", _write(tmp_path, other, "rw.yaml")]) == 0
    with open(tmp_path / "out" / "aggregate.csv") as fh:
        own = {r["N"]: r["sigma2"] for r in csv.DictReader(fh)}
    with open(tmp_path / "rw" / "aggregate.csv") as fh:
        borrowed = {r["N"]: r["sigma2"] for r in csv.DictReader(fh)}
    assert borrowed == own


def test_theory_tables(tmp_path):
    out = tmp_path / "th"
    assert main(["theory", "--out", str(out), "--n-ell", "5", "--n-sigma2", "4", "--n-sigma", "2"]) == 0
    with open(out / "surface.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["ell", "sigma2", "alpha", "eff"] and len(rows) == 1 + 20
    assert all(0 <= float(r[2]) <= 1 for r in rows[1:])
    with open(out / "maximin.csv") as fh:
        assert next(csv.reader(fh)) == ["sigma", "alpha_maximin", "worst_eff"]
    opt = json.loads((out / "optimum.json").read_text())
    assert opt["alpha_opt"] == pytest.approx(0.1547, abs=5e-4)
