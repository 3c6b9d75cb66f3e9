"""Experiment configuration: YAML files validated against a bundled JSON schema.

Unknown keys are rejected. Optional fields are filled with defaults on load, so
``parse(emit(cfg)) == cfg`` holds for every loaded configuration.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import yaml

from .errors import ConfigError

SECTIONS = ("model", "data", "filter", "kernel", "run", "output", "pilot", "diagnose")

DEFAULTS = {
    "filter": {"adapter": "bootstrap", "zeta": 0.95, "resampling": "multinomial"},
    "kernel": {"V": {"source": "pilot"}},
    "run": {"burn_in": 0, "chains": 1, "sigma2_runs": 100},
    "output": {"traces": False},
    "pilot": {"iterations": 20000, "burn_in": 2000, "stages": 2, "exact": False,
              "initial_scale": 0.01},
    "diagnose": {"points": 5, "N_grid": [10, 20, 40, 80, 160, 320], "replicates": 200,
                 "N": 20, "delta_replicates": 100, "gamma": 1.0},
}


def load_schema():
    text = resources.files("pmala").joinpath("config_schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def _merge(defaults, given):
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    model: dict
    data: dict
    filter: dict
    kernel: dict
    run: dict
    output: dict
    pilot: dict
    diagnose: dict

    @classmethod
    def from_dict(cls, raw):
        if not isinstance(raw, dict):
            raise ConfigError("configuration must be a mapping")
        try:
            jsonschema.validate(raw, load_schema())
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"invalid configuration at {where}: {exc.message}") from None
        full = {s: _merge(DEFAULTS.get(s, {}), raw.get(s, {})) for s in SECTIONS}
        run = full["run"]
        if run["burn_in"] >= run["iterations"]:
            raise ConfigError("run.burn_in must be smaller than run.iterations")
        if full["pilot"]["burn_in"] >= full["pilot"]["iterations"]:
            raise ConfigError("pilot.burn_in must be smaller than pilot.iterations")
        if full["kernel"]["V"]["source"] == "file" and "path" not in full["kernel"]["V"]:
            raise ConfigError("kernel.V.source 'file' needs kernel.V.path")
        if full["pilot"]["exact"] and full["model"]["name"] != "lgss":
            raise ConfigError("pilot.exact needs the lgss model")
        return cls(**full)

    def to_dict(self):
        return {s: copy.deepcopy(getattr(self, s)) for s in SECTIONS}

    def with_seed(self, seed):
        d = self.to_dict()
        d["run"]["seed"] = int(seed)
        return ExperimentConfig.from_dict(d)

    def with_output(self, path):
        d = self.to_dict()
        d["output"]["dir"] = str(path)
        return ExperimentConfig.from_dict(d)


def parse(text):
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse configuration: {exc}") from None
    return ExperimentConfig.from_dict(raw)


def emit(config):
    return yaml.safe_dump(config.to_dict(), sort_keys=True, default_flow_style=False)


def load_config(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    return parse(text)
