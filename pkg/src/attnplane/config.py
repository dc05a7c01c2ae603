"""Run configuration: defaults, YAML loading, schema validation, hashing.

A run is fully described by one resolved mapping.  Files override the
defaults section by section, CLI overrides land on top as dotted keys, and
the resolved mapping (hashed) travels with every output artifact so any
result can be reproduced from its own header.
"""

from __future__ import annotations

import copy
import hashlib
import json
from importlib import resources

import jsonschema
import yaml

from .control import CadenceConfig
from .experiments import ExperimentConfig
from .fixedpoint import FixedPointFormat
from .fusion import FusionConfig
from .pipeline import ResourceModel
from .workload import WorkloadSpec

DEFAULTS = {
    "seed": 0,
    "deterministic": False,
    "feature": {
        "kind": "clipped-prf",
        "m": 16,
        "clip_bound": 1.0,
    },
    "formats": {
        "accumulator": "q16.8",
        "normalizer": "q16.8",
        "weights": "q16.8",
        "policy": "checked",
    },
    "attention": {
        "heads": 1,
        "gamma_floor": None,
        "score_sum_dims": 2,
    },
    "selection": {
        "window": 6,
        "n_cap": 32,
        "bits_per_coord": 4,
        "anchors_per_class": 32,
        "care_coords": 4,
        "care_magnitude_bits": 0,
    },
    "fusion": {
        "alpha": 1.0,
        "beta": 1.0,
        "lambda_h": 1,
        "sigmoid_mode": "exact",
        "fit_on_validation": True,
    },
    "resources": {
        "phv_bits": 4096,
        "per_flow_sram_bits": 8192,
        "tcam_entries": 1024,
        "sram_table_bits": 1048576,
        "stages": 12,
        "pipelines": 1,
        "mode": "analysis",
    },
    "rules": {
        "table_bits": 4096,
        "s_max": 1.0,
        "theta_high": 0.9,
    },
    "cadence": {
        "eta": 0.10,
        "t_cp": 60.0,
        "tau_map": 0.05,
        "install_rate": 200000.0,
        "packet_rate": 1000.0,
        "n_entries": 10000,
        "horizon": 10000,
    },
    "workload": {
        "flows": 900,
        "packets_min": 6,
        "packets_max": 14,
        "d": 8,
        "d_v": 2,
        "class_count": 2,
        "drift": "diurnal",
        "drift_magnitude": 0.6,
        "hard_rule_fraction": 0.05,
        "class_sep": 0.5,
        "feature_noise": 0.4,
        "value_noise": 1.3,
        "evidence": 0.7,
        "anchor_noise": 0.4,
        "flow_value_bias": 0.6,
        "port_bias": 0.6,
        "benign_port_bias": 0.2,
    },
}


def load_schema() -> dict:
    with resources.files("attnplane").joinpath("config.schema.json").open() as f:
        return json.load(f)


def _deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, overrides) -> dict:
    """Apply `section.key=value` strings on top of a config mapping."""
    out = copy.deepcopy(cfg)
    for item in overrides or ():
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        dotted, raw = item.split("=", 1)
        node = out
        parts = dotted.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _coerce(raw)
    return out


def load_config(path=None, overrides=None, seed=None) -> dict:
    cfg = DEFAULTS
    if path is not None:
        with open(path) as f:
            file_cfg = yaml.safe_load(f) or {}
        cfg = _deep_merge(cfg, file_cfg)
    else:
        cfg = copy.deepcopy(cfg)
    cfg = apply_overrides(cfg, overrides)
    if seed is not None:
        cfg["seed"] = seed
    jsonschema.validate(cfg, load_schema())
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# -- builders from the resolved mapping --------------------------------------


def workload_spec(cfg: dict) -> WorkloadSpec:
    w = cfg["workload"]
    return WorkloadSpec(seed=cfg["seed"], **w)


def experiment_config(cfg: dict) -> ExperimentConfig:
    s = cfg["selection"]
    return ExperimentConfig(
        m=cfg["feature"]["m"],
        n_heads=cfg["attention"]["heads"],
        window=s["window"],
        n_anchors_per_class=s["anchors_per_class"],
        care_coords=s["care_coords"],
        care_magnitude_bits=s["care_magnitude_bits"],
        fmt=FixedPointFormat.from_string(cfg["formats"]["weights"]),
        n_cap=s["n_cap"],
        rule_table_bits=cfg["rules"]["table_bits"],
        score_sum_dims=cfg["attention"]["score_sum_dims"],
        theta_high=cfg["rules"]["theta_high"],
        policy=cfg["formats"]["policy"],
        seed=cfg["seed"],
    )


def resource_model(cfg: dict) -> ResourceModel:
    r = cfg["resources"]
    return ResourceModel(
        phv_bits=r["phv_bits"],
        per_flow_sram_bits=r["per_flow_sram_bits"],
        tcam_entries=r["tcam_entries"],
        sram_table_bits=r["sram_table_bits"],
        stages=r["stages"],
        pipelines=r["pipelines"],
    )


def cadence_config(cfg: dict) -> CadenceConfig:
    c = cfg["cadence"]
    return CadenceConfig(t_cp=c["t_cp"], tau_map=c["tau_map"],
                         install_rate=c["install_rate"], eta=c["eta"])


def fusion_config(cfg: dict) -> FusionConfig:
    f = cfg["fusion"]
    return FusionConfig(alpha=f["alpha"], beta=f["beta"], lambda_h=f["lambda_h"],
                        sigmoid_mode=f["sigmoid_mode"])


def formats(cfg: dict):
    f = cfg["formats"]
    return (FixedPointFormat.from_string(f["accumulator"]),
            FixedPointFormat.from_string(f["normalizer"]))
