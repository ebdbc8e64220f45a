"""YAML run configuration mirroring EstimatorConfig and SensorModel.

A configuration file must list every key of :func:`default_config`; a
missing or unknown key is reported by its dotted name.  Angles are given in
degrees in the file and converted here.
"""

from __future__ import annotations

import copy
from dataclasses import replace

import numpy as np
import yaml

from .association import AssociationConfig
from .errors import DataFormatError
from .estimator import EstimatorConfig, configure_baseline_cv_c
from .measurement import DEG, SensorModel
from .se3 import Pose
from .simulator import SENSOR_MOUNT

MODELS = ("ca_p", "cv_c")


class ConfigError(DataFormatError):
    """Missing, unknown or invalid configuration key."""

    def __init__(self, key: str, msg: str):
        super().__init__(f"config key '{key}': {msg}")
        self.key = key


def default_config() -> dict:
    est = EstimatorConfig()
    base = configure_baseline_cv_c()
    sensor = SensorModel()
    return {
        "scenario": "straight_cruise",
        "seed": 0,
        "noise": True,
        "model": "ca_p",
        "estimator": {
            "window_size": est.window_size,
            "max_gn_iters": est.max_gn_iters,
            "gn_tol": est.gn_tol,
            "robust_loss": est.robust_loss,
            "huber_delta": est.huber_delta,
            "prior_sigma": list(est.prior_sigma),
            "magnus_order": est.magnus_order,
            "max_halvings": est.max_halvings,
            "fov_margin_deg": float(est.fov_margin / DEG),
            "static_gate": est.static_gate,
            "stale_frames": est.stale_frames,
            "min_matches": est.min_matches,
            "restart_inliers": est.restart_inliers,
            "bootstrap": est.bootstrap,
        },
        "association": {
            "gate": float(est.association.gate),
            "max_map_size": est.association.max_map_size,
        },
        "models": {
            "ca_p": {"process_noise": list(est.process_noise)},
            "cv_c": {"process_noise": list(base.process_noise)},
        },
        "sensor": {
            "mount": [float(v) for v in SENSOR_MOUNT],
            "fov_azimuth_deg": float(sensor.fov_azimuth / DEG),
            "fov_elevation_deg": float(sensor.fov_elevation / DEG),
            "r_min": sensor.r_min,
            "r_max": sensor.r_max,
            "sigma_range": sensor.sigma[0],
            "sigma_azimuth_deg": float(sensor.sigma[1] / DEG),
            "sigma_elevation_deg": float(sensor.sigma[2] / DEG),
            "sigma_velocity": sensor.sigma[3],
            "sigma_cartesian": list(sensor.sigma_cartesian),
            "frame_rate": sensor.frame_rate,
        },
    }


def _check_keys(ref: dict, got, prefix: str = "") -> None:
    if not isinstance(got, dict):
        raise ConfigError(prefix.rstrip(".") or "<root>", "expected a mapping")
    for key, val in ref.items():
        name = prefix + key
        if key not in got:
            raise ConfigError(name, "missing")
        if isinstance(val, dict):
            _check_keys(val, got[key], name + ".")
    for key in got:
        if key not in ref:
            raise ConfigError(prefix + str(key), "unknown key")


def load_config(path) -> dict:
    with open(path) as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise DataFormatError(f"{path}: {exc}") from exc
    _check_keys(default_config(), data)
    return data


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=False, default_flow_style=None)


def apply_overrides(cfg: dict, **flags) -> dict:
    """Command-line values (not ``None``) replace file values."""
    out = copy.deepcopy(cfg)
    for key, val in flags.items():
        if val is not None:
            out[key] = val
    if out["model"] not in MODELS:
        raise ConfigError("model", f"expected one of {MODELS}, got {out['model']!r}")
    return out


def build_sensor(cfg: dict) -> SensorModel:
    s = cfg["sensor"]
    try:
        return SensorModel(
            T_sv=Pose(np.eye(3), -np.asarray(s["mount"], dtype=float)),
            fov_azimuth=float(s["fov_azimuth_deg"]) * DEG,
            fov_elevation=float(s["fov_elevation_deg"]) * DEG,
            r_min=float(s["r_min"]),
            r_max=float(s["r_max"]),
            sigma=(
                float(s["sigma_range"]),
                float(s["sigma_azimuth_deg"]) * DEG,
                float(s["sigma_elevation_deg"]) * DEG,
                float(s["sigma_velocity"]),
            ),
            sigma_cartesian=tuple(float(v) for v in s["sigma_cartesian"]),
            frame_rate=float(s["frame_rate"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError("sensor", str(exc)) from exc


def build_estimator_config(cfg: dict, model: str | None = None) -> EstimatorConfig:
    model = model or cfg["model"]
    if model not in MODELS:
        raise ConfigError("model", f"expected one of {MODELS}, got {model!r}")
    e = cfg["estimator"]
    try:
        base = EstimatorConfig(
            window_size=int(e["window_size"]),
            max_gn_iters=int(e["max_gn_iters"]),
            gn_tol=float(e["gn_tol"]),
            robust_loss=str(e["robust_loss"]),
            huber_delta=float(e["huber_delta"]),
            prior_sigma=tuple(float(v) for v in e["prior_sigma"]),
            magnus_order=int(e["magnus_order"]),
            max_halvings=int(e["max_halvings"]),
            fov_margin=float(e["fov_margin_deg"]) * DEG,
            static_gate=float(e["static_gate"]),
            stale_frames=int(e["stale_frames"]),
            min_matches=int(e["min_matches"]),
            restart_inliers=int(e["restart_inliers"]),
            bootstrap=str(e["bootstrap"]),
            association=AssociationConfig(float(cfg["association"]["gate"]), int(cfg["association"]["max_map_size"])),
        )
        q = tuple(float(v) for v in cfg["models"][model]["process_noise"])
    except (TypeError, ValueError) as exc:
        raise ConfigError("estimator", str(exc)) from exc
    if model == "cv_c":
        return configure_baseline_cv_c(base, q)
    return replace(base, process_noise=q)
