"""Pipeline configuration: one nested YAML file with units in key names."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import ParameterError
from .klfield import BasisCache, CovarianceSpec, DecaySpec, GeometrySpec

__all__ = ["PipelineConfig", "load_config"]

_DEFAULTS = {
    "seed": 0,
    "output_dir": "out",
    "geometry": {
        "radius_mm": 22.0,
        "ply_count": 39,
        "ply_thickness_mm": 0.24,
        "interply_thickness_mm": 0.015,
        "width_mm": 52.0,
        "limb_length_mm": 10.0,
    },
    "covariance": {
        "sigma_f": 0.1425,
        "lambda_mm": 12.9,
        "grid_n": 256,
        "n_modes": 30,
        "cache_quantum_mm": 0.05,
    },
    "decay": {
        "focus_depth_mm": 4.8,
        "exponent_n": 4,
        "floor": 1e-6,
    },
    "mfia": {
        "pitch_x1_mm": 0.08,
        "pitch_x3_mm": 0.04,
        "fibre_ply_multiple": 3.0,
        "theta_max_deg": 45.0,
        "m0": 12,
        "levels": 3,
        "budgets": [600, 600, 600],
        "flat_scans": True,
        "focus_radius_offset_mm": 4.8,
    },
    "synth": {
        "amplitude_sigma": 10.0,
        "scale_factors": [0.2, 1.8, 1.85, 1.8],
        "component_jitter": 0.15,
        "lambda_jitter": 0.01,
        "noise_sigma_gray": 0.0,
        "blur_rate_mm": 0.0,
    },
    "noise": {
        "base_rad": 0.044,
        "confidence": 0.95,
    },
    "chain": {
        "beta": 0.25,
        "sigma_pcn": 1.0,
        "burn_in": None,
        "thinning": None,
        "n_samples_total": 200,
        "n_chains": 5,
        "tune": False,
        "tune_target": 0.25,
        "tune_pilot_steps": 2000,
        "iact_pilot": 1000,
    },
    "model": {
        "kind": "surrogate",
        "m_star": 8.93,
        "q": 2.867,
        "lambda_q": 4.212,
        "q_lower": 2.587,
        "lambda_q_lower": 3.834,
        "command": None,
        "timeout_s": 600.0,
        "retries": 1,
        "workers": 1,
    },
    "prior": {
        "confidence": 0.95,
        "fit_noise_rad": 0.044,
    },
}


def _merge(defaults: dict, user: dict, path: str = "") -> dict:
    out = {}
    for key, dval in defaults.items():
        if isinstance(dval, dict):
            out[key] = _merge(dval, user.get(key, {}) or {}, f"{path}{key}.")
        else:
            out[key] = user.get(key, dval)
    unknown = set(user) - set(defaults)
    if unknown:
        raise ParameterError(f"unknown config keys: "
                             f"{sorted(path + k for k in unknown)}")
    return out


@dataclass
class PipelineConfig:
    """Validated pipeline settings plus constructors for domain objects."""

    raw: dict
    path: str = ""

    def __post_init__(self):
        chain = self.raw["chain"]
        if chain["n_chains"] < 1:
            raise ParameterError("chain.n_chains must be >= 1")
        if chain["n_samples_total"] < chain["n_chains"]:
            raise ParameterError("need at least one thinned sample per chain")
        kind = self.raw["model"]["kind"]
        if kind not in ("surrogate", "external"):
            raise ParameterError("model.kind must be 'surrogate' or 'external'")
        if kind == "external" and not self.raw["model"]["command"]:
            raise ParameterError("model.kind=external requires model.command")

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    def geometry(self) -> GeometrySpec:
        g = self.raw["geometry"]
        return GeometrySpec(radius=g["radius_mm"], ply_count=g["ply_count"],
                            ply_thickness=g["ply_thickness_mm"],
                            interply_thickness=g["interply_thickness_mm"],
                            width=g["width_mm"],
                            limb_length=g["limb_length_mm"])

    def covariance(self) -> CovarianceSpec:
        c = self.raw["covariance"]
        return CovarianceSpec(sigma_f=c["sigma_f"],
                              corr_length=c["lambda_mm"],
                              length=self.geometry().arc_length,
                              grid_n=c["grid_n"])

    def basis_cache(self) -> BasisCache:
        c = self.raw["covariance"]
        return BasisCache(self.covariance(), n_modes=c["n_modes"],
                          quantum=c["cache_quantum_mm"])

    def decay(self) -> DecaySpec:
        d = self.raw["decay"]
        return DecaySpec.for_geometry(self.geometry(),
                                      focus_depth=d["focus_depth_mm"],
                                      exponent_n=d["exponent_n"],
                                      floor=d["floor"])

    def snapshot(self) -> dict:
        return self.raw


def load_config(path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ParameterError(f"config file not found: {path}")
    with open(path) as fh:
        user = yaml.safe_load(fh) or {}
    if not isinstance(user, dict):
        raise ParameterError("config root must be a mapping")
    return PipelineConfig(raw=_merge(_DEFAULTS, user), path=str(path))
