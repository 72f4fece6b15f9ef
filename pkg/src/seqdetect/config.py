"""Config ingestion: structured text to problem objects.

A run config is YAML (JSON works too, being a YAML subset) with these
keys; unknown keys are rejected so typos surface early.

    system: double_integrator | third_order | rust | custom
    horizon: 8
    block: 4                 # rust pixels per frame
    regime: quadratic        # subgaussian | gaussian | union | quadratic
    eps: 0.01
    eps_split: uniform       # or a list of per-time fractions summing to 1
    geometry: pulse_step_jump  # affine: pulse | jump | step
                               # quadratic: pulse_step_jump | spot
    radius: 1.0e4
    level_rule: per_t        # quadratic: per_t | global
    gamma: 0.999
    lam: 0.0                 # spot energy recursion coefficient
    p: [1.0]                 # spot arrival profile, p[0] = 1
    noise:
      kind: identity         # identity | markov | rust
      sigma: 1.0
      theta_lo: 1.0          # < 1 turns identity into a scalar segment
      sigma_lo: 1.0          # markov lower factor (interval families)
    nuisances:               # union regime only; default single zero set
      - {kind: zero}
      - {kind: box, radius: 0.5}
    scenario:
      kind: nuisance         # nuisance | signal
      shape: pulse2
      rho: calibrated        # number, or calibrated, or calibrated*<f>
      t_target: 3
      noise_draw: gaussian   # gaussian | uniform | none
      theta_scale: 1.0
    trials: 3000
    seed: 1234
    workers: 1
    calibration: out/calibration.json
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import yaml

from .calibration import CalibrationTable, calibrate_affine
from .model import (
    Interval,
    ObservationModel,
    PolyhedralSet,
    ScalarSegment,
    SignalGeometryAffine,
    SignalGeometryQuadratic,
    Singleton,
    affine_jump_geometry,
    affine_pulse_geometry,
    affine_step_geometry,
    double_integrator,
    pulse_step_jump_geometry,
    rust_covariance,
    rust_field,
    spot_energy_geometry,
    third_order,
)
from .quadratic import calibrate_quadratic
from .simharness import Scenario

__all__ = [
    "ConfigError",
    "RunConfig",
    "check_regime_geometry",
    "load_config",
    "build_model",
    "build_family",
    "build_geometry",
    "build_scenario",
    "calibrate_from_config",
]


class ConfigError(ValueError):
    pass


_TOP_KEYS = {
    "system", "horizon", "block", "regime", "eps", "eps_split", "geometry",
    "radius", "level_rule", "gamma", "lam", "p", "noise", "nuisances",
    "scenario", "trials", "seed", "workers", "calibration",
    "quad_regime", "variant",
}
_SYSTEMS = {"double_integrator", "third_order", "rust"}
_REGIMES = {"subgaussian", "gaussian", "union", "quadratic"}
_AFFINE_GEOMS = {"pulse", "jump", "step"}
_QUAD_GEOMS = {"pulse_step_jump", "spot"}


@dataclass(frozen=True)
class RunConfig:
    system: str
    horizon: int
    regime: str
    eps: float
    geometry: str
    block: int = 1
    eps_split: object = None
    radius: float = 1.0e4
    level_rule: str = "per_t"
    gamma: float = 0.999
    quad_regime: str = "gaussian"  # moment bound inside the quadratic engine
    variant: str = "saddle"
    lam: float = 0.0
    p: tuple[float, ...] = (1.0,)
    noise: dict = field(default_factory=dict)
    nuisances: tuple[dict, ...] = ()
    scenario: dict = field(default_factory=dict)
    trials: int = 0
    seed: int = 0
    workers: int = 1
    calibration: str | None = None


def check_regime_geometry(regime: str, geometry: str) -> None:
    if regime not in _REGIMES:
        raise ConfigError(f"regime must be one of {sorted(_REGIMES)}")
    if regime == "quadratic":
        if geometry not in _QUAD_GEOMS:
            raise ConfigError(
                f"quadratic regime needs geometry in {sorted(_QUAD_GEOMS)}")
    elif geometry not in _AFFINE_GEOMS:
        raise ConfigError(
            f"regime {regime} needs geometry in {sorted(_AFFINE_GEOMS)}")


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse config: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a mapping")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key in ("system", "horizon", "regime", "eps", "geometry"):
        if key not in doc:
            raise ConfigError(f"missing required key {key!r}")
    system = str(doc["system"])
    if system not in _SYSTEMS:
        raise ConfigError(f"system must be one of {sorted(_SYSTEMS)}")
    regime = str(doc["regime"])
    geometry = str(doc["geometry"])
    check_regime_geometry(regime, geometry)
    horizon = int(doc["horizon"])
    if horizon < 1:
        raise ConfigError("horizon must be at least 1")
    eps = float(doc["eps"])
    if not 0.0 < eps < 1.0:
        raise ConfigError("eps must lie strictly between 0 and 1")
    block = int(doc.get("block", 1))
    if system == "rust" and block < 1:
        raise ConfigError("rust system needs block >= 1")
    p = tuple(float(x) for x in doc.get("p", [1.0]))
    scenario = doc.get("scenario") or {}
    if scenario and scenario.get("kind") not in (None, "nuisance", "signal"):
        raise ConfigError("scenario.kind must be nuisance or signal")
    return RunConfig(
        system=system,
        horizon=horizon,
        regime=regime,
        eps=eps,
        geometry=geometry,
        block=block,
        eps_split=doc.get("eps_split"),
        radius=float(doc.get("radius", 1.0e4)),
        level_rule=str(doc.get("level_rule", "per_t")),
        gamma=float(doc.get("gamma", 0.999)),
        quad_regime=str(doc.get("quad_regime", "gaussian")),
        variant=str(doc.get("variant", "saddle")),
        lam=float(doc.get("lam", 0.0)),
        p=p,
        noise=dict(doc.get("noise") or {}),
        nuisances=tuple(doc.get("nuisances") or ()),
        scenario=dict(scenario),
        trials=int(doc.get("trials", 0)),
        seed=int(doc.get("seed", 0)),
        workers=int(doc.get("workers", 1)),
        calibration=doc.get("calibration"),
    )


def build_model(cfg: RunConfig) -> ObservationModel:
    if cfg.system == "double_integrator":
        return double_integrator(cfg.horizon)
    if cfg.system == "third_order":
        return third_order(cfg.horizon)
    return rust_field(cfg.horizon, cfg.block)


def build_family(cfg: RunConfig, model: ObservationModel):
    noise = cfg.noise
    kind = noise.get("kind", "rust" if cfg.system == "rust" else "identity")
    sigma = float(noise.get("sigma", 1.0))
    if kind == "rust":
        theta_lo = float(noise.get("theta_lo", 1.0))
        return rust_covariance(cfg.horizon, cfg.block, sigma, theta_lo)
    if kind == "identity":
        base = sigma * sigma * np.eye(model.dims[-1])
        theta_lo = float(noise.get("theta_lo", 1.0))
        if theta_lo < 1.0:
            return ScalarSegment(base, theta_lo)
        return Singleton(base)
    if kind == "markov":
        abar = model.abar(model.horizon)
        top = abar @ abar.T
        sigma_lo = float(noise.get("sigma_lo", 1.0))
        if sigma_lo < 1.0:
            return Interval(sigma_lo, top)
        return Singleton(top)
    raise ConfigError(f"unknown noise kind {kind!r}")


def _nuisance_set(spec: dict, dim: int) -> PolyhedralSet:
    kind = spec.get("kind", "zero")
    if kind == "zero":
        return PolyhedralSet.zero(dim)
    if kind == "box":
        return PolyhedralSet.box(dim, float(spec.get("radius", 1.0)))
    raise ConfigError(f"unknown nuisance kind {kind!r}")


def build_geometry(cfg: RunConfig, model: ObservationModel):
    if cfg.regime == "quadratic":
        if cfg.geometry == "pulse_step_jump":
            return pulse_step_jump_geometry(cfg.horizon, cfg.radius)
        return spot_energy_geometry(cfg.horizon, cfg.block, cfg.radius,
                                    lam=cfg.lam, p=list(cfg.p))
    builder = {
        "pulse": affine_pulse_geometry,
        "jump": affine_jump_geometry,
        "step": affine_step_geometry,
    }[cfg.geometry]
    geom = builder(cfg.horizon, cfg.radius)
    if cfg.nuisances:
        sets = tuple(_nuisance_set(s, geom.ambient.dim) for s in cfg.nuisances)
        geom = SignalGeometryAffine(
            shapes=geom.shapes, ambient=geom.ambient, nuisances=sets)
    if cfg.regime == "union" and len(geom.nuisances) < 2:
        raise ConfigError("union regime expects at least two nuisance sets")
    return geom


def _resolve_rho(spec, table: CalibrationTable | None, label: str,
                 t_target: int | None) -> float:
    if isinstance(spec, (int, float)):
        return float(spec)
    text = str(spec)
    if not text.startswith("calibrated"):
        raise ConfigError(f"scenario.rho {spec!r} not understood")
    if table is None:
        raise ConfigError("scenario.rho references a calibration table; "
                          "pass one via 'calibration'")
    factor = 1.0
    if "*" in text:
        factor = float(text.split("*", 1)[1])
    candidates = [e for e in table.entries.values()
                  if e.label == label and math.isfinite(e.rho)
                  and (t_target is None or e.t == t_target)]
    if not candidates:
        raise ConfigError(
            f"no finite calibrated magnitude for shape {label!r}"
            + (f" at t={t_target}" if t_target else ""))
    entry = min(candidates, key=lambda e: e.t)
    return factor * entry.rho


def build_scenario(cfg: RunConfig, model: ObservationModel, family,
                   geometry, table: CalibrationTable | None = None) -> Scenario:
    spec = cfg.scenario
    base = Scenario(
        model=model, family=family, geometry=geometry,
        noise=str(spec.get("noise_draw", "gaussian")),
        theta_scale=float(spec.get("theta_scale", 1.0)),
        block=cfg.block if cfg.system == "rust" else 1,
        lam=cfg.lam, p=cfg.p,
    )
    if spec.get("kind", "nuisance") == "nuisance":
        return base
    label = spec.get("shape")
    if not label:
        raise ConfigError("signal scenario needs scenario.shape")
    t_target = spec.get("t_target")
    t_target = int(t_target) if t_target is not None else None
    rho = _resolve_rho(spec.get("rho", "calibrated"), table, str(label),
                       t_target)
    return base.with_signal(str(label), rho, t_target)


def calibrate_from_config(cfg: RunConfig, model=None, family=None,
                          geometry=None) -> CalibrationTable:
    model = model or build_model(cfg)
    family = family if family is not None else build_family(cfg, model)
    geometry = geometry if geometry is not None else build_geometry(cfg, model)
    if cfg.regime == "quadratic":
        if not isinstance(geometry, SignalGeometryQuadratic):
            raise ConfigError("quadratic regime needs a quadratic geometry")
        return calibrate_quadratic(
            model, family, geometry, cfg.eps,
            level_rule=cfg.level_rule, regime=cfg.quad_regime,
            variant=cfg.variant, eps_split=cfg.eps_split, gamma=cfg.gamma)
    return calibrate_affine(
        model, family, geometry, cfg.eps,
        regime=cfg.regime, eps_split=cfg.eps_split)
