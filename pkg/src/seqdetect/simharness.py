"""Simulation of the reference systems, Monte Carlo studies, and the
sliding-window baseline.

Signals are generated on the boundary of their declared (k, rho) set:
the guarantees are tightest there, so the Monte Carlo power checks are
as hard as the theory allows. Every generated input is certified
feasible for its set before noise is added.
"""

from __future__ import annotations

import csv
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .calibration import CalibrationTable
from .model import (
    CovarianceFamily,
    ObservationModel,
    SignalGeometryAffine,
    SignalGeometryQuadratic,
)
from .numerics import wilson_interval
from .runtime import run_stream

__all__ = [
    "Scenario",
    "InfeasibleInput",
    "boundary_input",
    "certify_input",
    "simulate",
    "increments_of",
    "MonteCarloResult",
    "monte_carlo",
    "sliding_window_verdict",
    "calibrate_window_threshold",
    "write_metrics_csv",
]


class InfeasibleInput(ValueError):
    """A generated input violates its declared constraint set."""


@dataclass(frozen=True)
class Scenario:
    """A distribution over streams: one system, one noise draw rule, and
    optionally one boundary signal."""

    model: ObservationModel
    family: CovarianceFamily
    kind: str = "nuisance"  # nuisance | signal
    geometry: SignalGeometryAffine | SignalGeometryQuadratic | None = None
    shape_label: str = ""
    rho: float = 0.0
    t_target: int | None = None
    noise: str = "gaussian"  # gaussian | uniform | none
    theta_scale: float = 1.0
    block: int = 1  # pixel count per frame for spot shapes
    lam: float = 0.0
    p: tuple[float, ...] = (1.0,)

    def with_signal(self, label: str, rho: float,
                    t_target: int | None = None) -> "Scenario":
        return replace(self, kind="signal", shape_label=label, rho=rho,
                       t_target=t_target)


def _label_time(label: str) -> int:
    m = re.search(r"(\d+)$", label)
    if not m:
        raise ValueError(f"shape label {label!r} carries no time index")
    return int(m.group(1))


def boundary_input(scenario: Scenario, rng: np.random.Generator) -> np.ndarray:
    """Input on the boundary of the declared signal set.

    Pulse, jump, and step shapes are deterministic; the free-jump tail is
    chosen to minimize the observed energy at t_target (the hardest
    feasible signal), and spot shapes draw fresh uniform directions per
    frame with energies meeting the recursion with equality.
    """
    model, geom = scenario.model, scenario.geometry
    label, rho = scenario.shape_label, scenario.rho
    k = _label_time(label)
    d = model.horizon
    nu = scenario.block

    if label.startswith("spot"):
        n = geom.input_dim
        u = np.zeros(n)
        energy = rho * rho
        prev = energy
        for tau in range(k, d + 1):
            if tau > k:
                idx = tau - k
                pt = scenario.p[idx] if idx < len(scenario.p) else 0.0
                prev = scenario.lam * prev + rho * rho * pt
            direction = rng.normal(size=nu)
            direction /= np.linalg.norm(direction)
            u[(tau - 1) * nu: tau * nu] = math.sqrt(max(prev, 0.0)) * direction
        return u

    n = geom.input_dim if isinstance(geom, SignalGeometryQuadratic) \
        else geom.ambient.dim
    u = np.zeros(n)
    if label.startswith("pulse"):
        u[k - 1] = rho
    elif label.startswith(("jump", "step")):
        u[k - 1:] = rho
    elif label.startswith("fjump"):
        shape = _shape_by_label(geom, label)
        ro = shape.rank_one
        t_ref = scenario.t_target or d
        abar = model.abar(t_ref)
        a = abar @ ro.direction
        T = abar @ ro.tail if ro.tail.size else np.zeros((abar.shape[0], 0))
        if T.size:
            c, *_ = np.linalg.lstsq(T, a, rcond=None)
            u = rho * (ro.direction - ro.tail @ c)
        else:
            u = rho * ro.direction
    else:
        raise ValueError(f"no generator for shape {label!r}")
    return u


def _shape_by_label(geom, label: str):
    for s in geom.shapes:
        if s.label == label:
            return s
    raise KeyError(label)


def certify_input(scenario: Scenario, u: np.ndarray, tol: float = 1e-9) -> None:
    """Constraint evaluation on the generated input; raises on violation."""
    geom = scenario.geometry
    rho = scenario.rho
    if isinstance(geom, SignalGeometryAffine):
        shape = _shape_by_label(geom, scenario.shape_label)
        if not geom.ambient.contains(u, tol=tol * max(1.0, float(np.max(np.abs(u))))):
            raise InfeasibleInput("input leaves the ambient set")
        if not shape.W.contains(u / rho, tol=tol * max(1.0, rho)):
            raise InfeasibleInput(f"input not in the {shape.label} direction set")
        return
    shape = _shape_by_label(geom, scenario.shape_label)
    z = np.concatenate([u, [1.0]])
    Z = np.outer(z, z)
    for r in shape.rows:
        rhs = r.q
        if r.kind == "A":
            rhs *= rho
        elif r.kind == "B":
            rhs *= rho * rho
        val = float(np.tensordot(r.Q, Z))
        slack = tol * max(1.0, abs(rhs), abs(val))
        if r.equality:
            if abs(val - rhs) > slack:
                raise InfeasibleInput(
                    f"{shape.label}: equality row off by {val - rhs:.3e}")
        elif val > rhs + slack:
            raise InfeasibleInput(
                f"{shape.label}: row violated by {val - rhs:.3e}")


def _unit_noise(rng: np.random.Generator, size: int, kind: str) -> np.ndarray:
    if kind == "gaussian":
        return rng.normal(size=size)
    if kind == "uniform":
        # variance one and sub-Gaussian with its own variance as proxy
        return rng.uniform(-math.sqrt(3.0), math.sqrt(3.0), size=size)
    if kind == "none":
        return np.zeros(size)
    raise ValueError(f"unknown noise kind {kind!r}")


def simulate(scenario: Scenario, rng: np.random.Generator) -> np.ndarray:
    """Full projected observation y^d for one stream draw."""
    model = scenario.model
    abar = model.abar(model.horizon)
    if scenario.kind == "signal":
        u = boundary_input(scenario, rng)
        certify_input(scenario, u)
    else:
        u = np.zeros(abar.shape[1])
    scale = math.sqrt(scenario.theta_scale)

    if model.name == "rust":
        nu = scenario.block
        d = model.horizon
        base = scenario.family.largest()
        sigma = math.sqrt(base[0, 0] / 2.0)  # diagonal blocks are 2*sigma^2
        frames = _unit_noise(rng, (d + 1) * nu, scenario.noise) * sigma * scale
        frames = frames.reshape(d + 1, nu)
        xi = (frames[1:] - frames[0]).reshape(-1)
        return abar @ u + xi
    if model.noise_through_markov:
        zeta = _unit_noise(rng, abar.shape[1], scenario.noise) * scale
        return abar @ (u + zeta)
    theta = scenario.family.largest()
    L = np.linalg.cholesky(
        scenario.theta_scale * theta + 1e-15 * np.eye(theta.shape[0]))
    return abar @ u + L @ _unit_noise(rng, theta.shape[0], scenario.noise)


def increments_of(model: ObservationModel, y_full: np.ndarray) -> list[np.ndarray]:
    """Split y^d into per-time increments matching the nested bases."""
    out, prev = [], 0
    for t in range(1, model.horizon + 1):
        cut = model.dims[t - 1]
        out.append(np.asarray(y_full[prev:cut], dtype=float))
        prev = cut
    return out


# ---------------------------------------------------------------------------
# Monte Carlo


@dataclass(frozen=True)
class MonteCarloResult:
    trials: int
    kind: str
    t_target: int | None
    n_signal: int  # trials ending with a signal verdict
    n_by_target: int  # trials with a signal at or before t_target
    stops: tuple[int, ...]

    @property
    def signal_rate(self) -> float:
        return self.n_signal / self.trials if self.trials else 0.0

    @property
    def false_alarm_rate(self) -> float:
        return self.signal_rate

    @property
    def miss_rate(self) -> float:
        if not self.trials:
            return 0.0
        return 1.0 - self.n_by_target / self.trials

    def wilson(self, which: str = "signal") -> tuple[float, float]:
        n_hit = self.n_signal if which == "signal" else self.n_by_target
        return wilson_interval(n_hit, self.trials)

    @property
    def stop_stats(self) -> tuple[float, float, float]:
        if not self.stops:
            return (math.nan, math.nan, math.nan)
        return (float(min(self.stops)),
                float(sum(self.stops)) / len(self.stops),
                float(max(self.stops)))


def _one_trial(args) -> tuple[int, int]:
    table, scenario, seed_entropy, index = args
    ss = np.random.SeedSequence(entropy=seed_entropy,
                                spawn_key=(index,))
    rng = np.random.default_rng(ss)
    y = simulate(scenario, rng)
    trace = run_stream(table, increments_of(scenario.model, y))
    stop = trace.stopping_time
    return (index, 0 if stop is None else stop)


def monte_carlo(table: CalibrationTable, scenario: Scenario, trials: int,
                *, seed: int, workers: int = 1) -> MonteCarloResult:
    """Independent seeded trials; the per-trial seed depends only on
    (seed, trial index), so results do not depend on the worker count."""
    jobs = [(table, scenario, seed, i) for i in range(trials)]
    if workers > 1 and trials > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            raw = list(pool.map(_one_trial, jobs, chunksize=64))
    else:
        raw = [_one_trial(j) for j in jobs]
    raw.sort(key=lambda r: r[0])
    stops = tuple(s for _, s in raw if s > 0)
    t_target = scenario.t_target
    n_by = sum(1 for s in stops if t_target is None or s <= t_target)
    return MonteCarloResult(
        trials=trials, kind=scenario.kind, t_target=t_target,
        n_signal=len(stops), n_by_target=n_by, stops=stops)


def write_metrics_csv(path, rows, fieldnames=None) -> None:
    """rows: iterable of dicts sharing the same keys. With no rows the
    header is still written (from fieldnames, or a generic fallback)."""
    rows = list(rows)
    if fieldnames is None:
        fieldnames = list(rows[0].keys()) if rows else \
            ["label", "trials", "rate"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


# ---------------------------------------------------------------------------
# sliding-window baseline


def _window_stat(frames: np.ndarray, t: int, h: int, patches) -> float:
    """max over split points and patches of the infinity-norm gap between
    the left mean over [tau-h+1, tau] and the right mean over
    [tau, tau+h-1] (1-based tau; both windows include tau)."""
    best = 0.0
    for tau in range(h, t - h + 2):
        left = frames[tau - h: tau].mean(axis=0)
        right = frames[tau - 1: tau + h - 1].mean(axis=0)
        gap = np.abs(left - right)
        for p in patches:
            best = max(best, float(gap[p].max()))
    return best


def sliding_window_verdict(frames: np.ndarray, h: int, kappa: float,
                           patches=None) -> int | None:
    """First time the baseline rejects the nuisance hypothesis, or None.

    frames: (T, n) per-time observation vectors. The rule always accepts
    while t <= 2h-2.
    """
    T = frames.shape[0]
    if patches is None:
        patches = [np.arange(frames.shape[1])]
    for t in range(2 * h - 1, T + 1):
        if _window_stat(frames, t, h, patches) > kappa:
            return t
    return None


def calibrate_window_threshold(nuisance_frames, h: int, eps: float,
                               patches=None) -> float:
    """Empirical (1-eps)-quantile, taken conservatively from above, of
    the full-horizon max statistic over nuisance draws."""
    stats = []
    for frames in nuisance_frames:
        frames = np.asarray(frames, dtype=float)
        T = frames.shape[0]
        pat = patches if patches is not None else [np.arange(frames.shape[1])]
        if T >= 2 * h - 1:
            stats.append(_window_stat(frames, T, h, pat))
        else:
            stats.append(0.0)
    return float(np.quantile(np.asarray(stats), 1.0 - eps, method="higher"))
