"""Budget splitting and threshold calibration for affine detectors.

The per-time levels (kappa_t or delta_t) are computed exactly from the
step structure of the activation counts; thresholds rho_tk then solve the
balance equation by bisection on the monotone saddle value.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .affine import AffineDetector, GammaProgram, build_affine_detector
from .model import (
    ObservationModel,
    SignalGeometryAffine,
    covariance_at_time,
    max_magnitude_affine,
)
from .numerics import erfinv

FORMAT_TAG = "seqdetect-calibration/1"


def _detector_from_dict(d: dict):
    if d.get("type", "affine") == "quadratic":
        from .quadratic import QuadraticDetector
        return QuadraticDetector.from_dict(d)
    return AffineDetector.from_dict(d)


class SolverFailure(RuntimeError):
    """A solve failed during calibration; names the failing cell."""

    def __init__(self, t: int, label: str, cause: BaseException):
        super().__init__(f"t={t} shape={label}: {cause}")
        self.t = t
        self.label = label


class NonMonotoneSV(RuntimeError):
    """Saddle value moved the wrong way during threshold bisection."""


# ---------------------------------------------------------------------------
# per-time levels


def compute_kappa_t(sv_at_R, eps: float, eps_t: float, M: int = 1) -> float:
    """Largest kappa in (0,1] with M * Card{k : sv_k < ln kappa} <= eps*eps_t/kappa^2.

    Exact combinatorial supremum: the count is a left-continuous step
    function of kappa jumping at exp(sv_k), so the supremum is attained
    either at a jump or where the budget curve crosses a step level.
    """
    if not (0.0 < eps < 0.5 and 0.0 < eps_t <= eps):
        raise ValueError("budgets must satisfy 0 < eps_t <= eps < 1/2")
    jumps = sorted(math.exp(sv) for sv in sv_at_R if sv < 0.0)
    budget = eps * eps_t / M

    def count_below(kappa: float) -> int:
        return sum(1 for j in jumps if j < kappa)

    candidates = {1.0}
    for j in jumps:
        if 0.0 < j <= 1.0:
            candidates.add(j)
    for level in range(len(jumps) + 1):
        c = 1.0 if level == 0 else min(1.0, math.sqrt(budget / level))
        candidates.add(c)
    best = 0.0
    for c in candidates:
        if c <= 0.0:
            continue
        if count_below(c) * c * c <= budget * (1.0 + 1e-15):
            best = max(best, c)
    return best


def compute_delta_t(sv_at_R, eps: float, eps_t: float) -> float:
    """Smallest delta >= threshold curve for the Gaussian budget equation.

    The active count L(delta) = Card{k : sv_k < -delta^2/2} is
    right-continuous and nonincreasing, so the infimum is found by
    checking, on each constancy interval, the fixed-point candidate
    and the left endpoint.
    """
    if not (0.0 < eps < 0.5 and 0.0 < eps_t <= eps):
        raise ValueError("budgets must satisfy 0 < eps_t <= eps < 1/2")
    base = erfinv(eps)
    deltas = []
    n_inf = 0
    for sv in sv_at_R:
        if sv == -math.inf:
            n_inf += 1
        elif sv < 0.0:
            deltas.append(math.sqrt(-2.0 * sv))
    cuts = sorted(set(deltas))
    # constancy intervals of L(delta): [0, cuts[0]), [cuts[0], cuts[1]), ...
    lows = [0.0] + cuts
    best = math.inf
    for i, lo in enumerate(lows):
        hi = cuts[i] if i < len(cuts) else math.inf
        L = n_inf + sum(1 for dk in deltas if dk > lo)
        rhs_val = 0.5 * base if L == 0 else 0.5 * (erfinv(eps_t / L) + base)
        cand = max(lo, rhs_val)
        if cand < hi:
            best = min(best, cand)
    return best


def subgaussian_alpha(kappa_t: float, eps: float, M: int = 1) -> float:
    return math.log(kappa_t * M / eps)


def gaussian_alpha(delta_t: float, eps: float, eps_t: float, L: int) -> float:
    inner = 0.0 if L == 0 else erfinv(eps_t / L)
    return 0.5 * delta_t * (erfinv(eps) - inner)


def chi_bound(regime: str, K: int, d: int, eps: float, *, M: int = 1,
              largest_element: bool = True) -> float:
    """Lower bound on the attainable threshold-to-ideal ratio."""
    if not 0.0 < eps < 0.5:
        raise ValueError("eps must lie in (0, 1/2)")
    card = K * d * M
    if regime == "subgaussian":
        return math.log(card / eps**2) / erfinv(eps) ** 2
    if regime == "gaussian":
        r = 0.5 * (1.0 + erfinv(eps / card) / erfinv(eps))
        return r if largest_element else r * r
    raise ValueError(f"unknown regime {regime!r}")


# ---------------------------------------------------------------------------
# threshold bisection


def threshold_rho(
    sv_fn,
    R_k: float,
    target: float,
    *,
    sv_tol: float = 1e-8,
    rho_rtol: float = 1e-6,
    monotone_slack: float = 1e-7,
    max_iter: int = 200,
):
    """Solve sv_fn(rho) = target on (0, R_k] for nonincreasing sv_fn.

    Returns (rho, payload) where payload is whatever sv_fn returned at
    the accepted rho. Raises NonMonotoneSV if the values move upward
    along the shrinking bracket by more than ``monotone_slack``.
    """
    lo = 1e-8 * R_k
    sv_lo, payload = sv_fn(lo)
    if sv_lo < target - sv_tol:
        # already past the target at the smallest probe: accept lo
        return lo, payload
    hi = R_k
    sv_hi, payload_hi = sv_fn(hi)
    if sv_hi > target:
        raise ValueError("activation violated: sv at R_k above target")
    best = (hi, sv_hi, payload_hi)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        sv_mid, payload_mid = sv_fn(mid)
        if sv_mid > sv_lo + monotone_slack or sv_mid < sv_hi - monotone_slack:
            raise NonMonotoneSV(
                f"sv({mid:.6g})={sv_mid:.6g} outside bracket "
                f"[{sv_hi:.6g}, {sv_lo:.6g}]")
        if sv_mid > target:
            lo, sv_lo = mid, sv_mid
        else:
            hi, sv_hi = mid, sv_mid
            best = (mid, sv_mid, payload_mid)
        if abs(best[1] - target) <= sv_tol and (hi - lo) <= rho_rtol * R_k:
            break
    return best[0], best[2]


# ---------------------------------------------------------------------------
# calibration table


@dataclass(frozen=True)
class CalEntry:
    t: int
    k: int
    label: str
    rho: float
    ideal: float
    sv_at_R: float
    detectors: tuple[AffineDetector, ...]

    @property
    def ratio(self) -> float:
        if math.isinf(self.rho) and math.isinf(self.ideal):
            return 1.0
        if math.isinf(self.rho):
            return math.inf
        return self.rho / self.ideal


@dataclass(frozen=True)
class PerTime:
    t: int
    level: float  # kappa_t or delta_t
    alpha: float
    n_active: int


@dataclass
class CalibrationTable:
    eps: float
    eps_t: tuple[float, ...]
    regime: str
    shape_labels: tuple[str, ...]
    entries: dict
    per_time: dict
    dims: tuple[int, ...] = ()

    def rho(self, t: int, k: int) -> float:
        e = self.entries.get((t, k))
        return e.rho if e is not None else math.inf

    def alpha(self, t: int) -> float:
        return self.per_time[t].alpha

    def detectors_at(self, t: int):
        out = []
        for (tt, k), e in sorted(self.entries.items()):
            if tt == t and math.isfinite(e.rho):
                out.append(e)
        return out

    @property
    def horizon(self) -> int:
        return len(self.eps_t)

    # -- persistence ---------------------------------------------------

    def save(self, path) -> None:
        doc = {
            "format": FORMAT_TAG,
            "eps": self.eps,
            "eps_t": list(self.eps_t),
            "regime": self.regime,
            "shape_labels": list(self.shape_labels),
            "dims": list(self.dims),
            "per_time": [
                {"t": p.t, "level": p.level, "alpha": p.alpha,
                 "n_active": p.n_active}
                for p in self.per_time.values()
            ],
            "entries": [
                {
                    "t": e.t, "k": e.k, "label": e.label,
                    "rho": None if math.isinf(e.rho) else e.rho,
                    "ideal": None if math.isinf(e.ideal) else e.ideal,
                    "sv_at_R": e.sv_at_R if math.isfinite(e.sv_at_R) else None,
                    "detectors": [d.to_dict() for d in e.detectors],
                }
                for e in self.entries.values()
            ],
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1)
            fh.write("\n")

    @staticmethod
    def load(path) -> "CalibrationTable":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        if doc.get("format") != FORMAT_TAG:
            raise ValueError(f"unrecognized calibration format {doc.get('format')!r}")
        per_time = {
            int(p["t"]): PerTime(int(p["t"]), float(p["level"]),
                                 float(p["alpha"]), int(p["n_active"]))
            for p in doc["per_time"]
        }
        entries = {}
        for e in doc["entries"]:
            det = tuple(_detector_from_dict(d) for d in e["detectors"])
            entries[(int(e["t"]), int(e["k"]))] = CalEntry(
                t=int(e["t"]), k=int(e["k"]), label=str(e["label"]),
                rho=math.inf if e["rho"] is None else float(e["rho"]),
                ideal=math.inf if e["ideal"] is None else float(e["ideal"]),
                sv_at_R=-math.inf if e["sv_at_R"] is None else float(e["sv_at_R"]),
                detectors=det,
            )
        return CalibrationTable(
            eps=float(doc["eps"]),
            eps_t=tuple(float(x) for x in doc["eps_t"]),
            regime=str(doc["regime"]),
            shape_labels=tuple(doc["shape_labels"]),
            entries=entries,
            per_time=per_time,
            dims=tuple(int(x) for x in doc.get("dims", ())),
        )

    def csv_rows(self):
        yield ("t", "k", "shape", "rho", "ideal_rho", "ratio", "sv_at_R",
               "level", "alpha")
        for (t, k) in sorted(self.entries):
            e = self.entries[(t, k)]
            p = self.per_time[t]
            yield (t, k, e.label,
                   "inf" if math.isinf(e.rho) else f"{e.rho:.9g}",
                   "inf" if math.isinf(e.ideal) else f"{e.ideal:.9g}",
                   "inf" if math.isinf(e.ratio) else f"{e.ratio:.9g}",
                   f"{e.sv_at_R:.9g}", f"{p.level:.9g}", f"{p.alpha:.9g}")


# ---------------------------------------------------------------------------
# driver


def split_budget(eps: float, d: int, split=None) -> tuple[float, ...]:
    if split is None:
        return tuple(eps / d for _ in range(d))
    split = tuple(float(s) for s in split)
    if len(split) != d or any(s <= 0 for s in split):
        raise ValueError("eps split must give d positive parts")
    if abs(sum(split) - eps) > 1e-12 * max(eps, 1.0):
        raise ValueError("eps split must sum to eps")
    return split


def calibrate_affine(
    model: ObservationModel,
    family,
    geometry: SignalGeometryAffine,
    eps: float,
    *,
    regime: str = "gaussian",
    eps_split=None,
    sv_tol: float = 1e-8,
    rho_rtol: float = 1e-6,
) -> CalibrationTable:
    """Build the full threshold table for one signal geometry.

    ``geometry.nuisances`` with more than one set selects the union
    treatment regardless of ``regime='subgaussian'`` vs explicit
    ``regime='union'``; the Gaussian refinement requires a single set.
    """
    d = model.horizon
    eps_t = split_budget(eps, d, eps_split)
    nuisances = geometry.nuisances
    M = len(nuisances)
    if M < 1:
        raise ValueError("geometry carries no nuisance set")
    if regime == "gaussian" and M != 1:
        raise ValueError("Gaussian refinement is defined for a single nuisance set")
    shapes = geometry.shapes
    if not shapes:
        raise ValueError("no shapes")
    R = [max_magnitude_affine(s, geometry.ambient) for s in shapes]
    ideal_target = -0.5 * erfinv(eps) ** 2

    entries: dict = {}
    per_time: dict = {}
    for t in range(1, d + 1):
        abar = model.abar(t)
        theta = covariance_at_time(family, model, t).largest()
        progs = [
            [GammaProgram(abar, theta, shape, geometry.ambient, N)
             for N in nuisances]
            for shape in shapes
        ]

        def sv_max(k: int, rho: float):
            results = [progs[k][m].solve(rho) for m in range(M)]
            sv = max(r.sv for r in results)
            return sv, results

        sv_at_R = []
        for k in range(len(shapes)):
            try:
                sv_at_R.append(sv_max(k, R[k])[0])
            except Exception as e:
                raise SolverFailure(t, shapes[k].label, e) from e

        if regime in ("subgaussian", "union"):
            kappa_t = compute_kappa_t(sv_at_R, eps, eps_t[t - 1], M)
            target = math.log(kappa_t)
            alpha = subgaussian_alpha(kappa_t, eps, M)
            level = kappa_t
        elif regime == "gaussian":
            delta_t = compute_delta_t(sv_at_R, eps, eps_t[t - 1])
            target = -0.5 * delta_t * delta_t
            L = sum(1 for sv in sv_at_R if sv < target)
            alpha = gaussian_alpha(delta_t, eps, eps_t[t - 1], L)
            level = delta_t
        else:
            raise ValueError(f"unknown regime {regime!r}")

        n_active = 0
        for k in range(len(shapes)):
            label = shapes[k].label
            try:
                if sv_at_R[k] < target:
                    rho_tk, results = threshold_rho(
                        lambda rho, k=k: sv_max(k, rho), R[k], target,
                        sv_tol=sv_tol, rho_rtol=rho_rtol)
                    detectors = tuple(
                        build_affine_detector(r, t, label, nuisance_index=m)
                        for m, r in enumerate(results))
                    n_active += 1
                else:
                    rho_tk, detectors = math.inf, ()
                if sv_at_R[k] <= ideal_target:
                    if sv_at_R[k] >= ideal_target - sv_tol:
                        ideal = R[k]
                    else:
                        ideal, _ = threshold_rho(
                            lambda rho, k=k: sv_max(k, rho), R[k], ideal_target,
                            sv_tol=sv_tol, rho_rtol=rho_rtol)
                else:
                    ideal = math.inf
            except SolverFailure:
                raise
            except Exception as e:
                raise SolverFailure(t, label, e) from e
            entries[(t, k + 1)] = CalEntry(
                t=t, k=k + 1, label=label, rho=rho_tk, ideal=ideal,
                sv_at_R=sv_at_R[k], detectors=detectors)
        per_time[t] = PerTime(t=t, level=level, alpha=alpha, n_active=n_active)

    return CalibrationTable(
        eps=eps,
        eps_t=eps_t,
        regime=regime,
        shape_labels=tuple(s.label for s in shapes),
        entries=entries,
        per_time=per_time,
        dims=tuple(model.dims),
    )
