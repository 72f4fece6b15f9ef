"""Affine detectors for one nuisance set against one scaled signal shape.

The saddle-point problem over (h; theta1, theta2, Theta) reduces, when the
covariance family has a largest element, to a least-distance QP between the
images of the nuisance set and the signal set under a whitened sensing map.
The QP minimizers recover the saddle witnesses and the detector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import cvxpy as cp
import numpy as np

from .model import AffineShape, PolyhedralSet
from .numerics import erf_tail, erfinv, sqrtm_psd

__all__ = [
    "AffineDetector",
    "SVResult",
    "GammaProgram",
    "sv_affine",
    "build_affine_detector",
    "gaussian_quadratic_mgf",
    "InfeasibleMagnitude",
    "NoLargestElement",
    "SingularBarrier",
    "erf_tail",
    "erfinv",
]

_CLARABEL_OPTS = dict(tol_gap_abs=1e-11, tol_gap_rel=1e-11, tol_feas=1e-10)


class InfeasibleMagnitude(RuntimeError):
    """The scaled signal set is empty at the requested magnitude."""


class NoLargestElement(TypeError):
    """Covariance family without a dominating element."""


class SingularBarrier(ValueError):
    """Quadratic MGF requested at or beyond the unit spectral bound."""


@dataclass(frozen=True)
class AffineDetector:
    """phi(y) = h . (y - center); log risk bound sv <= 0."""

    h: np.ndarray
    center: np.ndarray
    sv: float
    t: int
    shape_label: str
    rho: float
    nuisance_index: int = 0

    def value(self, y: np.ndarray) -> float:
        # index-ascending accumulation so exported coefficients replay
        # bit-for-bit
        y = np.asarray(y, dtype=float).reshape(-1)
        s = 0.0
        for hi, yi, wi in zip(self.h.tolist(), y.tolist(), self.center.tolist()):
            s += hi * (yi - wi)
        return s

    @property
    def risk(self) -> float:
        return math.exp(self.sv)

    def to_dict(self) -> dict:
        return {
            "type": "affine",
            "h": self.h.tolist(),
            "center": self.center.tolist(),
            "sv": self.sv,
            "t": self.t,
            "shape": self.shape_label,
            "rho": self.rho,
            "nuisance_index": self.nuisance_index,
        }

    @staticmethod
    def from_dict(d: dict) -> "AffineDetector":
        return AffineDetector(
            h=np.asarray(d["h"], dtype=float),
            center=np.asarray(d["center"], dtype=float),
            sv=float(d["sv"]),
            t=int(d["t"]),
            shape_label=str(d["shape"]),
            rho=float(d["rho"]),
            nuisance_index=int(d.get("nuisance_index", 0)),
        )


@dataclass(frozen=True)
class SVResult:
    sv: float
    gamma: float
    rho: float
    x_nuisance: np.ndarray
    x_signal: np.ndarray
    theta1: np.ndarray
    theta2: np.ndarray
    h: np.ndarray
    center: np.ndarray


def _stack_membership(S: PolyhedralSet, x: cp.Variable, scale=None) -> list:
    cons = []
    if S.C.size:
        rhs = S.c if scale is None else scale * S.c
        cons.append(S.C @ x <= rhs)
    if S.E is not None and S.E.size:
        rhs = S.e if scale is None else scale * S.e
        cons.append(S.E @ x == rhs)
    return cons


class GammaProgram:
    """Compiled least-distance program for one (t, shape, nuisance) triple.

    Gamma(rho) = min ||H (v + rho w - z)||_2 over z in N, v in V, w in W,
    v + rho w in X, with H the whitened sensing square root. The magnitude
    enters only through constraint right-hand sides (u = rho w), so one
    compiled problem serves the whole bisection.
    """

    def __init__(
        self,
        abar: np.ndarray,
        theta_bar: np.ndarray,
        shape: AffineShape,
        ambient: PolyhedralSet,
        nuisance: PolyhedralSet,
    ):
        abar = np.asarray(abar, dtype=float)
        theta_bar = np.asarray(theta_bar, dtype=float)
        nu, n = abar.shape
        if nu:
            theta_inv = np.linalg.inv(theta_bar)
            M = abar.T @ theta_inv @ abar
        else:
            theta_inv = np.zeros((0, 0))
            M = np.zeros((n, n))
        self.H = sqrtm_psd(0.5 * (M + M.T)) / (2.0 * math.sqrt(2.0))
        self.abar = abar
        self.theta_inv = theta_inv
        self._z = cp.Variable(n)
        self._v = cp.Variable(n)
        self._u = cp.Variable(n)  # u = rho * w
        self._rho = cp.Parameter(nonneg=True)
        cons = _stack_membership(nuisance, self._z)
        cons += _stack_membership(shape.V, self._v)
        cons += _stack_membership(shape.W, self._u, scale=self._rho)
        cons += _stack_membership(ambient, self._v + self._u)
        obj = cp.Minimize(cp.sum_squares(self.H @ (self._v + self._u - self._z)))
        self._problem = cp.Problem(obj, cons)
        self.shape_label = shape.label

    def solve(self, rho: float) -> SVResult:
        if rho <= 0:
            raise ValueError("magnitude must be positive")
        self._rho.value = rho
        self._problem.solve(solver=cp.CLARABEL, **_CLARABEL_OPTS)
        status = self._problem.status
        if status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
            raise InfeasibleMagnitude(
                f"shape {self.shape_label!r} empty at rho={rho:.6g}")
        if self._problem.value is None:
            raise RuntimeError(f"QP failed with status {status}")
        gamma = math.sqrt(max(self._problem.value, 0.0))
        z = np.asarray(self._z.value, dtype=float).reshape(-1)
        x_sig = np.asarray((self._v.value + self._u.value), dtype=float).reshape(-1)
        theta1 = self.abar @ z
        theta2 = self.abar @ x_sig
        h = 0.5 * self.theta_inv @ (theta1 - theta2)
        center = 0.5 * (theta1 + theta2)
        return SVResult(
            sv=-gamma * gamma,
            gamma=gamma,
            rho=rho,
            x_nuisance=z,
            x_signal=x_sig,
            theta1=theta1,
            theta2=theta2,
            h=h,
            center=center,
        )


def _largest(family) -> np.ndarray:
    largest = getattr(family, "largest", None)
    if largest is None:
        raise NoLargestElement(
            f"{type(family).__name__} exposes no largest covariance")
    return np.asarray(largest(), dtype=float)


def sv_affine(
    abar: np.ndarray,
    family,
    shape: AffineShape,
    ambient: PolyhedralSet,
    nuisance: PolyhedralSet,
    rho: float,
) -> SVResult:
    """One-shot SV evaluation; calibration holds a GammaProgram instead."""
    prog = GammaProgram(abar, _largest(family), shape, ambient, nuisance)
    return prog.solve(rho)


def build_affine_detector(
    result: SVResult, t: int, shape_label: str, nuisance_index: int = 0,
) -> AffineDetector:
    return AffineDetector(
        h=result.h,
        center=result.center,
        sv=result.sv,
        t=t,
        shape_label=shape_label,
        rho=result.rho,
        nuisance_index=nuisance_index,
    )


def gaussian_quadratic_mgf(m: np.ndarray, S: np.ndarray, nu: np.ndarray) -> float:
    """ln E exp(m.x + x.S.x/2) for x ~ N(nu, I), valid while ||S|| < 1."""
    m = np.asarray(m, dtype=float).reshape(-1)
    nu = np.asarray(nu, dtype=float).reshape(-1)
    S = np.atleast_2d(np.asarray(S, dtype=float))
    S = 0.5 * (S + S.T)
    evals = np.linalg.eigvalsh(S)
    if evals.size and float(np.max(np.abs(evals))) >= 1.0 - 1e-10:
        raise SingularBarrier("spectral norm of S must stay below 1")
    n = m.size
    I = np.eye(n)
    logdet = -0.5 * float(np.linalg.slogdet(I - S)[1])
    lin = float(m @ nu) + 0.5 * float(nu @ S @ nu)
    g = m + S @ nu
    quad = 0.5 * float(g @ np.linalg.solve(I - S, g))
    return logdet + lin + quad
