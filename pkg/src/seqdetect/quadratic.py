"""Detectors quadratic in the observation.

Signal and nuisance sets are encoded as constraint rows on the lifted
matrix Z = [x;1][x;1]^T, and each side of the test contributes a moment
bound Phi built from a log-det barrier, covariance slack terms, and the
support function of its lifted set. The saddle value SV is computed by a
single conic program in (h, H) and the support-function multipliers; the
inner maximum over covariances from a scalar segment is handled by
enumerating the segment ends.

Fast paths: a closed-form scalar reduction when one observed direction
carries the whole signal component, and a Kronecker reduction when the
sensing map is the identity on a pixel field with exchangeable
coordinates.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import cvxpy as cp
import numpy as np
from scipy.optimize import minimize_scalar

from .affine import InfeasibleMagnitude
from .model import (
    CovarianceFamily,
    QuadConstraint,
    ScalarSegment,
    Singleton,
)
from .numerics import bisect_monotone, sqrtm_psd

__all__ = [
    "LiftedSet",
    "LiftContext",
    "QuadraticDetector",
    "SVQuadratic",
    "KronReduced",
    "support_function",
    "phi_gaussian",
    "phi_subgaussian",
    "subgaussian_phi_best",
    "sv_quadratic",
    "sv_rank_one",
    "rank_one_radius",
    "kronecker_reduce",
    "sv_kronecker",
    "calibrate_quadratic",
    "UnboundedSupport",
    "BarrierViolation",
    "UnsupportedCovariance",
    "StructureMismatch",
    "GAMMA_DEFAULT",
]

log = logging.getLogger(__name__)

GAMMA_DEFAULT = 0.999

_CLARABEL_OPTS = dict(tol_gap_abs=1e-11, tol_gap_rel=1e-11, tol_feas=1e-10)
# fallback rung for programs whose conditioning stops short of the rung
# above; still tight enough to keep threshold bisection monotone
_CLARABEL_MID = dict(tol_gap_abs=1e-9, tol_gap_rel=1e-9, tol_feas=1e-9)


class UnboundedSupport(RuntimeError):
    """The lifted set has unbounded support in the requested direction."""


class BarrierViolation(ValueError):
    """H reaches or exceeds the log-det barrier of the largest covariance."""


class UnsupportedCovariance(TypeError):
    """Covariance family outside the scalar-segment/singleton scope."""


class StructureMismatch(ValueError):
    """Problem data does not carry the structure a reduction needs."""


# ---------------------------------------------------------------------------
# lifted sets


@dataclass(frozen=True)
class LiftedSet:
    """{Z >= 0 : Z[n,n] = 1, Tr(Q_j Z) <= q_j (or = q_j)} over (n+1)x(n+1)."""

    n: int
    rows: tuple[QuadConstraint, ...]

    @property
    def dim(self) -> int:
        return self.n + 1

    def scaled(self, rho: float) -> "LiftedSet":
        """Apply the magnitude: type A rows scale their rhs by rho,
        type B rows by rho^2, other rows are left alone."""
        out = []
        for r in self.rows:
            if r.kind == "A":
                q = r.q * rho
            elif r.kind == "B":
                q = r.q * rho * rho
            else:
                q = r.q
            out.append(QuadConstraint(r.Q, q, r.kind, r.equality))
        return LiftedSet(self.n, tuple(out))


def lift_rows(n: int, rows) -> LiftedSet:
    rows = tuple(rows)
    for r in rows:
        if r.Q.shape != (n + 1, n + 1):
            raise ValueError("constraint row size does not match the lift")
    return LiftedSet(n, rows)


def _pinned_coords(lifted: LiftedSet) -> set[int]:
    """Coordinates that rows force to zero.

    A non-equality row with diagonal Q >= 0, zero corner entry, and
    rhs <= 0 pins every coordinate its positive entries touch: the trace
    over those coordinates is nonnegative, so it must vanish, and under
    PSD the whole rows and columns vanish with it. A strictly negative
    rhs on such a row makes the set empty.
    """
    n = lifted.n
    pinned: set[int] = set()
    for r in lifted.rows:
        if r.equality or r.q > 0.0:
            continue
        d = np.diag(r.Q)
        if np.any(r.Q != np.diag(d)) or d[n] != 0.0:
            continue
        if np.any(d < 0.0) or not np.any(d > 0.0):
            continue
        if r.q < 0.0:
            raise InfeasibleMagnitude("lifted set is empty")
        pinned.update(int(i) for i in np.nonzero(d[:n] > 0.0)[0])
    return pinned


def support_function(Y: np.ndarray, lifted: LiftedSet, *, gap_rtol: float = 1e-7):
    """max Tr(Y Z) over the lifted set, with a dual certificate.

    Returns (value, Z_star, dual_value). Raises UnboundedSupport when the
    maximum is infinite and InfeasibleMagnitude when the set is empty.
    Coordinates pinned to zero by the rows are eliminated first; this
    keeps the conic program small and well scaled.
    """
    n = lifted.n
    Y = 0.5 * (Y + Y.T)
    keep = sorted(set(range(n)) - _pinned_coords(lifted)) + [n]
    if len(keep) == 1:
        z_full = np.zeros((n + 1, n + 1))
        z_full[n, n] = 1.0
        return float(Y[n, n]), z_full, float(Y[n, n])
    ix = np.ix_(keep, keep)
    m = len(keep) - 1
    rows = []
    for r in lifted.rows:
        Qr = r.Q[ix]
        if not Qr.any():
            if (r.q < 0.0) or (r.equality and r.q != 0.0):
                raise InfeasibleMagnitude("lifted set is empty")
            continue
        rows.append(QuadConstraint(Qr, r.q, r.kind, r.equality))
    Z = cp.Variable((m + 1, m + 1), PSD=True)
    cons = [Z[m, m] == 1]
    for r in rows:
        expr = cp.sum(cp.multiply(r.Q, Z))
        cons.append(expr == r.q if r.equality else expr <= r.q)
    prob = cp.Problem(cp.Maximize(cp.sum(cp.multiply(Y[ix], Z))), cons)
    status = None
    for opts in (_CLARABEL_OPTS, {}):
        try:
            prob.solve(solver=cp.CLARABEL, **opts)
        except cp.error.SolverError:
            continue
        status = prob.status
        if status == cp.OPTIMAL:
            break
    if status in (cp.UNBOUNDED, cp.UNBOUNDED_INACCURATE):
        raise UnboundedSupport("lifted set is unbounded along the objective")
    if status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        raise InfeasibleMagnitude("lifted set is empty")
    if Z.value is None:
        raise RuntimeError(f"support solve failed with status {status}")
    value = float(prob.value)
    dual = float(cons[0].dual_value)
    for r, c in zip(rows, cons[1:]):
        dual += float(c.dual_value) * r.q
    gap = abs(dual - value)
    if gap > gap_rtol * (1.0 + abs(value)):
        raise RuntimeError(
            f"support duality gap {gap:.3e} exceeds {gap_rtol:.1e}*(1+|v|)")
    z_full = np.zeros((n + 1, n + 1))
    z_full[ix] = np.asarray(Z.value)
    return value, z_full, dual


# ---------------------------------------------------------------------------
# moment bounds


@dataclass(frozen=True)
class LiftContext:
    """One side of the test: sensing map, dominating covariance, slack
    radius delta, and the lifted constraint set."""

    abar: np.ndarray
    theta_star: np.ndarray
    delta: float
    lifted: LiftedSet

    @property
    def nu(self) -> int:
        return self.abar.shape[0]

    def a_aug(self) -> np.ndarray:
        nu, n = self.abar.shape
        out = np.zeros((nu, n + 1))
        out[:, :n] = self.abar
        return out

    def b_mat(self) -> np.ndarray:
        nu, n = self.abar.shape
        out = np.zeros((nu + 1, n + 1))
        out[:nu, :n] = self.abar
        out[nu, n] = 1.0
        return out


def context_for(model, family: CovarianceFamily, t: int, lifted: LiftedSet) -> LiftContext:
    from .model import covariance_at_time

    fam_t = covariance_at_time(family, model, t)
    return LiftContext(model.abar(t), fam_t.largest(), fam_t.delta(), lifted)


def _barrier_parts(theta_star, H):
    ts = sqrtm_psd(theta_star)
    S = ts @ H @ ts
    S = 0.5 * (S + S.T)
    w = np.linalg.eigvalsh(S)
    if w.max(initial=0.0) >= 1.0 - 1e-12:
        raise BarrierViolation("H reaches the log-det barrier")
    return ts, S, w


def phi_gaussian(ctx: LiftContext, h, H, theta=None, *, grad: bool = False):
    """Moment bound of one side at (h, H) and a covariance theta from the
    family (theta omitted: evaluated at the dominating element).

    With grad=True also returns the subgradient (g_h, g_H); the support
    term contributes through its maximizer, the spectral-norm term
    through a top eigenvector.
    """
    h = np.asarray(h, float).reshape(-1)
    H = 0.5 * (np.asarray(H, float) + np.asarray(H, float).T)
    nu = ctx.nu
    theta_star = ctx.theta_star
    ts, S, w = _barrier_parts(theta_star, H)
    val = -0.5 * float(np.linalg.slogdet(np.eye(nu) - S)[1])

    tinv = np.linalg.inv(theta_star)
    K = np.linalg.inv(tinv - H)
    J = np.hstack([H, h[:, None]])
    M = np.zeros((nu + 1, nu + 1))
    M[:nu, :nu] = H
    M[:nu, nu] = h
    M[nu, :nu] = h
    M += J.T @ K @ J
    B = ctx.b_mat()
    W = B.T @ M @ B
    sval, z_star, _ = support_function(W, ctx.lifted)
    val += 0.5 * sval

    g_theta_trace = 0.5 * H
    if theta is not None:
        val += 0.5 * float(np.sum((theta - theta_star) * H))
    dval = 0.0
    delta = ctx.delta
    snorm = float(np.max(np.abs(w))) if w.size else 0.0
    if delta > 0.0:
        dval = delta * (2.0 + delta) * float(np.sum(S * S)) / (2.0 * (1.0 - snorm))
        val += dval

    if not grad:
        return val

    # log-det part
    g_H = 0.5 * ts @ np.linalg.inv(np.eye(nu) - S) @ ts
    # trace part
    if theta is not None:
        g_H = g_H + 0.5 * (theta - theta_star)
    # slack part, through S = ts H ts
    if delta > 0.0:
        wfull, V = np.linalg.eigh(S)
        i = int(np.argmax(np.abs(wfull)))
        u = V[:, i]
        sgn = 1.0 if wfull[i] >= 0 else -1.0
        c = delta * (2.0 + delta)
        dS = c * S / (1.0 - snorm) \
            + c * float(np.sum(S * S)) * sgn * np.outer(u, u) / (2.0 * (1.0 - snorm) ** 2)
        g_H = g_H + ts @ dS @ ts
    # support part, through the maximizer
    P = B @ z_star @ B.T
    P11 = P[:nu, :nu]
    p12 = P[:nu, nu]
    KJP = K @ J @ P  # nu x (nu+1)
    g_H = g_H + 0.5 * (P11 + KJP[:, :nu] + KJP[:, :nu].T + KJP @ J.T @ K)
    g_h = p12 + KJP[:, nu]
    g_H = 0.5 * (g_H + g_H.T)
    return val, g_h, g_H


def phi_subgaussian(ctx: LiftContext, h, H, theta=None, *,
                    gamma: float = GAMMA_DEFAULT, gamma_plus: float | None = None):
    """Sub-Gaussian moment bound at (h, H): minimizes over the auxiliary
    slack matrix G with H <= G, 0 <= G <= gamma_plus * theta_star^{-1}.

    theta=None evaluates the covariance-free bound; a concrete theta adds
    the trace and norm slack terms in G.
    """
    if gamma_plus is None:
        gamma_plus = 0.5 * (gamma + 1.0)
    h = np.asarray(h, float).reshape(-1)
    H = 0.5 * (np.asarray(H, float) + np.asarray(H, float).T)
    nu = ctx.nu
    theta_star = ctx.theta_star
    ts = sqrtm_psd(theta_star)
    tinv = np.linalg.inv(theta_star)
    _barrier_parts(theta_star, H)

    G = cp.Variable((nu, nu), symmetric=True)
    cons = [G >> 0, gamma_plus * tinv - G >> 0, G - H >> 0]
    SG = ts @ G @ ts
    obj = -0.5 * cp.log_det(np.eye(nu) - SG)

    # support of the lifted set, dualized
    B = ctx.b_mat()
    M0 = np.zeros((nu + 1, nu + 1))
    M0[:nu, :nu] = H
    M0[:nu, nu] = h
    M0[nu, :nu] = h
    J = np.hstack([H, h[:, None]])
    JB = J @ B
    n1 = ctx.lifted.dim
    corner = np.zeros((n1, n1))
    corner[n1 - 1, n1 - 1] = 1.0
    mu = cp.Variable()
    D = mu * corner
    sup_val = mu
    for r in ctx.lifted.rows:
        lam = cp.Variable() if r.equality else cp.Variable(nonneg=True)
        D = D + lam * r.Q
        sup_val = sup_val + lam * r.q
    cons.append(cp.bmat([
        [D - B.T @ M0 @ B, JB.T],
        [JB, tinv - G],
    ]) >> 0)
    obj = obj + 0.5 * sup_val

    if theta is not None:
        obj = obj + 0.5 * cp.trace((theta - theta_star) @ G)
        delta = ctx.delta
        if delta > 0.0:
            u = cp.Variable()
            cons += [cp.bmat([[u * np.eye(nu), SG], [SG, u * np.eye(nu)]]) >> 0,
                     u <= gamma_plus]
            obj = obj + delta * (2.0 + delta) * \
                cp.quad_over_lin(cp.vec(SG, order="F"), 2.0 * (1.0 - u))

    prob = cp.Problem(cp.Minimize(obj), cons)
    try:
        prob.solve(solver=cp.CLARABEL, **_CLARABEL_OPTS)
    except cp.error.SolverError:
        prob.solve(solver=cp.CLARABEL)
    if prob.value is None or prob.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        raise RuntimeError(f"sub-Gaussian bound solve failed: {prob.status}")
    return float(prob.value)


def subgaussian_phi_best(ctx: LiftContext, h, H, family: CovarianceFamily, *,
                         gamma: float = GAMMA_DEFAULT):
    """Tightest of the admissible sub-Gaussian bounds for one side: the
    covariance-free bound, or the slack bound maximized over the segment
    ends. The second is skipped when the family is a singleton."""
    free = phi_subgaussian(ctx, h, H, theta=None, gamma=gamma)
    if isinstance(family, Singleton) or family.delta() == 0.0:
        return min(free, phi_subgaussian(ctx, h, H, theta=family.largest(),
                                         gamma=gamma))
    slack = max(phi_subgaussian(ctx, h, H, theta=th, gamma=gamma)
                for th in family.extremes())
    return min(free, slack)


# ---------------------------------------------------------------------------
# detectors


@dataclass(frozen=True)
class QuadraticDetector:
    """phi(y) = y'Hy/2 + h.y + shift; log risk bound sv <= 0."""

    h: np.ndarray
    H: np.ndarray
    shift: float
    sv: float
    t: int
    shape_label: str
    rho: float
    nuisance_index: int = 0

    def value(self, y) -> float:
        # index-ascending accumulation so exported coefficients replay
        # bit-for-bit
        yl = np.asarray(y, float).reshape(-1).tolist()
        s = self.shift
        for hi, yi in zip(self.h.tolist(), yl):
            s += hi * yi
        for yi, row in zip(yl, self.H.tolist()):
            q = 0.0
            for hij, yj in zip(row, yl):
                q += hij * yj
            s += 0.5 * yi * q
        return s

    @property
    def risk(self) -> float:
        return math.exp(self.sv)

    def to_dict(self) -> dict:
        return {
            "type": "quadratic",
            "h": self.h.tolist(),
            "H": self.H.tolist(),
            "shift": self.shift,
            "sv": self.sv,
            "t": self.t,
            "shape": self.shape_label,
            "rho": self.rho,
            "nuisance_index": self.nuisance_index,
        }

    @staticmethod
    def from_dict(d: dict) -> "QuadraticDetector":
        return QuadraticDetector(
            h=np.asarray(d["h"], dtype=float),
            H=np.asarray(d["H"], dtype=float),
            shift=float(d["shift"]),
            sv=float(d["sv"]),
            t=int(d["t"]),
            shape_label=str(d["shape"]),
            rho=float(d["rho"]),
            nuisance_index=int(d.get("nuisance_index", 0)),
        )


@dataclass(frozen=True)
class SVQuadratic:
    sv: float
    objective: float
    h: np.ndarray
    H: np.ndarray
    shift: float
    phi_nuisance: float
    phi_signal: float
    theta_nuisance: np.ndarray
    theta_signal: np.ndarray


def build_quadratic_detector(res: SVQuadratic, t: int, shape_label: str,
                             rho: float, nuisance_index: int = 0) -> QuadraticDetector:
    return QuadraticDetector(h=res.h, H=res.H, shift=res.shift, sv=res.sv,
                             t=t, shape_label=shape_label, rho=rho,
                             nuisance_index=nuisance_index)


# ---------------------------------------------------------------------------
# saddle solve


def _check_family(family: CovarianceFamily):
    if not isinstance(family, (Singleton, ScalarSegment)):
        raise UnsupportedCovariance(
            "saddle solve needs a singleton or a scalar covariance segment")


def _direct_diagonal(abar, theta_star, rows) -> bool:
    """Direct observations, diagonal dominating covariance, and rows that
    never touch off-diagonal or cross entries: the saddle then has h = 0
    and diagonal H, and the solve is restricted accordingly."""
    nu, n = abar.shape
    if nu != n or not np.allclose(abar, np.eye(n)):
        return False
    if not np.allclose(theta_star, np.diag(np.diag(theta_star))):
        return False
    for r in rows:
        nw = r.Q[:n, :n]
        if not np.allclose(nw, np.diag(np.diag(nw))):
            return False
        if not np.allclose(r.Q[:n, n], 0.0):
            return False
    return True


def _dual_pieces(lifted: LiftedSet):
    n1 = lifted.dim
    corner = np.zeros((n1, n1))
    corner[n1 - 1, n1 - 1] = 1.0
    mu = cp.Variable()
    D = mu * corner
    sup_val = mu
    for r in lifted.rows:
        lam = cp.Variable() if r.equality else cp.Variable(nonneg=True)
        D = D + lam * r.Q
        sup_val = sup_val + lam * r.q
    return D, sup_val


def sv_quadratic(abar, family: CovarianceFamily, nuisance: LiftedSet,
                 signal: LiftedSet, *, regime: str = "gaussian",
                 variant: str = "saddle", gamma: float = GAMMA_DEFAULT,
                 restrict: bool | None = None, _depth: int = 0) -> SVQuadratic:
    """Saddle value and detector for nuisance vs signal lifted sets.

    regime 'gaussian' uses the exact Gaussian moment bound; 'subgaussian'
    uses the slack-matrix bound, with variant 'saddle' (covariance terms
    on both sides) or 'conv' (covariance-free bound on both sides).
    """
    _check_family(family)
    abar = np.asarray(abar, float)
    nu, n = abar.shape
    if nuisance.n != n or signal.n != n:
        raise ValueError("lifted sets must live over the sensing input space")
    theta_star = family.largest()
    delta = family.delta()
    extremes = family.extremes()
    ts = sqrtm_psd(theta_star)
    tinv = np.linalg.inv(theta_star)
    ctx_n = LiftContext(abar, theta_star, delta, nuisance)
    ctx_s = LiftContext(abar, theta_star, delta, signal)
    B = ctx_n.b_mat()

    if restrict is None:
        restrict = _direct_diagonal(abar, theta_star,
                                    tuple(nuisance.rows) + tuple(signal.rows))

    H = cp.Variable((nu, nu), symmetric=True)
    hcol = cp.Variable((nu, 1))
    cons = [gamma * tinv - H >> 0, gamma * tinv + H >> 0]
    if restrict:
        cons += [hcol == 0, H == cp.multiply(np.eye(nu), H)]

    subg = regime == "subgaussian"
    if regime not in ("gaussian", "subgaussian"):
        raise ValueError(f"unknown regime {regime!r}")
    if subg and variant not in ("saddle", "conv"):
        raise ValueError(f"unknown sub-Gaussian variant {variant!r}")
    with_cov_terms = (not subg) or variant == "saddle"
    gamma_plus = 0.5 * (gamma + 1.0)

    def side(sign: float, lifted: LiftedSet):
        As = sign * H
        hs = sign * hcol
        D, sup_val = _dual_pieces(lifted)
        Hh = cp.bmat([[As, hs], [hs.T, np.zeros((1, 1))]])
        J = cp.hstack([As, hs])
        if subg:
            G = cp.Variable((nu, nu), symmetric=True)
            side_cons = [G >> 0, gamma_plus * tinv - G >> 0, G - As >> 0]
            curv = G
        else:
            side_cons = []
            curv = As
        SC = ts @ curv @ ts
        phi = -0.5 * cp.log_det(np.eye(nu) - SC) + 0.5 * sup_val
        side_cons.append(cp.bmat([
            [D - B.T @ Hh @ B, (J @ B).T],
            [J @ B, tinv - curv],
        ]) >> 0)
        if with_cov_terms and len(extremes) > 1:
            tau = cp.Variable()
            for th in extremes:
                side_cons.append(tau >= 0.5 * cp.trace((th - theta_star) @ curv))
            phi = phi + tau
        if with_cov_terms and delta > 0.0:
            u = cp.Variable()
            side_cons += [
                cp.bmat([[u * np.eye(nu), SC], [SC, u * np.eye(nu)]]) >> 0,
                u <= (gamma_plus if subg else gamma),
            ]
            phi = phi + delta * (2.0 + delta) * \
                cp.quad_over_lin(cp.vec(SC, order="F"), 2.0 * (1.0 - u))
        return phi, side_cons

    phi1, c1 = side(-1.0, nuisance)
    phi2, c2 = side(+1.0, signal)
    prob = cp.Problem(cp.Minimize(0.5 * (phi1 + phi2)), cons + c1 + c2)

    status = None
    for attempt, opts in enumerate(( _CLARABEL_OPTS, _CLARABEL_MID, {}, None )):
        if opts is None:
            if _depth >= 2:
                raise RuntimeError(f"saddle solve failed with status {status}")
            # last resort: nudge homogeneous inequality rows off zero
            log.warning("saddle solve retries with 1e-9 rhs perturbation")
            nuis_p = LiftedSet(nuisance.n, tuple(
                QuadConstraint(r.Q, r.q + (0.0 if r.equality else 1e-9),
                               r.kind, r.equality) for r in nuisance.rows))
            sig_p = LiftedSet(signal.n, tuple(
                QuadConstraint(r.Q, r.q + (0.0 if r.equality else 1e-9),
                               r.kind, r.equality) for r in signal.rows))
            return sv_quadratic(abar, family, nuis_p, sig_p, regime=regime,
                                variant=variant, gamma=gamma, restrict=restrict,
                                _depth=_depth + 1)
        try:
            prob.solve(solver=cp.CLARABEL, **opts)
        except cp.error.SolverError:
            status = "solver_error"
            continue
        status = prob.status
        if status == cp.OPTIMAL:
            break
        if status in (cp.UNBOUNDED, cp.UNBOUNDED_INACCURATE):
            raise InfeasibleMagnitude("signal set is empty at this magnitude")
        if status == cp.OPTIMAL_INACCURATE and attempt == 2:
            break
    else:
        raise RuntimeError(f"saddle solve failed with status {status}")

    h_opt = np.ravel(hcol.value)
    H_opt = 0.5 * (H.value + H.value.T)
    if restrict:
        h_opt = np.zeros(nu)
        H_opt = np.diag(np.diag(H_opt))
    objective = float(prob.value)

    # certify at the optimizer with primal support values
    if subg:
        if variant == "conv":
            phi_n = phi_subgaussian(ctx_n, -h_opt, -H_opt, theta=None, gamma=gamma)
            phi_s = phi_subgaussian(ctx_s, h_opt, H_opt, theta=None, gamma=gamma)
            th_n = th_s = theta_star
        else:
            vals_n = [(phi_subgaussian(ctx_n, -h_opt, -H_opt, theta=th,
                                       gamma=gamma), th) for th in extremes]
            vals_s = [(phi_subgaussian(ctx_s, h_opt, H_opt, theta=th,
                                       gamma=gamma), th) for th in extremes]
            phi_n, th_n = max(vals_n, key=lambda p: p[0])
            phi_s, th_s = max(vals_s, key=lambda p: p[0])
    else:
        vals_n = [(phi_gaussian(ctx_n, -h_opt, -H_opt, th), th) for th in extremes]
        vals_s = [(phi_gaussian(ctx_s, h_opt, H_opt, th), th) for th in extremes]
        phi_n, th_n = max(vals_n, key=lambda p: p[0])
        phi_s, th_s = max(vals_s, key=lambda p: p[0])

    sv = 0.5 * (phi_n + phi_s)
    shift = 0.5 * (phi_n - phi_s)
    return SVQuadratic(sv=sv, objective=objective, h=h_opt, H=H_opt,
                       shift=shift, phi_nuisance=phi_n, phi_signal=phi_s,
                       theta_nuisance=th_n, theta_signal=th_s)


# ---------------------------------------------------------------------------
# rank-one fast path

# One observed direction u carries the whole guaranteed signal component
# r = rho * sigma; tail directions are free and take H = 0. The saddle
# collapses to a scalar minimization over the curvature on u.


def _rank_one_objective(r2: float, x: float) -> float:
    return 0.25 * (-math.log1p(-x * x) + r2 * x / (1.0 - x))


def sv_rank_one(r: float, *, gamma: float = GAMMA_DEFAULT):
    """Scalar saddle value at guaranteed component r; returns (sv, H1)
    with H1 the optimal curvature along the signal direction."""
    if r <= 0.0:
        return 0.0, 0.0
    r2 = r * r
    res = minimize_scalar(lambda x: _rank_one_objective(r2, x),
                          bounds=(-gamma, 0.0), method="bounded",
                          options={"xatol": 1e-13})
    x = float(res.x)
    v = _rank_one_objective(r2, x)
    if v >= 0.0:
        return 0.0, 0.0
    return float(v), x


def rank_one_radius(target: float, *, gamma: float = GAMMA_DEFAULT) -> float:
    """Guaranteed component r with sv_rank_one(r) = target < 0."""
    if target >= 0.0:
        raise ValueError("target must be negative")
    hi = 1.0
    while sv_rank_one(hi, gamma=gamma)[0] > target:
        hi *= 2.0
        if hi > 2.0 ** 60:
            raise RuntimeError("no radius reaches the target value")
    return bisect_monotone(lambda r: sv_rank_one(r, gamma=gamma)[0], target,
                           0.0, hi, f_tol=1e-10, x_rtol=1e-12)


def _rank_one_detector(u: np.ndarray, r: float, sv: float, H1: float,
                       t: int, label: str, rho: float) -> QuadraticDetector:
    nu = u.shape[0]
    H = H1 * np.outer(u, u)
    phi_n = -0.5 * math.log1p(H1)
    phi_s = -0.5 * math.log1p(-H1) + 0.5 * r * r * H1 / (1.0 - H1)
    shift = 0.5 * (phi_n - phi_s)
    return QuadraticDetector(h=np.zeros(nu), H=H, shift=shift, sv=sv,
                             t=t, shape_label=label, rho=rho)


# ---------------------------------------------------------------------------
# Kronecker reduction


@dataclass(frozen=True)
class KronReduced:
    """t x t reduction of an exchangeable pixel-field side: W replaces the
    lifted NW block by its per-block traces over the pixel index."""

    t: int
    nu: int
    j_base: np.ndarray
    lo: float
    rows: tuple[tuple[np.ndarray, float, str], ...]  # (diag, rhs, kind)

    def scaled(self, rho: float) -> "KronReduced":
        out = []
        for diag, rhs, kind in self.rows:
            if kind == "B":
                rhs = rhs * rho * rho
            elif kind == "A":
                raise StructureMismatch("reduced sets carry no linear rows")
            out.append((diag, rhs, kind))
        return KronReduced(self.t, self.nu, self.j_base, self.lo, tuple(out))


def _kron_diag_factor(nw: np.ndarray, t: int, nu: int) -> np.ndarray:
    """nw must equal kron(diag(d), I_nu); returns d."""
    d = np.empty(t)
    for i in range(t):
        blk = nw[i * nu:(i + 1) * nu, i * nu:(i + 1) * nu]
        d[i] = blk[0, 0]
        if not np.allclose(blk, d[i] * np.eye(nu), atol=1e-12):
            raise StructureMismatch("row block is not a scalar multiple of I")
    mask = np.kron(np.eye(t), np.ones((nu, nu)))
    if not np.allclose(nw * (1 - mask), 0.0, atol=1e-12):
        raise StructureMismatch("row couples distinct time blocks")
    off = nw * mask - np.kron(np.diag(d), np.eye(nu))
    if not np.allclose(off, 0.0, atol=1e-12):
        raise StructureMismatch("row block has off-diagonal pixel coupling")
    return d


def kronecker_reduce(abar: np.ndarray, family: ScalarSegment,
                     lifted: LiftedSet, nu: int) -> KronReduced:
    """Reduce one side to the pixel-free t x t problem.

    Needs identity sensing, a scalar segment whose base is J (x) I_nu,
    and rows whose NW blocks are kron(diagonal, I_nu) with no linear
    part. Ambient per-entry rows reduce to per-block trace rows.
    """
    abar = np.asarray(abar, float)
    m, n = abar.shape
    if m != n or not np.allclose(abar, np.eye(n)):
        raise StructureMismatch("sensing map must be the identity")
    if n % nu != 0:
        raise StructureMismatch("observed dimension is not a pixel multiple")
    t = n // nu
    if not isinstance(family, ScalarSegment):
        raise UnsupportedCovariance("reduction needs a scalar segment family")
    base = family.base
    j_small = np.empty((t, t))
    for i in range(t):
        for j in range(t):
            blk = base[i * nu:(i + 1) * nu, j * nu:(j + 1) * nu]
            j_small[i, j] = blk[0, 0]
            if not np.allclose(blk, j_small[i, j] * np.eye(nu), atol=1e-12):
                raise StructureMismatch("covariance blocks are not scalar")
    rows = []
    for r in lifted.rows:
        if r.equality:
            raise StructureMismatch("reduction handles inequality rows only")
        if not np.allclose(r.Q[:n, n], 0.0, atol=1e-12) or abs(r.Q[n, n]) > 1e-12:
            raise StructureMismatch("rows must not touch the corner")
        d = _kron_diag_factor(r.Q[:n, :n], t, nu)
        rows.append((d, r.q / nu, r.kind))
    return KronReduced(t=t, nu=nu, j_base=j_small, lo=family.lo,
                       rows=tuple(rows))


def _support_reduced(m: np.ndarray, red: KronReduced, *, gap_rtol=1e-7):
    t = red.t
    W = cp.Variable((t, t), PSD=True)
    cons = []
    for diag, rhs, _ in red.rows:
        cons.append(cp.sum(cp.multiply(np.diag(diag), W)) <= rhs)
    prob = cp.Problem(cp.Maximize(cp.sum(cp.multiply(0.5 * (m + m.T), W))), cons)
    prob.solve(solver=cp.CLARABEL, **_CLARABEL_OPTS)
    if prob.status in (cp.UNBOUNDED, cp.UNBOUNDED_INACCURATE):
        raise UnboundedSupport("reduced set is unbounded along the objective")
    if prob.status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        raise InfeasibleMagnitude("reduced set is empty")
    return float(prob.value), np.asarray(W.value)


def _phi_kron(red: KronReduced, G: np.ndarray, theta_factor: float,
              *, with_support: bool) -> float:
    """nu-scaled moment bound of the reduced problem at curvature G and
    covariance theta_factor * j_base."""
    t, nu = red.t, red.nu
    jb = red.j_base
    ts = sqrtm_psd(jb)
    S = ts @ G @ ts
    w = np.linalg.eigvalsh(0.5 * (S + S.T))
    if w.max(initial=0.0) >= 1.0 - 1e-12:
        raise BarrierViolation("G reaches the log-det barrier")
    val = -0.5 * nu * float(np.linalg.slogdet(np.eye(t) - S)[1])
    val += 0.5 * nu * (theta_factor - 1.0) * float(np.sum(jb * G))
    delta = 1.0 - math.sqrt(red.lo)
    if delta > 0.0:
        snorm = float(np.max(np.abs(w)))
        val += delta * (2.0 + delta) * nu * float(np.sum(S * S)) / (2.0 * (1.0 - snorm))
    if with_support:
        jinv = np.linalg.inv(jb)
        m = G + G @ np.linalg.inv(jinv - G) @ G
        sval, _ = _support_reduced(m, red)
        val += 0.5 * nu * sval
    return val


def _reduced_is_origin(red: KronReduced) -> bool:
    pinned = np.zeros(red.t, dtype=bool)
    for diag, rhs, _ in red.rows:
        if rhs <= 0.0 and np.all(diag >= 0.0):
            pinned |= diag > 0.0
    return bool(pinned.all())


def sv_kronecker(nuis: KronReduced, sig: KronReduced, *,
                 gamma: float = GAMMA_DEFAULT) -> SVQuadratic:
    """Saddle solve of the reduced problem; h = 0 by the sign symmetry of
    the exchangeable field, so only the t x t curvature G is free."""
    if not _reduced_is_origin(nuis):
        raise StructureMismatch("reduced solve expects the zero nuisance")
    t, nu = sig.t, sig.nu
    jb = sig.j_base
    ts = sqrtm_psd(jb)
    jinv = np.linalg.inv(jb)
    delta = 1.0 - math.sqrt(sig.lo)
    extremes = (sig.lo, 1.0) if sig.lo < 1.0 else (1.0,)

    G = cp.Variable((t, t), symmetric=True)
    cons = [gamma * jinv - G >> 0, gamma * jinv + G >> 0]

    def side(sign: float, red: KronReduced | None):
        Gs = sign * G
        SC = ts @ Gs @ ts
        phi = -0.5 * nu * cp.log_det(np.eye(t) - SC)
        side_cons = []
        if red is not None:
            lam_vals = []
            D = np.zeros((t, t))
            for diag, rhs, _ in red.rows:
                lam = cp.Variable(nonneg=True)
                D = D + lam * np.diag(diag)
                lam_vals.append(lam * rhs)
            side_cons.append(cp.bmat([[D - Gs, Gs], [Gs, jinv - Gs]]) >> 0)
            phi = phi + 0.5 * nu * cp.sum(cp.hstack(lam_vals))
        if len(extremes) > 1:
            tau = cp.Variable()
            for c in extremes:
                side_cons.append(tau >= 0.5 * nu * (c - 1.0) * cp.trace(jb @ Gs))
            phi = phi + tau
        if delta > 0.0:
            u = cp.Variable()
            side_cons += [
                cp.bmat([[u * np.eye(t), SC], [SC, u * np.eye(t)]]) >> 0,
                u <= gamma,
            ]
            phi = phi + delta * (2.0 + delta) * nu * \
                cp.quad_over_lin(cp.vec(SC, order="F"), 2.0 * (1.0 - u))
        return phi, side_cons

    # the nuisance side is pinned to the origin: no support term at all
    phi1, c1 = side(-1.0, None)
    phi2, c2 = side(+1.0, sig)
    prob = cp.Problem(cp.Minimize(0.5 * (phi1 + phi2)), cons + c1 + c2)
    for attempt, opts in enumerate((_CLARABEL_OPTS, _CLARABEL_MID, {})):
        try:
            prob.solve(solver=cp.CLARABEL, **opts)
        except cp.error.SolverError:
            if attempt == 2:
                raise
            continue
        if prob.status == cp.OPTIMAL or attempt == 2:
            break
        if prob.status in (cp.UNBOUNDED, cp.UNBOUNDED_INACCURATE):
            break
    if prob.status in (cp.UNBOUNDED, cp.UNBOUNDED_INACCURATE):
        raise InfeasibleMagnitude("signal set is empty at this magnitude")
    if prob.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        raise RuntimeError(f"reduced saddle solve failed: {prob.status}")
    G_opt = 0.5 * (G.value + G.value.T)

    vals_n = [(_phi_kron(nuis, -G_opt, c, with_support=False), c) for c in extremes]
    vals_s = [(_phi_kron(sig, G_opt, c, with_support=True), c) for c in extremes]
    phi_n, c_n = max(vals_n, key=lambda p: p[0])
    phi_s, c_s = max(vals_s, key=lambda p: p[0])
    H_full = np.kron(G_opt, np.eye(nu))
    return SVQuadratic(
        sv=0.5 * (phi_n + phi_s), objective=float(prob.value),
        h=np.zeros(t * nu), H=H_full, shift=0.5 * (phi_n - phi_s),
        phi_nuisance=phi_n, phi_signal=phi_s,
        theta_nuisance=c_n * np.kron(jb, np.eye(nu)),
        theta_signal=c_s * np.kron(jb, np.eye(nu)),
    )


# ---------------------------------------------------------------------------
# calibration


def _sv_certified(abar, family, nuisance: LiftedSet, signal: LiftedSet,
                  rho: float, *, regime: str, variant: str, gamma: float):
    """Saddle value with the ambient box handled by certificate: when the
    box radius is far beyond the magnitude, solve without the box and at a
    moderate box; agreement certifies the value for every larger radius
    (the value is nondecreasing in the radius)."""
    sig = signal.scaled(rho)
    amb = [r for r in sig.rows if r.kind == "ambient"]
    huge = amb and min(r.q for r in amb) > 1e6
    if not huge:
        return sv_quadratic(abar, family, nuisance, sig, regime=regime,
                            variant=variant, gamma=gamma)

    def with_radius(rows, rsq):
        out = tuple(QuadConstraint(r.Q, rsq if r.kind == "ambient" else r.q,
                                   r.kind, r.equality) for r in rows)
        return LiftedSet(sig.n, out)

    def without_box(rows):
        return LiftedSet(sig.n, tuple(r for r in rows if r.kind != "ambient"))

    r_mod = max(100.0, 10.0 * rho)
    try:
        free = sv_quadratic(abar, family, nuisance, without_box(sig.rows),
                            regime=regime, variant=variant, gamma=gamma)
        boxed = sv_quadratic(abar, family, nuisance,
                             with_radius(sig.rows, r_mod ** 2),
                             regime=regime, variant=variant, gamma=gamma)
        if abs(free.sv - boxed.sv) <= 1e-7 * (1.0 + abs(free.sv)):
            return boxed
    except (cp.error.SolverError, RuntimeError):
        pass
    log.warning("box certificate failed at rho=%.3g; solving with full box", rho)
    return sv_quadratic(abar, family, nuisance, sig, regime=regime,
                        variant=variant, gamma=gamma)


def calibrate_quadratic(model, family: CovarianceFamily, geometry, eps: float,
                        *, level_rule: str = "per_t", regime: str = "gaussian",
                        variant: str = "saddle", eps_split=None,
                        gamma: float = GAMMA_DEFAULT, sv_tol: float = 1e-8,
                        rho_rtol: float = 1e-6, reduce: str = "auto"):
    """Threshold table for a quadratic-detector geometry.

    level_rule 'per_t' sets the working level at time t from the number
    of shapes that are candidates by t; 'global' uses one level
    eps/sqrt(d*K) throughout. Either way the per-time false-alarm budget
    eps_t is respected and the acceptance threshold is ln(level/eps).
    """
    from .calibration import (CalEntry, CalibrationTable, PerTime,
                              SolverFailure, split_budget, threshold_rho)
    from .model import covariance_at_time

    d = model.horizon
    eps_t = split_budget(eps, d, eps_split)
    shapes = geometry.shapes
    K = len(shapes)
    if not K:
        raise ValueError("no shapes")
    if level_rule not in ("per_t", "global"):
        raise ValueError(f"unknown level rule {level_rule!r}")
    kappa_global = eps / math.sqrt(d * K)

    nuis_lift = lift_rows(geometry.input_dim, geometry.nuisance_rows)
    entries: dict = {}
    per_time: dict = {}
    radius_cache: dict = {}

    for t in range(1, d + 1):
        abar = model.abar(t)
        fam_t = covariance_at_time(family, model, t)
        theta_t = fam_t.largest()
        identity_noise = isinstance(fam_t, Singleton) and \
            np.allclose(theta_t, np.eye(theta_t.shape[0]))

        if level_rule == "per_t":
            n_cand = sum(1 for s in shapes if s.candidate_from <= t)
            kappa_t = min(1.0, math.sqrt(eps * eps_t[t - 1] / n_cand)) \
                if n_cand else 1.0
        else:
            kappa_t = kappa_global
        target = math.log(kappa_t)
        alpha = math.log(kappa_t / eps)

        n_active = 0
        for k, shape in enumerate(shapes):
            label = shape.label
            rho_tk = math.inf
            ideal = math.inf
            sv_at_R = 0.0
            detectors: tuple = ()
            R_k = shape.max_magnitude
            if not math.isfinite(R_k):
                R_k = geometry.ambient_radius

            try:
                if shape.candidate_from <= t and target < 0.0:
                    rho_tk, ideal, sv_at_R, detectors = _quad_cell(
                        abar, fam_t, nuis_lift, shape, geometry, t, target,
                        eps, R_k, identity_noise, radius_cache,
                        regime=regime, variant=variant, gamma=gamma,
                        sv_tol=sv_tol, rho_rtol=rho_rtol, reduce=reduce,
                        threshold_rho=threshold_rho)
                    if detectors:
                        n_active += 1
            except SolverFailure:
                raise
            except Exception as e:
                raise SolverFailure(t, label, e) from e
            entries[(t, k + 1)] = CalEntry(
                t=t, k=k + 1, label=label, rho=rho_tk, ideal=ideal,
                sv_at_R=sv_at_R, detectors=detectors)
        per_time[t] = PerTime(t=t, level=kappa_t, alpha=alpha,
                              n_active=n_active)

    return CalibrationTable(
        eps=eps, eps_t=eps_t, regime="quadratic",
        shape_labels=tuple(s.label for s in shapes),
        entries=entries, per_time=per_time, dims=tuple(model.dims))


def _quad_cell(abar, fam_t, nuis_lift, shape, geometry, t, target, eps, R_k,
               identity_noise, radius_cache, *, regime, variant,
               gamma, sv_tol, rho_rtol, reduce, threshold_rho):
    """Calibrate one (time, shape) cell; split out for failure reporting."""
    from .calibration import NonMonotoneSV

    label = shape.label
    rho_tk = math.inf
    ideal = math.inf
    sv_at_R = 0.0
    detectors: tuple = ()

    if shape.rank_one is not None and identity_noise:
        a_vec = shape.rank_one.component(abar)
        sigma = float(np.linalg.norm(a_vec))
        if sigma > 1e-12:
            key = (t, target)
            if key not in radius_cache:
                radius_cache[key] = rank_one_radius(target, gamma=gamma)
            r_cal = radius_cache[key]
            sv_at_R = sv_rank_one(R_k * sigma, gamma=gamma)[0]
            rho_cand = r_cal / sigma
            if rho_cand <= R_k:
                rho_tk = rho_cand
                sv, H1 = sv_rank_one(r_cal, gamma=gamma)
                det = _rank_one_detector(a_vec / sigma, r_cal, sv,
                                         H1, t, label, rho_tk)
                detectors = (det,)
            rs = 2.0 * _erfinv(eps) / sigma
            ideal = rs if rs <= geometry.ambient_radius else math.inf
        return rho_tk, ideal, sv_at_R, detectors

    sig_lift = lift_rows(geometry.input_dim, shape.rows)
    # the whole bisection must stay on one numerical route: reduced and
    # generic solves agree only to ~1e-5, enough to trip the monotone
    # guard if mixed, so a mid-bracket fallback restarts the cell
    routes = (reduce, "never") if reduce == "auto" else (reduce,)
    for mode in routes:
        state = {"degraded": False}

        def sv_fn(rho, _sig=sig_lift, _mode=mode, _state=state):
            res = _generic_or_reduced(
                abar, fam_t, nuis_lift, _sig, rho, regime=regime,
                variant=variant, gamma=gamma, reduce=_mode, state=_state)
            return res.sv, res
        try:
            rho_tk = math.inf
            detectors = ()
            sv_at_R = sv_fn(R_k)[0]
            if sv_at_R < target:
                rho_tk, res = threshold_rho(
                    sv_fn, R_k, target, sv_tol=sv_tol, rho_rtol=rho_rtol)
                detectors = (build_quadratic_detector(res, t, label, rho_tk),)
        except NonMonotoneSV:
            if not state["degraded"]:
                raise
        if not state["degraded"]:
            break
        log.warning("cell t=%d %s mixed solver routes; redoing on the "
                    "generic program", t, label)
    ideal = _ideal_quadratic(abar, shape, geometry, eps)
    return rho_tk, ideal, sv_at_R, detectors


def _truncate_prefix(lifted: LiftedSet, n_obs: int) -> LiftedSet:
    """Crop rows to the observed input prefix, dropping rows that touch
    later coordinates (their requirements can always be met by extending
    the input beyond the observed window)."""
    rows = []
    for r in lifted.rows:
        tail_nw = r.Q[n_obs:lifted.n, :lifted.n]
        tail_cr = r.Q[n_obs:lifted.n, lifted.n]
        if np.any(tail_nw) or np.any(tail_cr):
            continue
        Q = np.zeros((n_obs + 1, n_obs + 1))
        Q[:n_obs, :n_obs] = r.Q[:n_obs, :n_obs]
        Q[:n_obs, n_obs] = r.Q[:n_obs, lifted.n]
        Q[n_obs, :n_obs] = r.Q[lifted.n, :n_obs]
        Q[n_obs, n_obs] = r.Q[lifted.n, lifted.n]
        rows.append(QuadConstraint(Q, r.q, r.kind, r.equality))
    return LiftedSet(n_obs, tuple(rows))


def _generic_or_reduced(abar, fam_t, nuis_lift, sig_lift, rho, *,
                        regime, variant, gamma, reduce, state=None):
    n_obs = abar.shape[0]
    prefix_ok = abar.shape[1] <= n_obs or not np.any(abar[:, n_obs:])
    a_use, nuis_use, sig_use = abar, nuis_lift, sig_lift
    if isinstance(fam_t, ScalarSegment) and prefix_ok and abar.shape[1] > n_obs:
        # sensing stops at the prefix, so projecting the input sets onto
        # it is exact; it also keeps the saddle program small enough to
        # solve at tight tolerances
        a_use = abar[:, :n_obs]
        nuis_use = _truncate_prefix(nuis_lift, n_obs)
        sig_use = _truncate_prefix(sig_lift, n_obs)
    if reduce in ("auto", "kronecker") and isinstance(fam_t, ScalarSegment):
        try:
            if not prefix_ok:
                raise StructureMismatch("sensing extends past the prefix")
            nu_pix = _pixel_multiplicity(fam_t)
            red_n = kronecker_reduce(a_use, fam_t, nuis_use, nu_pix)
            red_s = kronecker_reduce(a_use, fam_t, sig_use, nu_pix)
            return sv_kronecker(red_n, red_s.scaled(rho), gamma=gamma)
        except StructureMismatch:
            if reduce == "kronecker":
                raise
        except cp.error.SolverError:
            # the reduced program occasionally stalls where the generic
            # one does not; 'auto' may fall through, an explicit request
            # must surface the failure
            if reduce == "kronecker":
                raise
            if state is not None:
                state["degraded"] = True
            log.warning("reduced solve failed at rho=%.6g; using the "
                        "generic program", rho)
    return _sv_certified(a_use, fam_t, nuis_use, sig_use, rho,
                         regime=regime, variant=variant, gamma=gamma)


def _pixel_multiplicity(fam: ScalarSegment) -> int:
    """Largest nu with base = kron(J, I_nu)."""
    base = fam.base
    n = base.shape[0]
    for nu in range(n, 0, -1):
        if n % nu:
            continue
        try:
            t = n // nu
            for i in range(t):
                for j in range(t):
                    blk = base[i * nu:(i + 1) * nu, j * nu:(j + 1) * nu]
                    if not np.allclose(blk, blk[0, 0] * np.eye(nu), atol=1e-12):
                        raise StructureMismatch
            return nu
        except StructureMismatch:
            continue
    raise StructureMismatch("covariance base has no pixel factor")


def _ideal_quadratic(abar, shape, geometry, eps: float) -> float:
    """Smallest magnitude at which the best possible test could separate
    the shape from the zero input: the guaranteed observed component must
    exceed 2 ErfInv(eps)."""
    if shape.rank_one is None:
        return math.inf
    sigma = shape.rank_one.sigma(abar)
    if sigma <= 1e-12:
        return math.inf
    rs = 2.0 * _erfinv(eps) / sigma
    return rs if rs <= geometry.ambient_radius else math.inf


def _erfinv(eps: float) -> float:
    from .numerics import erfinv

    return erfinv(eps)
