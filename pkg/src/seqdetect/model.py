"""Observation scheme, covariance families, and input geometries.

The observation model stacks outputs of a linear system over time,
projects out the subspace reachable from unknown initial conditions,
and exposes the per-time sensing matrices in a nested basis so that
earlier observations are coordinate prefixes of later ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog


# ---------------------------------------------------------------------------
# observation model


@dataclass(frozen=True)
class ObservationModel:
    """Stacked, initial-condition-free view of a linear system.

    Attributes
    ----------
    sensing_full : ndarray
        Full-horizon sensing matrix mapping the stacked input to the
        projected observation coordinates (rows ordered so that the
        first ``dims[t-1]`` rows are exactly the time-``t`` view).
    dims : tuple of int
        Projected observation dimension at each time 1..d, nondecreasing.
    horizon : int
    input_dim : int
        Length of the stacked input vector.
    ny : int
        Raw outputs per time step.
    proj_bases : tuple of ndarray
        Orthonormal basis of the admissible-output subspace at each t
        (shape ``(ny*t, dims[t-1])``); columns are nested across t.
    markov : ndarray
        Raw stacked input-to-output map (``ny*d x input_dim``), kept
        for simulation.
    noise_through_markov : bool
        True when process noise enters through ``markov`` (filtered
        noise) rather than additively on the raw outputs.
    name : str
    """

    sensing_full: np.ndarray
    dims: tuple[int, ...]
    horizon: int
    input_dim: int
    ny: int
    proj_bases: tuple[np.ndarray, ...]
    markov: np.ndarray
    noise_through_markov: bool = False
    name: str = "custom"

    def abar(self, t: int) -> np.ndarray:
        """Sensing matrix at time t (prefix rows of the full matrix)."""
        self._check_t(t)
        return self.sensing_full[: self.dims[t - 1], :]

    def selector(self, t: int) -> np.ndarray:
        """S_t with S_t @ sensing_full == abar(t)."""
        self._check_t(t)
        nu_t, nu_d = self.dims[t - 1], self.dims[-1]
        return np.eye(nu_t, nu_d)

    def project_stream(self, raw: np.ndarray, t: int) -> np.ndarray:
        """Coordinates y^t of the stacked raw outputs up to time t."""
        self._check_t(t)
        w = np.asarray(raw, dtype=float).reshape(-1)[: self.ny * t]
        return self.proj_bases[t - 1].T @ w

    def active_times(self) -> list[int]:
        return [t for t in range(1, self.horizon + 1) if self.dims[t - 1] > 0]

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.horizon:
            raise IndexError(f"t={t} outside horizon 1..{self.horizon}")

    def validate(self) -> None:
        """Assert the nesting and rank invariants."""
        nu_prev = 0
        for t in range(1, self.horizon + 1):
            nu_t = self.dims[t - 1]
            if nu_t < nu_prev:
                raise ValueError("projected dimensions must be nondecreasing")
            S = self.selector(t)
            if nu_t and np.linalg.matrix_rank(S) != nu_t:
                raise ValueError(f"selector at t={t} is rank deficient")
            if nu_prev:
                S_prev = self.selector(t - 1)
                R, *_ = np.linalg.lstsq(S.T, S_prev.T, rcond=None)
                resid = np.linalg.norm(R.T @ S - S_prev)
                if resid > 1e-10 * max(np.linalg.norm(S_prev), 1.0):
                    raise ValueError(f"nesting violated at t={t}: residual {resid:.2e}")
            nu_prev = nu_t


def _nested_kernel_complement(O_full: np.ndarray, ny: int, d: int) -> list[np.ndarray]:
    """Orthonormal bases U_t of the orthogonal complement of the
    zero-input output span, nested so U_{t-1} is a zero-padded prefix
    of U_t's leading columns."""
    from scipy.linalg import orth

    bases: list[np.ndarray] = []
    U_prev = np.zeros((0, 0))
    for t in range(1, d + 1):
        rows = ny * t
        Ot = O_full[:rows, :]
        E = orth(Ot) if Ot.size else np.zeros((rows, 0))
        nu_t = rows - E.shape[1]
        U = np.zeros((rows, nu_t))
        k0 = U_prev.shape[1]
        if k0:
            U[: U_prev.shape[0], :k0] = U_prev
        if nu_t > k0:
            # complete the basis: eigenvectors of the projector off E and
            # the carried columns, 1-eigenvalue cluster, signs pinned
            P = np.eye(rows)
            if E.size:
                P -= E @ E.T
            if k0:
                P -= U[:, :k0] @ U[:, :k0].T
            vals, vecs = np.linalg.eigh(P)
            new = vecs[:, vals > 0.5]
            for j in range(new.shape[1]):
                i0 = int(np.argmax(np.abs(new[:, j])))
                if new[i0, j] < 0:
                    new[:, j] = -new[:, j]
            U[:, k0:] = new[:, : nu_t - k0]
        bases.append(U)
        U_prev = U
    return bases


def build_observation_model(
    markov: np.ndarray,
    kernel_generators: np.ndarray,
    d: int,
    ny: int,
    *,
    noise_through_markov: bool = False,
    name: str = "custom",
) -> ObservationModel:
    """Assemble an ObservationModel from the raw stacked input map and
    the generators of the zero-input output span."""
    markov = np.asarray(markov, dtype=float)
    if markov.shape[0] != ny * d:
        raise ValueError("markov row count must equal ny*d")
    bases = _nested_kernel_complement(np.asarray(kernel_generators, float), ny, d)
    dims = tuple(U.shape[1] for U in bases)
    sensing_full = bases[-1].T @ markov
    m = ObservationModel(
        sensing_full=sensing_full,
        dims=dims,
        horizon=d,
        input_dim=markov.shape[1],
        ny=ny,
        proj_bases=tuple(bases),
        markov=markov,
        noise_through_markov=noise_through_markov,
        name=name,
    )
    m.validate()
    return m


def project_out_initial_conditions(
    A: np.ndarray, B: np.ndarray, C: np.ndarray, d: int, *, name: str = "custom",
    noise_through_markov: bool = False,
) -> ObservationModel:
    """Observation model for z_t = A z_{t-1} + B x_t, outputs C z_t at
    t = 1..d, with the span of zero-input outputs projected out."""
    A = np.atleast_2d(np.asarray(A, float))
    B = np.asarray(B, float).reshape(A.shape[0], -1)
    C = np.atleast_2d(np.asarray(C, float))
    ny, nx = C.shape
    nb = B.shape[1]
    powers = [np.eye(nx)]
    for _ in range(d):
        powers.append(A @ powers[-1])
    O = np.vstack([C @ powers[t] for t in range(1, d + 1)])
    M = np.zeros((ny * d, nb * d))
    for t in range(1, d + 1):
        for s in range(1, t + 1):
            M[ny * (t - 1): ny * t, nb * (s - 1): nb * s] = C @ powers[t - s] @ B
    return build_observation_model(M, O, d, ny, name=name,
                                   noise_through_markov=noise_through_markov)


# ---------------------------------------------------------------------------
# covariance families


@dataclass(frozen=True)
class Singleton:
    """One known noise covariance."""

    theta: np.ndarray

    @property
    def dim(self) -> int:
        return self.theta.shape[0]

    def largest(self) -> np.ndarray:
        return self.theta

    def extremes(self) -> list[np.ndarray]:
        return [self.theta]

    def delta(self) -> float:
        return 0.0

    def push(self, S: np.ndarray) -> "Singleton":
        return Singleton(S @ self.theta @ S.T)


@dataclass(frozen=True)
class Interval:
    """Matrix interval sigma2 * top <= Theta <= top (scalar lower factor)."""

    sigma2: float
    top: np.ndarray

    def __post_init__(self):
        if not 0.0 < self.sigma2 <= 1.0:
            raise ValueError("lower factor must lie in (0, 1]")

    @property
    def dim(self) -> int:
        return self.top.shape[0]

    def largest(self) -> np.ndarray:
        return self.top

    def extremes(self) -> list[np.ndarray]:
        return [self.sigma2 * self.top, self.top]

    def delta(self) -> float:
        return 1.0 - math.sqrt(self.sigma2)

    def push(self, S: np.ndarray) -> "Interval":
        return Interval(self.sigma2, S @ self.top @ S.T)


@dataclass(frozen=True)
class ScalarSegment:
    """Family {theta * base : theta in [lo, 1]} with base > 0."""

    base: np.ndarray
    lo: float

    def __post_init__(self):
        if not 0.0 < self.lo <= 1.0:
            raise ValueError("segment lower end must lie in (0, 1]")

    @property
    def dim(self) -> int:
        return self.base.shape[0]

    def largest(self) -> np.ndarray:
        return self.base

    def extremes(self) -> list[np.ndarray]:
        return [self.lo * self.base, self.base]

    def delta(self) -> float:
        return 1.0 - math.sqrt(self.lo)

    def push(self, S: np.ndarray) -> "ScalarSegment":
        return ScalarSegment(S @ self.base @ S.T, self.lo)


CovarianceFamily = Singleton | Interval | ScalarSegment


def covariance_at_time(family: CovarianceFamily, model: ObservationModel, t: int):
    """Push the horizon-level family through the time-t selector."""
    return family.push(model.selector(t))


# ---------------------------------------------------------------------------
# polyhedral sets (affine engine geometry)


@dataclass(frozen=True)
class PolyhedralSet:
    """{x : C x <= c, E x = e}; either block may be empty."""

    C: np.ndarray
    c: np.ndarray
    E: np.ndarray | None = None
    e: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.C.shape[1] if self.C.size else self.E.shape[1]

    def contains(self, x: np.ndarray, tol: float = 1e-9) -> bool:
        x = np.asarray(x, float)
        ok = True
        if self.C.size:
            ok &= bool(np.all(self.C @ x <= self.c + tol))
        if self.E is not None and self.E.size:
            ok &= bool(np.all(np.abs(self.E @ x - self.e) <= tol))
        return ok

    def feasible_point(self) -> np.ndarray | None:
        n = self.dim
        res = linprog(
            np.zeros(n),
            A_ub=self.C if self.C.size else None,
            b_ub=self.c if self.C.size else None,
            A_eq=self.E if self.E is not None and self.E.size else None,
            b_eq=self.e if self.E is not None and self.E.size else None,
            bounds=[(None, None)] * n,
            method="highs",
        )
        return res.x if res.status == 0 else None

    def is_bounded(self) -> bool:
        n = self.dim
        for i in range(n):
            for sign in (1.0, -1.0):
                cost = np.zeros(n)
                cost[i] = -sign
                res = linprog(
                    cost,
                    A_ub=self.C if self.C.size else None,
                    b_ub=self.c if self.C.size else None,
                    A_eq=self.E if self.E is not None and self.E.size else None,
                    b_eq=self.e if self.E is not None and self.E.size else None,
                    bounds=[(None, None)] * n,
                    method="highs",
                )
                if res.status == 3:
                    return False
        return True

    @staticmethod
    def box(n: int, radius: float) -> "PolyhedralSet":
        C = np.vstack([np.eye(n), -np.eye(n)])
        return PolyhedralSet(C, np.full(2 * n, radius))

    @staticmethod
    def zero(n: int) -> "PolyhedralSet":
        return PolyhedralSet(np.zeros((0, n)), np.zeros(0), np.eye(n), np.zeros(n))


@dataclass(frozen=True)
class AffineShape:
    """One signal shape: drift set V_k (compact, contains 0) and
    semi-conic direction set W_k with 0 outside."""

    V: PolyhedralSet
    W: PolyhedralSet
    label: str = ""


@dataclass(frozen=True)
class SignalGeometryAffine:
    shapes: tuple[AffineShape, ...]
    ambient: PolyhedralSet
    nuisances: tuple[PolyhedralSet, ...]

    @property
    def n_shapes(self) -> int:
        return len(self.shapes)

    def check_semiconic(self, rng: np.random.Generator, samples: int = 8) -> None:
        """Sampled proxy for semi-conicity of each W_k (scaling by
        rho in {1, 2, 10} stays inside)."""
        for shape in self.shapes:
            W = shape.W
            n = W.dim
            pts = []
            for _ in range(samples):
                cost = rng.normal(size=n)
                res = linprog(cost, A_ub=W.C if W.C.size else None,
                              b_ub=W.c if W.C.size else None,
                              A_eq=W.E if W.E is not None and W.E.size else None,
                              b_eq=W.e if W.E is not None and W.E.size else None,
                              bounds=[(-1e6, 1e6)] * n, method="highs")
                if res.status == 0:
                    pts.append(res.x)
            for p in pts:
                for rho in (1.0, 2.0, 10.0):
                    if not W.contains(rho * np.asarray(p), tol=1e-6 * rho):
                        raise ValueError(f"W_{shape.label} not semi-conic at rho={rho}")


# ---------------------------------------------------------------------------
# quadratic-lifting geometry


@dataclass(frozen=True)
class QuadConstraint:
    """Tr(Q Z) <= q on lifted matrices Z of size (n+1)x(n+1).

    ``kind``: 'ambient' / 'nuisance' rows are magnitude-free;
    'A' rows scale their rhs by rho, 'B' rows by rho^2.
    ``equality`` marks rows enforced with equality.
    """

    Q: np.ndarray
    q: float
    kind: str = "ambient"
    equality: bool = False


@dataclass(frozen=True)
class RankOneSignal:
    """Fast-path descriptor: signals are (magnitude coordinate) times a
    fixed input direction plus an unconstrained tail.

    sigma is the Euclidean gain of the guaranteed component under the
    time-t sensing matrix after projecting off the tail span.
    """

    direction: np.ndarray
    tail: np.ndarray  # input-space tail basis, shape (n, n_tail)
    label: str = ""

    def component(self, abar: np.ndarray) -> np.ndarray:
        """Observed direction image with the tail span projected off."""
        from scipy.linalg import orth

        a = abar @ self.direction
        T = abar @ self.tail if self.tail.size else np.zeros((abar.shape[0], 0))
        if T.size:
            q = orth(T)
            if q.size:
                a = a - q @ (q.T @ a)
        return a

    def sigma(self, abar: np.ndarray) -> float:
        return float(np.linalg.norm(self.component(abar)))


@dataclass(frozen=True)
class QuadraticShape:
    """Constraint rows defining the lifted signal set of one shape,
    plus the optional rank-one fast-path descriptor."""

    rows: tuple[QuadConstraint, ...]
    rank_one: RankOneSignal | None = None
    label: str = ""
    candidate_from: int = 1  # earliest t at which the shape is a candidate
    max_magnitude: float = math.inf  # largest rho inside the ambient set


@dataclass(frozen=True)
class SignalGeometryQuadratic:
    shapes: tuple[QuadraticShape, ...]
    ambient_radius: float
    nuisance_rows: tuple[QuadConstraint, ...]
    input_dim: int

    @property
    def n_shapes(self) -> int:
        return len(self.shapes)


# ---------------------------------------------------------------------------
# maximum magnitude R_k


class InfeasibleShape(RuntimeError):
    pass


def max_magnitude_affine(
    shape: AffineShape, ambient: PolyhedralSet, *, rho_min: float | None = None,
    rtol: float = 1e-6,
) -> float:
    """Largest rho with [V_k + rho W_k] inside the ambient set nonempty."""
    n = ambient.dim

    def feasible(rho: float) -> bool:
        # variables (v, w); constraints: v in V, w in W, v + rho w in X
        blocks_C, blocks_c = [], []
        for S, pick in ((shape.V, 0), (shape.W, 1)):
            if S.C.size:
                Z = np.zeros((S.C.shape[0], 2 * n))
                Z[:, pick * n:(pick + 1) * n] = S.C
                blocks_C.append(Z)
                blocks_c.append(S.c)
        if ambient.C.size:
            Z = np.zeros((ambient.C.shape[0], 2 * n))
            Z[:, :n] = ambient.C
            Z[:, n:] = rho * ambient.C
            blocks_C.append(Z)
            blocks_c.append(ambient.c)
        blocks_E, blocks_e = [], []
        for S, pick in ((shape.V, 0), (shape.W, 1)):
            if S.E is not None and S.E.size:
                Z = np.zeros((S.E.shape[0], 2 * n))
                Z[:, pick * n:(pick + 1) * n] = S.E
                blocks_E.append(Z)
                blocks_e.append(S.e)
        res = linprog(
            np.zeros(2 * n),
            A_ub=np.vstack(blocks_C) if blocks_C else None,
            b_ub=np.concatenate(blocks_c) if blocks_c else None,
            A_eq=np.vstack(blocks_E) if blocks_E else None,
            b_eq=np.concatenate(blocks_e) if blocks_e else None,
            bounds=[(None, None)] * (2 * n),
            method="highs",
        )
        return res.status == 0

    hi_guess = 1.0
    ambient_scale = float(np.max(np.abs(ambient.c))) if ambient.c.size else 1.0
    if rho_min is None:
        rho_min = 1e-8 * ambient_scale
    if not feasible(rho_min):
        raise InfeasibleShape(f"shape {shape.label!r} infeasible at rho={rho_min}")
    while feasible(hi_guess):
        hi_guess *= 2.0
        if hi_guess > 4.0 * ambient_scale:
            break
    if feasible(hi_guess):
        return hi_guess
    lo, hi = rho_min, hi_guess
    while hi - lo > rtol * max(hi, 1.0):
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            lo = mid
        else:
            hi = mid
    return lo


# ---------------------------------------------------------------------------
# activation geometries (affine)


def _zero_rows(d: int, times) -> tuple[np.ndarray, np.ndarray]:
    E = np.zeros((len(times), d))
    for i, t in enumerate(times):
        E[i, t - 1] = 1.0
    return E, np.zeros(len(times))


def affine_pulse_geometry(d: int, radius: float = 1e4) -> SignalGeometryAffine:
    """One nonzero entry at time k, all other inputs forced to zero."""
    shapes = []
    for k in range(1, d + 1):
        E, e = _zero_rows(d, [t for t in range(1, d + 1) if t != k])
        C = np.zeros((1, d))
        C[0, k - 1] = -1.0
        W = PolyhedralSet(C, np.array([-1.0]), E, e)
        shapes.append(AffineShape(V=PolyhedralSet.zero(d), W=W, label=f"pulse{k}"))
    return SignalGeometryAffine(
        shapes=tuple(shapes),
        ambient=PolyhedralSet.box(d, radius),
        nuisances=(PolyhedralSet.zero(d),),
    )


def affine_jump_geometry(d: int, radius: float = 1e4) -> SignalGeometryAffine:
    """Zero before time k, at least the magnitude from k onward."""
    shapes = []
    for k in range(1, d + 1):
        E, e = _zero_rows(d, list(range(1, k)))
        C = np.zeros((d - k + 1, d))
        for i, t in enumerate(range(k, d + 1)):
            C[i, t - 1] = -1.0
        W = PolyhedralSet(C, -np.ones(d - k + 1), E, e)
        shapes.append(AffineShape(V=PolyhedralSet.zero(d), W=W, label=f"jump{k}"))
    return SignalGeometryAffine(
        shapes=tuple(shapes),
        ambient=PolyhedralSet.box(d, radius),
        nuisances=(PolyhedralSet.zero(d),),
    )


def affine_step_geometry(d: int, radius: float = 1e4) -> SignalGeometryAffine:
    """Zero before time k, constant level of at least the magnitude after."""
    shapes = []
    for k in range(1, d + 1):
        Ez, _ = _zero_rows(d, list(range(1, k)))
        rows = [Ez] if Ez.size else []
        for t in range(k, d):
            r = np.zeros((1, d))
            r[0, t - 1] = 1.0
            r[0, t] = -1.0
            rows.append(r)
        E = np.vstack(rows) if rows else np.zeros((0, d))
        C = np.zeros((1, d))
        C[0, k - 1] = -1.0
        W = PolyhedralSet(C, np.array([-1.0]), E, np.zeros(E.shape[0]))
        shapes.append(AffineShape(V=PolyhedralSet.zero(d), W=W, label=f"step{k}"))
    return SignalGeometryAffine(
        shapes=tuple(shapes),
        ambient=PolyhedralSet.box(d, radius),
        nuisances=(PolyhedralSet.zero(d),),
    )


# ---------------------------------------------------------------------------
# reference systems


def double_integrator(d: int = 8) -> ObservationModel:
    """Discretized double integrator driven by a scalar disturbance;
    position observed each step in white noise."""
    A = np.array([[1.0, 1.0], [0.0, 1.0]])
    B = np.array([[0.5], [1.0]])
    C = np.array([[1.0, 0.0]])
    return project_out_initial_conditions(A, B, C, d, name="double_integrator")


def third_order(d: int = 16, kappa: float | None = None) -> ObservationModel:
    """Recursive filter whose output accumulates the input twice, with a
    quadratic-in-time free response; the disturbance and the noise enter
    through the same channel."""
    if kappa is None:
        kappa = (0.1 * d) ** -3
    A = np.array([
        [1.0, 0.0, 0.0, 0.0, 0.0],
        [1.0, 1.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0, 1.0],
        [0.0, 0.0, 0.0, 0.0, 1.0],
    ])
    B = np.array([[kappa], [kappa], [0.0], [0.0], [0.0]])
    C = np.array([[0.0, 1.0, 1.0, 0.0, 0.0]])
    return project_out_initial_conditions(
        A, B, C, d, name="third_order", noise_through_markov=True)


def rust_field(d: int, nu: int) -> ObservationModel:
    """Pixel field with the time-0 frame subtracted: the spot enters each
    frame directly, and differencing shows up only in the noise coupling."""
    markov = np.eye(d * nu)
    kernel = np.zeros((d * nu, 0))
    return build_observation_model(markov, kernel, d, nu, name="rust")


def rust_covariance(d: int, nu: int, sigma: float, theta_lo: float) -> ScalarSegment:
    """Differenced-frame noise family: J_d = I + ones, scaled per pixel."""
    J = np.eye(d) + np.ones((d, d))
    return ScalarSegment(np.kron(J, sigma**2 * np.eye(nu)), theta_lo)


# ---------------------------------------------------------------------------
# lifted geometry builders


def _diag_row(n: int, idx, coeff: float, q: float, kind: str,
              equality: bool = False) -> QuadConstraint:
    Q = np.zeros((n + 1, n + 1))
    for i in np.atleast_1d(idx):
        Q[i, i] = coeff
    return QuadConstraint(Q, q, kind, equality)


def _entry_pair_row(n: int, pos_a, pos_b, kind: str) -> QuadConstraint:
    """Z[pos_a] - Z[pos_b] = 0 as a symmetric constraint row."""
    Q = np.zeros((n + 1, n + 1))
    for (i, j), s in ((pos_a, 1.0), (pos_b, -1.0)):
        if i == j:
            Q[i, j] += s
        else:
            Q[i, j] += 0.5 * s
            Q[j, i] += 0.5 * s
    return QuadConstraint(Q, 0.0, kind, equality=True)


def l2_ambient_row(n: int, radius: float) -> QuadConstraint:
    Q = np.eye(n + 1)
    Q[n, n] = 0.0
    return QuadConstraint(Q, radius * radius, "ambient")


def zero_input_rows(n: int, block: int = 1) -> tuple[QuadConstraint, ...]:
    """Rows pinning the input to the origin: each block of the lifted
    diagonal has nonpositive trace, which under Z >= 0 zeroes the block
    and its row. One row per block keeps any block structure intact."""
    if n % block:
        raise ValueError("block size must divide the input dimension")
    rows = []
    for b in range(n // block):
        idx = range(b * block, (b + 1) * block)
        rows.append(_diag_row(n, list(idx), 1.0, 0.0, "nuisance"))
    return tuple(rows)


def pulse_step_jump_geometry(d: int, radius: float = 1.0e4) -> SignalGeometryQuadratic:
    """Scalar-input shapes over horizon d: a one-step pulse, a sustained
    step, and a jump with free continuation, each at every admissible
    start time. The ambient set is the Euclidean ball of the given
    radius; the nuisance is the zero input.

    A pulse that starts at time 1 is indistinguishable from the free
    initial condition, so pulse shapes start at 2."""
    n = d
    amb = l2_ambient_row(n, radius)
    shapes = []

    for k in range(2, d + 1):
        rows = [amb,
                _diag_row(n, k - 1, -1.0, -1.0, "B")]
        rows += [_diag_row(n, i, 1.0, 0.0, "B") for i in range(n) if i != k - 1]
        shapes.append(QuadraticShape(
            rows=tuple(rows),
            rank_one=RankOneSignal(_basis(n, k - 1), np.zeros((n, 0)),
                                   label=f"pulse{k}"),
            label=f"pulse{k}", candidate_from=k, max_magnitude=radius))

    for k in range(1, d + 1):
        rows = [amb,
                _diag_row(n, k - 1, -1.0, -1.0, "B")]
        rows += [_diag_row(n, i, 1.0, 0.0, "B") for i in range(k - 1)]
        for i in range(k - 1, n - 1):
            rows.append(_entry_pair_row(n, (i, n), (i + 1, n), "A"))
        for i in range(k - 1, n):
            for j in range(i, n):
                if (i, j) != (k - 1, k - 1):
                    rows.append(_entry_pair_row(n, (i, j), (k - 1, k - 1), "B"))
        direction = np.zeros(n)
        direction[k - 1:] = 1.0
        shapes.append(QuadraticShape(
            rows=tuple(rows),
            rank_one=RankOneSignal(direction, np.zeros((n, 0)),
                                   label=f"step{k}"),
            label=f"step{k}", candidate_from=k,
            max_magnitude=radius / math.sqrt(d - k + 1)))

    for k in range(1, d + 1):
        rows = [amb,
                _diag_row(n, k - 1, -1.0, -1.0, "B")]
        rows += [_diag_row(n, i, 1.0, 0.0, "B") for i in range(k - 1)]
        tail = np.zeros((n, n - k))
        for j, col in enumerate(range(k, n)):
            tail[col, j] = 1.0
        shapes.append(QuadraticShape(
            rows=tuple(rows),
            rank_one=RankOneSignal(_basis(n, k - 1), tail, label=f"fjump{k}"),
            label=f"fjump{k}", candidate_from=k, max_magnitude=radius))

    nuisance = zero_input_rows(n) + (amb,)
    return SignalGeometryQuadratic(
        shapes=tuple(shapes), ambient_radius=radius,
        nuisance_rows=nuisance, input_dim=n)


def spot_energy_geometry(d: int, nu: int, radius: float = 1.0e4, *,
                         lam: float = 0.0, p=None) -> SignalGeometryQuadratic:
    """Pixel-field spot shapes: the spot appears at time k with block
    energy at least the squared magnitude, and later blocks obey the
    energy recursion ||x_t||^2 >= lam ||x_{t-1}||^2 + p(t-k+1).

    Per-entry amplitude bounds enter through their per-block traces,
    which is the only footprint they leave on block-exchangeable
    detectors."""
    n = nu * d
    if p is None:
        p = [1.0] + [0.0] * (d - 1)
    p = list(p) + [0.0] * max(0, d - len(p))
    if p[0] != 1.0:
        raise ValueError("the arrival coefficient p(1) must be 1")
    amb = tuple(_diag_row(n, list(range(b * nu, (b + 1) * nu)), 1.0,
                          nu * radius * radius, "ambient")
                for b in range(d))
    shapes = []
    for k in range(1, d + 1):
        rows = list(amb)
        for tau in range(1, k):
            rows.append(_diag_row(n, list(_block(tau, nu)), 1.0, 0.0, "B"))
        rows.append(_diag_row(n, list(_block(k, nu)), -1.0, -1.0, "B"))
        for tau in range(k + 1, d + 1):
            rhs = -p[tau - k]
            if lam == 0.0 and rhs == 0.0:
                continue
            Q = np.zeros((n + 1, n + 1))
            for i in _block(tau, nu):
                Q[i, i] = -1.0
            if lam != 0.0:
                for i in _block(tau - 1, nu):
                    Q[i, i] = lam
            rows.append(QuadConstraint(Q, rhs, "B"))
        # minimal block energies implied by the recursion set the cap
        e_min, e_peak = 1.0, 1.0
        for s in range(1, d - k + 1):
            e_min = lam * e_min + p[s]
            e_peak = max(e_peak, e_min)
        shapes.append(QuadraticShape(
            rows=tuple(rows), rank_one=None, label=f"spot{k}",
            candidate_from=k,
            max_magnitude=radius * math.sqrt(nu / e_peak)))
    nuisance = zero_input_rows(n, block=nu) + amb
    return SignalGeometryQuadratic(
        shapes=tuple(shapes), ambient_radius=radius,
        nuisance_rows=nuisance, input_dim=n)


def _basis(n: int, i: int) -> np.ndarray:
    e = np.zeros(n)
    e[i] = 1.0
    return e


def _block(tau: int, nu: int) -> range:
    return range((tau - 1) * nu, tau * nu)
