"""Sparse primal-dual interior point method for convex QPs.

Solves::

    min  0.5 x^T P x + q^T x
    s.t. A x  = b
         G x <= h

with Mehrotra's predictor-corrector.  Slacks ``s`` and multipliers ``z`` of
the inequalities are eliminated each iteration, leaving the quasi-definite
system::

    [ P + G^T (Z/S) G + d I     A^T ] [dx]   [r1]
    [ A                        -d I ] [dy] = [r2]

which is factored with diagonal pivots only (the regularization makes every
leading block nonsingular) and polished with a few steps of iterative
refinement against the unregularized matrix.  The default backend orders the
matrix once by METIS nested dissection and hands it to SuperLU; qdldl (AMD
ordering) and plain SuperLU are alternatives.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)

_TINY = 1e-12
_norm = lambda v: float(np.max(np.abs(v))) if np.size(v) else 0.0  # noqa: E731


def _dot(a, b) -> float:
    # BLAS ddot splits the sum differently per thread count; numpy's pairwise
    # sum does not, which keeps iterates bit-identical across thread settings
    return float(np.sum(np.multiply(a, b)))


@dataclass(eq=False)
class QuadraticProgram:
    P: sp.spmatrix
    q: np.ndarray
    A: sp.spmatrix
    b: np.ndarray
    G: sp.spmatrix
    h: np.ndarray

    def __post_init__(self):
        n = len(self.q)
        self.P = sp.csc_matrix(self.P, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        self.A = sp.csr_matrix(self.A if self.A is not None else (0, n), dtype=float)
        self.G = sp.csr_matrix(self.G if self.G is not None else (0, n), dtype=float)
        self.b = np.asarray(self.b if self.b is not None else [], dtype=float).ravel()
        self.h = np.asarray(self.h if self.h is not None else [], dtype=float).ravel()
        if self.P.shape != (n, n):
            raise ValueError(f"P is {self.P.shape}, expected {(n, n)}")
        if self.A.shape[1] != n or len(self.b) != self.A.shape[0]:
            raise ValueError("equality block has inconsistent dimensions")
        if self.G.shape[1] != n or len(self.h) != self.G.shape[0]:
            raise ValueError("inequality block has inconsistent dimensions")

    @property
    def n_var(self) -> int:
        return len(self.q)

    @property
    def n_eq(self) -> int:
        return self.A.shape[0]

    @property
    def n_ineq(self) -> int:
        return self.G.shape[0]

    def objective(self, x: np.ndarray) -> float:
        return 0.5 * _dot(x, self.P @ x) + _dot(self.q, x)


class Status(str, Enum):
    OPTIMAL = "optimal"
    MAX_ITER = "max_iter"
    INFEASIBLE = "infeasible"


@dataclass
class SolverSettings:
    kkt_tolerance: float = 1e-6
    max_iterations: int = 100
    regularization: float = 1e-8
    refinement_steps: int = 3
    linear_solver: str = "nd"
    verbose: bool = False

    def __post_init__(self):
        if not self.kkt_tolerance > 0:
            raise ValueError("kkt_tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.regularization < 0:
            raise ValueError("regularization must be >= 0")


@dataclass
class KKTResiduals:
    stationarity: float
    primal: float
    dual: float
    complementarity: float

    def max(self) -> float:
        return max(self.stationarity, self.primal, self.dual, self.complementarity)

    def within(self, tol: float) -> bool:
        return self.max() <= tol

    def as_dict(self) -> dict:
        return {
            "stationarity": self.stationarity,
            "primal": self.primal,
            "dual": self.dual,
            "complementarity": self.complementarity,
        }


@dataclass(eq=False)
class Solution:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    s: np.ndarray
    status: Status
    objective: float
    residuals: KKTResiduals
    iterations: int
    wall_time: float
    log: list = field(default_factory=list)
    trajectory: object = None

    @property
    def optimal(self) -> bool:
        return self.status is Status.OPTIMAL

    def log_csv(self) -> str:
        buf = io.StringIO()
        if self.log:
            w = csv.DictWriter(buf, fieldnames=list(self.log[0]), lineterminator="\n")
            w.writeheader()
            for row in self.log:
                w.writerow({k: (f"{v:.6e}" if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()


def kkt_residuals(problem: QuadraticProgram, x, y, z) -> KKTResiduals:
    """Scaled KKT residuals of a primal/dual point, slacks taken as ``h - G x``.

    Each residual is normalized by the magnitude of the terms it balances, so
    the report does not depend on how the cost or constraints are scaled.  The
    stationarity and complementarity scales are floored at the cost scale
    ``max(|P|_max, |q|_max)`` so a problem whose optimum and multipliers are
    all near zero can still be certified.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    cost_scale = max(abs(problem.P).max() if problem.P.nnz else 0.0, _norm(problem.q), _TINY)
    Px = problem.P @ x
    Aty = problem.A.T @ y
    Gtz = problem.G.T @ z
    r_dual = Px + problem.q + Aty + Gtz
    stat_scale = max(_norm(Px), _norm(problem.q), _norm(Aty), _norm(Gtz), cost_scale)

    Ax = problem.A @ x
    Gx = problem.G @ x
    viol = max(_norm(Ax - problem.b), _norm(np.maximum(Gx - problem.h, 0.0)))
    prim_scale = max(_norm(Ax), _norm(problem.b), _norm(Gx), _norm(problem.h), 1.0)

    dual = _norm(np.minimum(z, 0.0)) / max(_norm(z), _TINY)

    slack = problem.h - Gx
    gap = float(np.sum(np.abs(z * slack)))
    gap_scale = max(
        abs(_dot(x, Px)) + abs(_dot(problem.q, x)) + abs(_dot(problem.b, y)) + abs(_dot(problem.h, z)),
        cost_scale,
    )
    return KKTResiduals(
        stationarity=float(_norm(r_dual) / stat_scale),
        primal=float(viol / prim_scale),
        dual=float(dual),
        complementarity=float(gap / gap_scale),
    )


class _KKTSystem:
    """Factorization of the regularized reduced KKT matrix with fixed pattern."""

    def __init__(self, P, A, G, reg, backend):
        self.P, self.A, self.G = P, A, G
        self.reg = reg
        self.n, self.me = P.shape[0], A.shape[0]
        self.backend = backend
        self._solver = None
        self._pattern = None
        self._GT = G.T.tocsr()

    def _assemble(self, w, reg):
        H = self.P + (self._GT @ sp.diags(w) @ self.G) + reg * sp.eye(self.n)
        K = sp.bmat([[H, self.A.T], [self.A, -reg * sp.eye(self.me) if self.me else None]], format="csc")
        K.sort_indices()
        return K

    def factor(self, w):
        self.w = w
        K = self._assemble(w, self.reg)
        self.K_true = self._assemble(w, 0.0) if self.reg > 0 else K
        pattern = (K.indptr.tobytes(), K.indices.tobytes())
        if self.backend == "qdldl":
            import qdldl

            if self._solver is None or pattern != self._pattern:
                self._solver = qdldl.Solver(K)
                self._pattern = pattern
            else:
                self._solver.update(K)
            self._solve = self._solver.solve
            return
        import scipy.sparse.linalg as spla

        if self.backend == "nd":
            if pattern != self._pattern:
                self._perm = _nested_dissection(K)
                self._iperm = np.empty_like(self._perm)
                self._iperm[self._perm] = np.arange(len(self._perm))
                self._pattern = pattern
            p, ip = self._perm, self._iperm
            lu = spla.splu(
                K[p][:, p].tocsc(),
                permc_spec="NATURAL",
                diag_pivot_thresh=0.0,
                options=dict(SymmetricMode=True),
            )
            self._solve = lambda r: lu.solve(r[p])[ip]
        else:
            lu = spla.splu(K, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0)
            self._solve = lu.solve

    def solve(self, r1, r2, steps):
        rhs = np.concatenate([r1, r2])
        d = self._solve(rhs)
        res = rhs - self.K_true @ d
        err = _norm(res)
        for _ in range(steps):
            if err <= 1e-15 * max(_norm(rhs), 1.0):
                break
            trial = d + self._solve(res)
            res_t = rhs - self.K_true @ trial
            err_t = _norm(res_t)
            # near-singular unregularized systems can make refinement diverge
            if not err_t < err:
                break
            d, res, err = trial, res_t, err_t
        return d[: self.n], d[self.n :]


def _step_to_boundary(v, dv):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


def _nested_dissection(K) -> np.ndarray:
    import pymetis

    S = (K + K.T).tocsr()
    S.setdiag(0)
    S.eliminate_zeros()
    if S.nnz == 0:
        return np.arange(K.shape[0])
    perm, _ = pymetis.nested_dissection(pymetis.CSRAdjacency(S.indptr, S.indices))
    return np.asarray(perm, dtype=np.int64)


def _pick_backend(name):
    if name not in ("nd", "qdldl", "splu"):
        raise ValueError(f"unknown linear solver {name!r}")
    module = {"nd": "pymetis", "qdldl": "qdldl"}.get(name)
    if module:
        try:
            __import__(module)
        except ImportError:
            logger.warning("%s not installed, falling back to SuperLU", module)
            return "splu"
    return name


def solve_qp(
    problem: QuadraticProgram, settings: SolverSettings | None = None, warm_start=None, _elastic=False
) -> Solution:
    settings = settings or SolverSettings()
    t0 = time.perf_counter()
    backend = _pick_backend(settings.linear_solver)

    # cost scaling keeps the Hessian near unit size so the static
    # regularization and the tolerances mean the same thing on every problem
    cs = 1.0 / max(abs(problem.P).max() if problem.P.nnz else 0.0, _norm(problem.q), _TINY)
    scaled = QuadraticProgram(cs * problem.P, cs * problem.q, problem.A, problem.b, problem.G, problem.h)
    P, q, A, b, G, h = scaled.P, scaled.q, scaled.A, scaled.b, scaled.G, scaled.h
    n, me, mi = scaled.n_var, scaled.n_eq, scaled.n_ineq
    tol = settings.kkt_tolerance

    kkt = _KKTSystem(P, A, G, settings.regularization, backend)

    if warm_start is not None:
        x = np.array(warm_start.x, dtype=float)
        y = cs * np.array(warm_start.y, dtype=float)
        s = np.maximum(h - G @ x, 1e-2)
        z = np.maximum(cs * np.array(warm_start.z, dtype=float), 1e-2)
    else:
        kkt.factor(np.ones(mi))
        # [P A' G'; A 0 0; G 0 -I] [x; y; z] = [-q; b; h] with z eliminated
        x, y = kkt.solve(-q + G.T @ h, b, settings.refinement_steps)
        s = h - G @ x
        z = -s.copy()
        if mi:
            shift = -s.min()
            if shift >= -1e-8 * max(1.0, _norm(h)):
                s = s + 1.0 + shift
            shift = -z.min()
            if shift >= -1e-8 * max(1.0, _norm(h)):
                z = z + 1.0 + shift

    log = []
    status = Status.MAX_ITER
    stalled = False
    it = 0
    for it in range(1, settings.max_iterations + 1):
        r_d = P @ x + q + A.T @ y + G.T @ z
        r_p = A @ x - b
        r_g = G @ x + s - h
        mu = _dot(s, z) / mi if mi else 0.0

        res = kkt_residuals(scaled, x, y, z)
        if res.within(tol) and _norm(r_g) <= tol * max(1.0, _norm(h)):
            status = Status.OPTIMAL
            it -= 1
            break
        if mi and _certifies_infeasible(A, b, G, h, y, z):
            status = Status.INFEASIBLE
            it -= 1
            break

        w = z / s if mi else np.zeros(0)
        kkt.factor(w)

        def direction(r_c):
            r1 = -r_d - G.T @ ((z * r_g - r_c) / s) if mi else -r_d
            dx, dy = kkt.solve(r1, -r_p, settings.refinement_steps)
            if not mi:
                return dx, dy, np.zeros(0), np.zeros(0)
            Gdx = G @ dx
            dz = w * Gdx + (z * r_g - r_c) / s
            ds = -r_g - Gdx
            return dx, dy, dz, ds

        # predictor
        dx, dy, dz, ds = direction(s * z)
        if mi:
            a_aff = min(_step_to_boundary(s, ds), _step_to_boundary(z, dz))
            mu_aff = _dot(s + a_aff * ds, z + a_aff * dz) / mi
            sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
            # corrector
            dx, dy, dz, ds = direction(s * z + ds * dz - sigma * mu)
            a_max = min(_step_to_boundary(s, ds), _step_to_boundary(z, dz))
            alpha = min(1.0, 0.99 * a_max)
        else:
            sigma, alpha = 0.0, 1.0

        merit_now = _merit(mu, r_p, r_g, r_d)
        cand = _backtrack(P, q, A, b, G, h, (x, y, s, z), (dx, dy, ds, dz), alpha, merit_now)
        if cand is None and mi:
            # the second-order correction can point uphill in complementarity;
            # the plain centred Newton step always descends the merit
            sigma = min(max(sigma, 0.1), 0.9)
            dx, dy, dz, ds = direction(s * z - sigma * mu)
            alpha = min(1.0, 0.99 * min(_step_to_boundary(s, ds), _step_to_boundary(z, dz)))
            cand = _backtrack(P, q, A, b, G, h, (x, y, s, z), (dx, dy, ds, dz), alpha, merit_now)
        if cand is None:
            stalled = True
            it -= 1
            break
        (x, y, s, z), alpha = cand

        row = {
            "iter": it,
            "primal_res": res.primal,
            "dual_res": res.stationarity,
            "gap": res.complementarity,
            "mu": mu,
            "sigma": float(sigma),
            "alpha": float(alpha),
            "merit": float(merit_now),
        }
        log.append(row)
        if settings.verbose:
            logger.info(
                "it %3d  pres %.2e  dres %.2e  gap %.2e  mu %.2e  alpha %.3f",
                it, res.primal, res.stationarity, res.complementarity, mu, alpha,
            )
    else:
        res = kkt_residuals(scaled, x, y, z)
        if res.within(tol):
            status = Status.OPTIMAL

    if not _elastic and status is Status.MAX_ITER and mi + me and (stalled or res.primal > tol):
        if _min_violation(A, b, G, h, settings) > tol * max(1.0, _norm(b), _norm(h)):
            status = Status.INFEASIBLE

    y_out, z_out = y / cs, z / cs
    final = kkt_residuals(problem, x, y_out, z_out)
    if status is Status.OPTIMAL and not final.within(tol):
        status = Status.MAX_ITER
    sol = Solution(
        x=x,
        y=y_out,
        z=z_out,
        s=s,
        status=status,
        objective=problem.objective(x),
        residuals=final,
        iterations=it,
        wall_time=time.perf_counter() - t0,
        log=log,
    )
    if hasattr(problem, "unpack") and status is not Status.INFEASIBLE:
        sol.trajectory = problem.unpack(x)
    return sol


def min_violation_point(problem: QuadraticProgram, settings: SolverSettings | None = None, soft_eq=None):
    """Point minimizing the total constraint violation (an elastic LP).

    Every inequality may be violated; equality rows may be violated only where
    ``soft_eq`` (boolean per row, default all) allows it, so the LP is
    always feasible when the hard rows alone are consistent.
    Returns ``(x, eq_violation, ineq_violation)`` with one entry per row.
    """
    settings = settings or SolverSettings()
    A, b, G, h = problem.A, problem.b, problem.G, problem.h
    n, me, mi = A.shape[1], A.shape[0], G.shape[0]
    soft = np.ones(me, dtype=bool) if soft_eq is None else np.asarray(soft_eq, dtype=bool)
    ke = int(soft.sum())
    nv = n + mi + 2 * ke
    cost = np.r_[np.zeros(n), np.ones(mi + 2 * ke)]
    E = sp.csr_matrix((np.ones(ke), (np.flatnonzero(soft), np.arange(ke))), shape=(me, ke))
    A1 = sp.hstack([A, sp.csr_matrix((me, mi)), E, -E])
    G1 = sp.vstack([
        sp.hstack([G, -sp.eye(mi), sp.csr_matrix((mi, 2 * ke))]),
        sp.hstack([sp.csr_matrix((mi + 2 * ke, n)), -sp.eye(mi + 2 * ke)]),
    ])
    h1 = np.r_[h, np.zeros(mi + 2 * ke)]
    elastic = QuadraticProgram(sp.csc_matrix((nv, nv)), cost, A1, b, G1, h1)
    sub = SolverSettings(
        kkt_tolerance=settings.kkt_tolerance,
        max_iterations=settings.max_iterations,
        regularization=settings.regularization,
        linear_solver=settings.linear_solver,
    )
    sol = solve_qp(elastic, sub, _elastic=True)
    x = sol.x[:n]
    eq_viol = np.abs(A @ x - b)
    ineq_viol = np.maximum(G @ x - h, 0.0)
    return x, eq_viol, ineq_viol


def _min_violation(A, b, G, h, settings):
    n = A.shape[1]
    probe = QuadraticProgram(sp.csc_matrix((n, n)), np.zeros(n), A, b, G, h)
    _, ev, iv = min_violation_point(probe, settings)
    return float(ev.sum() + iv.sum())


def _merit(mu, r_p, r_g, r_d):
    return mu + _norm(r_p) + _norm(r_g) + _norm(r_d)


def _backtrack(P, q, A, b, G, h, point, step, alpha, merit_now):
    """Halve ``alpha`` until the merit does not rise; ``((x, y, s, z), alpha)`` or None."""
    while alpha >= 1e-10:
        cand = tuple(v + alpha * d for v, d in zip(point, step))
        if _merit_at(P, q, A, b, G, h, *cand) <= merit_now:
            return cand, alpha
        alpha *= 0.5
    return None


def _merit_at(P, q, A, b, G, h, x, y, s, z):
    mu = _dot(s, z) / len(s) if len(s) else 0.0
    return _merit(mu, A @ x - b, G @ x + s - h, P @ x + q + A.T @ y + G.T @ z)


def _certifies_infeasible(A, b, G, h, y, z, tol=1e-8):
    """Farkas test: A^T y + G^T z ~ 0, z >= 0 and b^T y + h^T z < 0."""
    scale = max(_norm(y), _norm(z))
    if scale < 1e6:
        return False
    yy, zz = y / scale, z / scale
    lhs = _norm(A.T @ yy + G.T @ zz)
    data = max(_norm(b), _norm(h), 1.0)
    return lhs <= tol * data and (_dot(b, yy) + _dot(h, zz)) < -1e-6 * data
