"""Transcription of the layer thermal optimal control problem into a sparse QP.

Knots ``k = 0..N-1`` carry a state ``T_k``, an input ``u_k`` held over the
step ``[t_k, t_k + dt_k]`` and a phase tag.  Consecutive knots are linked by
an implicit Euler step::

    (I - dt_k A) T_{k+1} - T_k - dt_k B u_k = dt_k e

Decision vector layout::

    [T_0 .. T_{N-1} | u_k for build knots k | w_0 .. w_{N-1}]

The ``w_k`` are free auxiliaries standing in for the mask mean at knot ``k``.
Minimizing ``dt_k / N_mu * sum_{i in mask} (T_ki - w_k)^2`` over ``w_k``
recovers ``0.5 T_k^T Q T_k dt_k`` exactly, so the dense rank-one part of the
variance weight never enters the Hessian.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .inputs import InputMap
from .objective import MaskVector, VarianceWeight
from .solver import QuadraticProgram
from .transport import LinearDynamics


class InfeasibleProblemError(ValueError):
    """The constraints cannot be met whatever the inputs; ``family`` names the culprit."""

    def __init__(self, message: str, family: str):
        super().__init__(message)
        self.family = family


@dataclass(frozen=True, eq=False)
class Schedule:
    """Fixed timesteps and build/cool tags for ``N`` knots over one or more cycles."""

    dt: np.ndarray
    build: np.ndarray
    cycle: np.ndarray = None
    optimize_time: bool = False

    def __post_init__(self):
        dt = np.atleast_1d(np.asarray(self.dt, dtype=float))
        build = np.atleast_1d(np.asarray(self.build, dtype=bool))
        cycle = np.zeros(len(dt), dtype=int) if self.cycle is None else np.asarray(self.cycle, dtype=int)
        if not (len(dt) == len(build) == len(cycle)) or len(dt) == 0:
            raise ValueError("dt, build and cycle must be nonempty and equally long")
        if np.any(dt <= 0):
            raise ValueError("timesteps must be positive")
        if cycle[0] != 0 or np.any(np.diff(cycle) < 0) or np.any(np.diff(cycle) > 1):
            raise ValueError("cycles must be numbered 0, 1, ... in knot order")
        for c in np.unique(cycle):
            tags = build[cycle == c]
            if np.any(np.diff(tags.astype(int)) > 0):
                raise ValueError(f"cycle {c}: build knots must precede cool knots")
        object.__setattr__(self, "dt", dt)
        object.__setattr__(self, "build", build)
        object.__setattr__(self, "cycle", cycle)

    @classmethod
    def uniform(cls, build_steps: int, dt: float, cool_steps: int = 0, cycles: int = 1) -> "Schedule":
        per = build_steps + cool_steps
        build = np.tile(np.r_[np.ones(build_steps, bool), np.zeros(cool_steps, bool)], cycles)
        return cls(dt=np.full(per * cycles, float(dt)), build=build, cycle=np.repeat(np.arange(cycles), per))

    @property
    def N(self) -> int:
        return len(self.dt)

    @property
    def n_cycles(self) -> int:
        return int(self.cycle[-1]) + 1

    @property
    def times(self) -> np.ndarray:
        """Knot times starting at 0."""
        return np.r_[0.0, np.cumsum(self.dt[:-1])]

    @property
    def build_knots(self) -> np.ndarray:
        return np.flatnonzero(self.build)

    @property
    def fixed_step(self) -> bool:
        return bool(np.all(self.dt == self.dt[0]))

    def final_build_knots(self) -> np.ndarray:
        """Last build knot of every cycle that has one."""
        out = []
        for c in range(self.n_cycles):
            ks = np.flatnonzero((self.cycle == c) & self.build)
            if len(ks):
                out.append(ks[-1])
        return np.asarray(out, dtype=int)


@dataclass(frozen=True)
class MeltLimits:
    solidus: float = 1658.0  # K
    liquidus: float = 1723.0  # K

    def __post_init__(self):
        if self.solidus > self.liquidus:
            raise ValueError("solidus must not exceed liquidus")


@dataclass(eq=False)
class Trajectory:
    states: np.ndarray  # (N, n) K
    inputs: np.ndarray  # (N, m) W
    dt: np.ndarray
    build: np.ndarray

    def __post_init__(self):
        if not (len(self.states) == len(self.inputs) == len(self.dt) == len(self.build)):
            raise ValueError("trajectory arrays must share the knot count")


class StepOperator:
    """Implicit Euler step for one fixed ``dt``.

    ``(I - dt A) T_next = T + dt (B u + e)``; equivalently
    ``T_next = A_d T + B_d u + e_d`` with the matrices from :meth:`explicit`.
    """

    def __init__(self, dyn: LinearDynamics, imap: InputMap | None, dt: float):
        if not dt > 0:
            raise ValueError("dt must be positive")
        self.dt = float(dt)
        self.dyn = dyn
        self.B = None if imap is None else imap.B
        n = dyn.n
        self.M = (sp.eye(n) - self.dt * dyn.A).tocsc()
        diag = np.abs(self.M.diagonal())
        off = np.asarray(abs(self.M).sum(axis=1)).ravel() - diag
        if np.any(diag <= off):
            raise ValueError("I - dt*A is not strictly diagonally dominant; dynamics matrix is malformed")
        self._lu = spla.splu(self.M)
        self._forcing = self.dt * dyn.e

    def step(self, T, u=None):
        rhs = np.asarray(T, dtype=float) + self._forcing
        if u is not None:
            rhs = rhs + self.dt * (self.B @ u)
        return self._lu.solve(rhs)

    def rows(self):
        """Coefficient blocks ``(on T_next, on T, on u, rhs)`` of one dynamics row block."""
        n = self.dyn.n
        Bu = None if self.B is None else -self.dt * self.B
        return self.M, -sp.eye(n, format="csc"), Bu, self._forcing.copy()

    def explicit(self):
        """Dense ``A_d, B_d, e_d``; only sensible for small meshes."""
        Ad = self._lu.solve(np.eye(self.dyn.n))
        Bd = None if self.B is None else self._lu.solve(self.dt * self.B.toarray())
        return Ad, Bd, self._lu.solve(self._forcing)


def discretize(dyn: LinearDynamics, imap: InputMap | None, dt: float) -> StepOperator:
    return StepOperator(dyn, imap, dt)


def hermite_simpson_defect(f, x_k, u_k, x_next, u_next, dt):
    """Collocation defect of the cubic Hermite interpolant between two knots.

    ``f(x, u)`` returns the state derivative.  The defect vanishes when the
    cubic through the endpoint values and slopes obeys the dynamics at the
    interval midpoint.
    """
    x_k = np.asarray(x_k, dtype=float)
    x_next = np.asarray(x_next, dtype=float)
    f_k = np.asarray(f(x_k, u_k), dtype=float)
    f_next = np.asarray(f(x_next, u_next), dtype=float)
    x_mid = 0.5 * (x_k + x_next) + dt / 8.0 * (f_k - f_next)
    u_mid = None if u_k is None else 0.5 * (np.asarray(u_k, dtype=float) + np.asarray(u_next, dtype=float))
    f_mid = np.asarray(f(x_mid, u_mid), dtype=float)
    return x_next - x_k - dt / 6.0 * (f_k + 4.0 * f_mid + f_next)


@dataclass(eq=False)
class QpProblem(QuadraticProgram):
    n: int = 0
    m: int = 0
    schedule: Schedule = None
    mask: MaskVector = None
    eq_families: list = field(default_factory=list)  # (name, start, stop)
    ineq_families: list = field(default_factory=list)

    @property
    def N(self) -> int:
        return self.schedule.N

    @property
    def state_slice(self) -> slice:
        return slice(0, self.N * self.n)

    @property
    def input_slice(self) -> slice:
        start = self.N * self.n
        return slice(start, start + len(self.schedule.build_knots) * self.m)

    @property
    def mean_slice(self) -> slice:
        return slice(self.input_slice.stop, self.n_var)

    def unpack(self, x) -> Trajectory:
        states = x[self.state_slice].reshape(self.N, self.n).copy()
        inputs = np.zeros((self.N, self.m))
        inputs[self.schedule.build_knots] = x[self.input_slice].reshape(-1, self.m)
        return Trajectory(states, inputs, self.schedule.dt.copy(), self.schedule.build.copy())

    def pack(self, traj: Trajectory) -> np.ndarray:
        means = traj.states[:, self.mask.mu].mean(axis=1)
        return np.concatenate(
            [traj.states.ravel(), traj.inputs[self.schedule.build_knots].ravel(), means]
        )

    def family(self, kind: str, row: int) -> str:
        fams = self.eq_families if kind == "eq" else self.ineq_families
        for name, lo, hi in fams:
            if lo <= row < hi:
                return name
        raise IndexError(row)


def assemble_qp(
    dyn: LinearDynamics,
    imap: InputMap,
    weight: VarianceWeight,
    mask: MaskVector,
    limits: MeltLimits,
    schedule: Schedule,
    T_init,
) -> QpProblem:
    if schedule.optimize_time:
        raise ValueError(
            "free timesteps make the problem nonconvex; the QP path needs fixed dt per knot"
        )
    n, m, N = dyn.n, imap.m, schedule.N
    T_init = np.asarray(T_init, dtype=float)
    if T_init.shape != (n,) or mask.n != n or imap.n != n:
        raise ValueError("state, mask and input map dimensions disagree")
    if weight.mask is not mask and not np.array_equal(weight.mask.mu, mask.mu):
        raise ValueError("variance weight was built for a different mask")
    off = mask.off_ids
    on = mask.ids
    if np.any(T_init[off] > limits.solidus):
        bad = off[np.argmax(T_init[off])]
        raise InfeasibleProblemError(f"initial state violates the no-melt limit at voxel {bad}", "no_melt")
    finals = schedule.final_build_knots()
    if len(finals) and finals[0] == 0 and np.any(T_init[on] < limits.liquidus):
        raise InfeasibleProblemError(
            "full-melt required at the initial knot but the initial state is below liquidus", "full_melt"
        )

    bk = schedule.build_knots
    nb = len(bk)
    u_col = {int(k): N * n + j * m for j, k in enumerate(bk)}
    w0 = N * n + nb * m
    n_var = w0 + N
    dt = schedule.dt
    Nmu = mask.count

    # Hessian of the lifted variance cost
    rows, cols, vals = [], [], []
    for k in range(N):
        c = 2.0 * dt[k] / Nmu
        t_ids = k * n + on
        rows += [t_ids, t_ids, np.full(Nmu, w0 + k), [w0 + k]]
        cols += [t_ids, np.full(Nmu, w0 + k), t_ids, [w0 + k]]
        vals += [np.full(Nmu, c), np.full(Nmu, -c), np.full(Nmu, -c), [c * Nmu]]
    P = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n_var, n_var)
    ).tocsc()

    # equalities
    blocks, rhs, eq_fam = [], [], []
    blocks.append(sp.hstack([sp.eye(n), sp.csr_matrix((n, n_var - n))]))
    rhs.append(T_init)
    eq_fam.append(("initial_state", 0, n))
    ops = {}
    dyn_rows = []
    for k in range(N - 1):
        h = float(dt[k])
        if h not in ops:
            ops[h] = discretize(dyn, imap, h)
        M, negI, negB, forcing = ops[h].rows()
        blk = [(M, (k + 1) * n), (negI, k * n)]
        if schedule.build[k]:
            blk.append((negB, u_col[k]))
        coo = []
        for mat, c0 in blk:
            mc = mat.tocoo()
            coo.append((mc.row, mc.col + c0, mc.data))
        rr = np.concatenate([c[0] for c in coo])
        cc = np.concatenate([c[1] for c in coo])
        vv = np.concatenate([c[2] for c in coo])
        dyn_rows.append(sp.csr_matrix((vv, (rr, cc)), shape=(n, n_var)))
        rhs.append(forcing)
    if dyn_rows:
        blocks.extend(dyn_rows)
        eq_fam.append(("dynamics", n, n * N))
    n_eq = n * N
    ineq_power = None
    if nb:
        pr = np.repeat(np.arange(nb), m)
        pc = N * n + np.arange(nb * m)
        S = sp.csr_matrix((np.ones(nb * m), (pr, pc)), shape=(nb, n_var))
        if imap.fixed_power:
            blocks.append(S)
            rhs.append(np.full(nb, imap.p_max))
            eq_fam.append(("total_power", n_eq, n_eq + nb))
            n_eq += nb
        else:
            ineq_power = S
    A = sp.vstack(blocks).tocsr()
    b = np.concatenate(rhs)

    # inequalities
    g_blocks, h_vals, in_fam = [], [], []
    cursor = 0
    if len(off):
        r = np.arange(N * len(off))
        c = (np.arange(N)[:, None] * n + off[None, :]).ravel()
        g_blocks.append(sp.csr_matrix((np.ones(len(r)), (r, c)), shape=(len(r), n_var)))
        h_vals.append(np.full(len(r), limits.solidus))
        in_fam.append(("no_melt", cursor, cursor + len(r)))
        cursor += len(r)
    if len(finals) and len(on):
        c = (finals[:, None] * n + on[None, :]).ravel()
        r = np.arange(len(c))
        g_blocks.append(sp.csr_matrix((-np.ones(len(c)), (r, c)), shape=(len(c), n_var)))
        h_vals.append(np.full(len(c), -limits.liquidus))
        in_fam.append(("full_melt", cursor, cursor + len(c)))
        cursor += len(c)
    if nb:
        r = np.arange(nb * m)
        g_blocks.append(sp.csr_matrix((-np.ones(nb * m), (r, N * n + r)), shape=(nb * m, n_var)))
        h_vals.append(np.zeros(nb * m))
        in_fam.append(("input_nonnegative", cursor, cursor + nb * m))
        cursor += nb * m
    if ineq_power is not None:
        g_blocks += [ineq_power, -ineq_power]
        h_vals += [np.full(nb, imap.p_max), np.full(nb, -imap.p_min)]
        in_fam.append(("total_power_bounds", cursor, cursor + 2 * nb))
        cursor += 2 * nb
    G = sp.vstack(g_blocks).tocsr() if g_blocks else sp.csr_matrix((0, n_var))
    h_vec = np.concatenate(h_vals) if h_vals else np.zeros(0)

    return QpProblem(
        P=P,
        q=np.zeros(n_var),
        A=A,
        b=b,
        G=G,
        h=h_vec,
        n=n,
        m=m,
        schedule=schedule,
        mask=mask,
        eq_families=eq_fam,
        ineq_families=in_fam,
    )


def write_qp(problem: QuadraticProgram, path) -> None:
    """Plain-text QP dump for cross-checking with external solvers.

    Format (0-based triplets, P upper triangle only)::

        # min 0.5 x'Px + q'x  s.t.  A x = b,  G x <= h
        dims <n_var> <n_eq> <n_ineq>
        P <nnz>      then nnz lines "i j v"
        q <n_var>    then one value per line
        A <nnz> / b <n_eq> / G <nnz> / h <n_ineq>   likewise
    """
    def triplets(f, name, M):
        M = sp.coo_matrix(M)
        f.write(f"{name} {M.nnz}\n")
        order = np.lexsort((M.col, M.row))
        for i, j, v in zip(M.row[order], M.col[order], M.data[order]):
            f.write(f"{int(i)} {int(j)} {float(v)!r}\n")

    def vector(f, name, v):
        f.write(f"{name} {len(v)}\n")
        for x in v:
            f.write(f"{float(x)!r}\n")

    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("# min 0.5 x'Px + q'x  s.t.  A x = b,  G x <= h\n")
        f.write(f"dims {problem.n_var} {problem.n_eq} {problem.n_ineq}\n")
        triplets(f, "P", sp.triu(problem.P))
        vector(f, "q", problem.q)
        triplets(f, "A", problem.A)
        vector(f, "b", problem.b)
        triplets(f, "G", problem.G)
        vector(f, "h", problem.h)


def read_qp(path) -> QuadraticProgram:
    with open(path, encoding="utf-8") as f:
        lines = [ln for ln in f.read().splitlines() if ln and not ln.startswith("#")]
    pos = 0

    def header(name):
        nonlocal pos
        key, *nums = lines[pos].split()
        if key != name:
            raise ValueError(f"expected section {name!r}, found {key!r} on data line {pos + 1}")
        pos += 1
        return [int(v) for v in nums]

    n, me, mi = header("dims")

    def triplets(name, shape):
        nonlocal pos
        (nnz,) = header(name)
        data = np.array([ln.split() for ln in lines[pos : pos + nnz]], dtype=float).reshape(-1, 3)
        pos += nnz
        return sp.csr_matrix((data[:, 2], (data[:, 0].astype(int), data[:, 1].astype(int))), shape=shape)

    def vector(name):
        nonlocal pos
        (k,) = header(name)
        v = np.array(lines[pos : pos + k], dtype=float)
        pos += k
        return v

    Pu = triplets("P", (n, n))
    P = Pu + sp.triu(Pu, k=1).T
    q = vector("q")
    A = triplets("A", (me, n))
    b = vector("b")
    G = triplets("G", (mi, n))
    h = vector("h")
    return QuadraticProgram(P, q, A, b, G, h)
