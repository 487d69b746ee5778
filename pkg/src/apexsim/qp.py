"""Dense primal active-set solver for strictly convex inequality-constrained QPs.

    minimize   0.5 x' H x + g' x
    subject to G x <= h

H must be symmetric positive definite. The method iterates a working set of
constraints held at equality: from a feasible point it steps toward the
equality-constrained minimizer, adds the blocking row when one limits the
step, and drops the row with the most negative multiplier at a working-set
optimum. Feasible starting points come either from a warm-started working
set (receding-horizon reuse) or from a built-in phase-1 that minimizes the
maximum violation. Tie-breaking is by lowest row index throughout, so the
solver is deterministic.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

FEAS_TOL = 1e-9          # constraint satisfaction tolerance
MULT_TOL = 1e-10         # dual feasibility tolerance
STEP_TOL = 1e-11         # "no move" threshold on the primal step
INFEASIBILITY_TOL = 1e-8  # phase-1 residual above which the QP is declared infeasible
_PHASE1_MU = 1e-8        # curvature of the smoothed phase-1 LP


class NotPositiveDefiniteError(ValueError):
    """Cholesky factorization of H failed."""


class QpStatus(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    MAX_ITERATIONS = "max_iterations"


@dataclass(frozen=True)
class QpProblem:
    """Strictly convex QP data. Rows of G with identical normals are merged
    at construction, keeping the tightest bound (lowest index wins ties)."""

    H: np.ndarray
    g: np.ndarray
    G: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        H = np.asarray(self.H, dtype=float)
        g = np.asarray(self.g, dtype=float).ravel()
        G = np.asarray(self.G, dtype=float).reshape(-1, H.shape[0])
        h = np.asarray(self.h, dtype=float).ravel()
        n = H.shape[0]
        if H.shape != (n, n) or g.shape != (n,):
            raise ValueError("inconsistent H/g dimensions")
        if G.shape[0] != h.shape[0]:
            raise ValueError("inconsistent G/h dimensions")
        if n < 1:
            raise ValueError("need at least one variable")
        if np.max(np.abs(H - H.T), initial=0.0) > 1e-10:
            raise ValueError("H must be symmetric within 1e-10")
        H = 0.5 * (H + H.T)
        G, h = _merge_duplicate_rows(G, h)
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "h", h)

    @property
    def n(self) -> int:
        return self.H.shape[0]

    @property
    def m(self) -> int:
        return self.G.shape[0]

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ self.H @ x + self.g @ x)


def _merge_duplicate_rows(G: np.ndarray, h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    seen: dict[bytes, int] = {}
    keep: list[int] = []
    bounds: list[float] = []
    for i in range(G.shape[0]):
        key = G[i].tobytes()
        if key in seen:
            j = seen[key]
            bounds[j] = min(bounds[j], h[i])
        else:
            seen[key] = len(keep)
            keep.append(i)
            bounds.append(h[i])
    return G[keep].copy(), np.array(bounds)


@dataclass(frozen=True)
class QpSolution:
    x: np.ndarray
    objective: float
    active_set: tuple[int, ...]
    multipliers: np.ndarray  # aligned with active_set
    iterations: int
    status: QpStatus


@dataclass(frozen=True)
class KktReport:
    stationarity: float
    primal_feasibility: float
    complementarity: float

    @property
    def max_residual(self) -> float:
        return max(self.stationarity, self.primal_feasibility, self.complementarity)


class _Factor:
    """Cholesky factor of H with reusable triangular inverses (H solved via GEMMs).

    Diagonal Hessians (the phase-1 problem) are solved by elementwise
    division instead.
    """

    def __init__(self, H: np.ndarray):
        diag = np.diag(H)
        if np.count_nonzero(H - np.diag(diag)) == 0:
            if np.min(diag) <= 0.0:
                raise NotPositiveDefiniteError("Hessian is not positive definite")
            self._diag = diag
            self._Linv = None
            return
        self._diag = None
        try:
            L = np.linalg.cholesky(H)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefiniteError("Hessian is not positive definite") from exc
        self._Linv = np.linalg.inv(L)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        if self._diag is not None:
            if rhs.ndim == 1:
                return rhs / self._diag
            return rhs / self._diag[:, None]
        return self._Linv.T @ (self._Linv @ rhs)


class _ActiveSetCore:
    """Primal active-set iterations from a feasible point (shared by both phases).

    Each iteration solves the full KKT system of the working set for the
    equality-constrained minimizer itself (not a direction), and a full step
    assigns that point exactly, so a repeated solve at an unchanged working
    set returns a bitwise-zero step and termination testing is robust to
    ill-conditioned Hessians.
    """

    def __init__(self, H, g, G, h, max_iter, on_iterate=None, early_stop=None):
        self.H, self.g, self.G, self.h = H, g, G, h
        self.fac = _Factor(H)  # positive-definiteness gate + unconstrained solves
        self.max_iter = max_iter
        self.on_iterate = on_iterate
        self.early_stop = early_stop  # phase-1 quits as soon as a point qualifies
        self.iterations = 0

    def eqp_point(self, W: list[int]) -> np.ndarray | None:
        x, _ = self._eqp(W)
        return x

    def _eqp(self, W: list[int]):
        """Minimizer and multipliers subject to G_W x = h_W; (None, None) when
        the KKT system is singular."""
        if not W:
            return -self.fac.solve(self.g), np.zeros(0)
        n, k = self.H.shape[0], len(W)
        KKT = np.zeros((n + k, n + k))
        KKT[:n, :n] = self.H
        KKT[:n, n:] = self.G[W].T
        KKT[n:, :n] = self.G[W]
        rhs = np.concatenate([-self.g, self.h[W]])
        try:
            sol = np.linalg.solve(KKT, rhs)
        except np.linalg.LinAlgError:
            return None, None
        return sol[:n], sol[n:]

    def run(
        self, x: np.ndarray, W: list[int], bland: bool = False
    ) -> tuple[np.ndarray, list[int], np.ndarray, QpStatus]:
        G, h = self.G, self.h
        in_working = np.zeros(G.shape[0], dtype=bool)
        in_working[W] = True
        lam = np.zeros(len(W))
        # degenerate vertices can cycle under the most-negative-multiplier
        # rule; after this many iterations without primal progress we switch
        # to Bland-style lowest-index rules
        stall_limit = 0 if bland else G.shape[0] + self.H.shape[0] + 2
        stalled = 0
        while self.iterations < self.max_iter:
            self.iterations += 1
            x_eqp, lam = self._eqp(W)
            if x_eqp is None:  # singular working set: back out the newest row
                in_working[W.pop()] = False
                stalled += 1
                continue
            if self.on_iterate is not None:
                self.on_iterate(x)
            p = x_eqp - x

            if np.max(np.abs(p), initial=0.0) <= STEP_TOL * (1.0 + np.max(np.abs(x), initial=0.0)):
                if lam.size == 0 or np.min(lam) >= -MULT_TOL:
                    return x, W, lam, QpStatus.OPTIMAL
                if stalled > stall_limit:
                    drop = next(k for k in range(len(W)) if lam[k] < -MULT_TOL)
                else:
                    drop = int(np.argmin(lam))  # most negative multiplier, first on ties
                in_working[W.pop(drop)] = False
                stalled += 1
                continue

            Gp = G @ p
            candidates = (Gp > 1e-13 * np.max(np.abs(Gp))) & ~in_working
            if np.any(candidates):
                ratios = np.full(G.shape[0], np.inf)
                slack = np.maximum(h - G @ x, 0.0)
                ratios[candidates] = slack[candidates] / Gp[candidates]
                best = float(np.min(ratios))
                if stalled > stall_limit:
                    # group numerically tied ratios and take the lowest index
                    near = np.nonzero(ratios <= best + 1e-10 * (1.0 + best))[0]
                    blocking = int(near[0])
                else:
                    blocking = int(np.argmin(ratios))  # first minimum on exact ties
                alpha = min(1.0, max(best, 0.0))
            else:
                blocking, alpha = -1, 1.0
            stalled = stalled + 1 if alpha <= 1e-14 else 0
            if alpha >= 1.0:
                x = x_eqp  # exact landing: the next solve repeats bitwise
            else:
                x = x + alpha * p
            if self.early_stop is not None and self.early_stop(x):
                return x, W, lam, QpStatus.OPTIMAL
            if alpha < 1.0 and blocking >= 0:
                W.append(blocking)
                W.sort()
                in_working[blocking] = True
        return x, W, lam, QpStatus.MAX_ITERATIONS


def _independent_rows(G: np.ndarray, rows: list[int]) -> list[int]:
    """Greedy lowest-index-first subset of rows with full row rank."""
    kept: list[int] = []
    basis: list[np.ndarray] = []
    for i in rows:
        v = G[i].astype(float)
        for b in basis:
            v = v - (v @ b) * b
        nrm = np.linalg.norm(v)
        if nrm > 1e-10 * (1.0 + np.linalg.norm(G[i])):
            kept.append(i)
            basis.append(v / nrm)
    return kept


def _phase1(G: np.ndarray, h: np.ndarray, x_start: np.ndarray, max_iter: int):
    """Minimize the worst violation: min t s.t. Gx - t <= h (smoothed by mu).

    Returns (x, None) with a feasible x, or (x_best, residual) when the
    constraints are inconsistent.
    """
    m, n = G.shape
    viol = G @ x_start - h
    t0 = float(np.max(viol, initial=0.0))
    if t0 <= FEAS_TOL:
        return x_start, None

    Hp = _PHASE1_MU * np.eye(n + 1)
    gp = np.concatenate([-_PHASE1_MU * x_start, [1.0]])
    Gp = np.zeros((m + 1, n + 1))
    Gp[:m, :n] = G
    Gp[:m, n] = -1.0
    Gp[m, n] = -1.0  # t >= -1 keeps the smoothed LP bounded and well scaled
    hp = np.concatenate([h, [1.0]])

    z0 = np.concatenate([x_start, [t0 + 1e-12]])
    # any point with t <= 0 is good enough: quit as soon as one appears
    # rather than walking on to the minimum-violation vertex
    core = _ActiveSetCore(Hp, gp, Gp, hp, max_iter, early_stop=lambda z: z[n] <= 0.5 * FEAS_TOL)
    z, _, _, _ = core.run(z0, [int(np.argmax(viol))])
    x = z[:n]
    residual = float(np.max(G @ x - h, initial=0.0))
    if residual <= INFEASIBILITY_TOL:
        return x, None
    return x, residual


def solve_qp(
    problem: QpProblem,
    warm_start=None,
    warm_point=None,
    max_iterations: int | None = None,
    on_iterate=None,
) -> QpSolution:
    """Solve the QP, optionally warm-started from a previous solve.

    ``warm_start`` is an iterable of constraint row indices to seed the
    working set with; ``warm_point`` a primal candidate (the shifted previous
    solution in receding-horizon use) that skips phase-1 when feasible.
    Raises NotPositiveDefiniteError when H has no Cholesky factor; infeasible
    problems and iteration exhaustion are reported through the status.
    """
    H, g, G, h = problem.H, problem.g, problem.G, problem.h
    n, m = problem.n, problem.m
    max_iter = max_iterations if max_iterations is not None else 50 * (n + m)
    core = _ActiveSetCore(H, g, G, h, max_iter, on_iterate=on_iterate)

    x0 = None
    W0: list[int] = []
    if warm_start is not None:
        W = _independent_rows(G, sorted({int(i) for i in warm_start if 0 <= int(i) < m}))
        xw = core.eqp_point(W)
        if xw is not None and np.max(G @ xw - h, initial=0.0) <= FEAS_TOL:
            x0, W0 = xw, W

    if x0 is None and warm_point is not None:
        xp = np.asarray(warm_point, dtype=float).ravel()
        if xp.shape == (n,) and np.max(G @ xp - h, initial=0.0) <= FEAS_TOL:
            x0 = xp
            active = np.nonzero(np.abs(G @ xp - h) <= 10 * FEAS_TOL)[0]
            W0 = _independent_rows(G, list(active))

    if x0 is None:
        x_uc = core.eqp_point([])
        if np.max(G @ x_uc - h, initial=0.0) <= FEAS_TOL:
            x0, W0 = x_uc, []
        else:
            start = np.asarray(warm_point, dtype=float).ravel() if warm_point is not None else x_uc
            if start.shape != (n,):
                start = x_uc
            x1, residual = _phase1(G, h, start, max_iter)
            if residual is not None and warm_point is not None:
                # a bad warm point can strand phase-1; retry from scratch
                x1, residual = _phase1(G, h, x_uc, max_iter)
            if residual is not None:
                return QpSolution(
                    x=x1,
                    objective=problem.objective(x1),
                    active_set=(),
                    multipliers=np.zeros(0),
                    iterations=max_iter,
                    status=QpStatus.INFEASIBLE,
                )
            x0 = x1
            active = [i for i in range(m) if abs(G[i] @ x0 - h[i]) <= 10 * FEAS_TOL]
            W0 = _independent_rows(G, active)

    x, W, lam, status = core.run(np.array(x0), list(W0))
    if status is QpStatus.MAX_ITERATIONS:
        # rare numerical cycling: one clean retry under lowest-index rules
        core = _ActiveSetCore(H, g, G, h, max_iter, on_iterate=on_iterate)
        x, W, lam, status = core.run(np.array(x0), list(W0), bland=True)
    keep = [k for k in range(len(W)) if lam[k] > 0.0] if status is QpStatus.OPTIMAL else range(len(W))
    active = tuple(W[k] for k in keep)
    multipliers = np.array([max(lam[k], 0.0) for k in keep]) if len(lam) else np.zeros(0)
    return QpSolution(
        x=x,
        objective=problem.objective(x),
        active_set=active,
        multipliers=multipliers,
        iterations=core.iterations,
        status=status,
    )


def check_kkt(problem: QpProblem, solution: QpSolution) -> KktReport:
    """Stationarity / primal feasibility / complementarity residuals of a solution."""
    if solution.status is not QpStatus.OPTIMAL:
        raise ValueError("KKT check requires an optimal solution")
    x = solution.x
    grad = problem.H @ x + problem.g
    if solution.active_set:
        grad = grad + problem.G[list(solution.active_set)].T @ solution.multipliers
    slack = problem.G @ x - problem.h
    comp = 0.0
    for idx, lam in zip(solution.active_set, solution.multipliers):
        comp = max(comp, abs(lam * slack[idx]))
    return KktReport(
        stationarity=float(np.max(np.abs(grad), initial=0.0)),
        primal_feasibility=float(np.max(slack, initial=0.0)),
        complementarity=comp,
    )
