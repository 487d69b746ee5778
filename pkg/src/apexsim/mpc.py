"""Receding-horizon lateral MPC as a condensed QP over the steering moves.

The finite-horizon tracking problem — corridor bounds on Y, per-axle slip
angle limits, steering limits — is condensed onto the N steering decisions
using the stacked prediction matrices, then handed to the active-set QP
solver with a warm start shifted from the previous control cycle.

Cost convention: output deviations and steering effort are penalized at
stages k+1..k+N-1 and the terminal state at k+N carries its own quadratic
weight, so the first move is unpenalized by the effort weight. Constraint
rows pair the state at stage j with the move applied during the interval
ending at j, which defines every row on stages k+1..k+N.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from apexsim.qp import QpProblem, QpSolution, QpStatus, solve_qp
from apexsim.vehicle import IDX_PSI, IDX_Y, DiscreteModel, VehicleParams

VEHICLE_HALF_WIDTH = 1.0  # m, footprint half-width used for inflation everywhere


class FullBlockage(RuntimeError):
    """Obstacles leave less than a vehicle width of free track at some horizon step."""


def output_matrix(n_states: int) -> np.ndarray:
    """Rows selecting the tracked outputs y = [Y, psi] from the state."""
    C = np.zeros((2, n_states))
    C[0, IDX_Y] = 1.0
    C[1, IDX_PSI] = 1.0
    return C


@dataclass(frozen=True)
class MpcWeights:
    """Cost weights: terminal state (q_n), output deviation (q_y), steering effort (q_u)."""

    q_n: np.ndarray  # (n, n) PSD
    q_y: np.ndarray  # (2, 2) PSD
    q_u: float       # > 0

    def __post_init__(self):
        q_n = np.asarray(self.q_n, dtype=float)
        q_y = np.asarray(self.q_y, dtype=float)
        for name, M in (("q_n", q_n), ("q_y", q_y)):
            if np.max(np.abs(M - M.T)) > 1e-12 or np.min(np.linalg.eigvalsh(M)) < -1e-12:
                raise ValueError(f"{name} must be symmetric PSD")
        if not self.q_u > 0.0:
            raise ValueError("q_u must be > 0 for a strictly convex condensed QP")
        object.__setattr__(self, "q_n", q_n)
        object.__setattr__(self, "q_y", q_y)


def default_weights(n_states: int = 4, q_y=None, q_u: float = 0.5, terminal_scale: float = 10.0) -> MpcWeights:
    """Defaults tuned so the overtake disturbance settles in ~2 s without slip saturation."""
    q_y = np.diag([1.0, 10.0]) if q_y is None else np.asarray(q_y, dtype=float)
    C = output_matrix(n_states)
    return MpcWeights(q_n=terminal_scale * C.T @ q_y @ C, q_y=q_y, q_u=q_u)


@dataclass(frozen=True)
class Obstacle:
    """Axis-aligned box in track coordinates, optionally moving along +X."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    speed: float = 0.0  # m/s along +X

    def __post_init__(self):
        if self.x_min >= self.x_max or self.y_min >= self.y_max:
            raise ValueError("obstacle box must have positive extent")

    def at_time(self, t: float) -> tuple[float, float]:
        """X extent under constant-velocity extrapolation."""
        return self.x_min + self.speed * t, self.x_max + self.speed * t


@dataclass(frozen=True)
class CorridorConstraints:
    """Per-stage Y bounds plus the slip and steering limits of the stage rows."""

    y_min: np.ndarray  # (N,)
    y_max: np.ndarray  # (N,)
    alpha_max: float
    delta_max: float   # steering column bound

    def __post_init__(self):
        y_min = np.atleast_1d(np.asarray(self.y_min, dtype=float))
        y_max = np.atleast_1d(np.asarray(self.y_max, dtype=float))
        if y_min.shape != y_max.shape:
            raise ValueError("corridor bound arrays must match")
        if np.any(y_min >= y_max):
            raise ValueError("corridor requires y_min < y_max at every stage")
        object.__setattr__(self, "y_min", y_min)
        object.__setattr__(self, "y_max", y_max)

    @property
    def horizon(self) -> int:
        return self.y_min.shape[0]


def build_prediction(Ad: np.ndarray, Bd: np.ndarray, horizon: int) -> tuple[np.ndarray, np.ndarray]:
    """Stacked prediction x_{k+j} = Phi_j x_k + Gamma_j (delta_k..delta_{k+j-1}).

    Returns Phi (n*N, n) and block-lower-triangular Gamma (n*N, N).
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    n = Ad.shape[0]
    N = horizon
    Phi = np.zeros((n * N, n))
    Gamma = np.zeros((n * N, N))
    Ak = np.eye(n)
    # impulse responses: column j of block row i is A^(i-1-j) B
    powers = [Bd.copy()]
    for _ in range(N - 1):
        powers.append(Ad @ powers[-1])
    for i in range(1, N + 1):
        Ak = Ad @ Ak
        Phi[(i - 1) * n : i * n] = Ak
        for j in range(i):
            Gamma[(i - 1) * n : i * n, j] = powers[i - 1 - j]
    return Phi, Gamma


@dataclass(frozen=True)
class StageConstraint:
    """Rows  lo_j <= c @ x_j + e * delta_{j-1} <= hi_j  at stages j = 1..N."""

    name: str
    c: np.ndarray  # (n,) state coefficients
    e: float       # coefficient on the move applied during [j-1, j)


class ConstraintLayout:
    """Deterministic row ordering of stacked stage constraints.

    Rows are grouped spec-major: for each spec, all upper rows for stages
    1..N, then all lower rows. Provides the label <-> row-index mapping the
    warm-start shift needs.
    """

    def __init__(self, names: list[str], horizon: int):
        self.names = list(names)
        self.horizon = horizon
        self._offset = {name: 2 * horizon * i for i, name in enumerate(self.names)}

    @property
    def rows(self) -> int:
        return 2 * self.horizon * len(self.names)

    def index(self, name: str, stage: int, side: int) -> int:
        if not 1 <= stage <= self.horizon:
            raise IndexError(f"stage {stage} outside 1..{self.horizon}")
        block = 0 if side > 0 else self.horizon
        return self._offset[name] + block + (stage - 1)

    def label(self, row: int) -> tuple[str, int, int]:
        name = self.names[row // (2 * self.horizon)]
        rem = row % (2 * self.horizon)
        side = 1 if rem < self.horizon else -1
        stage = (rem % self.horizon) + 1
        return name, stage, side

    def shift(self, rows) -> list[int]:
        """Map active rows one stage earlier (receding-horizon warm start)."""
        shifted = []
        for row in rows:
            name, stage, side = self.label(int(row))
            if stage > 1:
                shifted.append(self.index(name, stage - 1, side))
        return sorted(set(shifted))


class _Condenser:
    """Caches everything about a condensed horizon that is independent of x_k."""

    def __init__(self, Ad, Bd, weights: MpcWeights, horizon: int, specs: list[StageConstraint]):
        n = Ad.shape[0]
        N = horizon
        self.n, self.N = n, N
        self.C = output_matrix(n)
        self.Phi, self.Gamma = build_prediction(Ad, Bd, N)

        Wbar = np.zeros((n * N, n * N))
        CQC = self.C.T @ weights.q_y @ self.C
        for i in range(1, N):
            Wbar[(i - 1) * n : i * n, (i - 1) * n : i * n] = CQC
        Wbar[(N - 1) * n :, (N - 1) * n :] = weights.q_n
        Ru = np.zeros((N, N))
        for i in range(1, N):
            Ru[i, i] = weights.q_u
        H = 2.0 * (self.Gamma.T @ Wbar @ self.Gamma + Ru)
        self.H = 0.5 * (H + H.T)
        self.WbarGamma = Wbar @ self.Gamma
        self.WbarPhi = Wbar @ self.Phi
        self.weights = weights

        self.specs = list(specs)
        self.layout = ConstraintLayout([s.name for s in specs], N)
        # row normals in decision space and state-feedback bases for the rhs
        Gblocks = []
        self._bases = []
        Gamma3 = self.Gamma.reshape(N, n, N)
        Phi3 = self.Phi.reshape(N, n, n)
        for s in self.specs:
            cGamma = np.einsum("i,jik->jk", s.c, Gamma3) + s.e * np.eye(N)
            base = np.einsum("i,jik->jk", s.c, Phi3)  # (N, n)
            Gblocks.append(np.vstack([cGamma, -cGamma]))
            self._bases.append(base)
        self.G = np.vstack(Gblocks) if Gblocks else np.zeros((0, N))

    def rhs(self, x0: np.ndarray, bounds: dict[str, tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
        parts = []
        for s, base in zip(self.specs, self._bases):
            lo, hi = bounds[s.name]
            offset = base @ x0
            parts.append(np.concatenate([hi - offset, offset - lo]))
        return np.concatenate(parts) if parts else np.zeros(0)

    def gradient(self, x0: np.ndarray, y_ref: np.ndarray) -> np.ndarray:
        n, N = self.n, self.N
        rbar = np.zeros(n * N)
        if N > 1:
            CQ = self.C.T @ self.weights.q_y
            for i in range(1, N):
                rbar[(i - 1) * n : i * n] = CQ @ y_ref[i - 1]
        return 2.0 * (self.WbarGamma.T @ self.Phi @ x0 - self.Gamma.T @ rbar)

    def predict(self, x0: np.ndarray, deltas: np.ndarray) -> np.ndarray:
        return (self.Phi @ x0 + self.Gamma @ deltas).reshape(self.N, self.n)


def _normalize_y_ref(y_ref, horizon: int) -> np.ndarray:
    if y_ref is None:
        return np.zeros((max(horizon - 1, 0), 2))
    y = np.asarray(y_ref, dtype=float)
    if y.ndim == 1:
        y = np.tile(y, (max(horizon - 1, 0), 1))
    if y.shape != (max(horizon - 1, 0), 2):
        raise ValueError(f"y_ref must broadcast to ({horizon - 1}, 2)")
    return y


def vehicle_stage_constraints(model: DiscreteModel, params: VehicleParams) -> list[StageConstraint]:
    """Corridor, per-axle slip, and steering rows of the 4-state lateral model."""
    n = model.Ad.shape[0]
    front = np.zeros(n)
    front[1] = params.a / model.u0  # psi_dot
    front[2] = 1.0                  # beta
    rear = np.zeros(n)
    rear[1] = -params.b / model.u0
    rear[2] = 1.0
    corridor = np.zeros(n)
    corridor[IDX_Y] = 1.0
    return [
        StageConstraint("corridor", corridor, 0.0),
        StageConstraint("slip_front", front, -1.0 / params.steer_ratio),
        StageConstraint("slip_rear", rear, 0.0),
        StageConstraint("steer", np.zeros(n), 1.0),
    ]


def _constraint_bounds(constraints: CorridorConstraints) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    N = constraints.horizon
    a = np.full(N, constraints.alpha_max)
    d = np.full(N, constraints.delta_max)
    return {
        "corridor": (constraints.y_min, constraints.y_max),
        "slip_front": (-a, a),
        "slip_rear": (-a, a),
        "steer": (-d, d),
    }


def build_qp(
    model: DiscreteModel,
    params: VehicleParams,
    weights: MpcWeights,
    constraints: CorridorConstraints,
    x0: np.ndarray,
    y_ref=None,
) -> tuple[QpProblem, ConstraintLayout]:
    """Condense the tracking problem at state ``x0`` into a dense QP."""
    x0 = np.asarray(x0, dtype=float).ravel()
    if x0.shape != (model.Ad.shape[0],):
        raise ValueError("initial state dimension mismatch")
    N = constraints.horizon
    cond = _Condenser(model.Ad, model.Bd, weights, N, vehicle_stage_constraints(model, params))
    problem = QpProblem(
        H=cond.H,
        g=cond.gradient(x0, _normalize_y_ref(y_ref, N)),
        G=cond.G,
        h=cond.rhs(x0, _constraint_bounds(constraints)),
    )
    return problem, cond.layout


@dataclass(frozen=True)
class MpcSolution:
    """Result of one receding-horizon solve."""

    deltas: np.ndarray        # (N,) steering column sequence
    states: np.ndarray        # (N, n) predicted trajectory
    feasible: bool
    solve_time: float         # s, wall clock
    status: QpStatus
    objective: float


class CondensedMpc:
    """Condensed receding-horizon solves with a shift-by-one warm start.

    Generic over the model dimension and stage-constraint set; the vehicle
    controllers wrap it with their own bound construction.
    """

    def __init__(self, Ad, Bd, weights: MpcWeights, horizon: int, specs: list[StageConstraint]):
        self.horizon = horizon
        self._cond = _Condenser(Ad, Bd, weights, horizon, specs)
        self._warm_labels: tuple[tuple[str, int, int], ...] | None = None
        self._warm_deltas: np.ndarray | None = None

    @property
    def layout(self) -> ConstraintLayout:
        return self._cond.layout

    def reset(self):
        self._warm_labels = None
        self._warm_deltas = None

    def solve(self, x0: np.ndarray, bounds: dict, y_ref=None) -> MpcSolution:
        x0 = np.asarray(x0, dtype=float).ravel()
        cond = self._cond
        problem = QpProblem(
            H=cond.H,
            g=cond.gradient(x0, _normalize_y_ref(y_ref, self.horizon)),
            G=cond.G,
            h=cond.rhs(x0, bounds),
        )
        warm = None
        if self._warm_labels is not None:
            warm = [
                cond.layout.index(name, stage, side)
                for name, stage, side in self._warm_labels
            ]
        t0 = time.perf_counter()
        sol = solve_qp(problem, warm_start=warm, warm_point=self._warm_deltas)
        elapsed = time.perf_counter() - t0
        feasible = sol.status is QpStatus.OPTIMAL
        if feasible:
            # shift the previous solution by one stage for the next cycle
            shifted = cond.layout.shift(sol.active_set)
            self._warm_labels = tuple(cond.layout.label(r) for r in shifted)
            self._warm_deltas = np.append(sol.x[1:], sol.x[-1])
        else:
            self._warm_labels = None
            self._warm_deltas = None
        deltas = sol.x if feasible else np.zeros(self.horizon)
        return MpcSolution(
            deltas=deltas,
            states=cond.predict(x0, deltas),
            feasible=feasible,
            solve_time=elapsed,
            status=sol.status,
            objective=sol.objective,
        )


class LateralMpc:
    """Receding-horizon lateral controller; holds only the warm-start cache between steps."""

    def __init__(self, model: DiscreteModel, params: VehicleParams, weights: MpcWeights, horizon: int):
        self.model = model
        self.params = params
        self.horizon = horizon
        self._mpc = CondensedMpc(
            model.Ad, model.Bd, weights, horizon, vehicle_stage_constraints(model, params)
        )

    @property
    def layout(self) -> ConstraintLayout:
        return self._mpc.layout

    def reset(self):
        self._mpc.reset()

    def step(self, x0: np.ndarray, constraints: CorridorConstraints, y_ref=None) -> MpcSolution:
        if constraints.horizon != self.horizon:
            raise ValueError("corridor horizon mismatch")
        return self._mpc.solve(x0, _constraint_bounds(constraints), y_ref)


CORRIDOR_SAFETY_MARGIN = 0.3  # m, clearance kept beyond the footprint half-width


def obstacle_to_corridor(
    track_y: tuple[float, float],
    obstacles,
    x_now: float,
    u0: float,
    dt: float,
    horizon: int,
    params: VehicleParams,
    t_now: float = 0.0,
    half_width: float = VEHICLE_HALF_WIDTH,
    safety_margin: float = CORRIDOR_SAFETY_MARGIN,
) -> CorridorConstraints:
    """Convert obstacle boxes into per-stage Y bounds for the CG.

    ``track_y`` are CG-frame track bounds (already shrunk by the footprint
    half-width). Obstacle X extents are inflated by u0*dt per side so that
    inter-sample motion cannot clip a corner, Y extents by the half-width
    plus a safety margin so that riding the bound still leaves physical
    clearance for inter-sample transients. The passing side of each obstacle
    is the one with the larger free width.
    """
    lo = np.full(horizon, track_y[0], dtype=float)
    hi = np.full(horizon, track_y[1], dtype=float)
    x_pred = x_now + u0 * dt * np.arange(1, horizon + 1)
    t_pred = t_now + dt * np.arange(1, horizon + 1)
    for obs in obstacles:
        y_lo = obs.y_min - half_width - safety_margin
        y_hi = obs.y_max + half_width + safety_margin
        free_above = track_y[1] - y_hi
        free_below = y_lo - track_y[0]
        pass_above = free_above >= free_below
        for i in range(horizon):
            ox_lo, ox_hi = obs.at_time(t_pred[i])
            if ox_lo - u0 * dt <= x_pred[i] <= ox_hi + u0 * dt:
                if pass_above:
                    lo[i] = max(lo[i], y_hi)
                else:
                    hi[i] = min(hi[i], y_lo)
    if np.any(lo >= hi):
        step = int(np.argmax(lo >= hi))
        raise FullBlockage(f"no free corridor of vehicle width at horizon step {step + 1}")
    return CorridorConstraints(
        y_min=lo, y_max=hi, alpha_max=params.alpha_max, delta_max=params.delta_max
    )
