"""Tube-based MPC over the steering-augmented uncertain model.

The 4-state lateral model is augmented with a first-order transport-delay
state and a first-order motor-lag state; the uncertain response ranges put
the discretized system inside a convex hull of vertex models. A central MPC
runs on the vertex mean with constraints tightened by the disturbance
invariant set of the ancillary pole-placement feedback, and the applied
command is the central move plus the ancillary correction. The nominal state
evolves open loop: it never sees measurements.

A pure transport delay is infinite-dimensional; the single augmented delay
state is a first-order approximation with time constant equal to the delay
(monotone step response, unlike a Pade(1,1) stage).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from apexsim.actuation import DEFAULT_DELAY_RANGE, DEFAULT_LAG_RANGE
from apexsim.mpc import CondensedMpc, CorridorConstraints, MpcSolution, MpcWeights, StageConstraint, default_weights
from apexsim.sets import (
    EmptyResultError,
    FeedbackGain,
    HalfspaceSet,
    UncertainModel,
    Zonotope,
    clipped_poles,
    contracted_poles,
    disturbance_set,
    invariant_set,
    pole_place,
    support,
)
from apexsim.vehicle import IDX_Y, LinearModel, VehicleParams, zoh_matrices

AUG_DIM = 6
IDX_LAG_STATE = 4    # x_delta: column angle entering the vehicle block
IDX_DELAY_STATE = 5  # transport-delay approximation state


@dataclass(frozen=True)
class AugmentedModel:
    """Vertex family of the 6-state model [psi, psi_dot, beta, Y, x_delta, x_delay]."""

    model: UncertainModel
    dt: float
    u0: float
    lag_range: tuple[float, float]
    delay_range: tuple[float, float]


def _augmented_continuous(lin: LinearModel, lag: float, delay: float):
    A = np.zeros((AUG_DIM, AUG_DIM))
    A[:4, :4] = lin.A
    A[:4, IDX_LAG_STATE] = lin.B  # lag state is the angle the vehicle sees
    A[IDX_LAG_STATE, IDX_LAG_STATE] = -1.0 / lag
    A[IDX_LAG_STATE, IDX_DELAY_STATE] = 1.0 / lag
    A[IDX_DELAY_STATE, IDX_DELAY_STATE] = -1.0 / delay
    B = np.zeros(AUG_DIM)
    B[IDX_DELAY_STATE] = 1.0 / delay
    return A, B


def build_augmented_model(
    lin: LinearModel,
    lag_range=DEFAULT_LAG_RANGE,
    delay_range=DEFAULT_DELAY_RANGE,
    dt: float = 0.05,
    vertex_count: int = 4,
) -> AugmentedModel:
    """Discretize the actuator-augmented model at the corners of the response ranges.

    ``vertex_count`` is 4 (corners of the lag x delay rectangle) or 1 (their
    midpoints, collapsing the uncertainty).
    """
    t_lo, t_hi = lag_range
    d_lo, d_hi = delay_range
    if not 0.0 < t_lo <= t_hi:
        raise ValueError("lag range must satisfy 0 < lo <= hi")
    if not 0.0 < d_lo <= d_hi:
        raise ValueError("delay range must satisfy 0 < lo <= hi")
    if vertex_count == 4:
        corners = [(t_lo, d_lo), (t_lo, d_hi), (t_hi, d_lo), (t_hi, d_hi)]
    elif vertex_count == 1:
        corners = [(0.5 * (t_lo + t_hi), 0.5 * (d_lo + d_hi))]
    else:
        raise ValueError("vertex_count must be 1 or 4")
    vertices = []
    for lag, delay in corners:
        A, B = _augmented_continuous(lin, lag, delay)
        vertices.append(zoh_matrices(A, B, dt))
    return AugmentedModel(
        model=UncertainModel.from_vertices(vertices),
        dt=dt,
        u0=lin.u0,
        lag_range=(t_lo, t_hi),
        delay_range=(d_lo, d_hi),
    )


@dataclass(frozen=True)
class TubeSettings:
    """Tube design knobs: uncertainty ranges, gain poles, and the operating box
    over which the parametric disturbance set is evaluated.

    The box describes the excursions the closed loop actually visits (the
    containment checks verify residency); sizing it at the hard limits makes
    the tube swallow the whole constraint set.
    """

    lag_range: tuple[float, float] = DEFAULT_LAG_RANGE
    delay_range: tuple[float, float] = DEFAULT_DELAY_RANGE
    vertex_count: int = 4
    pole_mode: str = "clip"      # "clip" |lambda| at pole_factor, or "contract" radially
    pole_factor: float = 0.6
    box_psi: float = 0.15        # rad
    box_psi_dot: float = 0.2     # rad/s
    box_beta: float = 0.05       # rad
    box_y: float = 6.0           # m
    box_steer: float = 0.4       # rad column, actuator states and commands
    invariant_tol: float = 1e-6
    invariant_max_iter: int = 200

    def __post_init__(self):
        if self.pole_mode not in ("clip", "contract"):
            raise ValueError("pole_mode must be 'clip' or 'contract'")

    def state_box(self) -> HalfspaceSet:
        half = np.array(
            [self.box_psi, self.box_psi_dot, self.box_beta, self.box_y,
             self.box_steer, self.box_steer]
        )
        return HalfspaceSet.box(-half, half)


def _central_stage_constraints(aug: AugmentedModel, params: VehicleParams) -> list[StageConstraint]:
    front = np.zeros(AUG_DIM)
    front[1] = params.a / aug.u0
    front[2] = 1.0
    front[IDX_LAG_STATE] = -1.0 / params.steer_ratio  # the actual angle, not the command
    rear = np.zeros(AUG_DIM)
    rear[1] = -params.b / aug.u0
    rear[2] = 1.0
    corridor = np.zeros(AUG_DIM)
    corridor[IDX_Y] = 1.0
    steer_state = np.zeros(AUG_DIM)
    steer_state[IDX_LAG_STATE] = 1.0
    return [
        StageConstraint("corridor", corridor, 0.0),
        StageConstraint("slip_front", front, 0.0),
        StageConstraint("slip_rear", rear, 0.0),
        StageConstraint("steer_state", steer_state, 0.0),
        StageConstraint("steer_cmd", np.zeros(AUG_DIM), 1.0),
    ]


class TubeController:
    """Central MPC on the vertex mean with tightened constraints plus ancillary feedback.

    The nominal state ``z`` advances as z+ = A_mean z + B_mean sigma*,
    independent of measurements; the applied command is
    delta* = sigma* + k (x - z). Stateful and single-owner; the construction
    artifacts (model, gain, invariant set, margins) are immutable.
    """

    def __init__(
        self,
        aug: AugmentedModel,
        params: VehicleParams,
        weights: MpcWeights,
        horizon: int,
        gain: FeedbackGain,
        s_inf: Zonotope,
        s_iterations: int,
    ):
        self.aug = aug
        self.params = params
        self.horizon = horizon
        self.gain = gain
        self.s_inf = s_inf
        self.s_iterations = s_iterations
        self._specs = _central_stage_constraints(aug, params)
        self._central = CondensedMpc(
            aug.model.a_mean, aug.model.b_mean, weights, horizon, self._specs
        )
        # Pontryagin margins per constraint family, one support value per side
        self.margins = {}
        for spec in self._specs:
            if spec.name == "steer_cmd":
                # input set shrinks by the projection of S through the gain
                m = support(s_inf, self.gain.k) if np.any(self.gain.k) else 0.0
                self.margins[spec.name] = (m, support(s_inf, -self.gain.k) if np.any(self.gain.k) else 0.0)
            else:
                self.margins[spec.name] = (support(s_inf, spec.c), support(s_inf, -spec.c))
        for name, bound in (("slip_front", params.alpha_max), ("slip_rear", params.alpha_max),
                            ("steer_state", params.delta_max), ("steer_cmd", params.delta_max)):
            hi_m, lo_m = self.margins[name]
            if hi_m + lo_m >= 2.0 * bound:  # tightened upper crosses tightened lower
                raise EmptyResultError(f"tightening empties the {name} constraint")
        # robust-stability report over the vertex family
        self.vertex_radii = tuple(
            float(np.max(np.abs(np.linalg.eigvals(A + np.outer(B, gain.k)))))
            for A, B in aug.model.vertices
        )
        self.z: np.ndarray | None = None
        self._sigma = 0.0
        self._cycle_solved = False

    @property
    def corridor_margin(self) -> float:
        """Meters the corridor edge moves inward: the obstacle-enlargement analogue."""
        return self.margins["corridor"][0]

    @property
    def command_margin(self) -> float:
        return self.margins["steer_cmd"][0]

    def set_initial(self, x0: np.ndarray):
        x0 = np.asarray(x0, dtype=float).ravel()
        if x0.shape != (AUG_DIM,):
            raise ValueError("initial state must be 6-dimensional")
        self.z = x0.copy()
        self._sigma = 0.0
        self._cycle_solved = False
        self._central.reset()

    def _tightened_bounds(self, corridor: CorridorConstraints):
        N = self.horizon
        a = self.params.alpha_max
        d = self.params.delta_max
        bounds = {}
        hi_m, lo_m = self.margins["corridor"]
        lo = corridor.y_min + lo_m
        hi = corridor.y_max - hi_m
        if np.any(lo >= hi):
            return None
        bounds["corridor"] = (lo, hi)
        for name, b in (("slip_front", a), ("slip_rear", a), ("steer_state", d), ("steer_cmd", d)):
            hi_m, lo_m = self.margins[name]
            bounds[name] = (np.full(N, -b + lo_m), np.full(N, b - hi_m))
        return bounds

    def central_mpc_step(self, corridor: CorridorConstraints, y_ref=None) -> MpcSolution:
        """Solve the tightened problem from the nominal state (never the measurement)."""
        if self.z is None:
            raise RuntimeError("set_initial must be called before stepping")
        if corridor.horizon != self.horizon:
            raise ValueError("corridor horizon mismatch")
        bounds = self._tightened_bounds(corridor)
        if bounds is None:
            sol = MpcSolution(
                deltas=np.zeros(self.horizon),
                states=np.tile(self.z, (self.horizon, 1)),
                feasible=False,
                solve_time=0.0,
                status=None,
                objective=float("nan"),
            )
        else:
            sol = self._central.solve(self.z, bounds, y_ref)
        if sol.feasible:
            self._sigma = float(sol.deltas[0])
        self._cycle_solved = True
        return sol

    def tube_control(self, x_measured: np.ndarray) -> float:
        """Composite command sigma* + k (x - z); advances the nominal state."""
        if not self._cycle_solved:
            raise RuntimeError("central_mpc_step must run before tube_control each cycle")
        x = np.asarray(x_measured, dtype=float).ravel()
        delta = self._sigma + float(self.gain.k @ (x - self.z))
        self.z = self.aug.model.a_mean @ self.z + self.aug.model.b_mean * self._sigma
        self._cycle_solved = False
        return delta


def build_tube_controller(
    lin: LinearModel,
    params: VehicleParams,
    dt: float,
    horizon: int,
    weights: MpcWeights | None = None,
    settings: TubeSettings | None = None,
) -> TubeController:
    """Design the full tube controller: vertices, gain, invariant set, margins."""
    settings = settings or TubeSettings()
    weights = weights or default_weights(AUG_DIM)
    aug = build_augmented_model(
        lin, settings.lag_range, settings.delay_range, dt, settings.vertex_count
    )
    mean_a, mean_b = aug.model.a_mean, aug.model.b_mean
    if settings.pole_mode == "clip":
        poles = clipped_poles(mean_a, settings.pole_factor)
    else:
        poles = contracted_poles(mean_a, mean_b, settings.pole_factor)
    gain = pole_place(mean_a, mean_b, poles)
    w = disturbance_set(
        aug.model,
        settings.state_box(),
        (-settings.box_steer, settings.box_steer),
    )
    s_inf, iterations = invariant_set(
        gain, w, tol=settings.invariant_tol, i_max=settings.invariant_max_iter
    )
    return TubeController(aug, params, weights, horizon, gain, s_inf, iterations)
