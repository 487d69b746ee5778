"""Nonlinear single-track vehicle plant with Pacejka tires.

States live in the body/inertial frames of the planar equations of motion;
the lateral channel is what the controllers act on. Also provides the small
angle linearization about straight running at a nominal speed, its exact
zero-order-hold discretization, and the critical-speed analysis.

All angles are radians, all quantities SI. Steering inputs to the plant and
to the linear model are *column* angles; the column-to-roadwheel ratio is a
vehicle parameter and is applied at the tire slip mapping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple

import numpy as np

GRAVITY = 9.80665

# Scaling-and-squaring budget of the Pade-6 matrix exponential when
# discretizing the vehicle model. Beyond this many squarings the roundoff
# amplification exceeds the fidelity we require from B_d, and the
# discretization is reported as ill-conditioned instead of silently
# returned. Generic ZOH helpers (stiff actuator chains are legitimate
# there) get a looser budget.
MAX_SQUARINGS = 8
_GENERIC_MAX_SQUARINGS = 30
_PADE_THETA = 0.5


class ConditioningError(RuntimeError):
    """Discretization left the region where the matrix exponential is trustworthy."""


@dataclass(frozen=True)
class PacejkaParams:
    """Magic-formula coefficients for one axle: mu = D sin(C atan(B a - E(B a - atan(B a))))."""

    b: float  # stiffness factor
    c: float  # shape factor
    d: float  # peak nondimensional friction
    e: float  # curvature factor

    def __post_init__(self):
        if not self.d > 0.0:
            raise ValueError(f"peak friction D must be > 0, got {self.d}")
        if not self.b > 0.0:
            raise ValueError(f"stiffness factor B must be > 0, got {self.b}")
        if not 0.0 < self.c < 3.0:
            raise ValueError(f"shape factor C must lie in (0, 3), got {self.c}")

    @property
    def cornering_slope(self) -> float:
        """d(mu)/d(alpha) at zero slip: B*C*D."""
        return self.b * self.c * self.d


def tire_lateral_mu(tire: PacejkaParams, alpha: float) -> float:
    """Nondimensional lateral friction at slip angle ``alpha`` (odd in alpha, |mu| <= D)."""
    ba = tire.b * alpha
    phi = ba - tire.e * (ba - math.atan(ba))
    return tire.d * math.sin(tire.c * math.atan(phi))


@dataclass(frozen=True)
class VehicleParams:
    """Physical parameters of the single-track model.

    ``delta_max`` bounds the steering column angle; the roadwheel bound is
    ``delta_max / steer_ratio``. Axle vertical loads are static (roll/pitch
    neglected, load transfer folded into the constants).
    """

    mass: float          # kg
    inertia_yaw: float   # kg m^2
    a: float             # m, CG to front axle
    b: float             # m, CG to rear axle
    tire_front: PacejkaParams
    tire_rear: PacejkaParams
    load_front: float    # N
    load_rear: float     # N
    alpha_max: float     # rad, per-axle slip limit
    delta_max: float     # rad, steering column limit
    steer_ratio: float   # column angle / roadwheel angle

    def __post_init__(self):
        for name in ("mass", "inertia_yaw", "a", "b", "alpha_max", "delta_max", "steer_ratio"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be > 0")
        weight = self.mass * GRAVITY
        if abs(self.load_front + self.load_rear - weight) > 0.01 * weight:
            raise ValueError(
                f"axle loads {self.load_front + self.load_rear:.1f} N do not balance "
                f"the weight {weight:.1f} N within 1%"
            )

    @property
    def wheelbase(self) -> float:
        return self.a + self.b

    @property
    def roadwheel_max(self) -> float:
        """Roadwheel-angle equivalent of the column limit."""
        return self.delta_max / self.steer_ratio

    @cached_property
    def cornering_front(self) -> float:
        """Front axle cornering stiffness (N/rad of roadwheel-frame slip)."""
        return self.load_front * self.tire_front.cornering_slope

    @cached_property
    def cornering_rear(self) -> float:
        return self.load_rear * self.tire_rear.cornering_slope


class VehicleState(NamedTuple):
    """Plant state: body-frame velocities, yaw, and inertial position."""

    u: float    # m/s, longitudinal velocity (> 0)
    v: float    # m/s, lateral velocity
    psi: float  # rad, yaw angle
    r: float    # rad/s, yaw rate
    x: float    # m, inertial X
    y: float    # m, inertial Y

    def is_finite(self) -> bool:
        return all(map(math.isfinite, self))


# Gain of the idealized longitudinal speed governor (1/s). The paper assumes
# speed is held by a separate controller; this stands in for it.
SPEED_GOVERNOR_GAIN = 5.0


def slip_angles(params: VehicleParams, state: VehicleState, delta: float) -> tuple[float, float]:
    """Axle slip angles for a column steering angle ``delta``.

    Measured as the velocity angle of the contact point minus the wheel
    heading (front), matching the constraint expressions the controllers use;
    the restoring tire force opposes this angle.
    """
    beta = math.atan2(state.v, state.u)
    alpha_f = beta + state.r * params.a / state.u - delta / params.steer_ratio
    alpha_r = beta - state.r * params.b / state.u
    return alpha_f, alpha_r


def derivatives(
    params: VehicleParams,
    state: VehicleState,
    delta: float,
    f_ext: float = 0.0,
    u_ref: float | None = None,
) -> tuple[float, float, float, float, float, float]:
    """Time derivative of the plant state.

    ``delta`` is the steering column angle; ``f_ext`` an external lateral
    force on the CG (crosswind-style disturbance). The longitudinal channel
    is an ideal governor toward ``u_ref`` (current speed held if None).
    Returns (du, dv, dpsi, dr, dx, dy), aligned with VehicleState fields.
    """
    u, v, psi, r = state.u, state.v, state.psi, state.r
    if u <= 0.0:
        raise ValueError(f"longitudinal speed must be > 0, got {u}")

    delta_w = delta / params.steer_ratio
    alpha_f, alpha_r = slip_angles(params, state, delta)
    # restoring force: positive slip (velocity angle ahead of wheel heading)
    # pushes the axle back, hence the sign flip into the odd tire curve
    fyf = params.load_front * tire_lateral_mu(params.tire_front, -alpha_f)
    fyr = params.load_rear * tire_lateral_mu(params.tire_rear, -alpha_r)

    sum_fy = fyf * math.cos(delta_w) + fyr + f_ext
    sum_mz = params.a * fyf * math.cos(delta_w) - params.b * fyr

    du = 0.0 if u_ref is None else SPEED_GOVERNOR_GAIN * (u_ref - u)
    dv = sum_fy / params.mass - r * u
    dr = sum_mz / params.inertia_yaw
    dx = u * math.cos(psi) - v * math.sin(psi)
    dy = u * math.sin(psi) + v * math.cos(psi)
    return (du, dv, r, dr, dx, dy)


MAX_PLANT_DT = 5e-3


def integrate_step(
    params: VehicleParams,
    state: VehicleState,
    delta: float,
    f_ext: float,
    dt: float,
    u_ref: float | None = None,
) -> VehicleState:
    """One fixed-step RK4 advance of the plant under zero-order-held inputs."""
    if not 0.0 < dt <= MAX_PLANT_DT:
        raise ValueError(f"plant step must lie in (0, {MAX_PLANT_DT}] s, got {dt}")

    def f(s: VehicleState):
        return derivatives(params, s, delta, f_ext, u_ref)

    k1 = f(state)
    k2 = f(VehicleState(*(s + 0.5 * dt * k for s, k in zip(state, k1))))
    k3 = f(VehicleState(*(s + 0.5 * dt * k for s, k in zip(state, k2))))
    k4 = f(VehicleState(*(s + dt * k for s, k in zip(state, k3))))
    return VehicleState(
        *(
            s + dt / 6.0 * (a + 2.0 * b + 2.0 * c + d)
            for s, a, b, c, d in zip(state, k1, k2, k3, k4)
        )
    )


@dataclass(frozen=True)
class LinearModel:
    """Continuous lateral dynamics about straight running at ``u0``.

    State ordering [psi, psi_dot, beta, Y] with beta = atan(v/u); the input
    is the steering column angle (the roadwheel mapping is inside B).
    """

    A: np.ndarray  # (4, 4)
    B: np.ndarray  # (4,)
    u0: float

    def __post_init__(self):
        if not (np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.B))):
            raise ValueError("linear model must be finite")


STATE_LABELS = ("psi", "psi_dot", "beta", "y")
IDX_PSI, IDX_PSI_DOT, IDX_BETA, IDX_Y = range(4)


def linearize(params: VehicleParams, u0: float) -> LinearModel:
    """Analytic bicycle linearization with cornering stiffnesses Fz*(BCD) per axle."""
    if u0 <= 0.0:
        raise ValueError(f"nominal speed must be > 0, got {u0}")
    cf = params.cornering_front
    cr = params.cornering_rear
    a, b = params.a, params.b
    m, izz = params.mass, params.inertia_yaw

    A = np.zeros((4, 4))
    A[IDX_PSI, IDX_PSI_DOT] = 1.0
    A[IDX_PSI_DOT, IDX_PSI_DOT] = -(a * a * cf + b * b * cr) / (izz * u0)
    A[IDX_PSI_DOT, IDX_BETA] = (b * cr - a * cf) / izz
    A[IDX_BETA, IDX_PSI_DOT] = -1.0 + (b * cr - a * cf) / (m * u0 * u0)
    A[IDX_BETA, IDX_BETA] = -(cf + cr) / (m * u0)
    A[IDX_Y, IDX_PSI] = u0
    A[IDX_Y, IDX_BETA] = u0

    B = np.zeros(4)
    B[IDX_PSI_DOT] = a * cf / (izz * params.steer_ratio)
    B[IDX_BETA] = cf / (m * u0 * params.steer_ratio)
    return LinearModel(A=A, B=B, u0=u0)


def _expm_pade6(M: np.ndarray, max_squarings: int = _GENERIC_MAX_SQUARINGS) -> np.ndarray:
    """Matrix exponential by degree-6 Pade with scaling and squaring.

    Raises ConditioningError when the squaring budget is exceeded or the
    result is non-finite.
    """
    norm = np.linalg.norm(M, np.inf)
    if not math.isfinite(norm):
        raise ConditioningError("matrix norm is not finite")
    s = 0
    if norm > _PADE_THETA:
        s = int(math.ceil(math.log2(norm / _PADE_THETA)))
    if s > max_squarings:
        raise ConditioningError(
            f"requires {s} squarings (> {max_squarings}); matrix norm {norm:.3g} too large"
        )
    A = M / (2.0**s)

    n = A.shape[0]
    c = 1.0
    N = np.eye(n)
    D = np.eye(n)
    P = np.eye(n)
    q = 6
    for k in range(1, q + 1):
        c = c * (q - k + 1) / (k * (2 * q - k + 1))
        P = P @ A
        N = N + c * P
        D = D + (-1.0) ** k * c * P
    F = np.linalg.solve(D, N)
    for _ in range(s):
        F = F @ F
    if not np.all(np.isfinite(F)):
        raise ConditioningError("matrix exponential produced non-finite entries")
    return F


def zoh_matrices(
    A: np.ndarray, B: np.ndarray, dt: float, max_squarings: int = _GENERIC_MAX_SQUARINGS
) -> tuple[np.ndarray, np.ndarray]:
    """Exact ZOH discretization of dx/dt = Ax + Bu via the augmented exponential.

    ``B`` may have any number of columns; a 1-D input vector is treated as a
    single column and returned 1-D.
    """
    if dt <= 0.0:
        raise ValueError(f"sampling period must be > 0, got {dt}")
    B2 = np.atleast_2d(np.asarray(B, dtype=float))
    if B2.shape[0] == 1 and A.shape[0] != 1:
        B2 = B2.T
    n, m = B2.shape
    M = np.zeros((n + m, n + m))
    M[:n, :n] = A
    M[:n, n:] = B2
    F = _expm_pade6(M * dt, max_squarings)
    Ad = F[:n, :n]
    Bd = F[:n, n:]
    if np.asarray(B).ndim == 1:
        Bd = Bd[:, 0]
    return Ad, Bd


@dataclass(frozen=True)
class DiscreteModel:
    """ZOH discretization of a LinearModel at sampling period ``dt``."""

    Ad: np.ndarray  # (4, 4)
    Bd: np.ndarray  # (4,)
    dt: float
    u0: float
    conditioning: float  # max |entry| of Ad, reported as a diagnostic


def discretize_zoh(model: LinearModel, dt: float) -> DiscreteModel:
    """Discretize the lateral model; raises ConditioningError when intractable."""
    Ad, Bd = zoh_matrices(model.A, model.B, dt, max_squarings=MAX_SQUARINGS)
    return DiscreteModel(Ad=Ad, Bd=Bd, dt=dt, u0=model.u0, conditioning=float(np.max(np.abs(Ad))))


def _core_unstable(params: VehicleParams, u0: float, tol: float = 1e-9) -> bool:
    # psi and Y are pure integrators of the (psi_dot, beta) core; lateral
    # stability is decided by the core eigenvalues alone.
    A = linearize(params, u0).A
    core = A[np.ix_([IDX_PSI_DOT, IDX_BETA], [IDX_PSI_DOT, IDX_BETA])]
    return bool(np.max(np.linalg.eigvals(core).real) > tol)


def critical_speed(
    params: VehicleParams, u_low: float = 1.0, u_high: float = 200.0
) -> float | None:
    """Smallest speed at which the linearized dynamics go unstable.

    Returns None when no such speed exists below ``u_high`` (understeering or
    neutral-steering vehicle).
    """
    if _core_unstable(params, u_low):
        return u_low
    if not _core_unstable(params, u_high):
        return None
    lo, hi = u_low, u_high
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if _core_unstable(params, mid):
            hi = mid
        else:
            lo = mid
    return hi
