"""Closed-loop simulation harness and the four design studies.

The plant always integrates at a fixed 1 ms step; controllers run at their
own update frequency on zero-order-held measurements and the first steering
move is applied until the next update. Studies: overtake update-frequency
sweep, obstacle-avoidance minimum perception distance (per controller),
and the Monte Carlo actuator-delay robustness comparison.

Tube runs split into a nominal pass and a tracking pass: the central MPC is
solved from the nominal state with corridor bounds built from the nominal
longitudinal position, so its plan is independent of measurements and is
computed once; the closed loop then applies the composite command around it.
"""

from __future__ import annotations

import concurrent.futures
import math
from dataclasses import dataclass, replace

import numpy as np

from apexsim.actuation import (
    DEFAULT_DELAY_RANGE,
    DEFAULT_LAG_RANGE,
    ActuatorRealization,
    ActuatorState,
    sample_realization,
)
from apexsim.mpc import (
    VEHICLE_HALF_WIDTH,
    CorridorConstraints,
    FullBlockage,
    LateralMpc,
    MpcWeights,
    Obstacle,
    default_weights,
    obstacle_to_corridor,
)
from apexsim.tube import AUG_DIM, TubeController, TubeSettings, build_tube_controller
from apexsim.vehicle import (
    VehicleParams,
    VehicleState,
    discretize_zoh,
    integrate_step,
    linearize,
    slip_angles,
    zoh_matrices,
)

PLANT_DT = 1e-3  # s, fixed plant integration step

PLANTS = ("linear_ideal", "nonlinear_ideal", "nonlinear_actuator")
CONTROLLERS = ("mpc", "tube_mpc")


class NoFeasibleHorizonError(RuntimeError):
    """No preview time below the search ceiling completes the scenario."""


class AllFrequenciesFailError(RuntimeError):
    """Every frequency on the sweep grid fails the overtake scenario."""


@dataclass(frozen=True)
class DisturbanceProfile:
    """External lateral CG force over a time window."""

    force: float     # N
    start: float     # s
    duration: float  # s

    def at(self, t: float) -> float:
        return self.force if self.start <= t < self.start + self.duration else 0.0


@dataclass(frozen=True)
class Scenario:
    """One closed-loop experiment definition. The reference line is Y = 0."""

    speed: float                       # m/s
    track_y: tuple[float, float]       # m, physical track edges
    obstacles: tuple[Obstacle, ...] = ()
    disturbance: DisturbanceProfile | None = None
    controller: str = "mpc"
    control_frequency: float = 20.0    # Hz
    preview_time: float = 1.5          # s
    plant: str = "nonlinear_ideal"
    duration: float = 6.0              # s
    seed: int = 0
    y_start: float = 0.0               # m, initial lateral position

    def __post_init__(self):
        if self.speed <= 0.0 or self.duration <= 0.0 or self.preview_time <= 0.0:
            raise ValueError("speed, duration, and preview time must be > 0")
        if self.track_y[0] >= self.track_y[1]:
            raise ValueError("track bounds must satisfy lo < hi")
        if self.controller not in CONTROLLERS:
            raise ValueError(f"controller must be one of {CONTROLLERS}")
        if self.plant not in PLANTS:
            raise ValueError(f"plant must be one of {PLANTS}")
        if self.control_frequency <= 0.0:
            raise ValueError("control frequency must be > 0")
        period = 1.0 / self.control_frequency
        steps = period / PLANT_DT
        if abs(steps - round(steps)) > 1e-6:
            raise ValueError(
                f"control period {period:.6g} s must be an integer multiple of the "
                f"{PLANT_DT:.0e} s plant step"
            )

    @property
    def control_period(self) -> float:
        return 1.0 / self.control_frequency

    @property
    def horizon(self) -> int:
        return max(1, round(self.preview_time * self.control_frequency))

    @property
    def cg_track(self) -> tuple[float, float]:
        return (self.track_y[0] + VEHICLE_HALF_WIDTH, self.track_y[1] - VEHICLE_HALF_WIDTH)


TRACE_COLUMNS = (
    "t", "x", "y", "psi", "psi_dot", "beta",
    "delta_cmd", "delta_actual", "feasible", "alpha_front", "alpha_rear",
)


@dataclass
class SimTrace:
    """Per-plant-step records of one closed-loop run."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    psi: np.ndarray
    psi_dot: np.ndarray
    beta: np.ndarray
    delta_cmd: np.ndarray
    delta_actual: np.ndarray
    feasible: np.ndarray      # 1 when the controller solve that cycle succeeded
    alpha_front: np.ndarray
    alpha_rear: np.ndarray
    diverged: bool = False
    solve_times: tuple = ()   # s, one per control cycle; not part of the CSV schema

    def __len__(self):
        return self.t.shape[0]

    @property
    def infeasible_steps(self) -> int:
        return int(np.sum(self.feasible == 0))

    def to_csv(self, path):
        cols = [getattr(self, name) for name in TRACE_COLUMNS]
        with open(path, "w", newline="") as f:
            f.write(",".join(TRACE_COLUMNS) + "\n")
            for row in zip(*cols):
                f.write(",".join(_fmt(v) for v in row) + "\n")


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".12g")


class _LinearPlant:
    """Exact ZOH stepping of the 4-state lateral model at the plant rate.

    X advances as u0*t (straight-line regime); the disturbance force enters
    the sideslip channel as F/(m*u0).
    """

    def __init__(self, params: VehicleParams, u0: float, y_start: float):
        lin = linearize(params, u0)
        b_force = np.zeros(4)
        b_force[2] = 1.0 / (params.mass * u0)
        self.Ad, Bd = zoh_matrices(lin.A, np.column_stack([lin.B, b_force]), PLANT_DT)
        self.Bd = Bd[:, 0]
        self.Bf = Bd[:, 1]
        self.u0 = u0
        self.state = np.array([0.0, 0.0, 0.0, y_start])
        self.t = 0.0

    def step(self, delta: float, f_ext: float):
        self.state = self.Ad @ self.state + self.Bd * delta + self.Bf * f_ext
        self.t += PLANT_DT

    def as_vehicle_state(self) -> VehicleState:
        psi, r, beta, y = self.state
        return VehicleState(
            u=self.u0, v=self.u0 * math.tan(beta), psi=psi, r=r, x=self.u0 * self.t, y=y
        )


@dataclass(frozen=True)
class TubePlan:
    """Measurement-independent central-MPC plan for a scenario."""

    z: np.ndarray         # (n_cycles + 1, 6) nominal states
    sigma: np.ndarray     # (n_cycles,) central commands
    feasible: np.ndarray  # (n_cycles,) bool
    solve_times: tuple
    gain: np.ndarray      # (6,) ancillary feedback row
    corridor_margin: float
    act_a: np.ndarray     # (2, 2) mean actuator block, for the measurement estimate
    act_b: np.ndarray     # (2,)


def _tube_plan(scenario: Scenario, tc: TubeController, n_cycles: int) -> TubePlan:
    dt = scenario.control_period
    N = scenario.horizon
    x0 = np.zeros(AUG_DIM)
    x0[3] = scenario.y_start
    tc.set_initial(x0)
    z = np.zeros((n_cycles + 1, AUG_DIM))
    z[0] = x0
    sigma = np.zeros(n_cycles)
    feasible = np.ones(n_cycles, dtype=bool)
    solve_times = []
    for k in range(n_cycles):
        t_k = k * dt
        x_nominal = scenario.speed * t_k  # the central problem never sees measurements
        try:
            corridor = obstacle_to_corridor(
                scenario.cg_track, scenario.obstacles, x_nominal, scenario.speed,
                dt, N, tc.params, t_now=t_k,
            )
            sol = tc.central_mpc_step(corridor)
            feasible[k] = sol.feasible
            solve_times.append(sol.solve_time)
        except FullBlockage:
            tc._cycle_solved = True  # hold the previous central command this cycle
            feasible[k] = False
        sigma[k] = tc._sigma
        tc.tube_control(tc.z)  # advance the nominal state only (x = z)
        z[k + 1] = tc.z
    mean = tc.aug.model
    return TubePlan(
        z=z,
        sigma=sigma,
        feasible=feasible,
        solve_times=tuple(solve_times),
        gain=tc.gain.k.copy(),
        corridor_margin=tc.corridor_margin,
        act_a=mean.a_mean[4:, 4:].copy(),
        act_b=mean.b_mean[4:].copy(),
    )


def run_closed_loop(
    scenario: Scenario,
    params: VehicleParams,
    weights: MpcWeights | None = None,
    tube_settings: TubeSettings | None = None,
    realization: ActuatorRealization | None = None,
    tube_plan: TubePlan | None = None,
) -> SimTrace:
    """Simulate one scenario; returns the per-plant-step trace.

    A non-finite plant state marks the run diverged and truncates the trace
    instead of raising. For the actuator plant a realization is sampled from
    (seed, 0) unless one is supplied.
    """
    u0 = scenario.speed
    dt_ctrl = scenario.control_period
    steps_per_cycle = round(dt_ctrl / PLANT_DT)
    n_steps = round(scenario.duration / PLANT_DT)
    n_cycles = math.ceil(n_steps / steps_per_cycle)
    N = scenario.horizon

    lin = linearize(params, u0)
    model = discretize_zoh(lin, dt_ctrl)  # also enforces the update-frequency floor

    controller = None
    plan = tube_plan
    if scenario.controller == "mpc":
        controller = LateralMpc(model, params, weights or default_weights(4), N)
    elif plan is None:
        tc = build_tube_controller(
            lin, params, dt_ctrl, N, weights or default_weights(AUG_DIM), tube_settings
        )
        plan = _tube_plan(scenario, tc, n_cycles)

    nonlinear = scenario.plant != "linear_ideal"
    if nonlinear:
        state = VehicleState(u=u0, v=0.0, psi=0.0, r=0.0, x=0.0, y=scenario.y_start)
        plant = None
    else:
        plant = _LinearPlant(params, u0, scenario.y_start)
        state = plant.as_vehicle_state()

    actuator = None
    if scenario.plant == "nonlinear_actuator":
        if realization is None:
            realization = sample_realization(scenario.seed, 0)
        actuator = ActuatorState(realization, PLANT_DT, params.delta_max)

    cols = {name: np.zeros(n_steps) for name in TRACE_COLUMNS if name != "feasible"}
    feas_col = np.ones(n_steps, dtype=np.int8)
    solve_times: list[float] = []

    delta_cmd = 0.0
    act_est = np.zeros(2)  # controller-side estimate of the actuator states
    diverged = False
    i = 0
    for k in range(n_cycles):
        if i >= n_steps or diverged:
            break
        t_k = i * PLANT_DT
        beta = math.atan2(state.v, state.u)
        x4 = np.array([state.psi, state.r, beta, state.y])
        if scenario.controller == "mpc":
            try:
                corridor = obstacle_to_corridor(
                    scenario.cg_track, scenario.obstacles, state.x, u0,
                    dt_ctrl, N, params, t_now=t_k,
                )
                sol = controller.step(x4, corridor)
                cycle_ok = sol.feasible
                solve_times.append(sol.solve_time)
                if cycle_ok:
                    delta_cmd = float(sol.deltas[0])
            except FullBlockage:
                cycle_ok = False
        else:
            cycle_ok = bool(plan.feasible[k])
            x6 = np.concatenate([x4, act_est])
            delta_cmd = float(plan.sigma[k] + plan.gain @ (x6 - plan.z[k]))
            act_est = plan.act_a @ act_est + plan.act_b * delta_cmd

        for _ in range(steps_per_cycle):
            if i >= n_steps:
                break
            t = i * PLANT_DT
            f_ext = scenario.disturbance.at(t) if scenario.disturbance else 0.0
            actual = actuator.step(delta_cmd, PLANT_DT) if actuator else delta_cmd
            af, ar = slip_angles(params, state, actual)
            cols["t"][i] = t
            cols["x"][i] = state.x
            cols["y"][i] = state.y
            cols["psi"][i] = state.psi
            cols["psi_dot"][i] = state.r
            cols["beta"][i] = math.atan2(state.v, state.u)
            cols["delta_cmd"][i] = delta_cmd
            cols["delta_actual"][i] = actual
            feas_col[i] = 1 if cycle_ok else 0
            cols["alpha_front"][i] = af
            cols["alpha_rear"][i] = ar
            i += 1
            if nonlinear:
                state = integrate_step(params, state, actual, f_ext, PLANT_DT, u_ref=u0)
            else:
                plant.step(actual, f_ext)
                state = plant.as_vehicle_state()
            if not state.is_finite():
                diverged = True
                break

    n = i
    trace = SimTrace(
        t=cols["t"][:n], x=cols["x"][:n], y=cols["y"][:n], psi=cols["psi"][:n],
        psi_dot=cols["psi_dot"][:n], beta=cols["beta"][:n],
        delta_cmd=cols["delta_cmd"][:n], delta_actual=cols["delta_actual"][:n],
        feasible=feas_col[:n], alpha_front=cols["alpha_front"][:n],
        alpha_rear=cols["alpha_rear"][:n], diverged=diverged,
        solve_times=tuple(solve_times) if scenario.controller == "mpc" else (plan.solve_times if plan else ()),
    )
    return trace


def collision_check(trace: SimTrace, obstacles, track_y, half_width: float = VEHICLE_HALF_WIDTH):
    """First time the inflated footprint hits an obstacle or leaves the track, or None."""
    if len(trace) == 0:
        return None
    off_track = (trace.y + half_width > track_y[1]) | (trace.y - half_width < track_y[0])
    hit = off_track
    for obs in obstacles:
        x_lo = obs.x_min + obs.speed * trace.t - half_width
        x_hi = obs.x_max + obs.speed * trace.t + half_width
        in_x = (trace.x >= x_lo) & (trace.x <= x_hi)
        in_y = (trace.y + half_width > obs.y_min) & (trace.y - half_width < obs.y_max)
        hit = hit | (in_x & in_y)
    if trace.diverged:
        hit = hit.copy()
        hit[-1] = True  # a diverged run counts as a collision at its last record
    idx = np.nonzero(hit)[0]
    return float(trace.t[idx[0]]) if idx.size else None


# --- study geometry (engineering stand-ins; the paper gives none numerically) ---

# The slow car holds the inside lane, straddling the race line (the Y = 0
# reference), so the overtake is a forced lane change around a moving
# corridor; the crosswind-style push points back toward the slow car while
# the pass is constraint-active.
OVERTAKE_TRACK = (-6.0, 6.0)
OVERTAKE_SLOW_CAR = dict(x_min=30.0, x_max=35.0, y_min=-6.0, y_max=1.0, speed=55.0)
OVERTAKE_DISTURBANCE = DisturbanceProfile(force=-500.0, start=1.0, duration=0.5)

# Track frame: the race line is Y = 0, three meters off the inside edge; the
# broken-down vehicle blocks the whole inside half, so the avoidance swerve
# crosses from the race line to the outside half.
AVOIDANCE_TRACK = (-3.0, 9.0)
AVOIDANCE_BOX_LENGTH = 5.0     # m, broken-down vehicle
AVOIDANCE_BOX_Y = (-3.0, 3.0)  # blocks the inside half of the 12 m track
AVOIDANCE_LEAD_TIME = 5.2      # s at speed: obstacle beyond any tested preview at t=0


def overtake_scenario(
    control_frequency: float,
    speed: float = 80.56,
    preview_time: float = 1.5,
    plant: str = "nonlinear_ideal",
    duration: float = 6.0,
    seed: int = 0,
) -> Scenario:
    """Fig-2-style setup: pass a slower car holding the inside lane under a
    crosswind-style push toward it."""
    return Scenario(
        speed=speed,
        track_y=OVERTAKE_TRACK,
        obstacles=(Obstacle(**OVERTAKE_SLOW_CAR),),
        disturbance=OVERTAKE_DISTURBANCE,
        controller="mpc",
        control_frequency=control_frequency,
        preview_time=preview_time,
        plant=plant,
        duration=duration,
        seed=seed,
    )


def obstacle_avoidance_scenario(
    speed: float,
    controller: str,
    preview_time: float,
    control_frequency: float = 20.0,
    plant: str = "nonlinear_ideal",
    seed: int = 0,
) -> Scenario:
    """Fig-5-style setup: a broken-down vehicle blocking the inside half."""
    x_obs = AVOIDANCE_LEAD_TIME * speed
    duration = (x_obs + AVOIDANCE_BOX_LENGTH) / speed + 2.0
    return Scenario(
        speed=speed,
        track_y=AVOIDANCE_TRACK,
        obstacles=(
            Obstacle(
                x_min=x_obs,
                x_max=x_obs + AVOIDANCE_BOX_LENGTH,
                y_min=AVOIDANCE_BOX_Y[0],
                y_max=AVOIDANCE_BOX_Y[1],
            ),
        ),
        controller=controller,
        control_frequency=control_frequency,
        preview_time=preview_time,
        plant=plant,
        duration=duration,
        seed=seed,
    )


def _run_passes(scenario: Scenario, params: VehicleParams, **kw) -> tuple[bool, SimTrace]:
    trace = run_closed_loop(scenario, params, **kw)
    collision = collision_check(trace, scenario.obstacles, scenario.track_y)
    ok = collision is None and trace.infeasible_steps == 0 and not trace.diverged
    return ok, trace


@dataclass(frozen=True)
class FrequencySweepResult:
    threshold: float
    table: tuple  # (frequency, collision_time_or_None, infeasible_steps, passed)


def min_update_frequency(
    params: VehicleParams, frequencies, scenario_kwargs=None
) -> FrequencySweepResult:
    """Run the overtake at each grid frequency; lowest passing frequency wins."""
    frequencies = sorted(frequencies)
    kwargs = scenario_kwargs or {}
    rows = []
    threshold = None
    for f in frequencies:
        scenario = overtake_scenario(f, **kwargs)
        trace = run_closed_loop(scenario, params)
        collision = collision_check(trace, scenario.obstacles, scenario.track_y)
        passed = collision is None and trace.infeasible_steps == 0 and not trace.diverged
        rows.append((f, collision, trace.infeasible_steps, passed))
        if passed and threshold is None:
            threshold = f
    if threshold is None:
        raise AllFrequenciesFailError(f"all of {frequencies} failed the overtake")
    return FrequencySweepResult(threshold=threshold, table=tuple(rows))


@dataclass(frozen=True)
class PerceptionResult:
    speed: float
    preview_time: float
    distance: float  # = speed * preview_time, by construction


def min_perception_distance(
    params: VehicleParams,
    speed: float,
    controller: str = "mpc",
    t_max: float = 5.0,
    resolution: float = 0.01,
    control_frequency: float = 20.0,
    tube_settings: TubeSettings | None = None,
) -> PerceptionResult:
    """Bisect the preview time: the smallest T (on the resolution grid) whose
    avoidance run has zero collisions and zero infeasible steps."""

    def passes(t_p: float) -> bool:
        scenario = obstacle_avoidance_scenario(speed, controller, t_p, control_frequency)
        ok, _ = _run_passes(scenario, params, tube_settings=tube_settings)
        return ok

    hi = round(t_max / resolution)
    lo = max(1, round(0.1 / resolution))
    if not passes(hi * resolution):
        raise NoFeasibleHorizonError(
            f"no feasible preview below {t_max} s at {speed} m/s with {controller}"
        )
    if passes(lo * resolution):
        hi = lo
    while hi - lo > 1:
        mid = (hi + lo) // 2
        if passes(mid * resolution):
            hi = mid
        else:
            lo = mid
    t_star = hi * resolution
    return PerceptionResult(speed=speed, preview_time=t_star, distance=speed * t_star)


ENVELOPE_BIN = 2.0  # m


@dataclass
class MonteCarloReport:
    """Aggregate robustness statistics over shared actuator realizations."""

    runs: int
    collisions: int
    infeasible_runs: int
    diverged_runs: int
    collision_flags: np.ndarray   # (runs,) bool
    max_deviation: np.ndarray     # (runs,) max |Y - Y_nominal|
    envelope_x: np.ndarray        # bin centers
    envelope_min: np.ndarray
    envelope_max: np.ndarray
    nominal_y: np.ndarray         # ideal-plant trajectory per bin

    @property
    def collision_probability(self) -> float:
        return self.collisions / self.runs

    def summary_csv(self, path):
        with open(path, "w", newline="") as f:
            f.write("runs,collisions,collision_probability,infeasible_runs,diverged_runs\n")
            f.write(
                f"{self.runs},{self.collisions},{_fmt(self.collision_probability)},"
                f"{self.infeasible_runs},{self.diverged_runs}\n"
            )

    def runs_csv(self, path):
        with open(path, "w", newline="") as f:
            f.write("run,collision,max_deviation\n")
            for i in range(self.runs):
                f.write(f"{i},{int(self.collision_flags[i])},{_fmt(self.max_deviation[i])}\n")

    def envelope_csv(self, path):
        with open(path, "w", newline="") as f:
            f.write("x_bin,y_min,y_max,y_nominal\n")
            for row in zip(self.envelope_x, self.envelope_min, self.envelope_max, self.nominal_y):
                f.write(",".join(_fmt(v) for v in row) + "\n")


def _bin_trace(x, y, edges):
    idx = np.clip(np.digitize(x, edges) - 1, 0, len(edges) - 2)
    lo = np.full(len(edges) - 1, np.inf)
    hi = np.full(len(edges) - 1, -np.inf)
    np.minimum.at(lo, idx, y)
    np.maximum.at(hi, idx, y)
    return lo, hi


def _mc_single(args):
    (scenario, params, weights, tube_settings, plan, seed, index,
     lag_range, delay_range, randomize_lag, randomize_delay) = args
    realization = sample_realization(
        seed, index, lag_range, delay_range, randomize_lag, randomize_delay
    )
    trace = run_closed_loop(
        scenario, params, weights=weights, tube_settings=tube_settings,
        realization=realization, tube_plan=plan,
    )
    collision = collision_check(trace, scenario.obstacles, scenario.track_y)
    return index, trace, collision


def monte_carlo(
    scenario: Scenario,
    params: VehicleParams,
    n_runs: int,
    seed: int,
    weights: MpcWeights | None = None,
    tube_settings: TubeSettings | None = None,
    lag_range=DEFAULT_LAG_RANGE,
    delay_range=DEFAULT_DELAY_RANGE,
    randomize_lag: bool = True,
    randomize_delay: bool = True,
    workers: int = 1,
) -> MonteCarloReport:
    """Repeat the scenario on the actuator plant under per-run sampled
    realizations; deterministic for a given seed regardless of worker count."""
    if n_runs < 1:
        raise ValueError("need at least one run")
    scenario = replace(scenario, plant="nonlinear_actuator")

    plan = None
    if scenario.controller == "tube_mpc":
        dt_ctrl = scenario.control_period
        n_cycles = math.ceil(round(scenario.duration / PLANT_DT) / round(dt_ctrl / PLANT_DT))
        lin = linearize(params, scenario.speed)
        tc = build_tube_controller(
            lin, params, dt_ctrl, scenario.horizon,
            weights or default_weights(AUG_DIM), tube_settings,
        )
        plan = _tube_plan(scenario, tc, n_cycles)

    # ideal-plant baseline for the deviation statistics and the envelope centerline
    baseline = run_closed_loop(
        replace(scenario, plant="nonlinear_ideal"), params,
        weights=weights, tube_settings=tube_settings, tube_plan=plan,
    )

    x_max = float(np.max(baseline.x)) + ENVELOPE_BIN
    edges = np.arange(0.0, x_max + ENVELOPE_BIN, ENVELOPE_BIN)
    centers = 0.5 * (edges[:-1] + edges[1:])
    nom_lo, nom_hi = _bin_trace(baseline.x, baseline.y, edges)
    nominal_y = np.where(np.isfinite(nom_lo), 0.5 * (nom_lo + nom_hi), 0.0)

    jobs = [
        (scenario, params, weights, tube_settings, plan, seed, i,
         lag_range, delay_range, randomize_lag, randomize_delay)
        for i in range(n_runs)
    ]
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_mc_single, jobs, chunksize=max(1, n_runs // (8 * workers))))
        results.sort(key=lambda r: r[0])
    else:
        results = [_mc_single(job) for job in jobs]

    env_lo = np.full(len(centers), np.inf)
    env_hi = np.full(len(centers), -np.inf)
    flags = np.zeros(n_runs, dtype=bool)
    deviation = np.zeros(n_runs)
    infeasible = 0
    diverged = 0
    for index, trace, collision in results:
        flags[index] = collision is not None
        n = min(len(trace), len(baseline))
        deviation[index] = float(np.max(np.abs(trace.y[:n] - baseline.y[:n]))) if n else np.nan
        lo, hi = _bin_trace(trace.x, trace.y, edges)
        env_lo = np.minimum(env_lo, lo)
        env_hi = np.maximum(env_hi, hi)
        infeasible += 1 if trace.infeasible_steps > 0 else 0
        diverged += 1 if trace.diverged else 0

    keep = np.isfinite(env_lo)
    return MonteCarloReport(
        runs=n_runs,
        collisions=int(np.sum(flags)),
        infeasible_runs=infeasible,
        diverged_runs=diverged,
        collision_flags=flags,
        max_deviation=deviation,
        envelope_x=centers[keep],
        envelope_min=env_lo[keep],
        envelope_max=env_hi[keep],
        nominal_y=nominal_y[keep],
    )
