"""Steer-by-wire plant model: true transport delay plus a first-order lag.

The high-fidelity simulations push commands through a ring buffer covering
the transport delay at plant-step resolution, then through the motor lag.
Monte Carlo robustness runs draw one (lag, delay) realization per repetition
from a counter-based generator, so run ``index`` under global ``seed`` is
reproducible on any platform and in any execution order.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

DEFAULT_LAG_RANGE = (0.05, 0.5)      # s, motor/feedback first-order time constant
DEFAULT_DELAY_RANGE = (0.015, 0.125)  # s, total transport delay


@dataclass(frozen=True)
class ActuatorRealization:
    """One sampled steer-by-wire response: lag time constant and transport delay."""

    lag: float    # s
    delay: float  # s

    def __post_init__(self):
        if not self.lag > 0.0:
            raise ValueError("lag time constant must be > 0")
        if self.delay < 0.0:
            raise ValueError("transport delay must be >= 0")


def sample_realization(
    seed: int,
    index: int,
    lag_range=DEFAULT_LAG_RANGE,
    delay_range=DEFAULT_DELAY_RANGE,
    randomize_lag: bool = True,
    randomize_delay: bool = True,
) -> ActuatorRealization:
    """Draw the realization for run ``index`` under global ``seed``.

    Uses a counter-based bit generator keyed on (seed, index): identical on
    every platform and independent of how many other runs were sampled.
    Frozen quantities take the midpoint of their range.
    """
    for lo, hi in (lag_range, delay_range):
        if lo > hi:
            raise ValueError("range must satisfy lo <= hi")
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, index & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    rng = np.random.Generator(np.random.Philox(key=key))
    lag = rng.uniform(*lag_range) if randomize_lag else 0.5 * (lag_range[0] + lag_range[1])
    delay = rng.uniform(*delay_range) if randomize_delay else 0.5 * (delay_range[0] + delay_range[1])
    return ActuatorRealization(lag=float(lag), delay=float(delay))


class ActuatorState:
    """Single-owner simulation state of the steer-by-wire chain.

    Commands enter a ring buffer spanning the transport delay at the plant
    step; the delayed command drives the first-order lag whose state is the
    roadwheel-driving column angle, clamped at the column limit.
    """

    def __init__(self, realization: ActuatorRealization, dt: float, delta_max: float,
                 initial: float = 0.0):
        if dt <= 0.0:
            raise ValueError("plant step must be > 0")
        self.realization = realization
        self.dt = dt
        self.delta_max = delta_max
        # ring length covers the delay; ceil with a small guard against
        # float noise in delay/dt ratios
        self._length = max(int(math.ceil(realization.delay / dt - 1e-9)), 0)
        self._buffer = deque([initial] * self._length, maxlen=self._length or None)
        self.angle = initial  # lag state x_delta

    @property
    def buffer_length(self) -> int:
        return self._length

    def step(self, command: float, dt: float) -> float:
        """Push one command, advance the lag, return the actual column angle."""
        if abs(dt - self.dt) > 1e-12:
            raise ValueError("step size must match the buffer resolution")
        if self._length:
            delayed = self._buffer[0]
            self._buffer.append(command)
        else:
            delayed = command
        self.angle += dt * (delayed - self.angle) / self.realization.lag
        self.angle = min(max(self.angle, -self.delta_max), self.delta_max)
        return self.angle
