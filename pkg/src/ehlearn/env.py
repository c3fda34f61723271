"""Two-pair wireless link simulator with RF energy harvesting.

The system has two transmitter-receiver pairs sharing one time-slotted
channel. Pair 0 transmits with adjustable power ``power0_w`` from the
grid; pair 1 transmits with fixed power ``p1_w`` drawn from a battery
that is recharged by harvesting the RF power pair 0 leaves unused.
Each slot is split into time fractions: ``time0`` for pair 0, ``time1``
for pair 1, ``time_eh`` for dedicated harvesting, and an implicit idle
remainder.

All randomness (channel fading, bit arrivals) flows through an injected
``numpy.random.Generator``; every draw order is documented so traces can
be replayed exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._validation import check_rng, check_scalar

_SUM_TOL = 1e-9  # slack for float dust when time fractions come out of a softmax

PENALTY_MODES = ("literal", "hinge")


@dataclass(frozen=True)
class SystemConfig:
    """Physical constants of the two-pair link.

    Defaults correspond to a 5 MHz channel with -120 dBm noise, 1 kb/s
    arrivals per queue, a 30 mW budget for pair 0, 10 mW fixed power for
    pair 1, and a 5 J battery, on 1 s slots.

    ``penalty_mode`` selects how constraint violations enter the reward:
    ``"literal"`` uses the signed terms (battery minus capacity, backlog
    minus service) as-is, ``"hinge"`` clips each term at zero so only
    actual violations are penalised.
    """

    bandwidth_hz: float = 5e6
    noise_power_w: float = 1e-15
    arrival_rate_bps: float = 1e3
    p0_max_w: float = 0.03
    p1_w: float = 0.01
    battery_cap_j: float = 5.0
    slot_seconds: float = 1.0
    link0_scale: float = 1.0
    link1_scale: float = 1.0
    penalty_weight: float = 1.0
    penalty_mode: str = "literal"

    def __post_init__(self):
        check_scalar("bandwidth_hz", self.bandwidth_hz, minimum=0.0, strict_min=True)
        check_scalar("noise_power_w", self.noise_power_w, minimum=0.0, strict_min=True)
        check_scalar("arrival_rate_bps", self.arrival_rate_bps, minimum=0.0)
        check_scalar("p0_max_w", self.p0_max_w, minimum=0.0, strict_min=True)
        check_scalar("p1_w", self.p1_w, minimum=0.0)
        check_scalar("battery_cap_j", self.battery_cap_j, minimum=0.0, strict_min=True)
        check_scalar("slot_seconds", self.slot_seconds, minimum=0.0, strict_min=True)
        check_scalar("link0_scale", self.link0_scale, minimum=0.0, strict_min=True)
        check_scalar("link1_scale", self.link1_scale, minimum=0.0, strict_min=True)
        check_scalar("penalty_weight", self.penalty_weight, minimum=0.0)
        if self.penalty_mode not in PENALTY_MODES:
            raise ValueError(
                f"penalty_mode must be one of {PENALTY_MODES}, got {self.penalty_mode!r}"
            )


@dataclass(frozen=True)
class TaskProfile:
    """Per-task harvesting conditions: the pair a policy must adapt to.

    ``eh_scale`` is the Rayleigh scale of the harvesting channel and
    ``conversion_efficiency`` the RF-to-DC efficiency of the harvester.
    """

    task_id: int
    eh_scale: float
    conversion_efficiency: float

    def __post_init__(self):
        if not isinstance(self.task_id, (int, np.integer)) or isinstance(self.task_id, bool):
            raise TypeError(f"task_id must be an int, got {type(self.task_id).__name__}")
        check_scalar("eh_scale", self.eh_scale, minimum=0.0, strict_min=True)
        check_scalar("conversion_efficiency", self.conversion_efficiency, minimum=0.0)


@dataclass(frozen=True, slots=True)
class SystemState:
    """Snapshot of the system at the start of a slot.

    Queues are in bits, battery in joules, gains are the current
    Rayleigh fading realisations of the three channels (pair 0, pair 1,
    harvester).
    """

    q0_bits: float
    q1_bits: float
    battery_j: float
    gain0: float
    gain1: float
    gain_eh: float

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.q0_bits, self.q1_bits, self.battery_j,
             self.gain0, self.gain1, self.gain_eh],
            dtype=np.float64,
        )


STATE_DIM = 6


@dataclass(frozen=True, slots=True)
class ControlAction:
    """One slot's decision: pair-0 power plus the three time fractions.

    Fractions must be nonnegative and sum to at most 1 (the remainder of
    the slot is idle). Structural feasibility is checked here; the power
    budget ``power0_w <= p0_max_w`` is checked against the config inside
    :func:`step` / :func:`harvested_power`.
    """

    power0_w: float
    time0: float
    time1: float
    time_eh: float

    def __post_init__(self):
        p0, a0, a1, ae = self.power0_w, self.time0, self.time1, self.time_eh
        if not (math.isfinite(p0) and math.isfinite(a0)
                and math.isfinite(a1) and math.isfinite(ae)):
            raise ValueError("action entries must be finite")
        if p0 < 0.0:
            raise ValueError(f"power0_w must be >= 0, got {p0}")
        if a0 < 0.0 or a1 < 0.0 or ae < 0.0:
            raise ValueError("time fractions must be >= 0")
        if a0 + a1 + ae > 1.0 + _SUM_TOL:
            raise ValueError(
                f"time fractions must sum to at most 1, got {a0 + a1 + ae}"
            )

    def as_array(self) -> np.ndarray:
        return np.array([self.power0_w, self.time0, self.time1, self.time_eh],
                        dtype=np.float64)


ACTION_DIM = 4


@dataclass(frozen=True, slots=True)
class StepOutcome:
    """Everything one slot produced.

    ``transmitted0_bits`` / ``transmitted1_bits`` are the link capacities
    actually available that slot (they may exceed the backlog).
    Violation flags record battery overflow past capacity and per-queue
    underservice (backlog not fully cleared); the battery itself is never
    clipped at capacity, only flagged.
    """

    state: SystemState
    reward: float
    transmitted0_bits: float
    transmitted1_bits: float
    harvested_j: float
    battery_overflow: bool
    underserved0: bool
    underserved1: bool


def sample_channel(scale, rng, size=None):
    """Draw Rayleigh-distributed channel gains with the given scale.

    Mean is ``scale * sqrt(pi / 2)`` and the second moment ``2 * scale**2``.
    """
    check_scalar("scale", scale, minimum=0.0, strict_min=True)
    rng = check_rng(rng)
    draw = rng.rayleigh(scale, size)
    return float(draw) if size is None else draw


def sample_arrivals(rate_bps, slot_seconds, rng, size=None):
    """Draw Poisson bit arrivals for one slot (integer counts)."""
    check_scalar("rate_bps", rate_bps, minimum=0.0)
    check_scalar("slot_seconds", slot_seconds, minimum=0.0, strict_min=True)
    rng = check_rng(rng)
    draw = rng.poisson(rate_bps * slot_seconds, size)
    return int(draw) if size is None else draw


def transmitted_data(power_w, gain, time_fraction, cfg: SystemConfig):
    """Shannon-capacity bits moved in one slot at the given power and gain.

    ``bandwidth * log2(1 + power * gain / noise) * time_fraction * slot``.
    Accepts scalars or broadcastable numpy arrays (the grid controller
    evaluates whole action grids through this same function).
    """
    if isinstance(power_w, np.ndarray) or isinstance(gain, np.ndarray) \
            or isinstance(time_fraction, np.ndarray):
        power_w = np.asarray(power_w, dtype=np.float64)
        gain = np.asarray(gain, dtype=np.float64)
        time_fraction = np.asarray(time_fraction, dtype=np.float64)
        if np.any(power_w < 0.0) or np.any(gain < 0.0) or np.any(time_fraction < 0.0):
            raise ValueError("power, gain, and time fraction must be >= 0")
        snr = power_w * gain / cfg.noise_power_w
        return cfg.bandwidth_hz * np.log2(1.0 + snr) * time_fraction * cfg.slot_seconds
    if power_w < 0.0 or gain < 0.0 or time_fraction < 0.0:
        raise ValueError("power, gain, and time fraction must be >= 0")
    snr = power_w * gain / cfg.noise_power_w
    return cfg.bandwidth_hz * math.log2(1.0 + snr) * time_fraction * cfg.slot_seconds


def harvested_power(power0_w, gain_eh, task: TaskProfile, cfg: SystemConfig):
    """Instantaneous harvested power: the budget pair 0 leaves unused,
    scaled by the harvesting channel and the conversion efficiency.

    Accepts scalars or broadcastable numpy arrays.
    """
    if isinstance(power0_w, np.ndarray) or isinstance(gain_eh, np.ndarray):
        power0_w = np.asarray(power0_w, dtype=np.float64)
        gain_eh = np.asarray(gain_eh, dtype=np.float64)
        if np.any(power0_w < 0.0) or np.any(power0_w > cfg.p0_max_w):
            raise ValueError(f"power0_w must lie in [0, {cfg.p0_max_w}]")
        if np.any(gain_eh < 0.0):
            raise ValueError("gain_eh must be >= 0")
        return task.conversion_efficiency * (cfg.p0_max_w - power0_w) * gain_eh
    if not 0.0 <= power0_w <= cfg.p0_max_w:
        raise ValueError(
            f"power0_w must lie in [0, {cfg.p0_max_w}], got {power0_w}"
        )
    if gain_eh < 0.0:
        raise ValueError(f"gain_eh must be >= 0, got {gain_eh}")
    return task.conversion_efficiency * (cfg.p0_max_w - power0_w) * gain_eh


def queue_update(q_bits, served_bits, arrived_bits) -> float:
    """Backlog recursion: clear what was served, then add this slot's arrivals."""
    if q_bits < 0.0 or served_bits < 0.0 or arrived_bits < 0.0:
        raise ValueError("queue quantities must be >= 0")
    return max(q_bits - served_bits, 0.0) + arrived_bits


def battery_update(battery_j, p1_w, time1, p_eh_w, time_eh, slot_seconds) -> float:
    """Battery recursion: drain pair-1's energy (floored at empty), then
    add the harvested energy, both as power times occupied time.

    The result is not clipped at capacity; overflow is flagged by the
    caller via :class:`StepOutcome`.
    """
    if min(battery_j, p1_w, time1, p_eh_w, time_eh, slot_seconds) < 0.0:
        raise ValueError("battery quantities must be >= 0")
    if time1 + time_eh > 1.0 + _SUM_TOL:
        raise ValueError("time1 + time_eh must be <= 1")
    spent = p1_w * time1 * slot_seconds
    harvested = p_eh_w * time_eh * slot_seconds
    return max(battery_j - spent, 0.0) + harvested


def reward(state: SystemState, action: ControlAction,
           transmitted0_bits, transmitted1_bits, cfg: SystemConfig) -> float:
    """Per-slot reward: negative energy use minus weighted constraint terms.

    The constraint terms use the slot's pre-update battery level and the
    transmitted bits of the same slot. In ``"literal"`` mode they are the
    signed quantities (negative terms act as a bonus); in ``"hinge"`` mode
    each is clipped at zero.
    """
    energy = action.power0_w * action.time0 + cfg.p1_w * action.time1
    over_battery = state.battery_j - cfg.battery_cap_j
    backlog0 = state.q0_bits - transmitted0_bits
    backlog1 = state.q1_bits - transmitted1_bits
    if cfg.penalty_mode == "hinge":
        over_battery = max(over_battery, 0.0)
        backlog0 = max(backlog0, 0.0)
        backlog1 = max(backlog1, 0.0)
    return -energy - cfg.penalty_weight * (over_battery + backlog0 + backlog1)


def _sigmoid(x: float) -> float:
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def project_action(raw, cfg: SystemConfig) -> ControlAction:
    """Map an unconstrained 4-vector onto the feasible action set.

    ``raw[0]`` drives pair-0 power through a sigmoid scaled to the budget;
    ``raw[1:4]`` are softmax logits for the three time fractions against a
    fixed zero logit for idling, so the fractions always sum to strictly
    less than 1. ``raw = (0, 0, 0, 0)`` maps to half power and a quarter
    of the slot each.
    """
    r0, r1, r2, r3 = float(raw[0]), float(raw[1]), float(raw[2]), float(raw[3])
    if not (math.isfinite(r0) and math.isfinite(r1)
            and math.isfinite(r2) and math.isfinite(r3)):
        raise ValueError("raw action must be finite")
    power0 = cfg.p0_max_w * _sigmoid(r0)
    top = max(r1, r2, r3, 0.0)
    e1 = math.exp(r1 - top)
    e2 = math.exp(r2 - top)
    e3 = math.exp(r3 - top)
    e_idle = math.exp(-top)
    denom = e1 + e2 + e3 + e_idle
    return ControlAction(power0, e1 / denom, e2 / denom, e3 / denom)


def step(state: SystemState, action: ControlAction, task: TaskProfile,
         cfg: SystemConfig, rng) -> StepOutcome:
    """Advance the system one slot.

    Draw order (for exact replay): one Poisson call for both queues'
    arrivals, then one Rayleigh call for the three next-slot gains
    (pair 0, pair 1, harvester).
    """
    rng = check_rng(rng)
    slot = cfg.slot_seconds

    sent0 = transmitted_data(action.power0_w, state.gain0, action.time0, cfg)
    sent1 = transmitted_data(cfg.p1_w, state.gain1, action.time1, cfg)
    harvest_w = harvested_power(action.power0_w, state.gain_eh, task, cfg)
    harvested = harvest_w * action.time_eh * slot
    r = reward(state, action, sent0, sent1, cfg)

    next_battery = battery_update(state.battery_j, cfg.p1_w, action.time1,
                                  harvest_w, action.time_eh, slot)

    arrivals = rng.poisson(cfg.arrival_rate_bps * slot, 2)
    gains = rng.rayleigh((cfg.link0_scale, cfg.link1_scale, task.eh_scale))

    next_state = SystemState(
        q0_bits=queue_update(state.q0_bits, sent0, float(arrivals[0])),
        q1_bits=queue_update(state.q1_bits, sent1, float(arrivals[1])),
        battery_j=next_battery,
        gain0=float(gains[0]),
        gain1=float(gains[1]),
        gain_eh=float(gains[2]),
    )
    return StepOutcome(
        state=next_state,
        reward=r,
        transmitted0_bits=sent0,
        transmitted1_bits=sent1,
        harvested_j=harvested,
        battery_overflow=next_battery > cfg.battery_cap_j,
        underserved0=state.q0_bits > sent0,
        underserved1=state.q1_bits > sent1,
    )


class TwoPairEnv:
    """Stateful wrapper around :func:`step` for episode-style use.

    ``reset`` zeroes the queues and battery and draws fresh gains (one
    Rayleigh call for the triple); ``step`` delegates to the pure
    transition and caches the new state. The horizon is the caller's
    business: the env itself never terminates.
    """

    def __init__(self, task: TaskProfile, cfg: SystemConfig, rng=None):
        self.task = task
        self.cfg = cfg
        self.rng = check_rng(rng)
        self._state: SystemState | None = None

    @property
    def state(self) -> SystemState:
        if self._state is None:
            raise RuntimeError("env not reset yet")
        return self._state

    def reset(self, initial_state: SystemState | None = None) -> SystemState:
        if initial_state is not None:
            self._state = initial_state
            return initial_state
        gains = self.rng.rayleigh(
            (self.cfg.link0_scale, self.cfg.link1_scale, self.task.eh_scale))
        self._state = SystemState(
            q0_bits=0.0, q1_bits=0.0, battery_j=0.0,
            gain0=float(gains[0]), gain1=float(gains[1]), gain_eh=float(gains[2]),
        )
        return self._state

    def step(self, action: ControlAction) -> StepOutcome:
        if self._state is None:
            raise RuntimeError("call reset() before step()")
        outcome = step(self._state, action, self.task, self.cfg, self.rng)
        self._state = outcome.state
        return outcome


def make_task_schedule(slots_per_task: int, n_tasks: int) -> list[range]:
    """Consecutive, disjoint slot ranges, one per task, covering
    ``n_tasks * slots_per_task`` slots in order."""
    if n_tasks < 1 or slots_per_task < 1:
        raise ValueError("need n_tasks >= 1 and slots_per_task >= 1")
    return [range(j * slots_per_task, (j + 1) * slots_per_task)
            for j in range(n_tasks)]
