"""Conflict-time estimation and the risk functional used for episode flagging.

Pairwise conflict times come from constant-velocity extrapolation: the closed
form minimizes the squared distance between two linearly extrapolated
trajectories. A pair only counts as a conflict when the distance at that
closest approach is within the conflict radius; otherwise the time is +inf.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .errors import ConfigError, UsageError
from .sim.vehicles import VehicleState

INF = math.inf


@dataclass(frozen=True)
class RiskParams:
    beta: float = 10.0  # infraction weight
    delta: float = 5.0  # flagging threshold
    conflict_radius: float = 4.0  # m
    horizon: float = 6.0  # s, extrapolation window

    def __post_init__(self):
        for name in ("beta", "delta", "conflict_radius", "horizon"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"risk.{name} must be positive")


@dataclass
class ConflictAssessment:
    per_vehicle_tau: list[tuple[int, float, float]]  # (vehicle id, tau, distance at tau)
    tau_min: float
    risky: bool


def closest_approach(ego: VehicleState, other: VehicleState, horizon: float):
    """Time in [0, horizon] minimizing extrapolated distance, and that distance."""
    px, py = other.x - ego.x, other.y - ego.y
    evx, evy = ego.velocity
    ovx, ovy = other.velocity
    vx, vy = ovx - evx, ovy - evy
    vv = vx * vx + vy * vy
    if vv == 0.0:
        t = 0.0
    else:
        t = -(px * vx + py * vy) / vv
        t = min(max(t, 0.0), horizon)
    d = math.hypot(px + vx * t, py + vy * t)
    return t, d


def ttcp(ego: VehicleState, other: VehicleState, params: RiskParams) -> float:
    """Conflict time for the pair; +inf when the paths never come close enough."""
    t, d = closest_approach(ego, other, params.horizon)
    return t if d <= params.conflict_radius else INF


def assess(state, params: RiskParams) -> ConflictAssessment:
    """Per-vehicle conflict times against the ego; state exposes .ego/.background."""
    per_vehicle = []
    tau_min = INF
    for veh in state.background:
        t, d = closest_approach(state.ego, veh, params.horizon)
        tau = t if d <= params.conflict_radius else INF
        per_vehicle.append((veh.id, tau, d))
        tau_min = min(tau_min, tau)
    return ConflictAssessment(per_vehicle_tau=per_vehicle, tau_min=tau_min, risky=tau_min < params.horizon)


def risk_value(tau_min: float, infraction: bool, params: RiskParams) -> float:
    """Omega = max(1/tau, beta * infraction), with 1/inf treated as 0.

    tau is floored at 10 ms so an exact-zero conflict time stays finite and
    serializable while still dwarfing every realistic 1/tau.
    """
    inv = 0.0 if math.isinf(tau_min) else 1.0 / max(tau_min, 1e-2)
    return max(inv, params.beta if infraction else 0.0)


INFRACTION_EVENTS = frozenset({"collision", "off_road"})


def risk(state, maneuver, events, params: RiskParams) -> float:
    """Omega for taking `maneuver` in `state`.

    Applies the maneuver hypothetically for one decision period (the episode is
    not touched) and scores the resulting tau_min. `events` carries anything
    already observed for this transition; the rollout's own events and any
    emergency clamp forced onto a follower count as infractions too.
    """
    from .sim.engine import preview  # deferred, the engine imports this module

    next_state, rollout_events, emergency = preview(state, maneuver)
    assessment = assess(next_state, params)
    infraction = bool(INFRACTION_EVENTS & (set(events) | rollout_events)) or emergency
    return risk_value(assessment.tau_min, infraction, params)


def flag_segments(episode: Sequence, params: RiskParams) -> list[tuple[int, int]]:
    """Maximal index ranges with omega >= delta, each padded by 2 leading steps.

    `episode` holds one entry per decision step: either a precomputed omega or
    a (state, maneuver, ...) transition tuple to score with risk(). Ranges are
    inclusive [start, end] and are reported per run: pads may make neighboring
    ranges touch or overlap, but runs are never merged.
    """
    omegas = [
        float(entry) if isinstance(entry, (int, float))
        else risk(entry[0], entry[1], set(), params)
        for entry in episode
    ]
    ranges = []
    start = None
    for i, w in enumerate(omegas):
        if w >= params.delta:
            if start is None:
                start = i
        elif start is not None:
            ranges.append((max(0, start - 2), i - 1))
            start = None
    if start is not None:
        ranges.append((max(0, start - 2), len(omegas) - 1))
    return ranges


def delta_ttcp_metric(tau_mins: Sequence[float], params: RiskParams) -> float:
    """Mean worst-case conflict margin per decision step, clamped at the horizon."""
    if len(tau_mins) == 0:
        raise UsageError("delta_ttcp_metric needs at least one decision step")
    return sum(min(t, params.horizon) for t in tau_mins) / len(tau_mins)
