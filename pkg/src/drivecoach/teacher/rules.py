"""Deterministic teacher heuristic and the telemetry summary it runs on.

The raw observation does not carry the ego's desired speed or its goal lane,
both of which the rule cascade needs, so decisions run on a small Telemetry
record the agent builds from the scenario state. The same record is embedded
in every prompt as a machine-readable line, which lets the scripted chat
backend and the parse-failure fallback reach identical decisions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from ..sim.engine import lane_gaps
from ..sim.vehicles import Maneuver, wrap_angle
from .constraints import ConstraintRule

CONFLICT_TAU = 2.0  # s, below this an ahead/crossing vehicle forces slowing
CLEAR_TAU = 4.0  # s, above this the road counts as clear for speeding up
SLOW_FRACTION = 0.8  # of desired speed, below this the ego is dawdling
GAP_BASE = 2.5  # m, minimum bumper gap for a lane change
GAP_HEADWAY = 0.3  # s, time-headway part of the gap check
GAP_CLOSING = 1.0  # s², weight on the closing-speed part of the gap check
CONFLICT_LATERAL = 0.75  # lane widths, beyond this parallel traffic is not "ahead"


@dataclass
class Telemetry:
    scenario_kind: str
    speed: float
    desired_speed: float
    lane: int
    goal_lane: int | None
    tau_min: float
    conflict_ahead: bool
    gap_lead: float = math.inf
    lead_speed: float = 0.0
    gap_follow: float = math.inf
    follower_speed: float = 0.0

    def to_dict(self) -> dict:
        def enc(v):
            return None if isinstance(v, float) and math.isinf(v) else v

        return {
            "scenario_kind": self.scenario_kind,
            "speed": round(self.speed, 3),
            "desired_speed": round(self.desired_speed, 3),
            "lane": self.lane,
            "goal_lane": self.goal_lane,
            "tau_min": enc(round(self.tau_min, 3) if math.isfinite(self.tau_min) else self.tau_min),
            "conflict_ahead": self.conflict_ahead,
            "gap_lead": enc(round(self.gap_lead, 3) if math.isfinite(self.gap_lead) else self.gap_lead),
            "lead_speed": round(self.lead_speed, 3),
            "gap_follow": enc(round(self.gap_follow, 3) if math.isfinite(self.gap_follow) else self.gap_follow),
            "follower_speed": round(self.follower_speed, 3),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Telemetry":
        def dec(v):
            return math.inf if v is None else float(v)

        return cls(
            scenario_kind=data["scenario_kind"],
            speed=float(data["speed"]),
            desired_speed=float(data["desired_speed"]),
            lane=int(data["lane"]),
            goal_lane=None if data["goal_lane"] is None else int(data["goal_lane"]),
            tau_min=dec(data["tau_min"]),
            conflict_ahead=bool(data["conflict_ahead"]),
            gap_lead=dec(data.get("gap_lead")),
            lead_speed=float(data.get("lead_speed", 0.0)),
            gap_follow=dec(data.get("gap_follow")),
            follower_speed=float(data.get("follower_speed", 0.0)),
        )


def _conflict_ahead(state, assessment) -> bool:
    """Is the closest-conflict vehicle ahead of the ego or on a crossing course?"""
    finite = [(tau, vid) for vid, tau, _d in assessment.per_vehicle_tau if math.isfinite(tau)]
    if not finite:
        return False
    _tau, vid = min(finite)
    other = next(v for v in state.background if v.id == vid)
    ego = state.ego
    dx, dy = other.x - ego.x, other.y - ego.y
    c, s = math.cos(ego.heading), math.sin(ego.heading)
    rel_x = c * dx + s * dy
    heading_gap = abs(wrap_angle(other.heading - ego.heading))
    crossing = math.pi / 4 < heading_gap < 3 * math.pi / 4
    return rel_x > 0.0 or crossing


def goal_lane_for(state) -> int | None:
    """Next lane toward the scenario goal, or None when no change is required."""
    region = state.config.success_region
    if region.max_lane is not None and state.ego.lane > region.max_lane:
        return state.ego.lane - 1
    return None


def build_telemetry(state, assessment) -> Telemetry:
    ego = state.ego
    goal = goal_lane_for(state)
    probe_lane = goal if goal is not None else ego.lane
    gap_lead, lead_speed, gap_follow, follower_speed = lane_gaps(state, probe_lane)
    return Telemetry(
        scenario_kind=state.config.kind,
        speed=ego.speed,
        desired_speed=ego.profile.desired_speed,
        lane=ego.lane,
        goal_lane=goal,
        tau_min=assessment.tau_min,
        conflict_ahead=_conflict_ahead(state, assessment),
        gap_lead=gap_lead,
        lead_speed=lead_speed,
        gap_follow=gap_follow,
        follower_speed=follower_speed,
    )


def gap_is_safe(telemetry: Telemetry) -> bool:
    need_ahead = GAP_BASE + GAP_PER_SPEED * telemetry.speed
    need_behind = GAP_BASE + GAP_PER_SPEED * telemetry.follower_speed
    return telemetry.gap_lead >= need_ahead and telemetry.gap_follow >= need_behind


def _cascade(telemetry: Telemetry) -> Maneuver:
    if telemetry.tau_min < CONFLICT_TAU and telemetry.conflict_ahead:
        return Maneuver.SlowDown
    if telemetry.speed < SLOW_FRACTION * telemetry.desired_speed and telemetry.tau_min > CLEAR_TAU:
        return Maneuver.SpeedUp
    if telemetry.goal_lane is not None and telemetry.goal_lane != telemetry.lane and gap_is_safe(telemetry):
        return Maneuver.TurnLeft if telemetry.goal_lane < telemetry.lane else Maneuver.TurnRight
    return Maneuver.Cruise


def scripted_decide(telemetry: Telemetry,
                    constraints: Sequence[ConstraintRule] = ()) -> Maneuver:
    """Rule-cascade maneuver choice, honoring active constraints.

    Runs purely on the telemetry record, so a decision recovered from a
    prompt's machine-readable line matches the one made on live state.
    """
    pick = _cascade(telemetry)
    order = [pick, Maneuver.Cruise, Maneuver.SlowDown, Maneuver.SpeedUp,
             Maneuver.TurnLeft, Maneuver.TurnRight]
    for action in order:
        forbidden = any(
            rule.forbids(telemetry.scenario_kind, action, telemetry.tau_min, telemetry.speed)
            for rule in constraints
        )
        if not forbidden:
            return action
    # contradictory rule set: braking is the least damaging way out
    return Maneuver.SlowDown
