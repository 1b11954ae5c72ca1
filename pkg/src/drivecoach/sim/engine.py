"""Episode state, physics stepping, observations, rewards, and termination.

The ego executes high-level maneuvers through cascaded controllers: a
proportional speed loop toward a persistent target speed, and a lateral
loop steering toward the target lane center (or the fixed turn route at
the intersection). Background vehicles follow car-following accelerations
with politeness-gated lane changes. All vehicles share one kinematic
bicycle integrator, so physics limits apply uniformly.

Everything downstream of reset() is deterministic: randomness enters only
through the spawn RNG, never during stepping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .. import risk as risk_engine
from ..errors import UsageError
from .idm import EMERGENCY_DECEL, idm_accel_flagged, mobil_accepts
from .scenarios import (
    LANE_WIDTH,
    MERGE_RAMP_END,
    N_NEIGHBOR_SLOTS,
    SENSING_RADIUS,
    Geometry,
    ScenarioConfig,
    build_geometry,
    spawn,
)
from .vehicles import MANEUVER_TOKENS, Maneuver, VehicleState, rects_overlap, wrap_angle

# lateral steering gains and actuator limit; the limit leaves headroom above
# the 0.46 rad feedforward a radius-6 arc demands at wheelbase 3
KP_LATERAL = 0.4
KD_HEADING = 0.3
MAX_STEER = 0.6
# longitudinal proportional gain and per-action speed increment
KP_SPEED = 0.5
SPEED_STEP = 2.0
# plant-level curve handling: steering can hold this much lateral acceleration,
# and the speed loop starts shedding speed a comfortable braking distance early
MAX_LATERAL_ACCEL = 3.0
COMFORT_CURVE_DECEL = 1.0

REWARD_SPEED = 0.4
REWARD_COLLISION = 10.0
REWARD_OFF_ROAD = 5.0
REWARD_SUCCESS = 5.0


@dataclass
class Observation:
    """Ego block is the world pose; neighbor columns are ego-frame relative
    position/velocity plus the neighbor's absolute heading encoding."""

    ego: np.ndarray  # (6,) [x, y, vx, vy, cos h, sin h]
    neighbors: np.ndarray  # (6, N) feature-by-slot, zero-padded
    neighbor_count: int
    neighbor_ids: list[int] = field(default_factory=list)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.ego, self.neighbors.T.ravel()])

    @property
    def ego_speed(self) -> float:
        return float(math.hypot(self.ego[2], self.ego[3]))


FLAT_OBS_DIM = 6 + 6 * N_NEIGHBOR_SLOTS


@dataclass
class StepOutcome:
    observation: Observation
    reward: float
    done: bool
    events: set[str]
    info: dict


@dataclass
class ScenarioState:
    config: ScenarioConfig
    geometry: Geometry
    ego: VehicleState
    background: list[VehicleState]
    disturbed_ids: list[int]
    decision_step: int = 0
    ego_target_speed: float = 0.0
    done: bool = False
    last_events: set[str] = field(default_factory=set)

    @property
    def vehicles(self) -> list[VehicleState]:
        return [self.ego] + self.background

    def state_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "ego": self.ego.to_dict(),
            "background": [v.to_dict() for v in self.background],
            "disturbed_ids": list(self.disturbed_ids),
            "decision_step": self.decision_step,
            "ego_target_speed": self.ego_target_speed,
            "done": self.done,
            "last_events": sorted(self.last_events),
        }

    @classmethod
    def from_state_dict(cls, d: dict) -> "ScenarioState":
        config = ScenarioConfig.from_dict(d["config"])
        kind = config.kind
        return cls(
            config=config,
            geometry=build_geometry(kind),
            ego=VehicleState.from_dict(d["ego"], kind),
            background=[VehicleState.from_dict(v, kind) for v in d["background"]],
            disturbed_ids=list(d["disturbed_ids"]),
            decision_step=d["decision_step"],
            ego_target_speed=d["ego_target_speed"],
            done=d["done"],
            last_events=set(d["last_events"]),
        )


def reset(config: ScenarioConfig, seed: int | None = None):
    """Spawn a fresh episode; identical (config, seed) pairs spawn identically."""
    config.validate()
    rng = np.random.default_rng(config.seed if seed is None else seed)
    geometry = build_geometry(config.kind)
    table = spawn(config, geometry, rng)
    state = ScenarioState(
        config=config,
        geometry=geometry,
        ego=table.ego,
        background=table.background,
        disturbed_ids=table.disturbed_ids,
        ego_target_speed=table.ego.speed,
    )
    return state, observe(state)


# --- lane bookkeeping -------------------------------------------------------

def nearest_lane_index(state: ScenarioState, veh: VehicleState) -> int:
    lanes = state.geometry.lanes
    best = min(lanes, key=lambda lane: abs(lane.lateral(veh.x, veh.y)))
    return best.index


def _lane_member(state: ScenarioState, veh: VehicleState, lane_index: int) -> bool:
    lane = state.geometry.lanes[lane_index]
    if abs(wrap_angle(veh.heading - lane.heading)) > math.pi / 4:
        return False
    return nearest_lane_index(state, veh) == lane_index


def _leader_in_lane(state: ScenarioState, veh: VehicleState, lane_index: int):
    """Closest vehicle ahead of `veh` along the lane, and the bumper gap."""
    lane = state.geometry.lanes[lane_index]
    s0 = lane.along(veh.x, veh.y)
    best, best_ds = None, math.inf
    for other in state.vehicles:
        if other.id == veh.id or not _lane_member(state, other, lane_index):
            continue
        ds = lane.along(other.x, other.y) - s0
        if 0.0 < ds < best_ds:
            best, best_ds = other, ds
    if best is None:
        return None, math.inf
    return best, best_ds - (veh.length + best.length) / 2.0


def _follower_in_lane(state: ScenarioState, veh: VehicleState, lane_index: int):
    lane = state.geometry.lanes[lane_index]
    s0 = lane.along(veh.x, veh.y)
    best, best_ds = None, math.inf
    for other in state.vehicles:
        if other.id == veh.id or not _lane_member(state, other, lane_index):
            continue
        ds = s0 - lane.along(other.x, other.y)
        if 0.0 < ds < best_ds:
            best, best_ds = other, ds
    if best is None:
        return None, math.inf
    return best, best_ds - (veh.length + best.length) / 2.0


def lane_gaps(state: ScenarioState, lane_index: int, veh: VehicleState | None = None):
    """Bumper gaps and speeds around `veh` (default ego) in the given lane.

    Returns (gap_lead, lead_speed, gap_follow, follower_speed); gaps are +inf
    and speeds 0 when the slot is empty.
    """
    veh = state.ego if veh is None else veh
    lead, gap_lead = _leader_in_lane(state, veh, lane_index)
    follower, gap_follow = _follower_in_lane(state, veh, lane_index)
    return (
        gap_lead, lead.speed if lead is not None else 0.0,
        gap_follow, follower.speed if follower is not None else 0.0,
    )


# --- controllers ------------------------------------------------------------

def _steer_command(lateral_err_left: float, heading_err: float, speed: float) -> float:
    """Cross-track term is normalized by speed so the commanded correction
    angle stays speed-independent; the heading term damps the approach."""
    raw = KP_LATERAL * lateral_err_left / max(speed, 1.0) + KD_HEADING * heading_err
    return min(max(raw, -MAX_STEER), MAX_STEER)


def _ego_steer(state: ScenarioState, ego: VehicleState) -> float:
    if state.geometry.ego_route is not None:
        route = state.geometry.ego_route
        s, lat, path_heading = route.project(ego.x, ego.y)
        # feedforward holds the arc; feedback only corrects the residual
        feedforward = math.atan(ego.wheelbase * route.curvature_at(s))
        feedback = _steer_command(-lat, wrap_angle(path_heading - ego.heading), ego.speed)
        return min(max(feedforward + feedback, -MAX_STEER), MAX_STEER)
    target_y = -LANE_WIDTH * ego.target_lane
    return _steer_command(target_y - ego.y, wrap_angle(-ego.heading), ego.speed)


def _curve_speed_cap(state: ScenarioState, ego: VehicleState) -> float:
    """Highest speed the steering can track on the curvature ahead.

    The slow proportional speed loop needs early warning, so the window covers
    a comfortable deceleration from the current speed plus a margin.
    """
    route = state.geometry.ego_route
    if route is None:
        return math.inf
    s, _, _ = route.project(ego.x, ego.y)
    lookahead = ego.speed * ego.speed / (2.0 * COMFORT_CURVE_DECEL) + 8.0
    radius = route.min_radius(s, s + lookahead)
    if math.isinf(radius):
        return math.inf
    return math.sqrt(MAX_LATERAL_ACCEL * radius)


def _crossing_ego_gap(state: ScenarioState, veh: VehicleState):
    """Gap to an ego blocking this vehicle's lane from across it, if any.

    Car following handles an ego traveling in the lane; this covers the rest,
    mainly the intersection box. Returns (bumper gap, ego speed along the
    lane) or None.
    """
    ego = state.ego
    if _lane_member(state, ego, veh.lane):
        return None
    lane = state.geometry.lanes[veh.lane]
    if abs(lane.lateral(ego.x, ego.y)) > (LANE_WIDTH + ego.width) / 2.0:
        return None
    ds = lane.along(ego.x, ego.y) - lane.along(veh.x, veh.y)
    if ds <= 0.0:
        return None
    evx, evy = ego.velocity
    v_along = evx * math.cos(lane.heading) + evy * math.sin(lane.heading)
    return ds - (veh.length + ego.length) / 2.0, max(0.0, v_along)


def _background_control(state: ScenarioState, veh: VehicleState):
    """IDM acceleration (current and target lane) plus lane-tracking steering."""
    emergency_on_ego = False
    accel = math.inf
    for lane_index in {veh.lane, veh.target_lane}:
        leader, gap = _leader_in_lane(state, veh, lane_index)
        a, flagged = idm_accel_flagged(gap if leader else math.inf, veh.speed,
                                       leader.speed if leader else 0.0, veh.profile)
        accel = min(accel, a)
        if flagged and leader is not None and leader.is_ego:
            emergency_on_ego = True
    blocking = _crossing_ego_gap(state, veh)
    if blocking is not None:
        # last-moment reaction, not a polite yield: a short-headway profile
        # brakes hard only once the blocking ego is genuinely close
        panic = replace(veh.profile, time_headway=0.3)
        a, flagged = idm_accel_flagged(blocking[0], veh.speed, blocking[1], panic)
        if a < 0.0:
            accel = min(accel, a)
            emergency_on_ego = emergency_on_ego or flagged
    lane = state.geometry.lanes[veh.target_lane]
    lateral = -lane.lateral(veh.x, veh.y)  # offset to centerline, left-positive
    steer = _steer_command(lateral, wrap_angle(lane.heading - veh.heading), veh.speed)
    return accel, steer, emergency_on_ego


def _integrate(veh: VehicleState, accel: float, steer: float, dt: float) -> None:
    veh.speed = max(0.0, veh.speed + accel * dt)
    veh.heading = wrap_angle(veh.heading + veh.speed / veh.wheelbase * math.tan(steer) * dt)
    veh.x += veh.speed * math.cos(veh.heading) * dt
    veh.y += veh.speed * math.sin(veh.heading) * dt


# --- lane changes for background traffic ------------------------------------

def _bg_lane_change_pass(state: ScenarioState) -> None:
    if state.config.kind == "intersection":
        return  # cross traffic stays in its lane
    max_lane = 1 if state.config.kind == "merge" else state.geometry.ego_lane_count - 1
    for veh in state.background:
        lane = state.geometry.lanes[veh.lane]
        if veh.target_lane != veh.lane or abs(lane.lateral(veh.x, veh.y)) > 0.5:
            continue  # mid-change; settle first
        lead, gap = _leader_in_lane(state, veh, veh.lane)
        a_before, _ = idm_accel_flagged(gap if lead else math.inf, veh.speed,
                                        lead.speed if lead else 0.0, veh.profile)
        old_f, old_f_gap = _follower_in_lane(state, veh, veh.lane)
        for cand in (veh.lane - 1, veh.lane + 1):
            if not 0 <= cand <= max_lane:
                continue
            if _try_lane_change(state, veh, cand, lead, a_before, old_f, old_f_gap):
                break


def _try_lane_change(state, veh, cand, cur_lead, a_before, old_f, old_f_gap) -> bool:
    new_lead, new_lead_gap = _leader_in_lane(state, veh, cand)
    a_after, _ = idm_accel_flagged(new_lead_gap if new_lead else math.inf, veh.speed,
                                   new_lead.speed if new_lead else 0.0, veh.profile)
    new_f, new_f_gap = _follower_in_lane(state, veh, cand)
    if new_f is not None:
        nf_lead, nf_gap = _leader_in_lane(state, new_f, cand)
        a_nf_before, _ = idm_accel_flagged(nf_gap if nf_lead else math.inf, new_f.speed,
                                           nf_lead.speed if nf_lead else 0.0, new_f.profile)
        a_nf_after, _ = idm_accel_flagged(new_f_gap, new_f.speed, veh.speed, new_f.profile)
    else:
        a_nf_before = a_nf_after = 0.0
    if old_f is not None:
        a_of_before, _ = idm_accel_flagged(old_f_gap, old_f.speed, veh.speed, old_f.profile)
        if cur_lead is not None:
            lane = state.geometry.lanes[veh.lane]
            ds = lane.along(cur_lead.x, cur_lead.y) - lane.along(old_f.x, old_f.y)
            gap_after = ds - (old_f.length + cur_lead.length) / 2.0
            a_of_after, _ = idm_accel_flagged(gap_after, old_f.speed, cur_lead.speed, old_f.profile)
        else:
            a_of_after, _ = idm_accel_flagged(math.inf, old_f.speed, 0.0, old_f.profile)
    else:
        a_of_before = a_of_after = 0.0
    if mobil_accepts(a_before, a_after, a_nf_before, a_nf_after, a_of_before, a_of_after, veh.profile):
        veh.target_lane = cand
        return True
    return False


# --- events -----------------------------------------------------------------

def _off_road(state: ScenarioState, ego: VehicleState) -> bool:
    kind = state.config.kind
    if kind == "intersection":
        _, lat, _ = state.geometry.ego_route.project(ego.x, ego.y)
        return abs(lat) > LANE_WIDTH
    top = 0.5 * LANE_WIDTH
    bottom = -LANE_WIDTH * (len(state.geometry.lanes) - 1) - 0.5 * LANE_WIDTH
    if ego.y > top or ego.y < bottom:
        return True
    if kind == "merge":
        on_ramp_band = ego.y < -LANE_WIDTH * 1.5  # below the mainline edge
        if on_ramp_band and ego.x > MERGE_RAMP_END:
            return True
    return False


def _detect_events(state: ScenarioState) -> set[str]:
    ego = state.ego
    events: set[str] = set()
    for veh in state.background:
        # cheap reject before the separating-axis test
        if abs(veh.x - ego.x) < 12.0 and abs(veh.y - ego.y) < 8.0 and rects_overlap(ego, veh):
            events.add("collision")
            break
    if _off_road(state, ego):
        events.add("off_road")
    if "collision" not in events and "off_road" not in events:
        if state.config.success_region.contains(ego.x, ego.lane):
            events.add("success")
    return events


# --- the decision step ------------------------------------------------------

def apply_maneuver(state: ScenarioState, maneuver: Maneuver) -> None:
    ego = state.ego
    # Speed targets anchor at the achieved speed so a setpoint the plant could
    # not reach (curve cap, traffic) does not wind up and eat later commands.
    # SlowDown additionally ratchets downward: repeated braking commands build
    # authority instead of re-issuing the same gentle step.
    if maneuver == Maneuver.SlowDown:
        state.ego_target_speed = max(0.0, min(state.ego_target_speed, ego.speed) - SPEED_STEP)
    elif maneuver == Maneuver.SpeedUp:
        cap = 1.5 * ego.profile.desired_speed
        state.ego_target_speed = min(cap, ego.speed + SPEED_STEP)
    elif maneuver == Maneuver.Cruise:
        state.ego_target_speed = ego.speed
    elif maneuver == Maneuver.TurnLeft and state.geometry.ego_route is None:
        ego.target_lane = max(0, ego.target_lane - 1)
    elif maneuver == Maneuver.TurnRight and state.geometry.ego_route is None:
        ego.target_lane = min(state.geometry.ego_lane_count - 1, ego.target_lane + 1)
    # turns at the intersection (no adjacent lane) leave targets untouched


def step(state: ScenarioState, maneuver: Maneuver,
         risk_params: risk_engine.RiskParams | None = None) -> StepOutcome:
    if state.done:
        raise UsageError("step called on a terminal episode")
    params = risk_params or risk_engine.RiskParams()
    apply_maneuver(state, maneuver)
    _bg_lane_change_pass(state)

    dt = state.config.dt_physics
    events: set[str] = set()
    emergency_ids: list[int] = []
    min_distance = math.inf
    for _ in range(state.config.substeps):
        ego = state.ego
        target = min(state.ego_target_speed, _curve_speed_cap(state, ego))
        ego_accel = KP_SPEED * (target - ego.speed)
        ego_accel = min(max(ego_accel, -EMERGENCY_DECEL), ego.profile.max_accel)
        controls = [(ego, ego_accel, _ego_steer(state, ego))]
        for veh in state.background:
            accel, steer, emergency = _background_control(state, veh)
            if emergency and veh.id not in emergency_ids:
                emergency_ids.append(veh.id)
            controls.append((veh, accel, steer))
        for veh, accel, steer in controls:
            _integrate(veh, accel, steer, dt)
        for veh in state.vehicles:
            veh.lane = nearest_lane_index(state, veh)
        for veh in state.background:
            d = math.hypot(veh.x - state.ego.x, veh.y - state.ego.y)
            min_distance = min(min_distance, d)
        events = _detect_events(state)
        if events:
            break

    state.decision_step += 1
    if not events and state.decision_step >= state.config.horizon:
        events = {"timeout"}
    r = reward(state, maneuver, events)
    state.done = bool(events)
    state.last_events = set(events)
    assessment = risk_engine.assess(state, params)
    info = {
        "min_distance": min_distance,
        "tau_min": assessment.tau_min,
        "per_vehicle_tau": assessment.per_vehicle_tau,
        "emergency_ids": emergency_ids,
        "decision_step": state.decision_step,
    }
    return StepOutcome(observation=observe(state), reward=r, done=state.done,
                       events=events, info=info)


def reward(state: ScenarioState, maneuver: Maneuver, events: set[str]) -> float:
    """Speed shaping toward the ego's desired speed plus terminal terms."""
    v_hi = state.ego.profile.desired_speed
    shaped = REWARD_SPEED * min(max(state.ego.speed / v_hi, 0.0), 1.0)
    r = shaped
    if "collision" in events:
        r -= REWARD_COLLISION
    if "off_road" in events:
        r -= REWARD_OFF_ROAD
    if "success" in events:
        r += REWARD_SUCCESS
    return r


def observe(state: ScenarioState) -> Observation:
    ego = state.ego
    evx, evy = ego.velocity
    cos_h, sin_h = math.cos(ego.heading), math.sin(ego.heading)
    ego_block = np.array([ego.x, ego.y, evx, evy, cos_h, sin_h], dtype=np.float64)

    in_range = []
    for veh in state.background:
        d = math.hypot(veh.x - ego.x, veh.y - ego.y)
        if d <= SENSING_RADIUS:
            in_range.append((d, veh.id, veh))
    in_range.sort(key=lambda item: (item[0], item[1]))
    in_range = in_range[:N_NEIGHBOR_SLOTS]

    cols = np.zeros((6, N_NEIGHBOR_SLOTS), dtype=np.float64)
    ids = []
    for slot, (_, _, veh) in enumerate(in_range):
        dx, dy = veh.x - ego.x, veh.y - ego.y
        vvx, vvy = veh.velocity
        dvx, dvy = vvx - evx, vvy - evy
        # rotate relative quantities into the ego frame
        cols[0, slot] = cos_h * dx + sin_h * dy
        cols[1, slot] = -sin_h * dx + cos_h * dy
        cols[2, slot] = cos_h * dvx + sin_h * dvy
        cols[3, slot] = -sin_h * dvx + cos_h * dvy
        cols[4, slot] = math.cos(veh.heading)
        cols[5, slot] = math.sin(veh.heading)
        ids.append(veh.id)
    return Observation(ego=ego_block, neighbors=cols, neighbor_count=len(ids), neighbor_ids=ids)


def preview(state: ScenarioState, maneuver: Maneuver,
            risk_params: risk_engine.RiskParams | None = None):
    """Advance a private copy one decision period; the real state is untouched.

    Stepping is deterministic, so previewing a maneuver and then taking it
    produce the same successor.
    """
    clone = ScenarioState.from_state_dict(state.state_dict())
    clone.done = False  # allow previewing from a freshly terminal state copy
    outcome = step(clone, maneuver, risk_params)
    return clone, outcome.events, bool(outcome.info["emergency_ids"])


def trace_record(state: ScenarioState, maneuver: Maneuver, outcome: StepOutcome) -> dict:
    return {
        "t": state.decision_step,
        "ego": {k: state.ego.to_dict()[k] for k in ("x", "y", "speed", "heading", "lane")},
        "neighbors": [
            {k: v.to_dict()[k] for k in ("id", "x", "y", "speed", "heading", "lane")}
            for v in state.background
        ],
        "maneuver": MANEUVER_TOKENS[maneuver],
        "reward": outcome.reward,
        "events": sorted(outcome.events),
    }


class TrafficEnv:
    """Thin stateful wrapper bundling config, risk params, and episode state."""

    def __init__(self, config: ScenarioConfig, risk_params: risk_engine.RiskParams | None = None):
        config.validate()
        self.config = config
        self.risk_params = risk_params or risk_engine.RiskParams()
        self.state: ScenarioState | None = None

    def reset(self, seed: int | None = None) -> Observation:
        self.state, obs = reset(self.config, seed)
        return obs

    def step(self, maneuver: Maneuver) -> StepOutcome:
        if self.state is None:
            raise UsageError("step called before reset")
        return step(self.state, maneuver, self.risk_params)

    def observe(self) -> Observation:
        if self.state is None:
            raise UsageError("observe called before reset")
        return observe(self.state)
