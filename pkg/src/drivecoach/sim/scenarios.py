"""Scenario configuration, road geometry, and seeded traffic spawning.

Three layouts share one coordinate convention: x east, y north, heading 0
along +x. Lanes are 4 m wide. Same-direction lane indices grow to the
right of travel, so TurnLeft decreases the index.

    merge:        mainline lanes 0..1 (y = 0, -4) plus a ramp lane 2
                  (y = -8) that ends at x = 200; ego starts on the ramp.
    highway:      four straight lanes 0..3 (y = 0..-12).
    intersection: two orthogonal 2-lane roads; ego approaches northbound
                  and turns left onto the westbound lane through a
                  radius-6 arc centered at (-4, -4).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError
from .paths import ArcSegment, Route, StraightSegment
from .vehicles import VehicleState, make_profile

LANE_WIDTH = 4.0
SENSING_RADIUS = 100.0
N_NEIGHBOR_SLOTS = 6

SCENARIO_KINDS = ("intersection", "merge", "highway")

# per-kind spawn defaults (mean speed, std)
_SPAWN_SPEED = {"intersection": (7.0, 1.5), "merge": (20.0, 2.5), "highway": (21.0, 2.5)}
_HORIZON = {"intersection": 30, "merge": 30, "highway": 40}

_STYLES = ("conservative", "standard", "aggressive")
_STYLE_WEIGHTS = (0.3, 0.4, 0.3)


@dataclass(frozen=True)
class SuccessRegion:
    """Conjunction of simple geometric bounds on the ego pose."""

    min_x: float | None = None
    max_x: float | None = None
    max_lane: int | None = None

    def contains(self, x: float, lane: int) -> bool:
        if self.min_x is not None and x < self.min_x:
            return False
        if self.max_x is not None and x > self.max_x:
            return False
        if self.max_lane is not None and lane > self.max_lane:
            return False
        return True

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}

    @classmethod
    def from_dict(cls, d: dict) -> "SuccessRegion":
        unknown = set(d) - {"min_x", "max_x", "max_lane"}
        if unknown:
            raise ConfigError(f"scenario.success_region: unknown key {sorted(unknown)[0]!r}")
        return cls(**d)


@dataclass
class ScenarioConfig:
    kind: str = "merge"
    n_background: int = 5
    spawn_speed_mean: float | None = None  # None -> per-kind default
    spawn_speed_std: float | None = None
    disturbance_fraction: float = 0.15
    dt_physics: float = 0.1
    decision_period: float = 1.0
    horizon: int | None = None  # decision steps; None -> per-kind default
    success_region: SuccessRegion | None = None
    seed: int = 0

    def __post_init__(self):
        if self.spawn_speed_mean is None:
            self.spawn_speed_mean = _SPAWN_SPEED.get(self.kind, (15.0, 2.0))[0]
        if self.spawn_speed_std is None:
            self.spawn_speed_std = _SPAWN_SPEED.get(self.kind, (15.0, 2.0))[1]
        if self.horizon is None:
            self.horizon = _HORIZON.get(self.kind, 30)
        if self.success_region is None:
            self.success_region = default_success_region(self.kind)

    def validate(self) -> None:
        if self.kind not in SCENARIO_KINDS:
            raise ConfigError(f"scenario.kind: {self.kind!r} is not one of {SCENARIO_KINDS}")
        if self.n_background < 0:
            raise ConfigError(f"scenario.n_background: must be >= 0, got {self.n_background}")
        if not 0.0 <= self.disturbance_fraction <= 1.0:
            raise ConfigError(
                f"scenario.disturbance_fraction: must be in [0, 1], got {self.disturbance_fraction}"
            )
        if self.dt_physics <= 0:
            raise ConfigError(f"scenario.dt_physics: must be > 0, got {self.dt_physics}")
        ratio = self.decision_period / self.dt_physics
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ConfigError(
                "scenario.decision_period: must be a positive integer multiple of "
                f"dt_physics, got {self.decision_period} vs {self.dt_physics}"
            )
        if self.horizon <= 0:
            raise ConfigError(f"scenario.horizon: must be > 0, got {self.horizon}")
        if self.spawn_speed_mean <= 0:
            raise ConfigError(f"scenario.spawn_speed_mean: must be > 0, got {self.spawn_speed_mean}")
        if self.spawn_speed_std < 0:
            raise ConfigError(f"scenario.spawn_speed_std: must be >= 0, got {self.spawn_speed_std}")

    @property
    def substeps(self) -> int:
        return int(round(self.decision_period / self.dt_physics))

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["success_region"] = self.success_region.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        if "success_region" in d and isinstance(d["success_region"], dict):
            d["success_region"] = SuccessRegion.from_dict(d["success_region"])
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"scenario: unknown key {sorted(unknown)[0]!r}")
        return cls(**d)


def default_success_region(kind: str) -> SuccessRegion:
    if kind == "merge":
        return SuccessRegion(min_x=240.0, max_lane=1)
    if kind == "highway":
        return SuccessRegion(min_x=250.0)
    return SuccessRegion(max_x=-30.0)  # intersection: clear of the box heading west


MERGE_RAMP_END = 200.0
MERGE_RAMP_LANE = 2


@dataclass(frozen=True)
class Lane:
    """Straight traffic lane used for leader lookup and lateral tracking."""

    index: int
    origin_x: float
    origin_y: float
    heading: float

    def along(self, x: float, y: float) -> float:
        c, s = math.cos(self.heading), math.sin(self.heading)
        return (x - self.origin_x) * c + (y - self.origin_y) * s

    def lateral(self, x: float, y: float) -> float:
        """Left-positive offset of (x, y) from the lane centerline."""
        c, s = math.cos(self.heading), math.sin(self.heading)
        return -(x - self.origin_x) * s + (y - self.origin_y) * c


@dataclass
class Geometry:
    kind: str
    lanes: list[Lane]  # all drivable lanes, including cross-road ones
    ego_lane_count: int  # lanes the ego may target via lane changes
    ego_route: Route | None  # curved reference path (intersection only)

    def lane_center_y(self, index: int) -> float:
        return -LANE_WIDTH * index


def build_geometry(kind: str) -> Geometry:
    if kind == "merge":
        lanes = [Lane(i, 0.0, -LANE_WIDTH * i, 0.0) for i in range(3)]
        return Geometry(kind, lanes, ego_lane_count=3, ego_route=None)
    if kind == "highway":
        lanes = [Lane(i, 0.0, -LANE_WIDTH * i, 0.0) for i in range(4)]
        return Geometry(kind, lanes, ego_lane_count=4, ego_route=None)
    if kind == "intersection":
        eastbound = Lane(0, 0.0, -2.0, 0.0)
        westbound = Lane(1, 0.0, 2.0, math.pi)
        route = Route(
            [
                StraightSegment(2.0, -60.0, math.pi / 2.0, 56.0),  # approach to (2, -4)
                ArcSegment(-4.0, -4.0, 6.0, 0.0, math.pi / 2.0),  # left turn to (-4, 2)
                StraightSegment(-4.0, 2.0, math.pi, 76.0),  # westbound exit
            ]
        )
        return Geometry(kind, [eastbound, westbound], ego_lane_count=1, ego_route=route)
    raise ConfigError(f"scenario.kind: {kind!r} is not one of {SCENARIO_KINDS}")


@dataclass
class SpawnTable:
    ego: VehicleState
    background: list[VehicleState]
    disturbed_ids: list[int] = field(default_factory=list)


def _spaced_positions(rng: np.random.Generator, n: int, lo: float, hi: float, gap: float):
    """n sorted positions in [lo, hi], pushed apart to at least `gap`."""
    pos = np.sort(rng.uniform(lo, hi, size=n))
    for i in range(1, n):
        if pos[i] - pos[i - 1] < gap:
            pos[i] = pos[i - 1] + gap
    return [float(p) for p in pos]


def _draw_speeds(rng: np.random.Generator, profiles, config: ScenarioConfig):
    """Normal speeds truncated to [0, 1.5 * desired]; a fixed-count subset is
    resampled uniformly as the abnormal-speed disturbance."""
    n = len(profiles)
    speeds = rng.normal(config.spawn_speed_mean, config.spawn_speed_std, size=n)
    speeds = [float(np.clip(s, 0.0, 1.5 * p.desired_speed)) for s, p in zip(speeds, profiles)]
    n_disturbed = int(round(config.disturbance_fraction * n))
    disturbed = sorted(rng.choice(n, size=n_disturbed, replace=False).tolist()) if n_disturbed else []
    for i in disturbed:
        speeds[i] = float(rng.uniform(0.3 * config.spawn_speed_mean, 1.7 * config.spawn_speed_mean))
    return speeds, disturbed


def spawn(config: ScenarioConfig, geometry: Geometry, rng: np.random.Generator) -> SpawnTable:
    config.validate()
    kind = config.kind
    styles = list(rng.choice(_STYLES, size=config.n_background, p=_STYLE_WEIGHTS))
    profiles = [make_profile(str(s), kind) for s in styles]
    speeds, disturbed_idx = _draw_speeds(rng, profiles, config)

    background: list[VehicleState] = []
    next_id = 1
    if kind in ("merge", "highway"):
        ego_lane = MERGE_RAMP_LANE if kind == "merge" else 2
        ego = VehicleState(
            id=0,
            x=20.0,
            y=-LANE_WIDTH * ego_lane,
            speed=15.0 if kind == "merge" else 20.0,
            heading=0.0,
            lane=ego_lane,
            profile=make_profile("standard", kind),
            is_ego=True,
        )
        if kind == "merge":
            # Mainline traffic paced to occupy the merge zone when the ego
            # arrives: cars near the ego's x at similar speed stay abeam for
            # the whole approach, so the ego has to match speed and pick a
            # gap instead of joining an empty road. Lane 1 borders the ramp
            # and carries most of the platoon.
            bg_lanes, lane_p = [1, 0], [0.7, 0.3]
            window = {1: (-30.0, 95.0), 0: (0.0, 150.0)}
        else:
            bg_lanes, lane_p = [0, 1, 2, 3], None
            window = {lane: (10.0, 260.0) for lane in bg_lanes}
        lane_of = [int(l) for l in rng.choice(bg_lanes, size=config.n_background, p=lane_p)]
        per_lane: dict[int, list[int]] = {}
        for i, lane in enumerate(lane_of):
            per_lane.setdefault(lane, []).append(i)
        for lane, members in sorted(per_lane.items()):
            lo, hi = window[lane]
            # the ego's own lane spawns downstream only, keeping its pocket clear
            if lane == ego.lane:
                lo = max(lo, ego.x + 20.0)
            xs = _spaced_positions(rng, len(members), lo, hi, 18.0)
            for i, x in zip(members, xs):
                background.append(
                    VehicleState(
                        id=next_id,
                        x=x,
                        y=-LANE_WIDTH * lane,
                        speed=speeds[i],
                        heading=0.0,
                        lane=lane,
                        profile=profiles[i],
                    )
                )
                next_id += 1
    else:  # intersection
        ego = VehicleState(
            id=0,
            x=2.0,
            y=-40.0,
            speed=7.0,
            heading=math.pi / 2.0,
            lane=0,
            profile=make_profile("standard", kind),
            is_ego=True,
        )
        direction = [int(d) for d in rng.choice([0, 1], size=config.n_background)]
        per_dir: dict[int, list[int]] = {}
        for i, d in enumerate(direction):
            per_dir.setdefault(d, []).append(i)
        for d, members in sorted(per_dir.items()):
            xs = _spaced_positions(rng, len(members), -80.0, 70.0, 16.0)
            for i, x in zip(members, xs):
                if abs(x) < 6.0:
                    x = 6.0 if x >= 0 else -6.0  # keep the conflict box clear at t=0
                background.append(
                    VehicleState(
                        id=next_id,
                        x=x,
                        y=-2.0 if d == 0 else 2.0,
                        speed=speeds[i],
                        heading=0.0 if d == 0 else math.pi,
                        lane=d,
                        profile=profiles[i],
                    )
                )
                next_id += 1

    disturbed_ids = [background[i].id for i in disturbed_idx] if background else []
    return SpawnTable(ego=ego, background=background, disturbed_ids=disturbed_ids)
