"""Car-following acceleration and the lane-change incentive test for
background traffic."""

from __future__ import annotations

import math

from .vehicles import DriverProfile

# hard physical braking limit, beyond any profile's comfort_decel
EMERGENCY_DECEL = 8.0


def idm_accel_flagged(
    gap: float, v: float, v_lead: float, profile: DriverProfile
) -> tuple[float, bool]:
    """Longitudinal acceleration plus an emergency flag.

    gap is bumper-to-bumper distance to the leader in meters; math.inf (or any
    non-finite value) means no leader. The flag is set when the hard braking
    clamp binds: the gap is already non-positive, or the unclamped demand is at
    or past the physical limit.
    """
    free = 1.0 - (v / profile.desired_speed) ** 4
    if not math.isfinite(gap):
        a = profile.max_accel * free
        return max(-EMERGENCY_DECEL, min(profile.max_accel, a)), False
    if gap <= 0.0:
        return -EMERGENCY_DECEL, True
    dv = v - v_lead
    s_star = (
        profile.min_gap
        + v * profile.time_headway
        + v * dv / (2.0 * math.sqrt(profile.max_accel * profile.comfort_decel))
    )
    a = profile.max_accel * (free - (s_star / gap) ** 2)
    return max(-EMERGENCY_DECEL, min(profile.max_accel, a)), a <= -EMERGENCY_DECEL


def idm_accel(gap: float, v: float, v_lead: float, profile: DriverProfile) -> float:
    return idm_accel_flagged(gap, v, v_lead, profile)[0]


def mobil_accepts(
    a_self_before: float,
    a_self_after: float,
    a_new_follower_before: float,
    a_new_follower_after: float,
    a_old_follower_before: float,
    a_old_follower_after: float,
    profile: DriverProfile,
) -> bool:
    """Politeness-weighted incentive test over already-evaluated accelerations.

    Safety first: the prospective new follower must not be forced below its
    comfortable braking. Then the weighted acceleration gain must clear the
    profile's threshold.
    """
    if a_new_follower_after < -profile.comfort_decel:
        return False
    own_gain = a_self_after - a_self_before
    others_gain = (a_new_follower_after - a_new_follower_before) + (
        a_old_follower_after - a_old_follower_before
    )
    return own_gain + profile.politeness * others_gain > profile.lane_change_accel_gain_threshold
