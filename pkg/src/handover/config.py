"""World configuration: geometry, actuator models, object kinds and pre-throw poses.

Coordinates: the thrower shoulder sits above the origin, the catcher base at
``(base_separation, 0, 0)``; ``z`` is up and the table surface is ``z = floor_height``.
The thrower arm moves in the ``x``-``z`` plane.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

from handover.errors import ConfigError


@dataclass(frozen=True)
class ObjectKind:
    name: str
    radius: float
    # release-velocity noise std (m/s): across the forearm axis and along it
    noise_std: float
    axial_noise_std: float | None = None


OBJECT_KINDS: dict[str, ObjectKind] = {
    "ball": ObjectKind("ball", 0.03, 0.05),
    "cube": ObjectKind("cube", 0.03, 0.10),
    "rod": ObjectKind("rod", 0.02, 0.05, axial_noise_std=0.20),
    # held-out shapes for generalisation checks
    "novel_0": ObjectKind("novel_0", 0.035, 0.15),
    "novel_1": ObjectKind("novel_1", 0.025, 0.08, axial_noise_std=0.25),
    "novel_2": ObjectKind("novel_2", 0.04, 0.12, axial_noise_std=0.16),
}
KIND_NAMES: tuple[str, ...] = tuple(OBJECT_KINDS)


@dataclass(frozen=True)
class PreThrowPose:
    name: str
    # initial object (grasp frame) position in the arm plane, (x, z)
    grasp_point: tuple[float, float]
    noise_multiplier: float


PRE_THROW_POSES: dict[str, PreThrowPose] = {
    "A": PreThrowPose("A", (-0.20, 0.72), 2.0),  # object resting on an open hand
    "B": PreThrowPose("B", (-0.22, 0.70), 1.5),  # pinched, gripper-like
    "C": PreThrowPose("C", (-0.24, 0.68), 1.0),  # firm power grasp
}

WIND_DIRECTIONS = {
    "opposing": (-1.0, 0.0, 0.0),
    "along": (1.0, 0.0, 0.0),
    "orthogonal": (0.0, 1.0, 0.0),
}


def wind_vector(direction: str, magnitude: float) -> tuple[float, float, float]:
    """Constant wind acceleration (m/s^2) for a named direction relative to the throw."""
    try:
        d = WIND_DIRECTIONS[direction]
    except KeyError:
        raise ConfigError(f"unknown wind direction {direction!r}; expected one of {sorted(WIND_DIRECTIONS)}") from None
    return tuple(float(magnitude) * c for c in d)  # type: ignore[return-value]


@dataclass(frozen=True)
class GapInjection:
    """Stand-in for a sim-to-real dynamics gap.

    Each episode draws ``goal_bias ~ U[-goal_bias_range, goal_bias_range]^3``; at release the
    object velocity is shifted by ``goal_bias / nominal_flight_time`` so the realised
    trajectory lands about ``goal_bias`` away from where the thrower aimed. Release noise is
    multiplied by ``release_noise_multiplier``.
    """

    enabled: bool = False
    goal_bias_range: float = 0.1
    release_noise_multiplier: float = 1.0
    nominal_flight_time: float = 0.45

    def __post_init__(self) -> None:
        if self.goal_bias_range < 0 or self.release_noise_multiplier < 0 or self.nominal_flight_time <= 0:
            raise ConfigError("invalid gap injection parameters")

    @property
    def bias_range(self) -> float:
        return self.goal_bias_range if self.enabled else 0.0

    @property
    def noise_multiplier(self) -> float:
        return self.release_noise_multiplier if self.enabled else 1.0


def _vec(v, n: int, name: str) -> tuple[float, ...]:
    t = tuple(float(x) for x in v)
    if len(t) != n or not all(math.isfinite(x) for x in t):
        raise ConfigError(f"{name} must be {n} finite numbers, got {v!r}")
    return t


@dataclass(frozen=True)
class EnvConfig:
    dt_control: float = 0.05
    substeps: int = 6
    gravity: tuple[float, float, float] = (0.0, 0.0, -9.81)
    base_separation: float = 1.5
    horizon: int = 60
    floor_height: float = 0.0
    objects: tuple[str, ...] = ("ball", "cube", "rod")
    pre_throw_pose: str = "C"
    wind: tuple[float, float, float] = (0.0, 0.0, 0.0)
    history_frames: int = 2
    estimator_frames: int = 20

    # thrower: planar 2-joint arm (shoulder pitch, elbow pitch) with a grip
    shoulder_height: float = 0.3
    link_lengths: tuple[float, float] = (0.3, 0.3)
    joint_lower: tuple[float, float] = (0.0, -2.6)
    joint_upper: tuple[float, float] = (3.1, 0.0)
    stiffness: float = 600.0
    damping: float = 2.0 * math.sqrt(600.0)
    arm_inertia: tuple[float, float] = (0.006, 0.003)
    joint_friction: float = 0.5
    max_joint_delta: float = 1.0
    grip_time_constant: float = 0.02
    release_threshold: float = 0.3

    # catcher: velocity-controlled palm
    palm_home: tuple[float, float, float] = (1.05, 0.0, 0.55)
    palm_normal: tuple[float, float, float] = (0.0, 0.0, 1.0)
    palm_radius: float = 0.1
    palm_max_speed: float = 2.0
    palm_time_constant: float = 0.05
    palm_max_accel: float = 40.0
    palm_mass: float = 0.05
    workspace_lo: tuple[float, float, float] = (0.7, -0.35, 0.15)
    workspace_hi: tuple[float, float, float] = (1.4, 0.35, 0.9)
    catch_speed_threshold: float = 6.0
    catch_grip: float = 0.5
    catcher_grip_time_constant: float = 0.15
    catch_window: float = 0.15

    # goal box, inside the catcher workspace
    goal_lo: tuple[float, float, float] = (0.95, -0.03, 0.45)
    goal_hi: tuple[float, float, float] = (1.15, 0.03, 0.65)

    object_mass: float = 0.05
    object_friction: float = 1.0
    object_scale: float = 1.0

    def __post_init__(self) -> None:
        for name, n in (("gravity", 3), ("wind", 3), ("link_lengths", 2), ("joint_lower", 2), ("joint_upper", 2),
                        ("arm_inertia", 2), ("palm_home", 3), ("palm_normal", 3), ("workspace_lo", 3),
                        ("workspace_hi", 3), ("goal_lo", 3), ("goal_hi", 3)):
            object.__setattr__(self, name, _vec(getattr(self, name), n, name))
        object.__setattr__(self, "objects", tuple(self.objects))
        if self.substeps < 1 or self.dt_control <= 0:
            raise ConfigError("dt_control must be positive and substeps >= 1")
        if abs(self.substeps * self.physics_dt - self.dt_control) > 1e-12:
            raise ConfigError("substeps * physics_dt must equal dt_control")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.history_frames < 1 or self.estimator_frames < 1:
            raise ConfigError("frame counts must be >= 1")
        if not self.objects or any(o not in OBJECT_KINDS for o in self.objects):
            raise ConfigError(f"objects must be a non-empty subset of {KIND_NAMES}, got {self.objects}")
        if self.pre_throw_pose not in PRE_THROW_POSES:
            raise ConfigError(f"pre_throw_pose must be one of {sorted(PRE_THROW_POSES)}")
        positives = ("base_separation", "stiffness", "damping", "max_joint_delta", "grip_time_constant",
                     "catcher_grip_time_constant", "catch_window",
                     "palm_radius", "palm_max_speed", "palm_time_constant", "palm_max_accel", "palm_mass",
                     "catch_speed_threshold", "object_mass", "object_friction", "object_scale")
        for name in positives:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if min(self.arm_inertia) <= 0 or min(self.link_lengths) <= 0:
            raise ConfigError("arm inertia and link lengths must be positive")
        if self.joint_friction < 0:
            raise ConfigError("joint_friction must be non-negative")
        if any(lo >= hi for lo, hi in zip(self.joint_lower, self.joint_upper)):
            raise ConfigError("joint_lower must be below joint_upper")
        if any(lo > hi for lo, hi in zip(self.workspace_lo, self.workspace_hi)):
            raise ConfigError("workspace box is empty")
        if any(lo > hi for lo, hi in zip(self.goal_lo, self.goal_hi)):
            raise ConfigError("goal box is empty")
        if abs(math.hypot(*self.palm_normal) - 1.0) > 1e-9:
            raise ConfigError("palm_normal must be a unit vector")
        if not 0.0 < self.release_threshold < 1.0 or not 0.0 < self.catch_grip <= 1.0:
            raise ConfigError("grip thresholds must lie in (0, 1)")

    @property
    def physics_dt(self) -> float:
        return self.dt_control / self.substeps

    @property
    def pose(self) -> PreThrowPose:
        return PRE_THROW_POSES[self.pre_throw_pose]

    def replace(self, **changes) -> EnvConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)
