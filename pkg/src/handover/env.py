"""Vectorised throw-and-catch world.

``HandoverEnv`` steps ``N`` independent instances in lockstep. Each instance owns its own
random streams, seeded from ``(seed, first_index + i)``, so instance ``i`` behaves the same
whether it runs alone or inside a larger batch (except for the shared randomization refresh
clock, which counts physics substeps from construction).

Physics per control step (``substeps`` sub-steps of ``dt_control / substeps``):

* thrower: PD-driven 2-joint arm tracking ``q + delta``, first-order grip; the held object
  sits on the end effector and is released at the first substep the grip falls below
  ``release_threshold``;
* catcher: palm velocity tracking with an acceleration limit, boxed to the workspace;
* object: exact constant-acceleration flight under gravity plus wind, palm-disk crossing
  and floor contact tests every substep.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from handover.config import KIND_NAMES, OBJECT_KINDS, EnvConfig, GapInjection
from handover.errors import ConfigError, ContractError, NonFiniteError, ShapeError
from handover.randomization import RandomizationProfile, RandomizationSchedule, apply_profile, sample_profile
from handover.rewards import RewardConfig, compute_reward

PRE_THROW, FLIGHT, CAUGHT, DONE = 0, 1, 2, 3
PHASE_NAMES = ("pre_throw", "flight", "caught", "done")
HELD_THROWER, HELD_CATCHER, FREE, ON_PALM = 0, 1, 2, 3
HELD_NAMES = ("thrower", "catcher", "free", "on_palm")

RELEASED, HIT_PALM, CAUGHT_EVENT, DROPPED, TIMEOUT = 1, 2, 4, 8, 16
EVENT_NAMES = {RELEASED: "released", HIT_PALM: "hit_palm", CAUGHT_EVENT: "caught", DROPPED: "dropped", TIMEOUT: "timeout"}

ACTION_DIM = 4
THROWER_FRAME = 8  # q(2) qd(2) grip(1) goal(3)
CATCHER_FRAME = 16  # palm pos(3) vel(3) normal(3) grip(1) goal(3) object(3)
_THROWER_NOISY = 5
_CATCHER_NOISY = 13
_OBS_NOISE_DIM = _THROWER_NOISY + _CATCHER_NOISY
# per-step gaussian draws per instance: obs noise, action noise (2 agents), release noise
_STEP_DRAWS = _OBS_NOISE_DIM + 2 * ACTION_DIM + 3

GoalSource = Callable[[np.ndarray, np.ndarray], np.ndarray]


def event_names(mask: int) -> list[str]:
    return [name for bit, name in EVENT_NAMES.items() if mask & bit]


def obs_width(config: EnvConfig) -> int:
    return CATCHER_FRAME * config.history_frames


# -- closed-form pieces --------------------------------------------------------------------


def flight_substep(position, velocity, dt: float, gravity, wind=(0.0, 0.0, 0.0)):
    """Exact constant-acceleration update; returns ``(position, velocity)``.

    Accepts single 3-vectors or ``(N, 3)`` batches; ``gravity`` may be per-row.
    """
    a = np.asarray(gravity, dtype=np.float64) + np.asarray(wind, dtype=np.float64)
    p = np.asarray(position, dtype=np.float64)
    v = np.asarray(velocity, dtype=np.float64)
    return p + v * dt + 0.5 * a * dt * dt, v + a * dt


def time_to_height(z0, vz, az, z_target):
    """Smallest ``t >= 0`` at which ``z0 + vz t + az t^2 / 2`` comes down to ``z_target``.

    Returns 0 when already at or below the target and ``inf`` when the height is never reached.
    """
    z0, vz, az, zt = np.broadcast_arrays(*(np.asarray(x, dtype=np.float64) for x in (z0, vz, az, z_target)))
    c = z0 - zt
    disc = vz * vz - 2.0 * az * c
    root = np.sqrt(np.maximum(disc, 0.0))
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        # cancellation-free forms of the descending root of az t^2 / 2 + vz t + c = 0
        t_down = np.where(vz >= 0.0, (vz + root) / -az, 2.0 * c / (root - vz))
        t_linear = np.where(vz < 0.0, -c / vz, np.inf)
        # az > 0: only the first root of a downward-moving object counts
        t_up = np.where(vz < 0.0, 2.0 * c / (root - vz), np.inf)
    t = np.where(az < 0.0, t_down, np.where(az == 0.0, t_linear, np.where(disc >= 0.0, t_up, np.inf)))
    t = np.where(c <= 0.0, 0.0, t)
    return t if t.ndim else float(t)


def landing_point(position, velocity, accel, floor_z: float):
    """Where a free object reaches ``z = floor_z``: returns ``(t, xyz)``."""
    p, v, a = (np.asarray(x, dtype=np.float64) for x in (position, velocity, accel))
    t = time_to_height(p[..., 2], v[..., 2], a[..., 2], floor_z)
    tt = np.asarray(t)[..., None]
    return t, p + v * tt + 0.5 * a * tt * tt


def detect_contact(obj_prev, obj_pos, obj_vel, palm_prev, palm_pos, palm_vel, normal,
                   palm_radius: float, catch_speed: float, grip, catch_grip: float):
    """Palm-disk crossing test over one substep; returns boolean arrays ``(hit, caught)``.

    A hit needs the signed distance to the palm plane to go from positive to non-positive,
    the linearly interpolated crossing point to lie within ``palm_radius`` of the palm centre,
    and the object to be moving into the palm. A hit becomes a catch when the relative speed
    is at most ``catch_speed`` and the grip is at least ``catch_grip``.
    """
    d_prev = np.asarray(obj_prev) - palm_prev
    d_new = np.asarray(obj_pos) - palm_pos
    s_prev = np.sum(d_prev * normal, axis=-1)
    s_new = np.sum(d_new * normal, axis=-1)
    crossing = (s_prev > 0.0) & (s_new <= 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        alpha = np.where(crossing, s_prev / (s_prev - s_new), 0.0)
    d_cross = d_prev + alpha[..., None] * (d_new - d_prev)
    in_plane = d_cross - np.sum(d_cross * normal, axis=-1, keepdims=True) * normal
    rel_v = np.asarray(obj_vel) - palm_vel
    approaching = np.sum(rel_v * normal, axis=-1) < 0.0
    hit = crossing & (np.linalg.norm(in_plane, axis=-1) <= palm_radius) & approaching
    caught = hit & (np.linalg.norm(rel_v, axis=-1) <= catch_speed) & (np.asarray(grip) >= catch_grip)
    return hit, caught


def forward_kinematics(q, shoulder_height: float, links):
    """End-effector ``(x, z)`` and Jacobian for the planar arm; ``q`` is ``(N, 2)``."""
    l1, l2 = links
    q1, q12 = q[:, 0], q[:, 0] + q[:, 1]
    c1, s1, c12, s12 = np.cos(q1), np.sin(q1), np.cos(q12), np.sin(q12)
    x = l1 * c1 + l2 * c12
    z = shoulder_height + l1 * s1 + l2 * s12
    jac = np.empty((q.shape[0], 2, 2))
    jac[:, 0, 0] = -l1 * s1 - l2 * s12
    jac[:, 0, 1] = -l2 * s12
    jac[:, 1, 0] = l1 * c1 + l2 * c12
    jac[:, 1, 1] = l2 * c12
    return np.stack([x, z], axis=1), jac


def inverse_kinematics(x: float, z: float, config: EnvConfig) -> tuple[float, float]:
    """Elbow-down IK for the thrower; raises ConfigError when the point is unreachable."""
    l1, l2 = config.link_lengths
    dz = z - config.shoulder_height
    c2 = (x * x + dz * dz - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)
    if not -1.0 <= c2 <= 1.0:
        raise ConfigError(f"pre-throw grasp point ({x}, {z}) is outside the thrower's reach")
    q2 = -math.acos(c2)
    q1 = math.atan2(dz, x) - math.atan2(l2 * math.sin(q2), l1 + l2 * math.cos(q2))
    q = (q1, q2)
    if any(not lo <= v <= hi for v, lo, hi in zip(q, config.joint_lower, config.joint_upper)):
        raise ConfigError(f"pre-throw grasp point ({x}, {z}) needs joint angles {q} outside the limits")
    return q


# -- state ---------------------------------------------------------------------------------


@dataclass
class WorldState:
    """Struct-of-arrays snapshot of ``N`` instances (leading axis)."""

    thrower_q: np.ndarray
    thrower_qd: np.ndarray
    thrower_q_target: np.ndarray
    thrower_grip: np.ndarray
    thrower_grip_target: np.ndarray
    thrower_tau: np.ndarray
    palm_pos: np.ndarray
    palm_vel: np.ndarray
    palm_vel_target: np.ndarray
    palm_normal: np.ndarray
    catcher_grip: np.ndarray
    catcher_grip_target: np.ndarray
    catcher_effort: np.ndarray
    obj_pos: np.ndarray
    obj_vel: np.ndarray
    obj_kind: np.ndarray
    held_by: np.ndarray
    goal: np.ndarray
    u_hat: np.ndarray
    wind: np.ndarray
    goal_bias: np.ndarray
    step_index: np.ndarray
    phase: np.ndarray
    episode_events: np.ndarray
    landing: np.ndarray
    release_step: np.ndarray
    # seconds left for the grip to close on an object resting on the palm
    catch_timer: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> WorldState:
        f = lambda *shape: np.zeros((n, *shape))  # noqa: E731
        i = lambda: np.zeros(n, dtype=np.int64)  # noqa: E731
        return cls(
            thrower_q=f(2), thrower_qd=f(2), thrower_q_target=f(2), thrower_grip=f(), thrower_grip_target=f(),
            thrower_tau=f(2), palm_pos=f(3), palm_vel=f(3), palm_vel_target=f(3), palm_normal=f(3),
            catcher_grip=f(), catcher_grip_target=f(), catcher_effort=f(3), obj_pos=f(3), obj_vel=f(3),
            obj_kind=i(), held_by=i(), goal=f(3), u_hat=f(3), wind=f(3), goal_bias=f(3), step_index=i(),
            phase=i(), episode_events=i(), landing=np.full((n, 2), np.nan), release_step=np.full(n, -1),
            catch_timer=f(),
        )

    def copy(self) -> WorldState:
        return WorldState(**{k: v.copy() for k, v in self.__dict__.items()})

    def select(self, idx) -> WorldState:
        return WorldState(**{k: v[idx].copy() for k, v in self.__dict__.items()})

    def assign(self, idx, other: WorldState) -> None:
        for k, v in self.__dict__.items():
            v[idx] = getattr(other, k)

    def equals(self, other: WorldState) -> bool:
        return all(np.array_equal(v, getattr(other, k), equal_nan=True) for k, v in self.__dict__.items())

    def record(self, i: int = 0) -> dict:
        """Plain-python view of instance ``i`` for trace export."""
        return {
            "step_index": int(self.step_index[i]),
            "phase": PHASE_NAMES[self.phase[i]],
            "object": {"position": self.obj_pos[i].tolist(), "velocity": self.obj_vel[i].tolist(),
                       "kind": KIND_NAMES[self.obj_kind[i]], "held_by": HELD_NAMES[self.held_by[i]]},
            "thrower": {"q": self.thrower_q[i].tolist(), "qd": self.thrower_qd[i].tolist(),
                        "grip": float(self.thrower_grip[i]), "tau": self.thrower_tau[i].tolist()},
            "catcher": {"palm_position": self.palm_pos[i].tolist(), "palm_velocity": self.palm_vel[i].tolist(),
                        "palm_normal": self.palm_normal[i].tolist(), "grip": float(self.catcher_grip[i]),
                        "effort": self.catcher_effort[i].tolist()},
            "goal": self.goal[i].tolist(),
        }


@dataclass
class _Params:
    """Per-instance physical parameters after randomization."""

    arm_inertia: np.ndarray
    palm_mass: np.ndarray
    joint_friction: np.ndarray
    joint_lower: np.ndarray
    joint_upper: np.ndarray
    stiffness: np.ndarray
    damping: np.ndarray
    object_mass: np.ndarray
    object_friction: np.ndarray
    object_scale: np.ndarray
    gravity: np.ndarray
    obs_noise_uncorr: np.ndarray
    action_noise_uncorr: np.ndarray
    obs_noise_corr: np.ndarray
    action_noise_corr: np.ndarray

    @classmethod
    def build(cls, config: EnvConfig, profiles: list[RandomizationProfile]) -> _Params:
        cfgs = [apply_profile(config, p) for p in profiles]
        arr = lambda name: np.array([getattr(c, name) for c in cfgs], dtype=np.float64)  # noqa: E731
        prof = lambda name: np.array([getattr(p, name) for p in profiles], dtype=np.float64)  # noqa: E731
        return cls(
            arm_inertia=arr("arm_inertia"), palm_mass=arr("palm_mass"), joint_friction=arr("joint_friction"),
            joint_lower=arr("joint_lower"), joint_upper=arr("joint_upper"), stiffness=arr("stiffness"),
            damping=arr("damping"), object_mass=arr("object_mass"), object_friction=arr("object_friction"),
            object_scale=arr("object_scale"), gravity=arr("gravity"),
            obs_noise_uncorr=prof("obs_noise_uncorr"), action_noise_uncorr=prof("action_noise_uncorr"),
            obs_noise_corr=prof("obs_noise_corr"), action_noise_corr=prof("action_noise_corr"),
        )


@dataclass
class StepResult:
    thrower_obs: np.ndarray
    catcher_obs: np.ndarray
    reward: np.ndarray
    reward_terms: dict
    done: np.ndarray
    events: np.ndarray
    # per-instance episode summaries, valid where ``done``
    episode_events: np.ndarray
    landing: np.ndarray
    final_state: WorldState


class HandoverEnv:
    """``num_envs`` independent throw-and-catch instances.

    ``profile`` pins every instance to one fixed randomization profile; otherwise profiles
    are drawn per instance from ``schedule`` and refreshed every
    ``schedule.refresh_interval_steps`` physics substeps. ``goal_source`` (window, valid_count)
    -> goals replaces the goal slice of the catcher observation (stage-3 mode).
    """

    def __init__(self, config: EnvConfig, num_envs: int = 1, seed: int = 0, *,
                 schedule: RandomizationSchedule | None = None,
                 profile: RandomizationProfile | None = None,
                 gap: GapInjection = GapInjection(),
                 reward_config: RewardConfig = RewardConfig(),
                 goal_source: GoalSource | None = None,
                 first_index: int = 0,
                 auto_reset: bool = True) -> None:
        if num_envs < 1:
            raise ConfigError("num_envs must be >= 1")
        self.config = config
        self.num_envs = num_envs
        self.seed = seed
        self.schedule = schedule if schedule is not None else RandomizationSchedule()
        self.fixed_profile = profile
        self.gap = gap
        self.reward_config = reward_config
        self.goal_source = goal_source
        self.auto_reset = auto_reset
        self.kind_ids = np.array([KIND_NAMES.index(k) for k in config.objects])
        self._rngs = [np.random.default_rng([seed, first_index + i, 0]) for i in range(num_envs)]
        self._profile_rngs = [np.random.default_rng([seed, first_index + i, 1]) for i in range(num_envs)]
        pose = config.pose
        self._q0 = np.array(inverse_kinematics(*pose.grasp_point, config))
        self._normal = np.array(config.palm_normal)
        self._u_hat = np.array([1.0, 0.0, 0.0])
        self.substep_count = 0
        self.profile_refreshes = 0
        self.profiles: list[RandomizationProfile] = []
        self._refresh_profiles()
        self.state = WorldState.zeros(num_envs)
        k, w = config.history_frames, config.estimator_frames
        self.hist_thrower = np.zeros((num_envs, k, THROWER_FRAME))
        self.hist_catcher = np.zeros((num_envs, k, CATCHER_FRAME))
        self.window = np.zeros((num_envs, w, 3))
        self.valid_count = np.zeros(num_envs, dtype=np.int64)
        self.corr_obs = np.zeros((num_envs, _OBS_NOISE_DIM))
        self.corr_act = np.zeros((num_envs, 2 * ACTION_DIM))
        self.last_goal_obs = np.zeros((num_envs, 3))
        self._started = False

    # -- randomization ---------------------------------------------------------------------

    def _refresh_profiles(self) -> None:
        if self.fixed_profile is not None:
            self.profiles = [self.fixed_profile] * self.num_envs
        else:
            self.profiles = [sample_profile(r, self.schedule) for r in self._profile_rngs]
        self.params = _Params.build(self.config, self.profiles)
        self.profile_refreshes += 1

    # -- reset -----------------------------------------------------------------------------

    def _reset_state(self, idx: np.ndarray) -> None:
        cfg, s, p = self.config, self.state, self.params
        n = len(idx)
        goals = np.empty((n, 3))
        kinds = np.empty(n, dtype=np.int64)
        bias = np.empty((n, 3))
        lo, hi = np.array(cfg.goal_lo), np.array(cfg.goal_hi)
        for j, i in enumerate(idx):
            rng = self._rngs[i]
            goals[j] = rng.uniform(lo, hi)
            kinds[j] = self.kind_ids[rng.integers(len(self.kind_ids))]
            self.corr_obs[i] = self.params.obs_noise_corr[i] * rng.standard_normal(_OBS_NOISE_DIM)
            self.corr_act[i] = self.params.action_noise_corr[i] * rng.standard_normal(2 * ACTION_DIM)
            bias[j] = rng.uniform(-1.0, 1.0, 3) * self.gap.bias_range
        q0 = np.broadcast_to(self._q0, (n, 2))
        q0 = np.clip(q0, p.joint_lower[idx], p.joint_upper[idx])
        ee, _ = forward_kinematics(q0, cfg.shoulder_height, cfg.link_lengths)
        s.thrower_q[idx] = q0
        s.thrower_qd[idx] = 0.0
        s.thrower_q_target[idx] = q0
        s.thrower_grip[idx] = 1.0
        s.thrower_grip_target[idx] = 1.0
        s.thrower_tau[idx] = 0.0
        s.palm_pos[idx] = cfg.palm_home
        s.palm_vel[idx] = 0.0
        s.palm_vel_target[idx] = 0.0
        s.palm_normal[idx] = self._normal
        s.catcher_grip[idx] = 0.0
        s.catcher_grip_target[idx] = 0.0
        s.catcher_effort[idx] = 0.0
        s.obj_pos[idx] = np.stack([ee[:, 0], np.zeros(n), ee[:, 1]], axis=1)
        s.obj_vel[idx] = 0.0
        s.obj_kind[idx] = kinds
        s.held_by[idx] = HELD_THROWER
        s.goal[idx] = goals
        s.u_hat[idx] = self._u_hat
        s.wind[idx] = cfg.wind
        s.goal_bias[idx] = bias
        s.step_index[idx] = 0
        s.phase[idx] = PRE_THROW
        s.episode_events[idx] = 0
        s.landing[idx] = np.nan
        s.release_step[idx] = -1
        s.catch_timer[idx] = 0.0

    def reset(self) -> tuple[np.ndarray, np.ndarray]:
        idx = np.arange(self.num_envs)
        self._reset_state(idx)
        noise = self._draw_step_noise(idx)
        self._observe(idx, noise, fresh=np.ones(self.num_envs, dtype=bool))
        self._started = True
        return self.observations()

    # -- noise -----------------------------------------------------------------------------

    def _draw_step_noise(self, idx) -> np.ndarray:
        out = np.empty((self.num_envs, _STEP_DRAWS))
        for i in idx:
            out[i] = self._rngs[i].standard_normal(_STEP_DRAWS)
        return out

    # -- observation -----------------------------------------------------------------------

    def _observe(self, idx: np.ndarray, noise: np.ndarray, fresh: np.ndarray) -> None:
        """Push one noisy frame per instance in ``idx``; ``fresh`` rows restart their history."""
        s, p = self.state, self.params
        sig = p.obs_noise_uncorr[idx, None]
        obs_noise = self.corr_obs[idx] + sig * noise[idx, :_OBS_NOISE_DIM]
        t_meas = np.concatenate([s.thrower_q[idx], s.thrower_qd[idx], s.thrower_grip[idx, None]], axis=1)
        t_meas = t_meas + obs_noise[:, :_THROWER_NOISY]
        c_meas = np.concatenate([s.palm_pos[idx], s.palm_vel[idx], s.palm_normal[idx], s.catcher_grip[idx, None],
                                 s.obj_pos[idx]], axis=1)
        c_meas = c_meas + obs_noise[:, _THROWER_NOISY:]
        obj_meas = c_meas[:, 10:13]

        fr = fresh[idx]
        w = self.window
        sub = w[idx]
        sub[~fr] = np.roll(sub[~fr], -1, axis=1)
        sub[~fr, -1] = obj_meas[~fr]
        sub[fr] = obj_meas[fr, None, :]
        w[idx] = sub
        self.valid_count[idx] = np.where(fr, 1, np.minimum(self.valid_count[idx] + 1, self.config.estimator_frames))

        if self.goal_source is None:
            goal_obs = s.goal[idx]
        else:
            goal_obs = np.asarray(self.goal_source(w[idx], self.valid_count[idx]), dtype=np.float64)
            if goal_obs.shape != (len(idx), 3) or not np.all(np.isfinite(goal_obs)):
                raise NonFiniteError("goal source returned a malformed or non-finite prediction")
        self.last_goal_obs[idx] = goal_obs

        t_frame = np.concatenate([t_meas, s.goal[idx]], axis=1)
        c_frame = np.concatenate([c_meas[:, :10], goal_obs, obj_meas], axis=1)
        for hist, frame in ((self.hist_thrower, t_frame), (self.hist_catcher, c_frame)):
            sub = hist[idx]
            sub[~fr] = np.roll(sub[~fr], -1, axis=1)
            sub[~fr, -1] = frame[~fr]
            sub[fr] = frame[fr, None, :]
            hist[idx] = sub

    def observations(self) -> tuple[np.ndarray, np.ndarray]:
        """Stacked observations, oldest frame first; the thrower's are zero-padded to the catcher width."""
        n, k = self.num_envs, self.config.history_frames
        thrower = np.zeros((n, CATCHER_FRAME * k))
        thrower[:, :THROWER_FRAME * k] = self.hist_thrower.reshape(n, -1)
        return thrower, self.hist_catcher.reshape(n, -1).copy()

    def critic_extras(self) -> np.ndarray:
        """True object position and velocity, for centralised critics."""
        return np.concatenate([self.state.obj_pos, self.state.obj_vel], axis=1)

    # -- physics ---------------------------------------------------------------------------

    def _apply_actions(self, thrower_action, catcher_action, noise) -> None:
        cfg, s, p = self.config, self.state, self.params
        a = np.concatenate([np.clip(thrower_action, -1.0, 1.0), np.clip(catcher_action, -1.0, 1.0)], axis=1)
        a = a + self.corr_act + p.action_noise_uncorr[:, None] * noise[:, _OBS_NOISE_DIM:_OBS_NOISE_DIM + 2 * ACTION_DIM]
        a = np.clip(a, -1.0, 1.0)
        ta, ca = a[:, :ACTION_DIM], a[:, ACTION_DIM:]
        s.thrower_q_target[:] = np.clip(s.thrower_q + cfg.max_joint_delta * ta[:, :2], p.joint_lower, p.joint_upper)
        s.thrower_grip_target[:] = 0.5 * (ta[:, 2] + 1.0)
        s.palm_vel_target[:] = cfg.palm_max_speed * ca[:, :3]
        s.catcher_grip_target[:] = 0.5 * (ca[:, 3] + 1.0)

    def _release_velocity(self, idx, ee_vel, noise) -> np.ndarray:
        cfg, s, p = self.config, self.state, self.params
        z = noise[idx, -3:]
        kinds = [OBJECT_KINDS[KIND_NAMES[k]] for k in s.obj_kind[idx]]
        perp = np.array([k.noise_std for k in kinds])
        axial = np.array([k.axial_noise_std if k.axial_noise_std is not None else k.noise_std for k in kinds])
        q12 = s.thrower_q[idx, 0] + s.thrower_q[idx, 1]
        axis = np.stack([np.cos(q12), np.zeros(len(idx)), np.sin(q12)], axis=1)
        iso = perp[:, None] * z
        along = np.sum(z * axis, axis=1)
        dv = iso + ((axial - perp) * along)[:, None] * axis
        scale = cfg.pose.noise_multiplier * self.gap.noise_multiplier / p.object_friction[idx]
        return ee_vel + scale[:, None] * dv + s.goal_bias[idx] / self.gap.nominal_flight_time

    def _substep(self, noise, events: np.ndarray) -> None:
        cfg, s, p = self.config, self.state, self.params
        dt = cfg.physics_dt
        live = s.phase != DONE

        # grips
        for g, tgt, tc in ((s.thrower_grip, s.thrower_grip_target, cfg.grip_time_constant),
                           (s.catcher_grip, s.catcher_grip_target, cfg.catcher_grip_time_constant)):
            g += np.where(live, (tgt - g) * (1.0 - math.exp(-dt / tc)), 0.0)

        # thrower arm
        held = (s.held_by == HELD_THROWER) & live
        l1, l2 = cfg.link_lengths
        ee, _ = forward_kinematics(s.thrower_q, cfg.shoulder_height, cfg.link_lengths)
        r1_sq = ee[:, 0] ** 2 + (ee[:, 1] - cfg.shoulder_height) ** 2
        inertia = p.arm_inertia + np.where(held, p.object_mass, 0.0)[:, None] * np.stack([r1_sq, np.full_like(r1_sq, l2 * l2)], 1)
        # gains are sized for the nominal (unrandomized) loaded inertia
        nominal = np.array(cfg.arm_inertia) + np.where(held, cfg.object_mass, 0.0)[:, None] * np.stack(
            [r1_sq, np.full_like(r1_sq, l2 * l2)], 1)
        tau = (p.stiffness[:, None] * (s.thrower_q_target - s.thrower_q) - p.damping[:, None] * s.thrower_qd) * nominal
        qdd = tau / inertia - p.joint_friction[:, None] * s.thrower_qd
        qd = s.thrower_qd + qdd * dt
        q = s.thrower_q + qd * dt
        lo, hi = p.joint_lower, p.joint_upper
        qd = np.where(((q <= lo) & (qd < 0)) | ((q >= hi) & (qd > 0)), 0.0, qd)
        q = np.clip(q, lo, hi)
        s.thrower_q[live] = q[live]
        s.thrower_qd[live] = qd[live]
        s.thrower_tau[live] = tau[live]

        # catcher palm
        acc = (s.palm_vel_target - s.palm_vel) / cfg.palm_time_constant
        an = np.linalg.norm(acc, axis=1, keepdims=True)
        acc = acc * np.minimum(1.0, cfg.palm_max_accel / np.maximum(an, 1e-12))
        palm_prev = s.palm_pos.copy()
        pv = s.palm_vel + acc * dt
        pp = s.palm_pos + pv * dt
        wlo, whi = np.array(cfg.workspace_lo), np.array(cfg.workspace_hi)
        pv = np.where(((pp <= wlo) & (pv < 0)) | ((pp >= whi) & (pv > 0)), 0.0, pv)
        pp = np.clip(pp, wlo, whi)
        s.palm_pos[live] = pp[live]
        s.palm_vel[live] = pv[live]
        s.catcher_effort[live] = (p.palm_mass[:, None] * acc)[live]

        # object
        ee, jac = forward_kinematics(s.thrower_q, cfg.shoulder_height, cfg.link_lengths)
        ee_pos = np.stack([ee[:, 0], np.zeros(self.num_envs), ee[:, 1]], axis=1)
        ee_v2 = np.einsum("nij,nj->ni", jac, s.thrower_qd)
        ee_vel = np.stack([ee_v2[:, 0], np.zeros(self.num_envs), ee_v2[:, 1]], axis=1)

        held = (s.held_by == HELD_THROWER) & live
        release = held & (s.thrower_grip < cfg.release_threshold)
        keep = held & ~release
        s.obj_pos[keep] = ee_pos[keep]
        s.obj_vel[keep] = ee_vel[keep]
        if release.any():
            r = np.flatnonzero(release)
            s.obj_pos[r] = ee_pos[r]
            s.obj_vel[r] = self._release_velocity(r, ee_vel[r], noise)
            s.held_by[r] = FREE
            s.phase[r] = FLIGHT
            s.release_step[r] = s.step_index[r]
            events[r] |= RELEASED

        free = (s.held_by == FREE) & live & ~release
        if free.any():
            f = np.flatnonzero(free)
            accel = p.gravity[f] + s.wind[f]
            prev = s.obj_pos[f].copy()
            pos, vel = flight_substep(prev, s.obj_vel[f], dt, accel)
            already_hit = (s.episode_events[f] | events[f]) & HIT_PALM != 0
            hit, caught = detect_contact(prev, pos, vel, palm_prev[f], s.palm_pos[f], s.palm_vel[f], self._normal,
                                         cfg.palm_radius, cfg.catch_speed_threshold, s.catcher_grip[f], cfg.catch_grip)
            hit &= ~already_hit
            caught &= hit
            # a slow hit without a closed grip leaves the object resting on the palm for the catch window
            slow = hit & (np.linalg.norm(vel - s.palm_vel[f], axis=1) <= cfg.catch_speed_threshold)
            settle = slow & ~caught
            radius = np.array([OBJECT_KINDS[KIND_NAMES[k]].radius for k in s.obj_kind[f]]) * p.object_scale[f]
            floor = cfg.floor_height + radius
            below = ~slow & (pos[:, 2] <= floor)
            if below.any():
                b = np.flatnonzero(below)
                _, touch = landing_point(prev[b], s.obj_vel[f][b], accel[b], floor[b])
                s.landing[f[b]] = touch[:, :2]
                s.phase[f[b]] = DONE
                events[f[b]] |= DROPPED
            events[f[hit]] |= HIT_PALM
            events[f[caught]] |= CAUGHT_EVENT
            on_palm = caught | settle
            s.obj_pos[f] = np.where(on_palm[:, None], s.palm_pos[f], pos)
            s.obj_vel[f] = np.where(on_palm[:, None], s.palm_vel[f], vel)
            s.held_by[f[caught]] = HELD_CATCHER
            s.phase[f[caught]] = CAUGHT
            s.held_by[f[settle]] = ON_PALM
            s.catch_timer[f[settle]] = cfg.catch_window

        resting = (s.held_by == ON_PALM) & live
        if resting.any():
            r = np.flatnonzero(resting)
            s.obj_pos[r] = s.palm_pos[r]
            s.obj_vel[r] = s.palm_vel[r]
            s.catch_timer[r] -= dt
            grab = r[s.catcher_grip[r] >= cfg.catch_grip]
            s.held_by[grab] = HELD_CATCHER
            s.phase[grab] = CAUGHT
            s.catch_timer[grab] = 0.0
            events[grab] |= CAUGHT_EVENT
            # window over without a grasp: the object rolls off and falls
            off = r[(s.held_by[r] == ON_PALM) & (s.catch_timer[r] <= 0.0)]
            s.held_by[off] = FREE
            s.catch_timer[off] = 0.0

        carried = (s.held_by == HELD_CATCHER) & live & (s.phase == CAUGHT)
        was_caught_now = (events & CAUGHT_EVENT) != 0
        let_go = carried & ~was_caught_now & (s.catcher_grip < cfg.release_threshold)
        keep = carried & ~let_go
        s.obj_pos[keep] = s.palm_pos[keep]
        s.obj_vel[keep] = s.palm_vel[keep]
        if let_go.any():
            # the object leaves the palm with its velocity and counts as dropped on reaching the floor
            g = np.flatnonzero(let_go)
            s.obj_pos[g] = s.palm_pos[g]
            s.obj_vel[g] = s.palm_vel[g]
            s.held_by[g] = FREE

    def step(self, thrower_action, catcher_action) -> StepResult:
        """Advance every instance by one control step.

        Finished instances are reset automatically when ``auto_reset`` is on; the returned
        observations then belong to the new episode while ``final_state`` holds the state the
        finished episode ended in.
        """
        if not self._started:
            raise ContractError("call reset() before step()")
        ta = np.asarray(thrower_action, dtype=np.float64).reshape(self.num_envs, -1)
        ca = np.asarray(catcher_action, dtype=np.float64).reshape(self.num_envs, -1)
        if ta.shape[1] != ACTION_DIM or ca.shape[1] != ACTION_DIM:
            raise ShapeError(f"actions must have {ACTION_DIM} components per agent")
        if not (np.all(np.isfinite(ta)) and np.all(np.isfinite(ca))):
            raise NonFiniteError("non-finite action")
        s = self.state
        # without auto-reset, finished instances stay frozen until every instance is done
        if not self.auto_reset and np.all(s.phase == DONE):
            raise ContractError("step() after every episode finished; call reset()")
        idx = np.arange(self.num_envs)
        noise = self._draw_step_noise(idx)
        self._apply_actions(ta, ca, noise)
        events = np.zeros(self.num_envs, dtype=np.int64)
        for _ in range(self.config.substeps):
            if self.substep_count > 0 and self.substep_count % self.schedule.refresh_interval_steps == 0:
                self._refresh_profiles()
            self._substep(noise, events)
            self.substep_count += 1
        s.step_index += 1
        timeout = (s.step_index >= self.config.horizon) & (s.phase != DONE)
        events[timeout] |= TIMEOUT
        s.phase[timeout] = DONE
        s.episode_events |= events

        terms = compute_reward(s, self.reward_config)
        done = s.phase == DONE
        final = s.copy()
        fresh = np.zeros(self.num_envs, dtype=bool)
        if self.auto_reset and done.any():
            d = np.flatnonzero(done)
            self._reset_state(d)
            fresh[d] = True
        self._observe(idx, noise, fresh)
        tobs, cobs = self.observations()
        return StepResult(tobs, cobs, terms.total, terms.as_dict(), done, events,
                          final.episode_events.copy(), final.landing.copy(), final)


def reset(config: EnvConfig, seed: int, profile: RandomizationProfile | None = None, **kwargs):
    """Single-instance reset: returns ``(env, state, thrower_obs, catcher_obs)``."""
    env = HandoverEnv(config, 1, seed, profile=profile if profile is not None else RandomizationProfile.identity(),
                      auto_reset=False, **kwargs)
    tobs, cobs = env.reset()
    return env, env.state.copy(), tobs[0], cobs[0]


def grasp_frame(state: WorldState, config: EnvConfig) -> np.ndarray:
    """Current grasp-frame position of whichever agent holds the object (NaN rows when free)."""
    ee, _ = forward_kinematics(state.thrower_q, config.shoulder_height, config.link_lengths)
    ee_pos = np.stack([ee[:, 0], np.zeros(len(ee)), ee[:, 1]], axis=1)
    out = np.full_like(state.obj_pos, np.nan)
    out[state.held_by == HELD_THROWER] = ee_pos[state.held_by == HELD_THROWER]
    out[state.held_by == HELD_CATCHER] = state.palm_pos[state.held_by == HELD_CATCHER]
    return out
