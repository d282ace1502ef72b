"""RollerWorld: a deterministic planar kinematic manipulation environment.

A hand (base position x_h, z_h plus a small finger joint vector) must
simultaneously match a goal relative object pose and a goal finger
configuration. The object sits on a table and can only be reoriented by
rolling it against the table with open fingers (extrinsic dexterity);
with closed fingers the hand drags the object without rotating it. This
trichotomy (ROLL / DRAG / static) is what makes orientation reachable
only through table contact and creates the sum-reward local minimum.

All dynamics are pure functions of (state, action, shape, config).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DomainError, NumericError, ShapeError
from .rewards import Thresholds
from .tensorcore import RngStream

TWO_PI = 2.0 * math.pi


def wrap_angle(theta: float) -> float:
    """Wrap to (-pi, pi]."""
    t = math.fmod(theta, TWO_PI)
    if t <= -math.pi:
        t += TWO_PI
    elif t > math.pi:
        t -= TWO_PI
    return t


@dataclass(frozen=True)
class ObjectShape:
    """Cam-like rolling object: boundary radius r(phi) = R (1 + c cos phi),
    rolling ratio rho(theta) = 1 + c cos(theta)."""
    radius: float
    cam: float
    family: int = 0

    def __post_init__(self):
        if not (0.0 < self.radius):
            raise DomainError(f"radius must be positive, got {self.radius}")
        if not (0.0 <= self.cam < 1.0):
            raise DomainError(f"cam eccentricity must be in [0, 1), got {self.cam}")

    def rolling_ratio(self, theta: float) -> float:
        return 1.0 + self.cam * math.cos(theta)


@dataclass(frozen=True)
class NoiseConfig:
    sigma_pos: float = 0.0
    sigma_ori: float = 0.0
    clip_mult: float = 1.0

    def __post_init__(self):
        if self.sigma_pos < 0 or self.sigma_ori < 0:
            raise DomainError("noise sigmas must be non-negative")


@dataclass(frozen=True)
class EnvConfig:
    table_width: float = 10.0
    max_hand_height: float = 3.0
    max_base_step: float = 0.1
    max_joint_step: float = 0.05
    engage_height_factor: float = 1.3
    contact_slack: float = 0.15
    pinch_threshold: float = 0.6
    max_steps: int = 300
    n_fingers: int = 3
    thresholds: Thresholds = field(default_factory=Thresholds)
    noise: NoiseConfig = field(default_factory=NoiseConfig)

    def engage_height(self, shape: ObjectShape) -> float:
        return self.engage_height_factor * shape.radius

    @property
    def action_dim(self) -> int:
        return 2 + self.n_fingers


@dataclass(frozen=True)
class GoalSpec:
    dx: float
    dz: float
    theta: float
    jf: np.ndarray
    shape: ObjectShape
    goal_id: int = 0


@dataclass(frozen=True)
class EnvState:
    x_h: float
    z_h: float
    jf: np.ndarray
    x_o: float
    theta_o: float
    prev_action: np.ndarray
    step_index: int = 0


@dataclass(frozen=True)
class StepResult:
    next_state: EnvState
    distances: tuple[float, float, float]
    success: bool
    done: bool
    reason: str  # success | fell_off_table | timeout | running


def reset(config: EnvConfig, shape: ObjectShape, goal: GoalSpec, rng: RngStream) -> EnvState:
    """Object placed uniformly on the middle half of the table, random
    orientation; hand starts fully raised (disengaged) with open fingers."""
    w = config.table_width
    x_o = rng.uniform(0.25 * w, 0.75 * w)
    theta_o = wrap_angle(rng.uniform(-math.pi, math.pi))
    x_h = rng.uniform(0.0, w)
    return EnvState(
        x_h=float(x_h),
        z_h=float(config.max_hand_height),
        jf=np.zeros(config.n_fingers),
        x_o=float(x_o),
        theta_o=float(theta_o),
        prev_action=np.zeros(config.action_dim),
        step_index=0,
    )


def distances(state: EnvState, goal: GoalSpec) -> tuple[float, float, float]:
    """(phi_p, phi_theta, phi_j): relative-pose, orientation, finger gaps."""
    dx_err = (state.x_o - state.x_h) - goal.dx
    dz_err = (goal.shape.radius - state.z_h) - goal.dz
    phi_p = math.hypot(dx_err, dz_err)
    phi_theta = abs(wrap_angle(state.theta_o - goal.theta))
    phi_j = float(np.linalg.norm(state.jf - goal.jf))
    return (phi_p, phi_theta, phi_j)


def check_success(dists, thresholds: Thresholds) -> bool:
    phi_p, phi_theta, phi_j = dists
    return phi_p <= thresholds.pos and phi_theta <= thresholds.ori and phi_j <= thresholds.fj


def _apply_kinematics(state: EnvState, action, shape: ObjectShape,
                      config: EnvConfig) -> EnvState:
    """Clip action, move/clamp the hand, test contact (pre-move object vs
    post-move hand), then move the object per the ROLL/DRAG/static
    trichotomy."""
    a = np.asarray(action, dtype=np.float64)
    if a.shape != (config.action_dim,):
        raise ShapeError(f"expected action dim {config.action_dim}, got {a.shape}")
    dxh = float(np.clip(a[0], -config.max_base_step, config.max_base_step))
    dzh = float(np.clip(a[1], -config.max_base_step, config.max_base_step))
    dj = np.clip(a[2:], -config.max_joint_step, config.max_joint_step)

    x_h = min(max(state.x_h + dxh, 0.0), config.table_width)
    z_h = min(max(state.z_h + dzh, 0.0), config.max_hand_height)
    jf_new = np.clip(state.jf + dj, 0.0, 1.0)
    dxh_applied = x_h - state.x_h

    engaged = (z_h <= config.engage_height(shape)
               and abs(x_h - state.x_o) <= shape.radius + config.contact_slack)
    pinched = float(np.mean(jf_new)) >= config.pinch_threshold

    x_o = state.x_o
    theta_o = state.theta_o
    if engaged and not pinched:  # ROLL
        x_o += dxh_applied
        theta_o = wrap_angle(theta_o - shape.rolling_ratio(state.theta_o) * dxh_applied / shape.radius)
    elif engaged and pinched:  # DRAG
        x_o += dxh_applied

    applied = np.concatenate(([dxh_applied, z_h - state.z_h], jf_new - state.jf))
    return EnvState(
        x_h=x_h, z_h=z_h, jf=jf_new, x_o=x_o, theta_o=theta_o,
        prev_action=applied, step_index=state.step_index + 1,
    )


def step(state: EnvState, action, shape: ObjectShape, goal: GoalSpec,
         config: EnvConfig) -> StepResult:
    """Kinematics plus distances, success, and termination bookkeeping."""
    next_state = _apply_kinematics(state, action, shape, config)
    dists = distances(next_state, goal)
    success = check_success(dists, config.thresholds)
    fell = not (0.0 <= next_state.x_o <= config.table_width)
    if success:
        reason = "success"
    elif fell:
        reason = "fell_off_table"
    elif next_state.step_index >= config.max_steps:
        reason = "timeout"
    else:
        reason = "running"
    return StepResult(next_state, dists, success, reason != "running", reason)


def quat_orientation_distance(q1, q2) -> float:
    """Geodesic angle between unit quaternions in (x, y, z, w) convention:
    2 asin(||vec(q1 * q2^-1)||), computed as 2 atan2(||vec||, |w|) which is
    the same quantity but keeps full precision near the pi boundary where
    asin's derivative blows up. Sign-invariant (double cover)."""
    q1 = np.asarray(q1, dtype=np.float64)
    q2 = np.asarray(q2, dtype=np.float64)
    for q in (q1, q2):
        if q.shape != (4,):
            raise ShapeError("quaternions must be length-4 (x, y, z, w)")
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise NumericError(f"non-unit quaternion, |q| = {np.linalg.norm(q)}")
    x1, y1, z1, w1 = q1
    # conjugate of q2
    x2, y2, z2, w2 = -q2[0], -q2[1], -q2[2], q2[3]
    vx = w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2
    vy = w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2
    vz = w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2
    vnorm = math.sqrt(vx * vx + vy * vy + vz * vz)
    w = w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2
    return 2.0 * math.atan2(vnorm, abs(w))


def quat_about_z(theta: float) -> np.ndarray:
    return np.array([0.0, 0.0, math.sin(theta / 2.0), math.cos(theta / 2.0)])


def observe_teacher(state: EnvState, goal: GoalSpec, shape: ObjectShape) -> np.ndarray:
    """Privileged observation: absolute object pose, shape parameters,
    previous action, and the three goal distances, on top of everything
    the student sees."""
    phi = distances(state, goal)
    return np.concatenate([
        [state.x_h, state.z_h],
        state.jf,
        state.prev_action,
        [state.x_o, math.cos(state.theta_o), math.sin(state.theta_o)],
        [state.x_o - state.x_h, shape.radius - state.z_h],
        [shape.radius, shape.cam],
        [goal.dx, goal.dz, math.cos(goal.theta), math.sin(goal.theta)],
        goal.jf,
        phi,
    ])


def teacher_obs_dim(n_fingers: int = 3) -> int:
    return 3 * n_fingers + 18


def observe_student(state: EnvState, goal: GoalSpec, noise: NoiseConfig,
                    rng: RngStream | None = None) -> np.ndarray:
    """Deployable observation: proprioception, (possibly noisy) relative
    object pose, and the goal. No distances, no shape parameters, no
    absolute pose, no velocities."""
    n_p = n_pz = n_t = 0.0
    if rng is not None and (noise.sigma_pos > 0 or noise.sigma_ori > 0):
        bound_p = noise.clip_mult * noise.sigma_pos
        bound_t = noise.clip_mult * noise.sigma_ori
        if noise.sigma_pos > 0:
            n_p = float(np.clip(rng.normal(0.0, noise.sigma_pos), -bound_p, bound_p))
            n_pz = float(np.clip(rng.normal(0.0, noise.sigma_pos), -bound_p, bound_p))
        if noise.sigma_ori > 0:
            n_t = float(np.clip(rng.normal(0.0, noise.sigma_ori), -bound_t, bound_t))
    theta_obs = state.theta_o + n_t
    return np.concatenate([
        [state.x_h, state.z_h],
        state.jf,
        [(state.x_o - state.x_h) + n_p,
         (goal.shape.radius - state.z_h) + n_pz,
         math.cos(theta_obs), math.sin(theta_obs)],
        [goal.dx, goal.dz, math.cos(goal.theta), math.sin(goal.theta)],
        goal.jf,
    ])


def student_obs_dim(n_fingers: int = 3) -> int:
    return 2 * n_fingers + 10


def sample_goal(shape: ObjectShape, rng: RngStream, config: EnvConfig | None = None,
                goal_id: int = 0) -> GoalSpec:
    """Goal ranges: dx in [-0.3, 0.3], dz in [0, 0.5], theta in (-pi, pi],
    fingers uniform in [0,1]^m. With probability 0.7 the finger target is
    pulled toward 1 so its mean reaches the pinch threshold, forcing the
    roll-vs-finger conflict."""
    cfg = config or EnvConfig()
    dx = rng.uniform(-0.3, 0.3)
    # dz beyond the shape radius would need the hand below the table
    dz = rng.uniform(0.0, min(0.5, shape.radius))
    theta = wrap_angle(rng.uniform(-math.pi, math.pi))
    jf = rng.uniform(0.0, 1.0, cfg.n_fingers)
    u = rng.uniform()
    target_mean = rng.uniform(cfg.pinch_threshold, 0.9)
    if u < 0.7:
        mean = float(np.mean(jf))
        if mean < cfg.pinch_threshold:
            lam = (1.0 - target_mean) / (1.0 - mean)
            jf = 1.0 - (1.0 - jf) * lam
    return GoalSpec(float(dx), float(dz), float(theta), jf, shape, goal_id)


# ---------------------------------------------------------------------------
# Task sets


@dataclass(frozen=True)
class Task:
    goal_id: int
    shape: ObjectShape
    goal: GoalSpec
    split: str = ""


FAMILY_GRID = (
    # (radius range, cam range) per family id
    ((0.4, 0.8), (0.0, 0.3)),
    ((0.8, 1.2), (0.0, 0.3)),
    ((0.4, 0.8), (0.3, 0.6)),
    ((0.8, 1.2), (0.3, 0.6)),
)


def sample_shape(family: int, rng: RngStream) -> ObjectShape:
    (r_lo, r_hi), (c_lo, c_hi) = FAMILY_GRID[family % len(FAMILY_GRID)]
    return ObjectShape(float(rng.uniform(r_lo, r_hi)), float(rng.uniform(c_lo, c_hi)),
                       family % len(FAMILY_GRID))


def generate_task_set(n_tasks: int, seed: int, n_families: int = 4,
                      config: EnvConfig | None = None) -> list[Task]:
    """Deterministic task suite, families assigned round-robin."""
    root = RngStream(seed)
    tasks = []
    for i in range(n_tasks):
        rng = root.split(i)
        shape = sample_shape(i % n_families, rng)
        goal = sample_goal(shape, rng, config, goal_id=i)
        tasks.append(Task(i, shape, goal))
    return tasks


def save_task_set(tasks, path) -> None:
    rows = [{
        "goal_id": t.goal_id,
        "shape": {"R": t.shape.radius, "c": t.shape.cam, "family": t.shape.family},
        "goal": {"dx": t.goal.dx, "dz": t.goal.dz, "theta": t.goal.theta,
                 "jf": list(map(float, t.goal.jf))},
        "split": t.split,
    } for t in sorted(tasks, key=lambda t: t.goal_id)]
    with open(path, "w") as f:
        json.dump(rows, f, indent=1)


def load_task_set(path) -> list[Task]:
    with open(path) as f:
        rows = json.load(f)
    tasks = []
    for r in sorted(rows, key=lambda r: r["goal_id"]):
        shape = ObjectShape(r["shape"]["R"], r["shape"]["c"], r["shape"]["family"])
        g = r["goal"]
        goal = GoalSpec(g["dx"], g["dz"], g["theta"], np.asarray(g["jf"], dtype=np.float64),
                        shape, r["goal_id"])
        tasks.append(Task(r["goal_id"], shape, goal, r.get("split", "")))
    return tasks


# ---------------------------------------------------------------------------
# Scripted baseline: certifies every sampled task is solvable within the
# episode limit (roll to the goal angle, set fingers, realign, descend).


def _roll_distance(shape: ObjectShape, theta_from: float, dtheta: float, n: int = 64) -> float:
    """Arc length of table travel for a signed rotation of dtheta,
    integrating dx = R dtheta / rho(theta)."""
    ts = theta_from + dtheta * (np.arange(n) + 0.5) / n
    rho = 1.0 + shape.cam * np.cos(ts)
    return float(abs(dtheta) / n * np.sum(shape.radius / rho))


class ScriptedRollPolicy:
    """Hand-written controller that solves any sampled task: approach from
    above, roll the object to the goal angle (dragging it toward the table
    center first if there is not enough rolling room), then freeze the
    base, set the fingers, realign laterally while raised, and descend."""

    def __init__(self, config: EnvConfig):
        self.config = config

    def act(self, state: EnvState, goal: GoalSpec, shape: ObjectShape) -> np.ndarray:
        cfg = self.config
        a_b = cfg.max_base_step
        a_j = cfg.max_joint_step
        z_eng = cfg.engage_height(shape)
        err = wrap_angle(state.theta_o - goal.theta)
        action = np.zeros(cfg.action_dim)

        if abs(err) > 0.5 * cfg.thresholds.ori:
            return self._roll_phase(state, goal, shape, err)

        # orientation done; never move the base laterally while engaged
        jf_err = goal.jf - state.jf
        if float(np.max(np.abs(jf_err))) > 1e-9:
            action[2:] = np.clip(jf_err, -a_j, a_j)
            return action
        x_target = state.x_o - goal.dx
        if abs(state.x_h - x_target) > 1e-9:
            if state.z_h <= z_eng + 0.05:
                action[1] = a_b  # lift clear before lateral motion
                return action
            action[0] = np.clip(x_target - state.x_h, -a_b, a_b)
            return action
        z_target = max(shape.radius - goal.dz, 0.0)
        action[1] = np.clip(z_target - state.z_h, -a_b, a_b)
        return action

    def _roll_phase(self, state: EnvState, goal: GoalSpec, shape: ObjectShape,
                    err: float) -> np.ndarray:
        cfg = self.config
        a_b = cfg.max_base_step
        a_j = cfg.max_joint_step
        z_eng = cfg.engage_height(shape)
        action = np.zeros(cfg.action_dim)
        margin = 0.3  # keep the object this far from the table edge

        # rotation needed per direction: rolling +x decreases theta
        dec = err % TWO_PI          # decrease theta by dec  -> roll +x
        inc = TWO_PI - dec          # increase theta by inc  -> roll -x
        dist_plus = _roll_distance(shape, state.theta_o, -dec)
        dist_minus = _roll_distance(shape, state.theta_o, inc)
        room_plus = cfg.table_width - margin - state.x_o
        room_minus = state.x_o - margin
        ok_plus = room_plus >= dist_plus + 0.2
        ok_minus = room_minus >= dist_minus + 0.2
        if ok_plus and (dist_plus <= dist_minus or not ok_minus):
            direction = 1
        elif ok_minus:
            direction = -1
        else:
            # not enough rolling room either way: drag the object (pinched,
            # orientation preserved) to where the shorter direction fits
            if dist_plus <= dist_minus:
                target_x = cfg.table_width - margin - dist_plus - 0.3
            else:
                target_x = margin + dist_minus + 0.3
            return self._drag_to(state, shape, target_x)

        engaged = (state.z_h <= z_eng
                   and abs(state.x_h - state.x_o) <= shape.radius + cfg.contact_slack)
        if float(np.mean(state.jf)) > 1e-9 and not engaged:
            action[2:] = np.clip(-state.jf, -a_j, a_j)  # open fingers while clear
            return action
        if not engaged:
            if abs(state.x_h - state.x_o) > 0.5 * cfg.contact_slack:
                if state.z_h <= z_eng + 0.05:
                    action[1] = a_b
                    return action
                action[0] = np.clip(state.x_o - state.x_h, -a_b, a_b)
                return action
            if state.z_h > 0.9 * z_eng:
                action[1] = np.clip(0.9 * z_eng - state.z_h, -a_b, 0.0)
                return action
        if float(np.mean(state.jf)) >= cfg.pinch_threshold:
            action[2:] = np.clip(-state.jf, -a_j, a_j)  # must not drag
            return action
        # fine rolling step: theta moves by -rho * dx / R
        rho = shape.rolling_ratio(state.theta_o)
        want = dec if direction > 0 else -inc  # rotation still to remove (theta decrease)
        dx = np.clip(shape.radius * want / rho, -a_b, a_b)
        action[0] = dx
        return action

    def _drag_to(self, state: EnvState, shape: ObjectShape, target_x: float) -> np.ndarray:
        cfg = self.config
        action = np.zeros(cfg.action_dim)
        z_eng = cfg.engage_height(shape)
        engaged = (state.z_h <= z_eng
                   and abs(state.x_h - state.x_o) <= shape.radius + cfg.contact_slack)
        if not engaged:
            if abs(state.x_h - state.x_o) > 0.5 * cfg.contact_slack:
                if state.z_h <= z_eng + 0.05:
                    action[1] = cfg.max_base_step
                    return action
                action[0] = np.clip(state.x_o - state.x_h, -cfg.max_base_step, cfg.max_base_step)
                return action
            action[1] = np.clip(0.9 * z_eng - state.z_h, -cfg.max_base_step, 0.0)
            return action
        if float(np.mean(state.jf)) < cfg.pinch_threshold:
            action[2:] = cfg.max_joint_step  # close to pinch before dragging
            return action
        action[0] = np.clip(target_x - state.x_o, -cfg.max_base_step, cfg.max_base_step)
        return action
