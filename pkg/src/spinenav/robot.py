"""6-DOF serial arm: DH kinematics, damped least-squares IK, joint-space
trajectory planning with collision checking, and alignment of the tool
guide to a planned screw trajectory.

DH convention: link transform = RotZ(theta) TransZ(d) TransX(a) RotX(alpha),
theta = q_i + theta_offset for revolute joints.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .geometry import RigidTransform
from .planning import ScrewPlan

IK_POS_TOL_MM = 1e-6
IK_ROT_TOL_RAD = 1e-6
GUIDE_STANDOFF_MM = 50.0
NO_OBSTACLE_CLEARANCE = float("inf")


class Unreachable(Exception):
    pass


class LimitViolation(Exception):
    """IK converged only outside the joint limits."""


class CollisionOnPath(Exception):
    pass


class VelocityInfeasible(Exception):
    pass


class RegistrationMissing(Exception):
    pass


@dataclass(frozen=True)
class Capsule:
    """Line-segment-with-radius collision volume."""

    p0: np.ndarray
    p1: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "p0", np.asarray(self.p0, float).reshape(3))
        object.__setattr__(self, "p1", np.asarray(self.p1, float).reshape(3))
        if self.radius <= 0:
            raise ValueError("capsule radius must be > 0")


def sphere(center, radius) -> Capsule:
    return Capsule(center, center, radius)


@dataclass(frozen=True)
class DhLink:
    a: float
    alpha: float
    d: float
    theta_offset: float


@dataclass(frozen=True)
class ArmModel:
    links: tuple  # 6 DhLink
    joint_limits: np.ndarray  # (6, 2) rad
    max_joint_velocity: float  # rad/s
    link_capsules: tuple  # per link: tuple of Capsule in that link's frame

    def __post_init__(self):
        limits = np.asarray(self.joint_limits, float).reshape(len(self.links), 2)
        object.__setattr__(self, "joint_limits", limits)
        if np.any(limits[:, 0] >= limits[:, 1]):
            raise ValueError("joint limits must satisfy min < max")

    def clamp(self, q):
        return np.clip(q, self.joint_limits[:, 0], self.joint_limits[:, 1])

    def within_limits(self, q, tol=1e-9):
        return bool(
            np.all(q >= self.joint_limits[:, 0] - tol)
            and np.all(q <= self.joint_limits[:, 1] + tol)
        )


def default_arm() -> ArmModel:
    """Generic 6R arm, ~850 mm reach, elbow-style geometry."""
    links = (
        DhLink(a=0.0, alpha=np.pi / 2, d=165.0, theta_offset=0.0),
        DhLink(a=425.0, alpha=0.0, d=0.0, theta_offset=0.0),
        DhLink(a=0.0, alpha=np.pi / 2, d=0.0, theta_offset=0.0),
        DhLink(a=0.0, alpha=-np.pi / 2, d=392.0, theta_offset=0.0),
        DhLink(a=0.0, alpha=np.pi / 2, d=0.0, theta_offset=0.0),
        DhLink(a=0.0, alpha=0.0, d=90.0, theta_offset=0.0),
    )
    limits = np.array([[-np.pi, np.pi]] * 6)
    capsules = (
        (Capsule([0, 0, -165], [0, 0, 0], 55.0),),
        (Capsule([-425, 0, 0], [0, 0, 0], 50.0),),
        (),
        (Capsule([0, 0, -392], [0, 0, 0], 45.0),),
        (),
        (Capsule([0, 0, -90], [0, 0, 0], 35.0),),
    )
    return ArmModel(links, limits, max_joint_velocity=1.5, link_capsules=capsules)


def dh_transform(link: DhLink, q: float) -> RigidTransform:
    th = q + link.theta_offset
    ct, st = np.cos(th), np.sin(th)
    ca, sa = np.cos(link.alpha), np.sin(link.alpha)
    r = np.array(
        [
            [ct, -st * ca, st * sa],
            [st, ct * ca, -ct * sa],
            [0.0, sa, ca],
        ]
    )
    t = np.array([link.a * ct, link.a * st, link.d])
    return RigidTransform(r, t)


def fk(arm: ArmModel, q) -> RigidTransform:
    """Base -> end-effector transform."""
    q = np.asarray(q, float)
    out = RigidTransform.identity()
    for link, qi in zip(arm.links, q):
        out = out.compose(dh_transform(link, qi))
    return out


def link_frames(arm: ArmModel, q):
    """Base->link_i transforms after each joint, including the end-effector."""
    q = np.asarray(q, float)
    frames = []
    out = RigidTransform.identity()
    for link, qi in zip(arm.links, q):
        out = out.compose(dh_transform(link, qi))
        frames.append(out)
    return frames


def pose_error(target: RigidTransform, current: RigidTransform) -> np.ndarray:
    """6-vector: translation error (mm) and axis-angle rotation error (rad)."""
    dt = target.translation - current.translation
    dr = geo.rotation_log(target.rotation @ current.rotation.T)
    return np.concatenate([dt, dr])


def _jacobian(arm: ArmModel, q) -> np.ndarray:
    """Geometric Jacobian (6x6): translation rows then rotation rows."""
    frames = link_frames(arm, q)
    p_ee = frames[-1].translation
    jac = np.zeros((6, len(q)))
    z_prev = np.array([0.0, 0.0, 1.0])
    p_prev = np.zeros(3)
    for i in range(len(q)):
        jac[:3, i] = np.cross(z_prev, p_ee - p_prev)
        jac[3:, i] = z_prev
        z_prev = frames[i].rotation[:, 2]
        p_prev = frames[i].translation
    return jac


def ik(
    arm: ArmModel,
    target: RigidTransform,
    seed_state,
    max_iter: int = 200,
    n_restarts: int = 8,
) -> np.ndarray:
    """Damped least-squares IK with adaptive damping and scripted restarts.

    Converged when translation error < 1e-6 mm and rotation error < 1e-6 rad.
    Joint limits enforced by clamping during iteration; a solution that only
    converges outside the limits raises LimitViolation.
    """
    seed_state = np.asarray(seed_state, float)
    starts = [seed_state]
    rng = geo.make_rng(1234)  # scripted restarts, fixed by contract
    for _ in range(n_restarts):
        starts.append(
            arm.clamp(seed_state + rng.uniform(-1.0, 1.0, size=len(seed_state)))
        )
    saw_limit_block = False
    for q0 in starts:
        q, ok, limited = _dls_solve(arm, target, q0, max_iter)
        if ok:
            return q
        saw_limit_block = saw_limit_block or limited
    if saw_limit_block:
        raise LimitViolation("IK converges only outside joint limits")
    raise Unreachable("IK failed to converge from seed and restarts")


def _dls_solve(arm: ArmModel, target: RigidTransform, q0, max_iter):
    q = arm.clamp(np.asarray(q0, float).copy())
    lam = 1e-2
    err = pose_error(target, fk(arm, q))
    cost = float(err @ err)
    for _ in range(max_iter):
        if (
            np.linalg.norm(err[:3]) < IK_POS_TOL_MM
            and np.linalg.norm(err[3:]) < IK_ROT_TOL_RAD
        ):
            return q, True, False
        jac = _jacobian(arm, q)
        jtj = jac.T @ jac
        step = np.linalg.solve(jtj + lam * np.eye(len(q)), jac.T @ err)
        q_new = arm.clamp(q + step)
        err_new = pose_error(target, fk(arm, q_new))
        cost_new = float(err_new @ err_new)
        if cost_new < cost:
            q, err, cost = q_new, err_new, cost_new
            lam = max(lam / 3.0, 1e-10)
        else:
            lam *= 10.0
            if lam > 1e10:
                break
    converged = (
        np.linalg.norm(err[:3]) < IK_POS_TOL_MM
        and np.linalg.norm(err[3:]) < IK_ROT_TOL_RAD
    )
    if converged:
        return q, True, False
    # check whether the unclamped problem would converge (limit block)
    limited = bool(
        np.any(np.isclose(q, arm.joint_limits[:, 0]))
        or np.any(np.isclose(q, arm.joint_limits[:, 1]))
    )
    return q, False, limited and cost < 1.0


def segment_distance(p0, p1, q0, q1) -> float:
    """Minimum distance between two 3D segments (degenerate cases included)."""
    u = p1 - p0
    v = q1 - q0
    w0 = p0 - q0
    a, b, c = u @ u, u @ v, v @ v
    d, e = u @ w0, v @ w0
    denom = a * c - b * b
    if denom > 1e-12:
        s = np.clip((b * e - c * d) / denom, 0.0, 1.0)
    else:
        s = 0.0
    if c > 1e-12:
        t = np.clip((b * s + e) / c, 0.0, 1.0)
    else:
        t = 0.0
    # one clamped re-projection pass keeps the pair consistent
    if a > 1e-12:
        s = np.clip((b * t - d) / a, 0.0, 1.0)
    if c > 1e-12:
        t = np.clip((b * s + e) / c, 0.0, 1.0)
    return float(np.linalg.norm((p0 + s * u) - (q0 + t * v)))


def capsule_distance(ca: Capsule, cb: Capsule) -> float:
    """Surface-to-surface distance; negative when overlapping."""
    return segment_distance(ca.p0, ca.p1, cb.p0, cb.p1) - ca.radius - cb.radius


def arm_capsules_world(arm: ArmModel, q):
    """All link capsules transformed into the base frame."""
    frames = link_frames(arm, q)
    out = []
    for frame, caps in zip(frames, arm.link_capsules):
        for c in caps:
            out.append(Capsule(frame.apply(c.p0), frame.apply(c.p1), c.radius))
    return out


def check_collision(arm: ArmModel, q, obstacles) -> tuple[bool, float]:
    """Capsule-capsule tests of every link against every obstacle.

    Returns (colliding, min_clearance_mm); clearance is +inf with no
    obstacles.
    """
    caps = arm_capsules_world(arm, q)
    min_clearance = NO_OBSTACLE_CLEARANCE
    for link_cap in caps:
        for obs in obstacles:
            min_clearance = min(min_clearance, capsule_distance(link_cap, obs))
    return min_clearance < 0.0, min_clearance


def plan_trajectory(
    arm: ArmModel,
    q_from,
    q_to,
    dt: float = 0.02,
    obstacles=(),
    retract_state=None,
):
    """Joint-space cubic time-scaling trajectory with collision checking.

    Zero boundary velocities; duration set so the peak joint speed stays
    within the arm's velocity limit. Every waypoint is collision-checked;
    on collision the planner retries via a single retract waypoint, then
    fails.
    """
    q_from = np.asarray(q_from, float)
    q_to = np.asarray(q_to, float)
    if not (arm.within_limits(q_from) and arm.within_limits(q_to)):
        raise LimitViolation("trajectory endpoints outside joint limits")
    for label, q in (("start", q_from), ("goal", q_to)):
        colliding, _ = check_collision(arm, q, obstacles)
        if colliding:
            raise CollisionOnPath(f"{label} state is in collision")

    path = _cubic_segment(arm, q_from, q_to, dt)
    if _path_clear(arm, path, obstacles):
        return path
    if retract_state is not None:
        retract = np.asarray(retract_state, float)
        colliding, _ = check_collision(arm, retract, obstacles)
        if not colliding:
            first = _cubic_segment(arm, q_from, retract, dt)
            second = _cubic_segment(arm, retract, q_to, dt)
            combined = first + second[1:]
            if _path_clear(arm, combined, obstacles):
                return combined
    raise CollisionOnPath("no collision-free path (direct and retract failed)")


def _cubic_segment(arm: ArmModel, q_from, q_to, dt):
    delta = q_to - q_from
    span = float(np.max(np.abs(delta)))
    if span < 1e-15:
        return [q_from.copy()]
    # cubic time scaling s(tau)=3tau^2-2tau^3 has peak slope 1.5/T
    duration = max(1.5 * span / arm.max_joint_velocity, dt)
    n = max(int(np.ceil(duration / dt)), 1)
    taus = np.linspace(0.0, 1.0, n + 1)
    s = 3 * taus**2 - 2 * taus**3
    return [q_from + si * delta for si in s]


def _path_clear(arm: ArmModel, path, obstacles) -> bool:
    if not obstacles:
        return True
    for q in path:
        colliding, _ = check_collision(arm, q, obstacles)
        if colliding:
            return False
    return True


def max_step_velocity(path, dt: float) -> float:
    if len(path) < 2:
        return 0.0
    diffs = np.abs(np.diff(np.asarray(path), axis=0))
    return float(diffs.max() / dt)


@dataclass(frozen=True)
class GuidePose:
    """End-effector target: guide bore aligned to the planned screw axis,
    positioned at a standoff behind the entry point (robot base frame)."""

    pose: RigidTransform
    standoff_mm: float

    @property
    def bore_axis(self) -> np.ndarray:
        return self.pose.rotation[:, 2]


def guide_pose_for_axis(entry, direction, standoff_mm=GUIDE_STANDOFF_MM,
                        roll: float = 0.0) -> GuidePose:
    """Guide frame with +z along the screw axis, origin standoff behind entry."""
    z = geo.unit(direction)
    ref = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = geo.unit(np.cross(ref, z))
    y = np.cross(z, x)
    r = np.column_stack([x, y, z]) @ geo.rotation_about([0, 0, 1], roll).rotation
    origin = np.asarray(entry, float) - standoff_mm * z
    return GuidePose(RigidTransform(r, origin), standoff_mm)


def align_to_plan(
    plan: ScrewPlan,
    frames,
    arm: ArmModel,
    current_state,
    obstacles=(),
    registration_verified: bool = True,
    dt: float = 0.02,
    retract_state=None,
):
    """Map the planned screw axis into the robot base frame and move the
    guide onto it.

    The plan lives in image space; the chain image -> DRB -> tracker ->
    robot base must resolve in ``frames``. Rotation about the bore axis is
    free, so several roll angles are tried before giving up.
    """
    if not registration_verified:
        raise RegistrationMissing("registration must be verified before alignment")
    base_from_image = frames.resolve("CT_IMAGE", "ROBOT_BASE")
    entry = base_from_image.apply(plan.entry)
    direction = base_from_image.rotation @ plan.direction

    last_exc = None
    for roll in np.linspace(0.0, 2 * np.pi, 8, endpoint=False):
        guide = guide_pose_for_axis(entry, direction, roll=roll)
        try:
            q_goal = ik(arm, guide.pose, current_state)
        except (Unreachable, LimitViolation) as exc:
            last_exc = exc
            continue
        trajectory = plan_trajectory(
            arm, current_state, q_goal, dt=dt,
            obstacles=obstacles, retract_state=retract_state,
        )
        return guide, trajectory
    raise last_exc if last_exc is not None else Unreachable("no reachable roll")


def serialize_trajectory(path, dt: float) -> str:
    """Timestamped joint sequence, 6 decimals."""
    lines = []
    for i, q in enumerate(path):
        vals = " ".join(f"{x:.6f}" for x in q)
        lines.append(f"{i * dt:.6f} {vals}")
    return "\n".join(lines) + "\n"


def arm_to_config(arm: ArmModel) -> dict:
    return {
        "links": [
            {"a": l.a, "alpha": l.alpha, "d": l.d, "theta_offset": l.theta_offset}
            for l in arm.links
        ],
        "joint_limits": arm.joint_limits.tolist(),
        "max_joint_velocity": arm.max_joint_velocity,
        "capsules": [
            [
                {"p0": c.p0.tolist(), "p1": c.p1.tolist(), "radius": c.radius}
                for c in caps
            ]
            for caps in arm.link_capsules
        ],
    }


def arm_from_config(cfg: dict) -> ArmModel:
    links = tuple(
        DhLink(l["a"], l["alpha"], l["d"], l["theta_offset"]) for l in cfg["links"]
    )
    capsules = tuple(
        tuple(Capsule(c["p0"], c["p1"], c["radius"]) for c in caps)
        for caps in cfg["capsules"]
    )
    return ArmModel(
        links,
        np.asarray(cfg["joint_limits"], float),
        cfg["max_joint_velocity"],
        capsules,
    )


def load_arm(path) -> ArmModel:
    with open(path) as fh:
        return arm_from_config(json.load(fh))


def save_arm(arm: ArmModel, path):
    with open(path, "w") as fh:
        json.dump(arm_to_config(arm), fh, indent=2)
