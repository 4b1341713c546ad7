"""Kinematic chains: forward kinematics, selectively damped least-squares
inverse kinematics with null-space costs, capsule link distances, and the
arm-mounting workspace sweep.

Arms are generic 7-DoF chains with capsule collision geometry, not
vendor-exact models; all checks downstream are relative/property based.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .geom import Pose

POS_TOL = 1e-3          # IK position tolerance (m)
ORI_TOL = np.deg2rad(0.5)
GAMMA_MAX = np.pi / 4   # max joint change per SDLS iteration (rad)


class KinError(ValueError):
    def __init__(self, code: str, message: str = ""):
        super().__init__(message or code)
        self.code = code


@dataclass(frozen=True)
class Capsule:
    """Line-swept sphere in a link frame."""

    p0: np.ndarray
    p1: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "p0", np.asarray(self.p0, float).reshape(3))
        object.__setattr__(self, "p1", np.asarray(self.p1, float).reshape(3))
        if self.radius <= 0:
            raise KinError("invalid-capsule", "radius must be positive")


@dataclass(frozen=True)
class Joint:
    axis: np.ndarray
    origin: Pose
    lo: float
    hi: float
    max_velocity: float = 2.0
    max_acceleration: float = 10.0

    def __post_init__(self):
        a = np.asarray(self.axis, float).reshape(3)
        n = np.linalg.norm(a)
        if n < 1e-12:
            raise KinError("invalid-joint", "zero axis")
        object.__setattr__(self, "axis", a / n)
        if self.lo >= self.hi:
            raise KinError("invalid-joint", "limits lo >= hi")


@dataclass(frozen=True)
class KinematicChain:
    name: str
    joints: tuple[Joint, ...]
    links: tuple[tuple[Capsule, ...], ...]  # capsules per joint frame
    mount: Pose = field(default_factory=Pose.identity)
    tool: Pose = field(default_factory=Pose.identity)

    def __post_init__(self):
        if len(self.links) != len(self.joints):
            raise KinError("invalid-chain", "links must match joint count")

    @property
    def dof(self) -> int:
        return len(self.joints)

    @property
    def lower(self) -> np.ndarray:
        return np.array([j.lo for j in self.joints])

    @property
    def upper(self) -> np.ndarray:
        return np.array([j.hi for j in self.joints])

    def clamp(self, q: np.ndarray) -> np.ndarray:
        return np.clip(q, self.lower, self.upper)

    def mid(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def with_mount(self, mount: Pose) -> "KinematicChain":
        return KinematicChain(self.name, self.joints, self.links, mount, self.tool)

    def reach(self) -> float:
        """Loose upper bound on end-effector distance from the mount."""
        r = np.linalg.norm(self.tool.trans)
        for j in self.joints:
            r += np.linalg.norm(j.origin.trans)
        return r


@dataclass
class JointState:
    positions: np.ndarray
    velocities: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, float)
        self.velocities = np.asarray(self.velocities, float)


@dataclass(frozen=True)
class NullspaceCost:
    """Penalizes the elbow crossing a vertical plane towards the system
    center; gradient is pushed through the Jacobian null-space."""

    plane_point: np.ndarray
    plane_normal: np.ndarray
    weight: float = 1.0
    elbow_joint: int = 3

    def __post_init__(self):
        object.__setattr__(self, "plane_point", np.asarray(self.plane_point, float).reshape(3))
        n = np.asarray(self.plane_normal, float).reshape(3)
        nn = np.linalg.norm(n)
        if nn < 1e-12:
            raise KinError("invalid-plane", "zero normal")
        object.__setattr__(self, "plane_normal", n / nn)

    def signed_distance(self, elbow_pos: np.ndarray) -> float:
        return float((elbow_pos - self.plane_point) @ self.plane_normal)

    def value(self, elbow_pos: np.ndarray) -> float:
        d = self.signed_distance(elbow_pos)
        return self.weight * max(0.0, -d) ** 2


def fk(chain: KinematicChain, q, check_limits: bool = True):
    """Forward kinematics.

    Returns (end-effector Pose, list of per-joint link-frame Poses).
    """
    q = np.asarray(q, float)
    if q.shape != (chain.dof,):
        raise KinError("invalid-state", f"expected {chain.dof} joint values")
    if check_limits and (np.any(q < chain.lower - 1e-9) or np.any(q > chain.upper + 1e-9)):
        raise KinError("joint-limit", "configuration outside joint limits")
    t = chain.mount
    frames = []
    for joint, qi in zip(chain.joints, q):
        t = t @ joint.origin @ Pose.from_rotvec(joint.axis * qi)
        frames.append(t)
    return t @ chain.tool, frames


def jacobian(chain: KinematicChain, q) -> np.ndarray:
    """Geometric Jacobian (6 x dof): rows = (linear; angular), world frame."""
    ee, frames = fk(chain, q, check_limits=False)
    p_ee = ee.trans
    cols = []
    for joint, frame in zip(chain.joints, frames):
        z = frame.rotation.apply(joint.axis)
        o = frame.trans
        cols.append(np.concatenate([np.cross(z, p_ee - o), z]))
    return np.array(cols).T


def _pose_error(current: Pose, target: Pose) -> np.ndarray:
    """6-vector twist error (linear; angular) taking current to target."""
    dp = target.trans - current.trans
    dr = (target.rotation * current.rotation.inv()).as_rotvec()
    return np.concatenate([dp, dr])


@dataclass
class IkResult:
    success: bool
    q: np.ndarray
    position_error: float
    orientation_error: float
    iterations: int


def ik_sdls(
    chain: KinematicChain,
    target: Pose,
    q0,
    cost: NullspaceCost | None = None,
    pos_tol: float = POS_TOL,
    ori_tol: float = ORI_TOL,
    max_iters: int = 300,
) -> IkResult:
    """Selectively damped least-squares IK.

    Each singular direction gets its own damped gain; per-iteration joint
    changes are clamped to GAMMA_MAX. Steps that would increase the task
    error are rejected and retried with more damping, so the accepted error
    sequence is non-increasing. A null-space projected gradient of `cost`
    (when given) biases the elbow without disturbing the task.
    """
    q = chain.clamp(np.asarray(q0, float).copy())

    def task_error(qv):
        ee, _ = fk(chain, qv, check_limits=False)
        e = _pose_error(ee, target)
        return e, float(np.linalg.norm(e[:3])), float(np.linalg.norm(e[3:]))

    e, pe, oe = task_error(q)
    err_norm = np.linalg.norm(np.concatenate([e[:3], 0.2 * e[3:]]))
    for it in range(max_iters):
        if pe <= pos_tol and oe <= ori_tol:
            return IkResult(True, q, pe, oe, it)
        jac = jacobian(chain, q)
        u, s, vt = np.linalg.svd(jac, full_matrices=False)
        lam = 1e-3
        accepted = False
        for _ in range(8):
            gains = s / (s**2 + lam**2)
            dq = vt.T @ (gains * (u.T @ e))
            step_max = np.max(np.abs(dq))
            if step_max > GAMMA_MAX:
                dq *= GAMMA_MAX / step_max
            if cost is not None:
                grad = _elbow_cost_gradient(chain, q, cost)
                pinv = vt.T @ np.diag(s / (s**2 + lam**2)) @ u.T
                nproj = np.eye(chain.dof) - pinv @ jac
                dq = dq - nproj @ grad
            q_new = chain.clamp(q + dq)
            e_new, pe_new, oe_new = task_error(q_new)
            new_norm = np.linalg.norm(np.concatenate([e_new[:3], 0.2 * e_new[3:]]))
            if new_norm <= err_norm + 1e-12:
                q, e, pe, oe, err_norm = q_new, e_new, pe_new, oe_new, new_norm
                accepted = True
                break
            lam *= 4.0
        if not accepted:
            # Fully damped step made no progress; stop early.
            break
    success = pe <= pos_tol and oe <= ori_tol
    return IkResult(success, q, pe, oe, max_iters)


def _elbow_cost_gradient(chain: KinematicChain, q, cost: NullspaceCost) -> np.ndarray:
    h = 1e-5
    idx = min(cost.elbow_joint, chain.dof - 1)

    def val(qv):
        _, frames = fk(chain, qv, check_limits=False)
        return cost.value(frames[idx].trans)

    grad = np.zeros(chain.dof)
    base = val(q)
    if base == 0.0:
        # Quick check whether any perturbation activates the penalty.
        pass
    for i in range(chain.dof):
        qp = q.copy()
        qp[i] += h
        qm = q.copy()
        qm[i] -= h
        grad[i] = (val(qp) - val(qm)) / (2 * h)
    return grad


def segment_segment_distance(p0, p1, q0, q1) -> float:
    """Minimum distance between segments [p0, p1] and [q0, q1]."""
    p0, p1, q0, q1 = (np.asarray(x, float) for x in (p0, p1, q0, q1))
    d1 = p1 - p0
    d2 = q1 - q0
    r = p0 - q0
    a = d1 @ d1
    e = d2 @ d2
    f = d2 @ r
    eps = 1e-12
    if a <= eps and e <= eps:
        return float(np.linalg.norm(r))
    if a <= eps:
        s, t = 0.0, np.clip(f / e, 0.0, 1.0)
    else:
        c = d1 @ r
        if e <= eps:
            t, s = 0.0, np.clip(-c / a, 0.0, 1.0)
        else:
            b = d1 @ d2
            denom = a * e - b * b
            s = np.clip((b * f - c * e) / denom, 0.0, 1.0) if denom > eps else 0.0
            t = (b * s + f) / e
            if t < 0.0:
                t, s = 0.0, np.clip(-c / a, 0.0, 1.0)
            elif t > 1.0:
                t, s = 1.0, np.clip((b - c) / a, 0.0, 1.0)
    cp = p0 + s * d1
    cq = q0 + t * d2
    return float(np.linalg.norm(cp - cq))


def _world_capsules(chain: KinematicChain, q):
    """(p0, p1, radius, joint_index) per capsule in world coordinates."""
    _, frames = fk(chain, q, check_limits=False)
    out = []
    for ji, (frame, caps) in enumerate(zip(frames, chain.links)):
        for cap in caps:
            out.append((frame.apply(cap.p0), frame.apply(cap.p1), cap.radius, ji))
    return out


def min_link_distance(chains, qs) -> tuple[float, tuple]:
    """Minimum capsule-capsule distance over all non-adjacent link pairs,
    within and across chains. Returns (distance, (chain_i, link_i, chain_j, link_j)).
    """
    world = [_world_capsules(c, q) for c, q in zip(chains, qs)]
    best = np.inf
    best_pair = None
    for ci in range(len(world)):
        for cj in range(ci, len(world)):
            for a, capa in enumerate(world[ci]):
                b_start = a + 1 if ci == cj else 0
                for b in range(b_start, len(world[cj])):
                    capb = world[cj][b]
                    if ci == cj and abs(capa[3] - capb[3]) <= 1:
                        continue  # same or adjacent link
                    d = segment_segment_distance(capa[0], capa[1], capb[0], capb[1])
                    d = max(0.0, d - capa[2] - capb[2])
                    if d < best:
                        best = d
                        best_pair = (ci, a, cj, b)
    return float(best), best_pair


def extrapolate(chain: KinematicChain, q, qdot, dt: float) -> np.ndarray:
    """Constant-velocity extrapolation, clamped to joint limits."""
    if dt < 0:
        raise KinError("invalid-state", "dt must be >= 0")
    return chain.clamp(np.asarray(q, float) + np.asarray(qdot, float) * dt)


# ---------------------------------------------------------------------------
# Default arm models
# ---------------------------------------------------------------------------

def default_arm(name: str, mount: Pose | None = None) -> KinematicChain:
    """Generic 7-DoF arm (z-y-z-y-z-y-z axis pattern, ~0.9 m reach) with
    capsule links sized from coarse measurements."""
    seg = [0.18, 0.16, 0.24, 0.16, 0.24, 0.14, 0.10]
    axes = ["z", "y", "z", "y", "z", "y", "z"]
    tool_len = 0.10
    lim = np.pi * 0.95
    joints = []
    links = []
    for i, (length, ax) in enumerate(zip(seg, axes)):
        axis = {"z": [0, 0, 1], "y": [0, 1, 0]}[ax]
        joints.append(
            Joint(axis=axis, origin=Pose(trans=(0, 0, length)), lo=-lim, hi=lim,
                  max_velocity=2.0, max_acceleration=10.0)
        )
        # The capsule in frame i covers the run to the next joint (or the
        # tool), slightly shortened so collinear non-adjacent links in the
        # outstretched pose keep clearance.
        nxt = seg[i + 1] if i + 1 < len(seg) else tool_len
        links.append((Capsule((0, 0, 0), (0, 0, nxt * 0.85), 0.035),))
    return KinematicChain(
        name=name,
        joints=tuple(joints),
        links=tuple(links),
        mount=mount or Pose.identity(),
        tool=Pose(trans=(0, 0, tool_len)),
    )


def default_observer(name: str = "observer", mount: Pose | None = None) -> KinematicChain:
    """Generic 6-DoF camera-carrier arm."""
    seg = [0.14, 0.12, 0.16, 0.12, 0.12, 0.08]
    axes = ["z", "y", "y", "z", "y", "z"]
    tool_len = 0.06
    lim = np.pi * 0.95
    joints = []
    links = []
    for i, (length, ax) in enumerate(zip(seg, axes)):
        axis = {"z": [0, 0, 1], "y": [0, 1, 0]}[ax]
        joints.append(
            Joint(axis=axis, origin=Pose(trans=(0, 0, length)), lo=-lim, hi=lim,
                  max_velocity=2.5, max_acceleration=12.0)
        )
        nxt = seg[i + 1] if i + 1 < len(seg) else tool_len
        links.append((Capsule((0, 0, 0), (0, 0, nxt * 0.85), 0.035),))
    return KinematicChain(
        name=name,
        joints=tuple(joints),
        links=tuple(links),
        mount=mount or Pose.identity(),
        tool=Pose(trans=(0, 0, tool_len)),
    )


# ---------------------------------------------------------------------------
# Robot-description serialization
# ---------------------------------------------------------------------------

def chain_to_dict(chain: KinematicChain) -> dict:
    return {
        "name": chain.name,
        "mount": {"quat": chain.mount.quat.tolist(), "trans": chain.mount.trans.tolist()},
        "tool": {"quat": chain.tool.quat.tolist(), "trans": chain.tool.trans.tolist()},
        "joints": [
            {
                "axis": j.axis.tolist(),
                "origin_quat": j.origin.quat.tolist(),
                "origin_trans": j.origin.trans.tolist(),
                "limits": [j.lo, j.hi],
                "max_velocity": j.max_velocity,
                "max_acceleration": j.max_acceleration,
            }
            for j in chain.joints
        ],
        "links": [
            [{"p0": c.p0.tolist(), "p1": c.p1.tolist(), "radius": c.radius} for c in caps]
            for caps in chain.links
        ],
    }


def chain_from_dict(data: dict) -> KinematicChain:
    joints = tuple(
        Joint(
            axis=j["axis"],
            origin=Pose(j["origin_quat"], j["origin_trans"]),
            lo=j["limits"][0],
            hi=j["limits"][1],
            max_velocity=j.get("max_velocity", 2.0),
            max_acceleration=j.get("max_acceleration", 10.0),
        )
        for j in data["joints"]
    )
    links = tuple(
        tuple(Capsule(c["p0"], c["p1"], c["radius"]) for c in caps)
        for caps in data["links"]
    )
    return KinematicChain(
        name=data["name"],
        joints=joints,
        links=links,
        mount=Pose(data["mount"]["quat"], data["mount"]["trans"]),
        tool=Pose(data["tool"]["quat"], data["tool"]["trans"]),
    )


def load_chain(path) -> KinematicChain:
    with open(path) as f:
        return chain_from_dict(json.load(f))


def save_chain(chain: KinematicChain, path) -> None:
    with open(path, "w") as f:
        json.dump(chain_to_dict(chain), f, indent=2)


# ---------------------------------------------------------------------------
# Workspace analysis
# ---------------------------------------------------------------------------

def default_harvest_poses(fruit_pose: Pose, mount: Pose) -> tuple[Pose, Pose]:
    """(grasp, cut) end-effector poses for one fruit: horizontal orthogonal
    approach at fruit height for the grasp, downward pose above for the cut."""
    p_f = fruit_pose.trans
    v = p_f[:2] - mount.trans[:2]
    n = np.linalg.norm(v)
    if n < 1e-9:
        v = np.array([0.0, 1.0])
    else:
        v = v / n
    approach = np.array([v[0], v[1], 0.0])
    grasp_pos = p_f - 0.10 * approach
    yaw = np.arctan2(v[1], v[0])
    grasp = Pose(Rotation.from_euler("z", yaw).as_quat(), grasp_pos)
    cut_pos = p_f + np.array([0.0, 0.0, 0.08]) - 0.05 * approach
    cut = Pose(
        (Rotation.from_euler("z", yaw) * Rotation.from_euler("y", np.pi / 2)).as_quat(),
        cut_pos,
    )
    return grasp, cut


@dataclass
class WorkspaceResult:
    counts: np.ndarray           # reachable fruit count per mount sample
    best_index: int
    best_fraction: float


def workspace_analysis(
    mount_samples: list[tuple[Pose, Pose]],
    fruit_poses: list[Pose],
    grasper: KinematicChain,
    cutter: KinematicChain,
    pose_builder=default_harvest_poses,
    collision_margin: float = 0.0,
    ik_iters: int = 80,
) -> WorkspaceResult:
    """Count, per (grasper mount, cutter mount) sample, the fruit poses for
    which both arms find collision-free IK solutions for their harvest poses.
    """
    if not mount_samples or not fruit_poses:
        raise KinError("invalid-state", "empty sample list")
    counts = np.zeros(len(mount_samples), dtype=int)
    for mi, (gm, cm) in enumerate(mount_samples):
        g = grasper.with_mount(gm)
        c = cutter.with_mount(cm)
        n_ok = 0
        for fp in fruit_poses:
            grasp, cut = pose_builder(fp, gm)
            if np.linalg.norm(grasp.trans - gm.trans) > g.reach():
                continue
            if np.linalg.norm(cut.trans - cm.trans) > c.reach():
                continue
            rg = ik_sdls(g, grasp, g.mid(), max_iters=ik_iters)
            if not rg.success:
                continue
            rc = ik_sdls(c, cut, c.mid(), max_iters=ik_iters)
            if not rc.success:
                continue
            dist, _ = min_link_distance([g, c], [rg.q, rc.q])
            if dist > collision_margin:
                n_ok += 1
        counts[mi] = n_ok
    best = int(np.argmax(counts))
    return WorkspaceResult(
        counts=counts,
        best_index=best,
        best_fraction=float(counts[best]) / len(fruit_poses),
    )
