"""Motion generation and execution.

Two regimes: keyframe motion primitives with trajectory-wide collision checks
for fixed-goal moves, and online trajectory generation (per-tick replanning
toward a possibly moving 6D goal under velocity/acceleration limits) with
exponential collision-aware velocity scaling.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.transform import Rotation

from .geom import Pose
from .kin import KinematicChain, fk, ik_sdls, min_link_distance

CONTROL_RATE = 30.0  # Hz


class MotionError(ValueError):
    def __init__(self, code: str, message: str = "", detail=None):
        super().__init__(message or code)
        self.code = code
        self.detail = detail


# ---------------------------------------------------------------------------
# Collision-aware velocity scaling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CollisionScaleConfig:
    """Constants of the exponential slow-down law.

    The (d_min, d_max) band is interpreted in `unit_scale` meters, so
    unit_scale=0.1 turns the nominal 0.5-3.0 band into 5-30 cm.
    """

    d_min: float = 0.5
    d_max: float = 3.0
    exponent_factor: float = 5.0
    unit_scale: float = 1.0

    def __post_init__(self):
        if self.d_min >= self.d_max:
            raise MotionError("invalid-config", "d_min must be < d_max")

    @property
    def halt_distance(self) -> float:
        """Distance (m) at and below which an approaching arm is halted."""
        return self.d_min * self.unit_scale


def _alpha(dist: float, config: CollisionScaleConfig) -> float:
    a = (dist / config.unit_scale - config.d_min) / (config.d_max - config.d_min)
    return float(np.clip(a, 0.0, 1.0))


def collision_scale(dist_c: float, dist_n: float,
                    config: CollisionScaleConfig = CollisionScaleConfig()) -> float:
    """Velocity scale beta in [0, 1] from the current and extrapolated
    minimum link distances. Approaching a collision (alpha_n <= alpha_c)
    decays the velocity exponentially down to a halt at the band floor;
    moving apart is never slowed."""
    a_c = _alpha(dist_c, config)
    a_n = _alpha(dist_n, config)
    if a_n > a_c:
        return 1.0
    k = config.exponent_factor
    return float((2.0 ** (k * a_n) - 1.0) / (2.0**k - 1.0))


# ---------------------------------------------------------------------------
# Online trajectory generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OtgLimits:
    v_lin: float = 0.25     # m/s
    a_lin: float = 1.0      # m/s^2
    v_ang: float = 1.5      # rad/s
    a_ang: float = 6.0      # rad/s^2


@dataclass
class OtgState:
    pose: Pose
    goal: Pose
    lin_vel: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ang_vel: np.ndarray = field(default_factory=lambda: np.zeros(3))
    limits: OtgLimits = field(default_factory=OtgLimits)
    status: str = "tracking"  # tracking | reached | scaled_halt

    POS_REACHED = 0.002
    ORI_REACHED = np.deg2rad(1.0)

    def __post_init__(self):
        self.lin_vel = np.asarray(self.lin_vel, float).reshape(3)
        self.ang_vel = np.asarray(self.ang_vel, float).reshape(3)

    def position_error(self) -> float:
        return float(np.linalg.norm(self.goal.trans - self.pose.trans))

    def orientation_error(self) -> float:
        return self.pose.rotation_angle_to(self.goal)


def profile_time(distance: float, v_max: float, a_max: float) -> float:
    """Closed-form rest-to-rest trapezoidal (or triangular) travel time."""
    d = abs(distance)
    if d < 1e-12:
        return 0.0
    d_ramp = v_max**2 / a_max
    if d <= d_ramp:
        return 2.0 * np.sqrt(d / a_max)
    return d / v_max + v_max / a_max


def _braking_velocity(d: float, v_max: float, a: float, dt: float) -> float:
    """Largest speed that can still stop within distance d under the
    discrete-time braking guard."""
    if d <= 0:
        return 0.0
    half = a * dt / 2.0
    return min(v_max, -half + np.sqrt(half * half + 2.0 * a * d))


def _axis_group_step(err_vec, vel, v_max, a_max, dt, v_scale, deadband=0.0):
    """One acceleration-limited step of a vector axis group toward zero error.

    The braking guard is evaluated on the error remaining after this step's
    travel, so deceleration starts early enough to avoid overshoot; inside
    the deadband the commanded velocity is zero. Returns (new velocity,
    displacement over the step)."""
    d = np.linalg.norm(err_vec)
    if d > deadband:
        direction = err_vec / d
        d_eff = max(d - np.linalg.norm(vel) * dt, 0.0)
        speed = min(_braking_velocity(d_eff, v_max, a_max, dt), d / dt)
        v_des = direction * (speed * v_scale)
    else:
        v_des = np.zeros(3)
    dv = v_des - vel
    dv_norm = np.linalg.norm(dv)
    max_dv = a_max * dt
    if dv_norm > max_dv:
        dv = dv * (max_dv / dv_norm)
    v_new = vel + dv
    disp = 0.5 * (vel + v_new) * dt
    return v_new, disp


def otg_step(state: OtgState, dt: float, velocity_scale: float = 1.0) -> OtgState:
    """Advance one control tick toward the (possibly updated) goal pose.

    Per-axis-group trapezoidal profile with a discrete braking-distance
    guard; the linear and angular groups are synchronized to the slower one
    so both arrive together. `velocity_scale` (the collision beta) caps the
    commanded velocity but the acceleration limit still bounds the step
    change, so scaling never produces an acceleration spike."""
    if dt <= 0:
        raise MotionError("invalid-config", "dt must be positive")
    lim = state.limits
    e_lin = state.goal.trans - state.pose.trans
    e_ang = (state.goal.rotation * state.pose.rotation.inv()).as_rotvec()

    t_lin = profile_time(np.linalg.norm(e_lin), lim.v_lin, lim.a_lin)
    t_ang = profile_time(np.linalg.norm(e_ang), lim.v_ang, lim.a_ang)
    t_sync = max(t_lin, t_ang)
    v_lin_cap = lim.v_lin if t_sync <= 0 else lim.v_lin * max(t_lin / t_sync, 0.2)
    v_ang_cap = lim.v_ang if t_sync <= 0 else lim.v_ang * max(t_ang / t_sync, 0.2)

    scale = float(np.clip(velocity_scale, 0.0, 1.0))
    v_lin_new, dp = _axis_group_step(e_lin, state.lin_vel, v_lin_cap, lim.a_lin,
                                     dt, scale, deadband=0.25 * OtgState.POS_REACHED)
    v_ang_new, dr = _axis_group_step(e_ang, state.ang_vel, v_ang_cap, lim.a_ang,
                                     dt, scale, deadband=0.25 * OtgState.ORI_REACHED)

    new_rot = Rotation.from_rotvec(dr) * state.pose.rotation
    new_pose = Pose(new_rot.as_quat(), state.pose.trans + dp)

    new_state = replace(state, pose=new_pose, lin_vel=v_lin_new, ang_vel=v_ang_new)
    pe = new_state.position_error()
    oe = new_state.orientation_error()
    slow = (np.linalg.norm(v_lin_new) <= 0.01 * lim.v_lin
            and np.linalg.norm(v_ang_new) <= 0.01 * lim.v_ang)
    if pe <= OtgState.POS_REACHED and oe <= OtgState.ORI_REACHED and slow:
        new_state.status = "reached"
    elif scale <= 1e-9:
        new_state.status = "scaled_halt"
    else:
        new_state.status = "tracking"
    return new_state


def otg_controller_tick(
    states: dict[str, OtgState],
    collision_query=None,
    scale_config: CollisionScaleConfig = CollisionScaleConfig(),
    dt: float = 1.0 / CONTROL_RATE,
) -> dict[str, OtgState]:
    """One 30 Hz tick of the multi-instance OTG controller.

    `collision_query(states) -> (dist_c, dist_n)` supplies the minimum link
    distances at the current and constant-velocity-extrapolated states; the
    resulting beta multiplies every commanded velocity. Statuses are carried
    per instance."""
    if collision_query is not None:
        dist_c, dist_n = collision_query(states)
        beta = collision_scale(dist_c, dist_n, scale_config)
    else:
        beta = 1.0
    return {name: otg_step(s, dt, velocity_scale=beta) for name, s in states.items()}


def extrapolated_states(states: dict[str, OtgState], horizon: float) -> dict[str, Pose]:
    """Constant-velocity pose extrapolation used for the dist_n query."""
    out = {}
    for name, s in states.items():
        rot = Rotation.from_rotvec(s.ang_vel * horizon) * s.pose.rotation
        out[name] = Pose(rot.as_quat(), s.pose.trans + s.lin_vel * horizon)
    return out


# ---------------------------------------------------------------------------
# Parameterized motion primitives
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Keyframe:
    """Per-chain goals (joint vector or Cartesian Pose) plus a speed scale."""

    goals: dict[str, object]
    speed_scale: float = 1.0

    def __post_init__(self):
        if not self.goals:
            raise MotionError("invalid-keyframe", "keyframe targets no chain")
        if not 0.0 < self.speed_scale <= 1.0:
            raise MotionError("invalid-keyframe", "speed scale outside (0, 1]")


@dataclass
class Trajectory:
    times: np.ndarray                      # strictly increasing (s)
    positions: dict[str, np.ndarray]       # chain -> (n, dof)

    @property
    def duration(self) -> float:
        return float(self.times[-1]) if len(self.times) else 0.0

    def at(self, t: float) -> dict[str, np.ndarray]:
        out = {}
        for name, qs in self.positions.items():
            out[name] = np.array([
                np.interp(t, self.times, qs[:, j]) for j in range(qs.shape[1])
            ])
        return out

    def to_csv(self, path) -> None:
        names = sorted(self.positions)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            header = ["time"]
            for name in names:
                dof = self.positions[name].shape[1]
                header += [f"{name}_q{j}" for j in range(dof)]
            writer.writerow(header)
            for i, t in enumerate(self.times):
                row = [f"{t:.6f}"]
                for name in names:
                    row += [f"{v:.9f}" for v in self.positions[name][i]]
                writer.writerow(row)


def pmp_generate(
    keyframes: list[Keyframe],
    start: dict[str, np.ndarray],
    chains: dict[str, KinematicChain],
    collision_margin: float = 0.0,
    ee_spacing: float = 0.01,
    check_collisions: bool = True,
) -> Trajectory:
    """Joint-space linear interpolation through the keyframes, time-scaled to
    joint velocity limits, with self-collision checked along the path before
    anything is returned.

    Cartesian keyframe goals are solved with the SDLS IK from the previous
    waypoint configuration. Generation fails ("path-collision") rather than
    returning a colliding trajectory."""
    current = {name: np.asarray(q, float).copy() for name, q in start.items()}
    waypoints = [dict(current)]
    scales = []
    for kf in keyframes:
        nxt = dict(waypoints[-1])
        for name, goal in kf.goals.items():
            chain = chains[name]
            if isinstance(goal, Pose):
                result = ik_sdls(chain, goal, nxt[name])
                if not result.success:
                    raise MotionError(
                        "ik-unreachable",
                        f"{name}: pos err {result.position_error:.4f} m",
                    )
                nxt[name] = result.q
            else:
                q = np.asarray(goal, float)
                if np.any(q < chain.lower - 1e-9) or np.any(q > chain.upper + 1e-9):
                    raise MotionError("ik-unreachable", f"{name}: joint goal outside limits")
                nxt[name] = q.copy()
        waypoints.append(nxt)
        scales.append(kf.speed_scale)

    times = [0.0]
    for prev, nxt, scale in zip(waypoints, waypoints[1:], scales):
        seg_time = 0.0
        for name in prev:
            chain = chains[name]
            dq = np.abs(nxt[name] - prev[name])
            vmax = np.array([j.max_velocity for j in chain.joints]) * scale
            seg_time = max(seg_time, float(np.max(dq / vmax)) if len(dq) else 0.0)
        times.append(times[-1] + seg_time)

    # Sample densely enough that the end effector moves <= ee_spacing per step.
    seg_samples = []
    for prev, nxt in zip(waypoints, waypoints[1:]):
        travel = 0.0
        for name in prev:
            ee_a, _ = fk(chains[name], prev[name], check_limits=False)
            ee_b, _ = fk(chains[name], nxt[name], check_limits=False)
            travel = max(travel, float(np.linalg.norm(ee_b.trans - ee_a.trans)))
        seg_samples.append(max(int(np.ceil(travel / ee_spacing)), 2))

    all_times = []
    all_qs = {name: [] for name in current}
    for si, (prev, nxt) in enumerate(zip(waypoints, waypoints[1:])):
        n = seg_samples[si]
        taus = np.linspace(0.0, 1.0, n, endpoint=(si == len(scales) - 1))
        t0, t1 = times[si], times[si + 1]
        for tau in taus:
            all_times.append(t0 + tau * (t1 - t0))
            for name in current:
                all_qs[name].append(prev[name] + tau * (nxt[name] - prev[name]))
    if not all_times:
        all_times = [0.0]
        for name in current:
            all_qs[name].append(current[name])
    # De-duplicate identical consecutive timestamps (zero-length segments).
    t_arr = np.array(all_times)
    keep = np.concatenate([[True], np.diff(t_arr) > 1e-12])
    if not np.any(keep[1:]):
        keep = np.zeros(len(t_arr), bool)
        keep[0] = True
    traj = Trajectory(
        times=t_arr[keep],
        positions={n: np.array(qs)[keep] for n, qs in all_qs.items()},
    )

    if check_collisions and len(chains) >= 1:
        names = sorted(chains)
        chain_list = [chains[n] for n in names]
        for i, t in enumerate(traj.times):
            qs = [traj.positions[n][i] for n in names]
            dist, pair = min_link_distance(chain_list, qs)
            if dist <= collision_margin:
                raise MotionError(
                    "path-collision",
                    f"distance {dist:.4f} m at t={t:.3f}s",
                    detail={"time": float(t), "pair": pair, "index": i},
                )
    return traj
