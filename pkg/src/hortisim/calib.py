"""Offline calibration solvers.

Hand-eye / mount-transform estimation by nonlinear reprojection least
squares (three unknown transforms solved jointly), and force-torque sensor
parameter identification by stacked linear least squares. Marker detection
is simulated: observed pixel = true projection + noise; the solvers are the
content here, not fiducial decoding.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation

from .geom import CameraModel, Pose
from .kin import KinematicChain, fk
from .scene import GRAVITY, FtParams, WrenchReading


class CalibError(ValueError):
    def __init__(self, code: str, message: str = "", best=None):
        super().__init__(message or code)
        self.code = code
        self.best = best


# ---------------------------------------------------------------------------
# Force-torque calibration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FtCalibration:
    params: FtParams
    force_residual: float   # rms N
    torque_residual: float  # rms N*m


def calibrate_ft(
    samples: list[tuple[Pose, WrenchReading]],
    gravity: float = GRAVITY,
    min_poses: int = 10,
) -> FtCalibration:
    """Identify end-effector mass, center of mass, and force/torque biases
    from static readings at diverse sensor poses.

    Force model:  f = m * g_s + b_f     with g_s = R^T (0, 0, -g)
    Torque model: tau = c x (m * g_s) + b_tau
    Both are linear; each is solved by one stacked least-squares system
    (COM and torque bias jointly)."""
    if len(samples) < min_poses:
        raise CalibError("degenerate-poses", f"need >= {min_poses} poses")
    g_world = np.array([0.0, 0.0, -gravity])
    g_s = np.array([p.rotation.as_matrix().T @ g_world for p, _ in samples])
    forces = np.array([r.force for _, r in samples])
    torques = np.array([r.torque for _, r in samples])

    # Gravity directions must span 3D, else mass/COM are unobservable.
    dirs = g_s / np.linalg.norm(g_s, axis=1, keepdims=True)
    if np.linalg.matrix_rank(dirs, tol=1e-6) < 3:
        raise CalibError("degenerate-poses", "coplanar gravity directions")

    n = len(samples)
    a_force = np.zeros((3 * n, 4))
    a_force[:, 0] = g_s.ravel()
    a_force[:, 1:] = np.tile(np.eye(3), (n, 1))
    x, *_ = np.linalg.lstsq(a_force, forces.ravel(), rcond=None)
    mass = float(x[0])
    force_bias = x[1:]
    if mass <= 0:
        raise CalibError("degenerate-poses", f"non-physical mass {mass:.3f} kg")
    force_res = float(np.sqrt(np.mean((a_force @ x - forces.ravel()) ** 2)))

    def skew(v):
        return np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])

    a_torque = np.zeros((3 * n, 6))
    for i in range(n):
        # c x f_g = -f_g x c = skew(-f_g) @ c
        a_torque[3 * i:3 * i + 3, :3] = skew(-mass * g_s[i])
        a_torque[3 * i:3 * i + 3, 3:] = np.eye(3)
    y, *_ = np.linalg.lstsq(a_torque, torques.ravel(), rcond=None)
    com = y[:3]
    torque_bias = y[3:]
    torque_res = float(np.sqrt(np.mean((a_torque @ y - torques.ravel()) ** 2)))

    return FtCalibration(
        params=FtParams(mass, com, force_bias, torque_bias),
        force_residual=force_res,
        torque_residual=torque_res,
    )


def synthesize_ft_samples(
    truth: FtParams,
    n_samples: int = 45,
    noise_sigma: float = 0.0,
    seed: int = 0,
    gravity: float = GRAVITY,
) -> list[tuple[Pose, WrenchReading]]:
    """Static readings at uniformly random sensor orientations."""
    rng = np.random.default_rng(seed)
    g_world = np.array([0.0, 0.0, -gravity])
    samples = []
    for i in range(n_samples):
        rot = Rotation.random(random_state=np.random.RandomState(seed * 10_000 + i))
        pose = Pose(rot.as_quat(), rng.uniform(-0.5, 0.5, 3))
        g_s = rot.as_matrix().T @ g_world
        force = truth.mass * g_s + truth.force_bias
        torque = np.cross(truth.com, truth.mass * g_s) + truth.torque_bias
        if noise_sigma > 0:
            force = force + rng.normal(0.0, noise_sigma, 3)
            torque = torque + rng.normal(0.0, noise_sigma * 0.02, 3)
        samples.append((pose, WrenchReading(force, torque, pose, timestamp=float(i))))
    return samples


def relative_wrench(window: list[WrenchReading], horizon: float = 0.5) -> np.ndarray:
    """Force change of the newest reading relative to the mean of readings
    older than half the horizon; rejects slow bias drift without an online
    recalibration."""
    if not window:
        raise CalibError("empty-window")
    ordered = sorted(window, key=lambda r: r.timestamp)
    newest = ordered[-1]
    cutoff = newest.timestamp - horizon / 2.0
    old = [r for r in ordered[:-1] if r.timestamp <= cutoff]
    if not old:
        old = ordered[:-1]
    if not old:
        return np.zeros(3)
    baseline = np.mean([r.force for r in old], axis=0)
    return newest.force - baseline


# ---------------------------------------------------------------------------
# Hand-eye calibration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HandEyeSample:
    """One observation: which arm's marker was seen, at which joint
    configurations, and where in the image."""

    arm: str                 # "grasper" | "cutter"
    q_arm: np.ndarray
    q_observer: np.ndarray
    pixel: tuple[float, float]


@dataclass(frozen=True)
class HandEyeSetup:
    """Fixed problem data: the chains (grasper mount is the known reference),
    marker offsets from each arm's flange, and camera intrinsics."""

    grasper: KinematicChain
    cutter: KinematicChain
    observer: KinematicChain
    marker_offsets: dict[str, Pose]
    camera: CameraModel      # intrinsics only; pose field unused


@dataclass(frozen=True)
class HandEyeResult:
    cutter_mount: Pose
    observer_mount: Pose
    camera_mount: Pose       # observer flange -> camera
    mean_reprojection_error: float
    residuals: np.ndarray    # per-sample pixel error norms


def _pose_to_params(p: Pose) -> np.ndarray:
    return np.concatenate([p.rotation.as_rotvec(), p.trans])


def _params_to_pose(v: np.ndarray) -> Pose:
    return Pose(Rotation.from_rotvec(v[:3]).as_quat(), v[3:])


def calibrate_hand_eye(
    samples: list[HandEyeSample],
    setup: HandEyeSetup,
    initial: dict[str, Pose],
    min_samples: int = 30,
    max_nfev: int = 200,
) -> HandEyeResult:
    """Jointly optimize the cutter mount, observer mount, and camera mount
    by minimizing the squared marker reprojection error over all samples.

    Per-sample forward kinematics do not depend on the unknowns, so the
    flange poses are precomputed once and the Levenberg-Marquardt residual
    is fully vectorized."""
    if len(samples) < min_samples:
        raise CalibError("degenerate-motions", f"need >= {min_samples} samples")

    cam = setup.camera
    # Precompute per-sample constants.
    marker_base = np.zeros((len(samples), 3))   # marker point in arm base frame
    flange = np.zeros((len(samples), 4, 4))     # observer flange in observer base
    is_cutter = np.zeros(len(samples), bool)
    observed = np.zeros((len(samples), 2))
    for i, s in enumerate(samples):
        chain = setup.cutter if s.arm == "cutter" else setup.grasper
        base_chain = chain.with_mount(Pose.identity())
        ee, _ = fk(base_chain, s.q_arm, check_limits=False)
        marker_base[i] = (ee @ setup.marker_offsets[s.arm]).trans
        obs_chain = setup.observer.with_mount(Pose.identity())
        oee, _ = fk(obs_chain, s.q_observer, check_limits=False)
        flange[i] = oee.matrix()
        is_cutter[i] = s.arm == "cutter"
        observed[i] = s.pixel

    g_mat = setup.grasper.mount.matrix()
    marker_h = np.concatenate([marker_base, np.ones((len(samples), 1))], axis=1)

    def residuals(x):
        c_mount = _params_to_pose(x[0:6]).matrix()
        o_mount = _params_to_pose(x[6:12]).matrix()
        e_mount = _params_to_pose(x[12:18]).matrix()
        mount = np.where(is_cutter[:, None, None], c_mount[None], g_mat[None])
        p_world = np.einsum("nij,nj->ni", mount, marker_h)[:, :3]
        cam_pose = o_mount[None] @ flange @ e_mount[None]
        r_cam = cam_pose[:, :3, :3]
        t_cam = cam_pose[:, :3, 3]
        p_cam = np.einsum("nji,nj->ni", r_cam, p_world - t_cam)
        z = p_cam[:, 2]
        z_safe = np.where(np.abs(z) > 1e-6, z, 1e-6)
        u = cam.fx * p_cam[:, 0] / z_safe + cam.cx
        v = cam.fy * p_cam[:, 1] / z_safe + cam.cy
        res = np.column_stack([u, v]) - observed
        # Points behind the camera get a large fixed penalty.
        res[z <= 0] = 1e4
        return res.ravel()

    x0 = np.concatenate([
        _pose_to_params(initial["cutter_mount"]),
        _pose_to_params(initial["observer_mount"]),
        _pose_to_params(initial["camera_mount"]),
    ])

    jac0 = _numeric_jacobian(residuals, x0)
    if np.linalg.matrix_rank(jac0, tol=1e-6 * max(np.linalg.norm(jac0), 1.0)) < 18:
        raise CalibError("degenerate-motions", "sample set does not constrain all transforms")

    sol = least_squares(residuals, x0, method="lm", max_nfev=max_nfev * 19)
    res = sol.fun.reshape(-1, 2)
    norms = np.linalg.norm(res, axis=1)
    return HandEyeResult(
        cutter_mount=_params_to_pose(sol.x[0:6]),
        observer_mount=_params_to_pose(sol.x[6:12]),
        camera_mount=_params_to_pose(sol.x[12:18]),
        mean_reprojection_error=float(np.mean(norms)),
        residuals=norms,
    )


def _numeric_jacobian(fun, x, h: float = 1e-6) -> np.ndarray:
    f0 = fun(x)
    jac = np.zeros((len(f0), len(x)))
    for i in range(len(x)):
        xp = x.copy()
        xp[i] += h
        jac[:, i] = (fun(xp) - f0) / h
    return jac


def synthesize_hand_eye_samples(
    setup: HandEyeSetup,
    truth: dict[str, Pose],
    n_samples: int = 2000,
    pixel_noise: float = 0.0,
    seed: int = 0,
    max_attempts_factor: int = 50,
) -> list[HandEyeSample]:
    """Generate samples whose markers project inside the image under the
    true transforms; observations get Gaussian pixel noise."""
    rng = np.random.default_rng(seed)
    cam = setup.camera
    samples: list[HandEyeSample] = []
    attempts = 0
    arms = {"grasper": setup.grasper, "cutter": setup.cutter}
    mounts = {"grasper": setup.grasper.mount, "cutter": truth["cutter_mount"]}
    while len(samples) < n_samples and attempts < n_samples * max_attempts_factor:
        attempts += 1
        arm = "grasper" if rng.random() < 0.5 else "cutter"
        chain = arms[arm]
        q_arm = rng.uniform(chain.lower, chain.upper) * 0.5
        q_obs = rng.uniform(setup.observer.lower, setup.observer.upper) * 0.5
        base_chain = chain.with_mount(Pose.identity())
        ee, _ = fk(base_chain, q_arm, check_limits=False)
        marker_world = (mounts[arm] @ ee @ setup.marker_offsets[arm]).trans
        obs_chain = setup.observer.with_mount(Pose.identity())
        oee, _ = fk(obs_chain, q_obs, check_limits=False)
        cam_pose = truth["observer_mount"] @ oee @ truth["camera_mount"]
        p_cam = cam_pose.inverse().apply(marker_world)
        if p_cam[2] < 0.05:
            continue
        u = cam.fx * p_cam[0] / p_cam[2] + cam.cx
        v = cam.fy * p_cam[1] / p_cam[2] + cam.cy
        if not (0 <= u < cam.width and 0 <= v < cam.height):
            continue
        if pixel_noise > 0:
            u += rng.normal(0.0, pixel_noise)
            v += rng.normal(0.0, pixel_noise)
        samples.append(HandEyeSample(arm, q_arm, q_obs, (float(u), float(v))))
    if len(samples) < n_samples:
        raise CalibError("degenerate-motions",
                         f"only {len(samples)} visible samples generated")
    return samples


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------

FT_CSV_HEADER = ["qx", "qy", "qz", "qw", "tx", "ty", "tz",
                 "fx", "fy", "fz", "taux", "tauy", "tauz", "timestamp"]


def save_ft_samples(samples, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(FT_CSV_HEADER)
        for pose, reading in samples:
            writer.writerow(
                [*pose.quat, *pose.trans, *reading.force, *reading.torque,
                 reading.timestamp]
            )


def load_ft_samples(path):
    samples = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != FT_CSV_HEADER:
            raise CalibError("bad-csv", f"unexpected header {header}")
        for row in reader:
            vals = [float(x) for x in row]
            pose = Pose(vals[0:4], vals[4:7])
            samples.append(
                (pose, WrenchReading(vals[7:10], vals[10:13], pose, vals[13]))
            )
    return samples
