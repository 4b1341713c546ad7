"""End-to-end harvesting trials on a simulated clock.

Runs the full pipeline against a synthetic scene: initial mapping from a set
of observation poses, then per fruit the select / approach / grasp / pull /
cut / place loop with online fruit following, force-triggered stops, and
ground-truth success scoring. Everything is deterministic given
(scene, config, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .behavior import (
    BehaviorError,
    CutConfig,
    FruitRecord,
    GraspConfig,
    HarvestPhase,
    TrialMetrics,
    cut_pose,
    force_stop,
    grasp_direction,
    grasp_pose,
    pull_and_turn,
    select_fruit,
)
from .fit import FitError, Superellipsoid, fit_superellipsoid, smooth_cloud
from .geom import CameraModel, PointCloud, Pose, look_at_pose
from .kin import default_arm, fk, ik_sdls, min_link_distance
from .motion import (
    CollisionScaleConfig,
    Keyframe,
    MotionError,
    OtgState,
    collision_scale,
    otg_step,
    pmp_generate,
)
from .scene import (
    ContactState,
    Fruit,
    FtParams,
    InstanceMask,
    NoiseConfig,
    Peduncle,
    PlantScene,
    SemanticClass,
    mask_to_cloud,
    render,
    simulate_wrench,
)
from .worldmodel import (
    FruitInstance,
    PeduncleBuffer,
    PlantModel,
    ViewposeConfig,
    WorldModelError,
    add_peduncle_segment,
    add_stem_cloud,
    attach_peduncles,
    attach_stems,
    complete_shapes,
    estimate_stems,
    fuse_segment,
    peduncle_roi,
    resolve_overlaps,
    update_fruit_estimate,
    viewpose,
)


@dataclass(frozen=True)
class SystemConfig:
    """Everything a trial needs besides the scene and the seed."""

    grasper_mount: Pose
    cutter_mount: Pose
    viewpose_config: ViewposeConfig
    grasp: GraspConfig = GraspConfig()
    cut: CutConfig = CutConfig()
    noise: NoiseConfig = NoiseConfig()
    # Observer camera intrinsics (shared by mapping and following views).
    cam_fx: float = 160.0
    cam_fy: float = 160.0
    cam_width: int = 200
    cam_height: int = 150
    # Initial-mapping arc: positions in front of the row looking at it.
    mapping_views: int = 5
    mapping_target: np.ndarray = field(
        default_factory=lambda: np.array([0.0, 0.5, 1.05]))
    mapping_standoff: float = 0.45
    mapping_dwell: float = 1.0          # simulated s per observation pose
    # Rates (Hz) on the simulated clock.
    perception_rate: float = 10.0
    viewpose_rate: float = 5.0
    control_rate: float = 30.0
    # Force sensing / contact.
    ft_truth: FtParams = field(default_factory=lambda: FtParams(
        mass=0.9, com=(0.0, 0.0, 0.04), force_bias=(0.1, -0.2, 0.05),
        torque_bias=(0.002, 0.001, -0.003)))
    contact_stiffness: float = 200.0
    # Collision velocity scaling between the two arm tool points; the band
    # is shrunk to centimeter scale for a desk-sized workspace.
    scale_config: CollisionScaleConfig = CollisionScaleConfig(unit_scale=0.05)
    # Ground-truth success predicates.
    capture_margin: float = 0.01        # added to half the max fruit dim
    blade_reach: float = 0.015          # cutter-to-peduncle tolerance (m)
    container_center: np.ndarray = field(
        default_factory=lambda: np.array([0.0, 0.05, 0.45]))
    container_half: np.ndarray = field(
        default_factory=lambda: np.array([0.15, 0.15, 0.15]))
    # Cut commit: point stable when it moves < stable_dist over stable_time.
    cut_stable_dist: float = 0.002
    cut_stable_time: float = 0.3
    # Watchdogs (simulated s).
    max_grasp_time: float = 8.0
    max_cut_observe_time: float = 4.0
    max_motion_time: float = 10.0


def default_system_config(noise: NoiseConfig = NoiseConfig()) -> SystemConfig:
    """Mounting layout for the standard 3-stem desk scene: arms flanking the
    observer head, container between them at platform height."""
    return SystemConfig(
        grasper_mount=Pose(trans=(-0.25, 0.12, 0.50)),
        cutter_mount=Pose(trans=(0.25, 0.12, 0.50)),
        viewpose_config=ViewposeConfig(head_base=np.array([0.0, 0.0, 0.8])),
        # Desk-scale plants hang the peduncle ~6 cm over the grasp point, so
        # the default 8 cm separation would push the cut off the peduncle.
        cut=CutConfig(min_grasp_separation=0.06),
        noise=noise,
    )


# IK restart seeds: a ready pose plus folded/handed variants, covering the
# elbow configurations the single-start solver can miss.
_IK_SEEDS = (
    np.array([0.0, 0.5, 0.0, 0.8, 0.0, -0.4, 0.0]),
    np.array([0.0, 1.1, 0.0, -1.2, 0.0, 0.9, 0.0]),
    np.array([0.8, 0.9, -0.5, 1.2, 0.3, -0.8, 0.0]),
    np.array([-0.8, 0.9, 0.5, 1.2, -0.3, -0.8, 0.0]),
    np.array([0.0, 1.4, 0.0, -1.8, 0.0, 1.2, 0.0]),
)


def _blend_polyline(polyline: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Shift the fruit end of a peduncle by delta, fading to zero at the stem
    end, so a pulled fruit keeps a connected peduncle."""
    k = len(polyline)
    w = np.linspace(1.0, 0.0, k)
    return polyline + w[:, None] * delta[None, :]


class _TrialRuntime:
    """Mutable state of one trial: simulated clock, arm configurations,
    per-fruit ground-truth displacements, and the world model."""

    def __init__(self, scene: PlantScene, config: SystemConfig, seed: int):
        self.scene = scene
        self.cfg = config
        self.seed = seed
        self.clock = 0.0
        self.frame_count = 0
        self.model = PlantModel()
        self.grasper = default_arm("grasper", config.grasper_mount)
        self.cutter = default_arm("cutter", config.cutter_mount)
        self.chains = {"grasper": self.grasper, "cutter": self.cutter}
        self.qs = {"grasper": _IK_SEEDS[0].copy(), "cutter": _IK_SEEDS[0].copy()}
        # Ground-truth fruit displacement: None = attached, vector = grasped
        # offset, "removed" renders the fruit far below the scene.
        self.offsets: dict[int, np.ndarray] = {}
        self.removed: set[int] = set()

    # -- rendering ---------------------------------------------------------

    def camera(self, pose: Pose) -> CameraModel:
        c = self.cfg
        return CameraModel(c.cam_fx, c.cam_fy, c.cam_width / 2.0,
                           c.cam_height / 2.0, c.cam_width, c.cam_height, pose)

    def display_scene(self) -> PlantScene:
        """Scene as currently rendered: grasped fruits displaced with the
        gripper (peduncle blended along), harvested fruits out of view."""
        if not self.offsets and not self.removed:
            return self.scene
        fruits = []
        peduncles = []
        dump = np.array([0.0, 0.0, -10.0])
        for i, fruit in enumerate(self.scene.fruits):
            delta = None
            if i in self.removed:
                delta = dump
            elif i in self.offsets:
                delta = self.offsets[i]
            if delta is None:
                fruits.append(fruit)
            else:
                shape = fruit.shape
                moved = Superellipsoid(
                    shape.a, shape.b, shape.c, shape.e1, shape.e2,
                    Pose(shape.pose.quat, shape.pose.trans + delta))
                fruits.append(Fruit(moved, fruit.stem_index, fruit.color))
        for ped in self.scene.peduncles:
            fi = ped.fruit_index
            if fi in self.removed:
                peduncles.append(ped)   # cut stub stays on the plant
            elif fi in self.offsets:
                poly = _blend_polyline(ped.polyline, self.offsets[fi])
                peduncles.append(Peduncle(poly, ped.radius, fi))
            else:
                peduncles.append(ped)
        return PlantScene(self.scene.stems, fruits, peduncles,
                          self.scene.occluders)

    def frame(self, cam_pose: Pose):
        self.frame_count += 1
        frame_seed = self.seed * 100_003 + self.frame_count
        return render(self.display_scene(), self.camera(cam_pose),
                      self.cfg.noise, seed=frame_seed, timestamp=self.clock)

    def ingest(self, frame) -> None:
        for mask in frame.masks:
            if mask.semantic == SemanticClass.FRUIT:
                cloud = mask_to_cloud(frame, mask, stride=2, depth_band=0.06)
                if len(cloud) >= 5:
                    fuse_segment(self.model, cloud, mask.track_id)
            elif mask.semantic == SemanticClass.PEDUNCLE:
                cloud = mask_to_cloud(frame, mask, stride=2, depth_band=0.02)
                if len(cloud) >= 5:
                    add_peduncle_segment(self.model, cloud, mask.track_id,
                                         mask.associated_fruit_track)
            elif mask.semantic == SemanticClass.STEM:
                cloud = mask_to_cloud(frame, mask, stride=2, depth_band=0.05)
                if len(cloud) >= 5:
                    add_stem_cloud(self.model, cloud, mask.track_id)

    # -- arm bookkeeping ---------------------------------------------------

    def tcp(self, name: str) -> Pose:
        ee, _ = fk(self.chains[name], self.qs[name], check_limits=False)
        return ee

    def config_clearance(self, name: str, q: np.ndarray) -> float:
        """Minimum link clearance of configuration q for one arm against
        itself and the other arm at its current configuration."""
        names = [name] + [n for n in self.chains if n != name]
        chains = [self.chains[n] for n in names]
        qs = [q] + [self.qs[n] for n in names[1:]]
        dist, _ = min_link_distance(chains, qs)
        return dist

    def sync_joints(self, name: str, pose: Pose) -> None:
        """Track the joint configuration to a Cartesian pose (warm start);
        collision-free solutions only, else the previous configuration is
        kept."""
        for q0 in (self.qs[name], *_IK_SEEDS):
            result = ik_sdls(self.chains[name], pose, q0, max_iters=120)
            if result.success and self.config_clearance(name, result.q) > 0.0:
                self.qs[name] = result.q
                return

    def solve_ik_all(self, name: str, pose: Pose) -> list[np.ndarray]:
        """All distinct collision-free IK solutions from the restart seed set
        (current configuration first); ordered, deduplicated."""
        chain = self.chains[name]
        found: list[np.ndarray] = []
        for q0 in (self.qs[name], *_IK_SEEDS):
            result = ik_sdls(chain, pose, q0, max_iters=200)
            if not result.success:
                continue
            if self.config_clearance(name, result.q) <= 0.0:
                continue
            if all(np.linalg.norm(result.q - q) > 1e-3 for q in found):
                found.append(result.q)
        # Compact postures first: they interpolate more predictably.
        found.sort(key=lambda q: float(np.linalg.norm(q - _IK_SEEDS[0])))
        return found

    def solve_ik(self, name: str, pose: Pose) -> np.ndarray | None:
        solutions = self.solve_ik_all(name, pose)
        return solutions[0] if solutions else None

    def move_pmp(self, goals: dict[str, Pose]) -> bool:
        """Keyframe move with path collision checks; advances the clock by
        the trajectory duration. Tries every goal-configuration candidate
        until a collision-free path is found. False when planning fails."""
        names = sorted(goals)
        candidates = [self.solve_ik_all(n, goals[n]) for n in names]
        if any(not c for c in candidates):
            return False

        def attempt(keyframes):
            try:
                return pmp_generate(keyframes, dict(self.qs),
                                    self.chains, collision_margin=0.0)
            except MotionError:
                return None

        def plans(joint_goals):
            yield [Keyframe(joint_goals)]
            # Fallback: tuck the idle arm into the folded posture first, out
            # of the moving arm's sweep.
            idle = {n: _IK_SEEDS[1].copy() for n in self.chains
                    if n not in joint_goals}
            if idle:
                yield [Keyframe(idle), Keyframe(joint_goals)]

        traj = None
        combos = ([{names[0]: q} for q in candidates[0]] if len(names) == 1
                  else [dict(zip(names, qs)) for qs in zip(*candidates)])
        for joint_goals in combos:
            for keyframes in plans(joint_goals):
                traj = attempt(keyframes)
                if traj is not None:
                    break
            if traj is not None:
                break
        if traj is None:
            return False
        final = traj.at(traj.duration)
        for name in final:
            self.qs[name] = final[name]
        self.clock += traj.duration
        return True

    def home(self) -> None:
        """Return both arms to the ready posture between fruits, so every
        approach starts from the same compact configuration. Best effort:
        arms that cannot plan home stay where they are."""
        home_q = _IK_SEEDS[0]
        for goals in ({n: home_q for n in self.chains},
                      {"grasper": home_q}, {"cutter": home_q}):
            try:
                traj = pmp_generate([Keyframe(dict(goals))], dict(self.qs),
                                    self.chains, collision_margin=0.0)
            except MotionError:
                continue
            final = traj.at(traj.duration)
            for name in final:
                self.qs[name] = final[name]
            self.clock += traj.duration
            if len(goals) == len(self.chains):
                return

    def arm_clearance(self, states: dict[str, OtgState] | None = None):
        """(current, extrapolated) tool-point distance between the arms,
        the input to the collision velocity scaling."""
        poses = {n: self.tcp(n) for n in self.chains}
        vels = {n: np.zeros(3) for n in self.chains}
        if states:
            for n, s in states.items():
                poses[n] = s.pose
                vels[n] = s.lin_vel
        horizon = 1.0 / self.cfg.control_rate
        d_c = float(np.linalg.norm(poses["grasper"].trans - poses["cutter"].trans))
        p_g = poses["grasper"].trans + vels["grasper"] * horizon
        p_c = poses["cutter"].trans + vels["cutter"] * horizon
        d_n = float(np.linalg.norm(p_g - p_c))
        return d_c, d_n

    def run_otg(self, name: str, goal: Pose, on_tick=None,
                goal_update=None) -> tuple[OtgState, str]:
        """Cartesian online trajectory toward `goal` at the control rate.

        `on_tick(state) -> stop reason or None` is called every tick (force
        monitoring); `goal_update(t) -> Pose or None` refreshes the goal at
        the viewpose rate. Returns the final state and the stop reason
        ("reached", "stopped", or "timeout")."""
        dt = 1.0 / self.cfg.control_rate
        state = OtgState(pose=self.tcp(name), goal=goal)
        t_local = 0.0
        next_goal = 0.0
        reason = "timeout"
        while t_local < self.cfg.max_motion_time:
            if goal_update is not None and t_local >= next_goal:
                fresh = goal_update(t_local)
                if fresh is not None:
                    state.goal = fresh
                next_goal += 1.0 / self.cfg.viewpose_rate
            d_c, d_n = self.arm_clearance({name: state})
            beta = collision_scale(d_c, d_n, self.cfg.scale_config)
            state = otg_step(state, dt, velocity_scale=beta)
            t_local += dt
            self.clock += dt
            if on_tick is not None:
                stop = on_tick(state)
                if stop:
                    reason = stop
                    break
            if state.status == "reached":
                reason = "reached"
                break
        self.sync_joints(name, state.pose)
        return state, reason


# ---------------------------------------------------------------------------
# Perception helpers
# ---------------------------------------------------------------------------

def _mapping_poses(cfg: SystemConfig) -> list[Pose]:
    """Observation arc in front of the plant row."""
    target = cfg.mapping_target
    xs = np.linspace(-0.3, 0.3, cfg.mapping_views)
    zs = np.linspace(target[2] - 0.12, target[2] + 0.12, cfg.mapping_views)
    poses = []
    for x, z in zip(xs, zs):
        position = np.array([x, target[1] - cfg.mapping_standoff, z])
        poses.append(look_at_pose(position, [x * 0.4, target[1], target[2]]))
    return poses


def initial_mapping(rt: _TrialRuntime) -> None:
    """Scan the row from the observation arc and build the plant model."""
    for pose in _mapping_poses(rt.cfg):
        frame = rt.frame(pose)
        rt.ingest(frame)
        rt.clock += rt.cfg.mapping_dwell
    complete_shapes(rt.model)
    resolve_overlaps(rt.model)
    estimate_stems(rt.model, seed=rt.seed)
    attach_peduncles(rt.model)
    attach_stems(rt.model)


def _refit_detection(rt: _TrialRuntime, frame, fruit: FruitInstance):
    """(center, dims) detection for the followed fruit from a fresh frame:
    the fruit mask nearest the current estimate, fit with a center prior."""
    best_cloud, best_dist = None, 0.05
    for mask in frame.masks_of(SemanticClass.FRUIT):
        cloud = mask_to_cloud(frame, mask, stride=2, depth_band=0.06)
        if len(cloud) < 30:
            continue
        d = float(np.linalg.norm(cloud.points.mean(axis=0) - fruit.center))
        if d < best_dist:
            best_cloud, best_dist = cloud, d
    if best_cloud is None:
        return None
    try:
        result = fit_superellipsoid(best_cloud,
                                    prior=(fruit.center, fruit.dims),
                                    bias_weight=0.5)
    except FitError:
        return None
    return result.shape.center, result.shape.bounding_dims()


def _peduncle_mask_for(frame, roi, fruit: FruitInstance) -> InstanceMask | None:
    """Peduncle mask inside the pixel ROI belonging to the followed fruit.

    Masks whose detector association matches one of the fruit's track ids are
    preferred; among equally associated candidates the largest wins. Guards
    against grabbing a neighboring fruit's peduncle that crosses the ROI."""
    u0, v0, u1, v1 = roi
    best = None
    best_key = None
    for mask in frame.masks_of(SemanticClass.PEDUNCLE):
        px = mask.pixels
        keep = ((px[:, 1] >= u0) & (px[:, 1] <= u1)
                & (px[:, 0] >= v0) & (px[:, 0] <= v1))
        if not np.any(keep):
            continue
        sub = px[keep]
        matched = mask.associated_fruit_track in fruit.track_ids
        key = (matched, len(sub))
        if best_key is None or key > best_key:
            bu0, bu1 = int(sub[:, 1].min()), int(sub[:, 1].max())
            bv0, bv1 = int(sub[:, 0].min()), int(sub[:, 0].max())
            best = InstanceMask(mask.track_id, SemanticClass.PEDUNCLE, sub,
                                (bu0, bv0, bu1, bv1),
                                mask.associated_fruit_track)
            best_key = key
    return best


def _fresh_peduncle_cloud(buffer: PeduncleBuffer, now: float):
    """Merged, smoothed cloud over the fresh buffer entries (None if stale)."""
    fresh = [c for t, c in buffer.entries
             if now - t <= buffer.max_age and not c.is_empty]
    if not fresh:
        return None
    merged = PointCloud(np.vstack([c.points for c in fresh]))
    if len(merged) >= 8:
        merged = smooth_cloud(merged, k=8)
    return merged


# ---------------------------------------------------------------------------
# Ground-truth predicates
# ---------------------------------------------------------------------------

def _match_scene_fruit(rt: _TrialRuntime, fruit: FruitInstance) -> int | None:
    """Index of the ground-truth fruit the model instance refers to."""
    best, best_d = None, 0.05
    for i, gt in enumerate(rt.scene.fruits):
        if i in rt.removed:
            continue
        d = float(np.linalg.norm(gt.center - fruit.center))
        if d < best_d:
            best, best_d = i, d
    return best


def _penetration(shape: Superellipsoid, point: np.ndarray) -> float:
    """Approximate depth of a point below the superellipsoid surface (0 when
    outside), via the radial scaling of the implicit value."""
    local = shape.pose.inverse().apply(point.reshape(1, 3))[0]
    f = float(shape.implicit(point.reshape(1, 3))[0])
    if f >= 1.0:
        return 0.0
    r = float(np.linalg.norm(local))
    return r * (f ** (-shape.e1 / 2.0) - 1.0)


def _polyline_distance(polyline: np.ndarray, point: np.ndarray) -> float:
    best = np.inf
    for a, b in zip(polyline, polyline[1:]):
        ab = b - a
        t = np.clip((point - a) @ ab / max(ab @ ab, 1e-12), 0.0, 1.0)
        best = min(best, float(np.linalg.norm(point - (a + t * ab))))
    return best


# ---------------------------------------------------------------------------
# The trial
# ---------------------------------------------------------------------------

def run_trial(scene: PlantScene, config: SystemConfig, seed: int) -> TrialMetrics:
    """Execute the full harvesting workflow on one scene.

    Success is judged against scene ground truth: a grasp counts when the
    gripper stopped with its tool point inside the fruit's capture radius
    after making contact, a cut when the committed cutter position lies
    within blade reach of the true (displaced) peduncle, a place when the
    gripper released inside the container volume."""
    rt = _TrialRuntime(scene, config, seed)
    metrics = TrialMetrics(seed=seed)

    t0 = rt.clock
    initial_mapping(rt)
    metrics.mapping_duration = rt.clock - t0

    def reachable(fruit: FruitInstance):
        stem = rt.model.stem_for(fruit)
        try:
            direction = grasp_direction(fruit.center, stem,
                                        config.grasper_mount, config.grasp)
        except BehaviorError:
            return False, np.inf
        g_pose = grasp_pose(fruit.center, direction,
                            config.grasp.approach_standoff)
        c_pose = Pose(config.cutter_mount.quat,
                      fruit.top_center() + [0, 0, config.cut.fallback_offset])
        ok = (rt.solve_ik("grasper", g_pose) is not None
              and rt.solve_ik("cutter", c_pose) is not None)
        dist = float(np.linalg.norm(fruit.center - config.grasper_mount.trans))
        return ok, dist

    while True:
        fruit_id = select_fruit(rt.model, reachable)
        if fruit_id is None:
            break
        fruit = rt.model.fruit_by_id(fruit_id)
        record = FruitRecord(fruit_id=fruit_id)
        record.phases.append(HarvestPhase.SELECT_FRUIT)
        metrics.fruits.append(record)
        _harvest_one(rt, fruit, record)
        # Whatever happened, this instance is not retried.
        fruit.harvested = True
        rt.home()

    metrics.total_duration = rt.clock
    return metrics


def _phase(rt, record, phase):
    record.phases.append(phase)
    return rt.clock


def _end_phase(rt, record, phase, t_start):
    record.phase_durations[phase.value] = (
        record.phase_durations.get(phase.value, 0.0) + rt.clock - t_start)


def _harvest_one(rt: _TrialRuntime, fruit: FruitInstance,
                 record: FruitRecord) -> None:
    cfg = rt.cfg
    gt_index = _match_scene_fruit(rt, fruit)
    stem = rt.model.stem_for(fruit)

    # -- ApproachFruit: keyframe move to the pre-grasp pose ----------------
    t = _phase(rt, record, HarvestPhase.APPROACH_FRUIT)
    try:
        direction = grasp_direction(fruit.center, stem, cfg.grasper_mount,
                                    cfg.grasp)
    except BehaviorError:
        record.phases.append(HarvestPhase.SELECT_FRUIT)
        return
    pregrasp = grasp_pose(fruit.center, direction,
                          cfg.grasp.approach_standoff)
    if not rt.move_pmp({"grasper": pregrasp}):
        _end_phase(rt, record, HarvestPhase.APPROACH_FRUIT, t)
        record.phases.append(HarvestPhase.SELECT_FRUIT)
        return
    _end_phase(rt, record, HarvestPhase.APPROACH_FRUIT, t)

    # -- GraspFruit: servo to the (followed) fruit center ------------------
    t = _phase(rt, record, HarvestPhase.GRASP_FRUIT)
    gt_shape = None if gt_index is None else rt.scene.fruits[gt_index].shape
    vp = viewpose(fruit.center, fruit.dims, cfg.viewpose_config)
    baseline = simulate_wrench(ContactState(), cfg.ft_truth, rt.tcp("grasper"),
                               timestamp=rt.clock)
    next_percept = [0.0]
    contact_seen = [False]

    def grasp_tick(state: OtgState):
        if rt.clock - baseline.timestamp >= next_percept[0]:
            frame = rt.frame(vp)
            det = _refit_detection(rt, frame, fruit)
            if det is not None:
                update_fruit_estimate(fruit, [det])
            next_percept[0] += 1.0 / cfg.perception_rate
        pen = 0.0
        if gt_shape is not None:
            pen = _penetration(gt_shape, state.pose.trans)
        if pen > 0:
            contact_seen[0] = True
        normal = state.pose.trans - (gt_shape.center if gt_shape is not None
                                     else state.pose.trans + [0, 1, 0])
        nn = np.linalg.norm(normal)
        contact = ContactState(pen, normal / nn if nn > 0 else [0, 0, 1],
                               cfg.contact_stiffness)
        reading = simulate_wrench(contact, cfg.ft_truth, state.pose,
                                  timestamp=rt.clock)
        if force_stop(baseline, reading, cfg.grasp.force_stop_threshold):
            return "stopped"
        return None

    def grasp_goal(_t):
        return Pose(pregrasp.quat, fruit.center)

    state, reason = rt.run_otg("grasper", Pose(pregrasp.quat, fruit.center),
                               on_tick=grasp_tick, goal_update=grasp_goal)
    grasp_tcp = state.pose
    if gt_shape is not None:
        capture = float(np.max(gt_shape.semi_axes)) + cfg.capture_margin
        record.grasp = bool(
            contact_seen[0]
            and np.linalg.norm(grasp_tcp.trans - gt_shape.center) <= capture)
    _end_phase(rt, record, HarvestPhase.GRASP_FRUIT, t)
    if not record.grasp:
        record.phases.append(HarvestPhase.SELECT_FRUIT)
        return

    # -- PullFruit: back off and tilt to expose the peduncle ---------------
    t = _phase(rt, record, HarvestPhase.PULL_FRUIT)
    pull_goal = pull_and_turn(grasp_tcp, direction, cfg.grasp)
    anchor = grasp_tcp.trans.copy()

    def pull_tick(state: OtgState):
        if gt_index is not None:
            rt.offsets[gt_index] = state.pose.trans - anchor
        return None

    state, _ = rt.run_otg("grasper", pull_goal, on_tick=pull_tick)
    held_delta = state.pose.trans - anchor
    if gt_index is not None:
        rt.offsets[gt_index] = held_delta
    _end_phase(rt, record, HarvestPhase.PULL_FRUIT, t)

    # -- CutPeduncle: observe, stabilize the cut point, cut ----------------
    t = _phase(rt, record, HarvestPhase.CUT_PEDUNCLE)
    record.cut = _cut_peduncle(rt, fruit, record, grasp_tcp, held_delta,
                               gt_index)
    _end_phase(rt, record, HarvestPhase.CUT_PEDUNCLE, t)
    if not record.cut:
        # Release the fruit; it settles back on the plant.
        if gt_index is not None:
            rt.offsets.pop(gt_index, None)
        record.phases.append(HarvestPhase.SELECT_FRUIT)
        return

    # -- PlaceFruit: carry to the container and release --------------------
    t = _phase(rt, record, HarvestPhase.PLACE_FRUIT)
    drop = cfg.container_center + np.array(
        [0.0, 0.0, cfg.container_half[2] + 0.05])
    place_goal = Pose(grasp_tcp.quat, drop)
    tcp_to_fruit = (None if gt_index is None
                    else rt.scene.fruits[gt_index].center + held_delta
                    - state.pose.trans)

    def place_tick(st: OtgState):
        if gt_index is not None:
            rt.offsets[gt_index] = (st.pose.trans + tcp_to_fruit
                                    - rt.scene.fruits[gt_index].center)
        return None

    state, reason = rt.run_otg("grasper", place_goal, on_tick=place_tick)
    rel = np.abs(state.pose.trans - cfg.container_center)
    inside_xy = bool(np.all(rel[:2] <= cfg.container_half[:2]))
    record.place = reason == "reached" and inside_xy
    if gt_index is not None:
        rt.offsets.pop(gt_index, None)
        rt.removed.add(gt_index)
    _end_phase(rt, record, HarvestPhase.PLACE_FRUIT, t)
    record.phases.append(HarvestPhase.SELECT_FRUIT)


def _cut_peduncle(rt: _TrialRuntime, fruit: FruitInstance,
                  record: FruitRecord, grasp_tcp: Pose,
                  held_delta: np.ndarray, gt_index: int | None) -> bool:
    cfg = rt.cfg
    center_now = fruit.center + held_delta
    displaced = FruitInstance(id=fruit.id, cloud=PointCloud.empty(),
                              center=center_now, dims=fruit.dims)
    try:
        vp = viewpose(center_now, fruit.dims, cfg.viewpose_config, phase="cut")
    except WorldModelError:
        return False

    buffer = PeduncleBuffer()
    committed: Pose | None = None
    recent: list[np.ndarray] = []
    stable_n = max(int(round(cfg.cut_stable_time * cfg.perception_rate)), 2)
    dt = 1.0 / cfg.perception_rate
    t_local = 0.0
    last_pose = None
    while t_local < cfg.max_cut_observe_time:
        frame = rt.frame(vp)
        camera = rt.camera(vp)
        try:
            roi = peduncle_roi(center_now, fruit.dims, camera)
        except WorldModelError:
            break
        mask = _peduncle_mask_for(frame, roi, fruit)
        if mask is not None:
            cloud = mask_to_cloud(frame, mask, depth_band=0.02)
            if not cloud.is_empty:
                buffer.push(rt.clock, cloud)
        merged = _fresh_peduncle_cloud(buffer, rt.clock)
        pose = cut_pose(merged, displaced, grasp_tcp, cfg.cutter_mount,
                        cfg.cut)
        last_pose = pose
        recent.append(pose.trans)
        if len(recent) > stable_n:
            recent.pop(0)
        if len(recent) == stable_n:
            drift = max(np.linalg.norm(p - recent[-1]) for p in recent)
            if drift < cfg.cut_stable_dist and merged is not None:
                committed = pose
                break
        t_local += dt
        rt.clock += dt
    if committed is None:
        committed = last_pose
    if committed is None:
        return False

    # Move the cutter in, score against the true displaced peduncle, and
    # retract so the cutter never crowds later motions.
    _, reason = rt.run_otg("cutter", committed)
    hit = False
    if reason == "reached" and gt_index is not None:
        ped = rt.scene.peduncle_for_fruit(gt_index)
        if ped is not None:
            true_poly = _blend_polyline(ped.polyline, held_delta)
            hit = _polyline_distance(true_poly,
                                     committed.trans) <= cfg.blade_reach
    rt.run_otg("cutter", Pose(cfg.cutter_mount.quat,
                              cfg.cutter_mount.trans + [0.0, 0.1, 0.35]))
    return hit
