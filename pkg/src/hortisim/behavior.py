"""Adaptive harvesting behavior: fruit selection, grasp/cut pose computation,
force-triggered stops, pull-and-turn, and the trial metrics record."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.spatial.transform import Rotation

from .geom import OrientedBox, PointCloud, Pose, box_filter, centroid
from .scene import WrenchReading
from .worldmodel import FruitInstance, PlantModel, StemEstimate


class BehaviorError(ValueError):
    def __init__(self, code: str, message: str = ""):
        super().__init__(message or code)
        self.code = code


class HarvestPhase(Enum):
    INITIAL_MAPPING = "InitialMapping"
    SELECT_FRUIT = "SelectFruit"
    APPROACH_FRUIT = "ApproachFruit"
    GRASP_FRUIT = "GraspFruit"
    PULL_FRUIT = "PullFruit"
    CUT_PEDUNCLE = "CutPeduncle"
    PLACE_FRUIT = "PlaceFruit"
    DONE = "Done"


# Workflow edges; failures additionally exit back to SelectFruit.
PHASE_GRAPH = {
    HarvestPhase.INITIAL_MAPPING: {HarvestPhase.SELECT_FRUIT},
    HarvestPhase.SELECT_FRUIT: {HarvestPhase.APPROACH_FRUIT, HarvestPhase.DONE},
    HarvestPhase.APPROACH_FRUIT: {HarvestPhase.GRASP_FRUIT, HarvestPhase.SELECT_FRUIT},
    HarvestPhase.GRASP_FRUIT: {HarvestPhase.PULL_FRUIT, HarvestPhase.SELECT_FRUIT},
    HarvestPhase.PULL_FRUIT: {HarvestPhase.CUT_PEDUNCLE, HarvestPhase.SELECT_FRUIT},
    HarvestPhase.CUT_PEDUNCLE: {HarvestPhase.PLACE_FRUIT, HarvestPhase.SELECT_FRUIT},
    HarvestPhase.PLACE_FRUIT: {HarvestPhase.SELECT_FRUIT, HarvestPhase.DONE},
}


@dataclass(frozen=True)
class GraspConfig:
    max_deviation: float = np.deg2rad(20.0)  # alpha_max from v-bar
    approach_standoff: float = 0.10
    force_stop_threshold: float = 3.0        # N
    pull_back_distance: float = 0.03
    pull_tilt: float = np.deg2rad(15.0)

    def __post_init__(self):
        if not 0.0 < self.max_deviation <= np.pi / 2:
            raise BehaviorError("invalid-config", "max deviation outside (0, pi/2]")


@dataclass(frozen=True)
class CutConfig:
    # Box-filter half-extents around the peduncle midpoint:
    # (perp1, perp2, along the high-low axis).
    box_half_extents: tuple[float, float, float] = (0.01, 0.01, 0.02)
    min_grasp_separation: float = 0.08
    fallback_offset: float = 0.03            # above fruit top when no peduncle
    force_stop_threshold: float = 3.0

    def __post_init__(self):
        if min(self.box_half_extents) <= 0:
            raise BehaviorError("invalid-config", "non-positive box half-extents")


@dataclass
class FruitRecord:
    fruit_id: int
    grasp: bool = False
    cut: bool = False
    place: bool = False
    phase_durations: dict[str, float] = field(default_factory=dict)
    phases: list[HarvestPhase] = field(default_factory=list)

    @property
    def overall(self) -> bool:
        return self.grasp and self.cut and self.place


@dataclass
class TrialMetrics:
    seed: int
    fruits: list[FruitRecord] = field(default_factory=list)
    mapping_duration: float = 0.0
    total_duration: float = 0.0

    def counts(self) -> dict[str, int]:
        return {
            "n": len(self.fruits),
            "grasp": sum(f.grasp for f in self.fruits),
            "cut": sum(f.cut for f in self.fruits),
            "place": sum(f.place for f in self.fruits),
            "overall": sum(f.overall for f in self.fruits),
        }


def select_fruit(model: PlantModel, reachable) -> int | None:
    """Next fruit to harvest: among unharvested, shape-completed fruits that
    the reachability oracle accepts, the one nearest the grasper mount (the
    oracle closes over the mount). None ends the trial."""
    candidates = [
        f for f in model.fruits
        if not f.harvested and not f.fit_failed and f.center is not None
    ]
    best_id, best_dist = None, np.inf
    for fruit in candidates:
        ok, dist = reachable(fruit)
        if ok and dist < best_dist:
            best_id, best_dist = fruit.id, dist
    return best_id


def grasp_direction(
    fruit_center,
    stem: StemEstimate | None,
    mount: Pose,
    config: GraspConfig = GraspConfig(),
) -> np.ndarray:
    """Horizontal unit grasp direction.

    v-bar points from the gripper mount to the fruit in the x-y plane and is
    the fallback without a stem. With a stem, the direction is turned as far
    from the stem as the deviation limit allows: the exact anti-stem
    direction when that lies within alpha_max of v-bar, otherwise v-bar
    rotated by alpha_max toward the side away from the stem."""
    p_f = np.asarray(fruit_center, float).reshape(3)
    v = p_f[:2] - mount.trans[:2]
    n = np.linalg.norm(v)
    if n < 1e-9:
        raise BehaviorError("degenerate-approach", "fruit above the mount")
    v = v / n
    if stem is None:
        return v
    # Direction from the fruit toward the stem, in the plane.
    stem_xy = stem.line.point[:2] + stem.line.direction[:2] * (
        (p_f[2] - stem.line.point[2]) / stem.line.direction[2]
        if abs(stem.line.direction[2]) > 1e-6 else 0.0
    )
    to_stem = stem_xy - p_f[:2]
    ts_norm = np.linalg.norm(to_stem)
    if ts_norm < 1e-9:
        return v
    anti = -to_stem / ts_norm
    cos_dev = float(np.clip(anti @ v, -1.0, 1.0))
    if np.arccos(cos_dev) <= config.max_deviation:
        return anti
    # Rotate v-bar by alpha_max toward the anti-stem side.
    sign = np.sign(v[0] * anti[1] - v[1] * anti[0])
    if sign == 0:
        sign = 1.0
    ca, sa = np.cos(config.max_deviation), np.sin(config.max_deviation)
    rot = np.array([[ca, -sign * sa], [sign * sa, ca]])
    return rot @ v


def grasp_pose(fruit_center, direction, standoff: float = 0.10) -> Pose:
    """Gripper pose approaching horizontally along `direction` (unit x-y
    vector): tool x-axis = approach, tool z stays world-vertical, position
    set back by the standoff at fruit-center height."""
    p_f = np.asarray(fruit_center, float).reshape(3)
    d = np.asarray(direction, float).reshape(2)
    d = d / np.linalg.norm(d)
    approach = np.array([d[0], d[1], 0.0])
    yaw = np.arctan2(d[1], d[0])
    return Pose(Rotation.from_euler("z", yaw).as_quat(), p_f - standoff * approach)


def cut_pose(
    peduncle_cloud: PointCloud | None,
    fruit: FruitInstance,
    grasp: Pose,
    cutter_mount: Pose,
    config: CutConfig = CutConfig(),
) -> Pose:
    """Cutter pose at the peduncle.

    The cut position is the centroid of the peduncle cloud box-filtered
    around the midpoint of its vertical high-low axis; without peduncle
    points it falls back to a fixed offset above the fruit top. The
    orientation is fixed relative to the cutter's mounting pose, and the cut
    is lifted until the minimum grasp-cut separation holds."""
    position = None
    if peduncle_cloud is not None and not peduncle_cloud.is_empty:
        pts = peduncle_cloud.points
        # A handful of stray points (a neighboring plant part clipped by
        # the observation window) would otherwise define the high-low axis;
        # work on the vertical-percentile core instead.
        if len(pts) >= 20:
            z_lo, z_hi = np.percentile(pts[:, 2], [10.0, 90.0])
            core = pts[(pts[:, 2] >= z_lo) & (pts[:, 2] <= z_hi)]
            if len(core) >= 10:
                pts = core
        hi = pts[np.argmax(pts[:, 2])]
        lo = pts[np.argmin(pts[:, 2])]
        axis = hi - lo
        if np.linalg.norm(axis) > 1e-9:
            mid = 0.5 * (hi + lo)
            he = config.box_half_extents
            box = OrientedBox(mid, axis, (he[2], he[0], he[1]))
            filtered = box_filter(peduncle_cloud, box)
            if not filtered.is_empty:
                position = centroid(filtered)
    if position is None:
        position = fruit.top_center() + np.array([0.0, 0.0, config.fallback_offset])

    # Cuts never drop below the fruit equator.
    position = position.copy()
    position[2] = max(position[2], fruit.center[2])

    sep = np.linalg.norm(position - grasp.trans)
    if sep < config.min_grasp_separation:
        moved = False
        if peduncle_cloud is not None and not peduncle_cloud.is_empty:
            # Slide along the observed peduncle: the nearest point that
            # keeps the gripper clearance stays on the plant, which a
            # straight vertical lift would not.
            pts = peduncle_cloud.points
            far = np.linalg.norm(pts - grasp.trans, axis=1) >= (
                config.min_grasp_separation)
            if np.any(far):
                cand = pts[far]
                position = cand[int(np.argmin(
                    np.linalg.norm(cand - position, axis=1)))].copy()
                position[2] = max(position[2], fruit.center[2])
                moved = True
        if not moved:
            d_xy = np.linalg.norm(position[:2] - grasp.trans[:2])
            if d_xy < config.min_grasp_separation:
                dz = np.sqrt(config.min_grasp_separation**2 - d_xy**2)
                position[2] = grasp.trans[2] + dz
    return Pose(cutter_mount.quat, position)


def force_stop(baseline: WrenchReading, current: WrenchReading,
               threshold: float = 3.0) -> bool:
    """True when the force change relative to the motion-start baseline
    exceeds the threshold (force-norm criterion; torques are ignored)."""
    return float(np.linalg.norm(current.force - baseline.force)) > threshold


def pull_and_turn(grasp: Pose, approach_direction,
                  config: GraspConfig = GraspConfig()) -> Pose:
    """Goal pose for the post-grasp pull: back off along the approach and
    pitch the gripper so the fruit top turns toward the robot, improving
    peduncle visibility for the camera."""
    d = np.asarray(approach_direction, float).reshape(2)
    d = d / np.linalg.norm(d)
    approach = np.array([d[0], d[1], 0.0])
    position = grasp.trans - config.pull_back_distance * approach
    tilt_axis = np.cross([0.0, 0.0, 1.0], approach)
    rot = Rotation.from_rotvec(config.pull_tilt * tilt_axis) * grasp.rotation
    return Pose(rot.as_quat(), position)
