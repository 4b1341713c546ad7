"""Core geometric primitives: poses, point clouds, oriented boxes, pinhole cameras.

World frame convention (trolley frame): x along the platform length,
y pointing towards the plants, z vertically up. All lengths in meters,
all angles in radians.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.spatial.transform import Rotation


class SemanticClass(Enum):
    FRUIT = "fruit"
    PEDUNCLE = "peduncle"
    STEM = "stem"
    LEAF = "leaf"


class GeomError(ValueError):
    """Raised on invalid geometric inputs (empty clouds, degenerate axes)."""


def _as_vec3(v) -> np.ndarray:
    a = np.asarray(v, dtype=float).reshape(3)
    if not np.all(np.isfinite(a)):
        raise GeomError("non-finite 3-vector")
    return a


@dataclass(frozen=True)
class Pose:
    """Rigid 6-DoF transform: unit quaternion (x, y, z, w) + translation (m).

    Immutable; quaternion is re-normalized on construction and after every
    composition so long filter/control loops cannot accumulate drift.
    """

    quat: np.ndarray
    trans: np.ndarray

    def __init__(self, quat=(0.0, 0.0, 0.0, 1.0), trans=(0.0, 0.0, 0.0)):
        q = np.asarray(quat, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if n < 1e-12 or not np.isfinite(n):
            raise GeomError("degenerate quaternion")
        object.__setattr__(self, "quat", q / n)
        object.__setattr__(self, "trans", _as_vec3(trans))

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    @staticmethod
    def from_rotation(rot: Rotation, trans=(0.0, 0.0, 0.0)) -> "Pose":
        return Pose(rot.as_quat(), trans)

    @staticmethod
    def from_rotvec(rotvec, trans=(0.0, 0.0, 0.0)) -> "Pose":
        return Pose(Rotation.from_rotvec(np.asarray(rotvec, float)).as_quat(), trans)

    @staticmethod
    def from_matrix(mat: np.ndarray) -> "Pose":
        mat = np.asarray(mat, dtype=float)
        return Pose(Rotation.from_matrix(mat[:3, :3]).as_quat(), mat[:3, 3])

    @property
    def rotation(self) -> Rotation:
        return Rotation.from_quat(self.quat)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.as_matrix()
        m[:3, 3] = self.trans
        return m

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other: apply `other` first, then `self`."""
        r = self.rotation
        return Pose((r * other.rotation).as_quat(), r.apply(other.trans) + self.trans)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        rinv = self.rotation.inv()
        return Pose(rinv.as_quat(), -rinv.apply(self.trans))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or many (N, 3)."""
        pts = np.asarray(points, dtype=float)
        return self.rotation.apply(pts) + self.trans

    def quat_distance(self, other: "Pose") -> float:
        """Chordal quaternion distance, sign-invariant."""
        d1 = np.linalg.norm(self.quat - other.quat)
        d2 = np.linalg.norm(self.quat + other.quat)
        return min(d1, d2)

    def rotation_angle_to(self, other: "Pose") -> float:
        """Magnitude of the relative rotation (rad)."""
        rel = self.rotation.inv() * other.rotation
        return float(np.linalg.norm(rel.as_rotvec()))


@dataclass
class PointCloud:
    """Point set with optional per-point instance ids and semantic classes."""

    points: np.ndarray
    instance_ids: np.ndarray | None = None
    classes: np.ndarray | None = None  # integer codes into SemanticClass order

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise GeomError("non-finite point coordinates")
        for name in ("instance_ids", "classes"):
            lab = getattr(self, name)
            if lab is not None:
                lab = np.asarray(lab)
                if lab.shape[0] != len(self.points):
                    raise GeomError(f"{name} length mismatch")
                setattr(self, name, lab)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def is_empty(self) -> bool:
        return len(self.points) == 0

    def select(self, mask) -> "PointCloud":
        mask = np.asarray(mask)
        return PointCloud(
            self.points[mask],
            None if self.instance_ids is None else self.instance_ids[mask],
            None if self.classes is None else self.classes[mask],
        )

    @staticmethod
    def empty() -> "PointCloud":
        return PointCloud(np.zeros((0, 3)))

    @staticmethod
    def concatenate(clouds) -> "PointCloud":
        clouds = [c for c in clouds if len(c) > 0]
        if not clouds:
            return PointCloud.empty()
        pts = np.vstack([c.points for c in clouds])
        return PointCloud(pts)


@dataclass(frozen=True)
class OrientedBox:
    """Box given by center, primary axis, and half-extents along
    (axis, perp1, perp2)."""

    center: np.ndarray
    axis: np.ndarray
    half_extents: np.ndarray

    def __init__(self, center, axis, half_extents):
        object.__setattr__(self, "center", _as_vec3(center))
        a = _as_vec3(axis)
        n = np.linalg.norm(a)
        if n < 1e-12:
            raise GeomError("zero-length box axis")
        object.__setattr__(self, "axis", a / n)
        he = _as_vec3(half_extents)
        if np.any(he <= 0):
            raise GeomError("non-positive half-extents")
        object.__setattr__(self, "half_extents", he)

    def frame(self) -> np.ndarray:
        """Orthonormal rows (axis, perp1, perp2)."""
        u = self.axis
        ref = np.array([0.0, 0.0, 1.0]) if abs(u[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        v = np.cross(u, ref)
        v /= np.linalg.norm(v)
        w = np.cross(u, v)
        return np.vstack([u, v, w])


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera: intrinsics in pixels plus camera-in-world pose.

    Camera frame: z forward (optical axis), x right, y down in the image.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: Pose = field(default_factory=Pose.identity)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeomError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise GeomError("principal point outside image")


def transform_cloud(cloud: PointCloud, pose: Pose) -> PointCloud:
    """Apply a rigid transform to every point; labels are preserved."""
    return PointCloud(pose.apply(cloud.points), cloud.instance_ids, cloud.classes)


def project_point(camera: CameraModel, point_world) -> tuple[float, float] | None:
    """Pinhole projection of a world point; None when behind the image plane."""
    p_cam = camera.pose.inverse().apply(_as_vec3(point_world))
    if p_cam[2] <= 0:
        return None
    u = camera.fx * p_cam[0] / p_cam[2] + camera.cx
    v = camera.fy * p_cam[1] / p_cam[2] + camera.cy
    return (float(u), float(v))


def box_filter(cloud: PointCloud, box: OrientedBox) -> PointCloud:
    """Keep points whose box-frame coordinates lie within ±half-extents."""
    if cloud.is_empty:
        return cloud
    local = (cloud.points - box.center) @ box.frame().T
    inside = np.all(np.abs(local) <= box.half_extents + 1e-12, axis=1)
    return cloud.select(inside)


def centroid(cloud: PointCloud) -> np.ndarray:
    """Arithmetic mean of the points; raises on an empty cloud."""
    if cloud.is_empty:
        raise GeomError("empty-cloud")
    return cloud.points.mean(axis=0)


def look_at_pose(position, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera pose at `position` whose optical axis (+z) points at `target`,
    with the image up-direction (−y) as close to `up` as possible."""
    position = _as_vec3(position)
    fwd = _as_vec3(target) - position
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise GeomError("degenerate-direction")
    fwd = fwd / n
    upv = _as_vec3(up)
    right = np.cross(fwd, upv)
    rn = np.linalg.norm(right)
    if rn < 1e-9:
        # Optical axis parallel to up: fall back to world x as right.
        right = np.array([1.0, 0.0, 0.0])
        right -= fwd * (right @ fwd)
        rn = np.linalg.norm(right)
    right /= rn
    down = np.cross(fwd, right)
    rot = np.column_stack([right, down, fwd])
    return Pose(Rotation.from_matrix(rot).as_quat(), position)
