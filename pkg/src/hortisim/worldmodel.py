"""Pepper-plant world model: multi-view segment fusion, shape completion,
duplicate resolution, peduncle/stem association, and the online fruit
following machinery (viewposes, candidate gating, peduncle buffer)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geom import CameraModel, PointCloud, Pose, look_at_pose, project_point
from .fit import (
    FitError,
    FollowFilterConfig,
    Line3D,
    Superellipsoid,
    filter_center,
    fit_superellipsoid,
    ransac_line3d,
    smooth_cloud,
)

VOXEL_SIZE = 0.01            # instance-fusion voxel edge (m)
VOXEL_OVERLAP_MIN = 0.10     # fraction of segment voxels shared to merge
OVERLAP_IOU_THRESHOLD = 0.25
PEDUNCLE_ATTACH_THRESHOLD = 0.01
STEM_ATTACH_XY_THRESHOLD = 0.05
STEM_MAX_TILT = np.deg2rad(30.0)
STEM_MIN_LENGTH = 0.10
STEM_MERGE_ANGLE = np.deg2rad(5.0)
STEM_MERGE_DIST = 0.02
MAD_FACTOR = 3.0
GREEDY_ACCEPT_DIST = 0.01    # following: accept detection immediately
CANDIDATE_MAX_DIST = 0.03    # following: outermost candidate radius
BUFFER_CAPACITY = 4
BUFFER_MAX_AGE = 0.5


class WorldModelError(ValueError):
    def __init__(self, code: str, message: str = ""):
        super().__init__(message or code)
        self.code = code


@dataclass
class FruitInstance:
    id: int
    cloud: PointCloud
    track_ids: set[int] = field(default_factory=set)
    shape: Superellipsoid | None = None
    center: np.ndarray | None = None
    dims: np.ndarray | None = None
    observed_ratio: float = 0.0
    stem_id: int | None = None
    peduncle_id: int | None = None
    fit_failed: bool = False
    harvested: bool = False

    def top_center(self) -> np.ndarray:
        if self.center is None or self.dims is None:
            raise WorldModelError("not-fitted", f"fruit {self.id} has no shape")
        return self.center + np.array([0.0, 0.0, self.dims[2] / 2.0])


@dataclass
class PeduncleEstimate:
    id: int
    cloud: PointCloud
    track_ids: set[int] = field(default_factory=set)
    fruit_point: np.ndarray | None = None
    stem_point: np.ndarray | None = None
    fruit_id: int | None = None
    detected_fruit_tracks: set[int] = field(default_factory=set)


@dataclass
class StemEstimate:
    id: int
    line: Line3D
    support: int


@dataclass
class PlantModel:
    fruits: list[FruitInstance] = field(default_factory=list)
    peduncles: list[PeduncleEstimate] = field(default_factory=list)
    stems: list[StemEstimate] = field(default_factory=list)
    stem_clouds: dict[int, PointCloud] = field(default_factory=dict)
    _next_id: int = 0

    def next_id(self) -> int:
        self._next_id += 1
        return self._next_id

    def fruit_by_id(self, fid: int) -> FruitInstance:
        for f in self.fruits:
            if f.id == fid:
                return f
        raise WorldModelError("unknown-id", f"fruit {fid}")

    def peduncle_for(self, fruit_id: int) -> PeduncleEstimate | None:
        for p in self.peduncles:
            if p.fruit_id == fruit_id:
                return p
        return None

    def stem_for(self, fruit: FruitInstance) -> StemEstimate | None:
        if fruit.stem_id is None:
            return None
        for s in self.stems:
            if s.id == fruit.stem_id:
                return s
        return None


def _voxels(points: np.ndarray, size: float = VOXEL_SIZE) -> set[tuple]:
    return set(map(tuple, np.floor(points / size).astype(np.int64)))


def fuse_segment(model: PlantModel, segment: PointCloud, track_id: int) -> FruitInstance:
    """Merge a fruit-class cloud segment into the model.

    Match by tracked instance id first, then by voxel-occupancy overlap
    (>= 10 % of the segment's voxels), else start a new instance.
    """
    if segment.is_empty:
        raise WorldModelError("empty-segment")
    for fruit in model.fruits:
        if track_id in fruit.track_ids:
            fruit.cloud = PointCloud(np.vstack([fruit.cloud.points, segment.points]))
            return fruit
    seg_vox = _voxels(segment.points)
    best, best_overlap = None, 0.0
    for fruit in model.fruits:
        overlap = len(seg_vox & _voxels(fruit.cloud.points)) / max(len(seg_vox), 1)
        if overlap > best_overlap:
            best, best_overlap = fruit, overlap
    if best is not None and best_overlap >= VOXEL_OVERLAP_MIN:
        best.cloud = PointCloud(np.vstack([best.cloud.points, segment.points]))
        best.track_ids.add(track_id)
        return best
    fruit = FruitInstance(id=model.next_id(), cloud=segment, track_ids={track_id})
    model.fruits.append(fruit)
    return fruit


def complete_shapes(model: PlantModel, min_points: int = 30,
                    prior=None, bias_weight: float = 0.0) -> PlantModel:
    """Fit a superellipsoid per fruit; under-observed fruits are flagged and
    excluded from harvesting instead of raising."""
    for fruit in model.fruits:
        try:
            result = fit_superellipsoid(
                fruit.cloud, prior=prior, bias_weight=bias_weight,
                min_points=min_points,
            )
        except FitError as err:
            if err.code == "insufficient-points":
                fruit.fit_failed = True
                continue
            raise
        fruit.shape = result.shape
        fruit.center = result.shape.center.copy()
        fruit.dims = result.shape.bounding_dims()
        fruit.fit_failed = False
    return model


def observed_ratio(fruit: FruitInstance, sample_count: int = 256,
                   support_radius: float = 0.01) -> float:
    """Fraction of quasi-uniform surface samples of the fitted shape that
    have a fused-cloud point within `support_radius`."""
    if fruit.shape is None:
        raise WorldModelError("not-fitted", f"fruit {fruit.id}")
    if fruit.cloud.is_empty:
        return 0.0
    n_eta = max(int(np.sqrt(sample_count / 2)), 2)
    n_omega = max(sample_count // n_eta, 4)
    samples = fruit.shape.surface_points(n_eta, n_omega)[: sample_count]
    tree = cKDTree(fruit.cloud.points)
    dist, _ = tree.query(samples, k=1)
    return float(np.mean(dist <= support_radius))


def _ellipsoid_iou(center_a, dims_a, center_b, dims_b, grid: int = 24) -> float:
    """IoU of two axis-aligned bounding ellipsoids via deterministic grid
    sampling over the joint bounding box."""
    ra, rb = np.asarray(dims_a) / 2.0, np.asarray(dims_b) / 2.0
    lo = np.minimum(center_a - ra, center_b - rb)
    hi = np.maximum(center_a + ra, center_b + rb)
    axes = [np.linspace(lo[i], hi[i], grid) for i in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])
    in_a = np.sum(((pts - center_a) / ra) ** 2, axis=1) <= 1.0
    in_b = np.sum(((pts - center_b) / rb) ** 2, axis=1) <= 1.0
    union = np.count_nonzero(in_a | in_b)
    if union == 0:
        return 0.0
    return float(np.count_nonzero(in_a & in_b)) / union


def resolve_overlaps(model: PlantModel,
                     threshold: float = OVERLAP_IOU_THRESHOLD) -> PlantModel:
    """Remove duplicated instances from 3D over-segmentation: for each pair
    whose bounding-ellipsoid IoU exceeds the threshold, the fruit with the
    smaller observed-surface ratio is discarded (ties keep the lower id).
    Pairs are processed greedily in descending-IoU order."""
    fitted = [f for f in model.fruits if f.shape is not None]
    for f in fitted:
        f.observed_ratio = observed_ratio(f)
    pairs = []
    for i in range(len(fitted)):
        for j in range(i + 1, len(fitted)):
            iou = _ellipsoid_iou(fitted[i].center, fitted[i].dims,
                                 fitted[j].center, fitted[j].dims)
            if iou > threshold:
                pairs.append((iou, fitted[i], fitted[j]))
    pairs.sort(key=lambda p: -p[0])
    removed: set[int] = set()
    for _, fa, fb in pairs:
        if fa.id in removed or fb.id in removed:
            continue
        if fa.observed_ratio > fb.observed_ratio:
            removed.add(fb.id)
        elif fb.observed_ratio > fa.observed_ratio:
            removed.add(fa.id)
        else:
            removed.add(max(fa.id, fb.id))
    model.fruits = [f for f in model.fruits if f.id not in removed]
    return model


def _mad_prune(points: np.ndarray, factor: float = MAD_FACTOR) -> np.ndarray:
    """Drop points whose distance to the median exceeds factor * MAD."""
    if len(points) < 4:
        return points
    med = np.median(points, axis=0)
    dist = np.linalg.norm(points - med, axis=1)
    mad = np.median(np.abs(dist - np.median(dist)))
    if mad < 1e-9:
        return points
    keep = dist <= np.median(dist) + factor * mad
    return points[keep]


def peduncle_endpoints(cloud: PointCloud) -> tuple[np.ndarray, np.ndarray]:
    """(fruit point, stem point) = lowest and highest point of the cloud in z
    after MAD outlier pruning."""
    if cloud.is_empty:
        raise WorldModelError("empty-segment")
    pts = _mad_prune(cloud.points)
    return pts[np.argmin(pts[:, 2])].copy(), pts[np.argmax(pts[:, 2])].copy()


def add_peduncle_segment(model: PlantModel, segment: PointCloud, track_id: int,
                         fruit_track: int | None = None,
                         merge_dist: float = 0.03) -> PeduncleEstimate:
    """Accumulate a peduncle-class segment, merging with an existing estimate
    by track id or centroid proximity."""
    if segment.is_empty:
        raise WorldModelError("empty-segment")
    seg_centroid = segment.points.mean(axis=0)
    target = None
    for ped in model.peduncles:
        if track_id in ped.track_ids:
            target = ped
            break
    if target is None:
        for ped in model.peduncles:
            if np.linalg.norm(ped.cloud.points.mean(axis=0) - seg_centroid) <= merge_dist:
                target = ped
                break
    if target is None:
        target = PeduncleEstimate(id=model.next_id(), cloud=segment,
                                  track_ids={track_id})
        model.peduncles.append(target)
    else:
        target.cloud = PointCloud(np.vstack([target.cloud.points, segment.points]))
        target.track_ids.add(track_id)
    if fruit_track is not None:
        target.detected_fruit_tracks.add(fruit_track)
    fp, sp = peduncle_endpoints(target.cloud)
    target.fruit_point, target.stem_point = fp, sp
    return target


def attach_peduncles(model: PlantModel,
                     threshold: float = PEDUNCLE_ATTACH_THRESHOLD,
                     endpoint: str = "bottom") -> PlantModel:
    """Associate each peduncle to the fruit whose top center lies within
    `threshold` of the peduncle's designated endpoint (bottom by default,
    "top" selectable). Multiple peduncles landing on one fruit are merged
    and their endpoints recomputed."""
    fitted = [f for f in model.fruits if f.shape is not None]
    for ped in model.peduncles:
        ped.fruit_point, ped.stem_point = peduncle_endpoints(ped.cloud)
        anchor = ped.fruit_point if endpoint == "bottom" else ped.stem_point
        best, best_dist = None, threshold
        for fruit in fitted:
            d = np.linalg.norm(anchor - fruit.top_center())
            if d <= best_dist:
                best, best_dist = fruit, d
        ped.fruit_id = best.id if best is not None else None

    # Merge multiple peduncle estimates assigned to the same fruit.
    by_fruit: dict[int, list[PeduncleEstimate]] = {}
    for ped in model.peduncles:
        if ped.fruit_id is not None:
            by_fruit.setdefault(ped.fruit_id, []).append(ped)
    merged: list[PeduncleEstimate] = []
    consumed: set[int] = set()
    for fid, peds in by_fruit.items():
        if len(peds) > 1:
            union = PointCloud(np.vstack([p.cloud.points for p in peds]))
            keeper = min(peds, key=lambda p: p.id)
            keeper.cloud = union
            keeper.track_ids = set().union(*(p.track_ids for p in peds))
            keeper.fruit_point, keeper.stem_point = peduncle_endpoints(union)
            consumed.update(p.id for p in peds if p.id != keeper.id)
            merged.append(keeper)
    model.peduncles = [p for p in model.peduncles if p.id not in consumed]
    for fruit in model.fruits:
        ped = model.peduncle_for(fruit.id)
        fruit.peduncle_id = ped.id if ped is not None else None
    return model


def add_stem_cloud(model: PlantModel, segment: PointCloud, track_id: int) -> None:
    """Accumulate stem-class points per tracked instance for line estimation."""
    if segment.is_empty:
        return
    if track_id in model.stem_clouds:
        prev = model.stem_clouds[track_id]
        model.stem_clouds[track_id] = PointCloud(
            np.vstack([prev.points, segment.points])
        )
    else:
        model.stem_clouds[track_id] = segment


def estimate_stems(model: PlantModel, seed: int = 0,
                   max_tilt: float = STEM_MAX_TILT,
                   min_length: float = STEM_MIN_LENGTH) -> PlantModel:
    """RANSAC a 3D line per accumulated stem cloud; near-horizontal or
    too-short candidates are rejected."""
    vertical = np.array([0.0, 0.0, 1.0])
    model.stems = []
    for k, (tid, cloud) in enumerate(sorted(model.stem_clouds.items())):
        if len(cloud) < 2:
            continue
        try:
            result = ransac_line3d(cloud, seed=seed + k)
        except FitError:
            continue
        line = result.line
        tilt = np.arccos(np.clip(abs(line.direction @ vertical), -1, 1))
        if tilt > max_tilt or line.length < min_length:
            continue
        model.stems.append(StemEstimate(id=model.next_id(), line=line,
                                        support=len(result.inlier_indices)))
    _merge_aligned_stems(model)
    return model


def _line_line_distance(a: Line3D, b: Line3D) -> float:
    cross = np.cross(a.direction, b.direction)
    n = np.linalg.norm(cross)
    rel = b.point - a.point
    if n < 1e-9:
        return float(np.linalg.norm(rel - (rel @ a.direction) * a.direction))
    return float(abs(rel @ cross) / n)


def _merge_aligned_stems(model: PlantModel,
                         angle: float = STEM_MERGE_ANGLE,
                         dist: float = STEM_MERGE_DIST) -> None:
    """Greedy pairwise merge of aligned stem lines; parameters are refit as
    the principal axis of the combined inlier extents."""
    changed = True
    while changed:
        changed = False
        stems = model.stems
        for i in range(len(stems)):
            for j in range(i + 1, len(stems)):
                a, b = stems[i], stems[j]
                cosang = abs(np.clip(a.line.direction @ b.line.direction, -1, 1))
                if np.arccos(cosang) > angle:
                    continue
                if _line_line_distance(a.line, b.line) > dist:
                    continue
                pts = np.vstack([*a.line.endpoints(), *b.line.endpoints()])
                mean = pts.mean(axis=0)
                _, _, vt = np.linalg.svd(pts - mean, full_matrices=False)
                direction = vt[0] if vt[0][2] >= 0 else -vt[0]
                t = (pts - mean) @ direction
                merged = StemEstimate(
                    id=min(a.id, b.id),
                    line=Line3D(mean, direction, float(t.min()), float(t.max())),
                    support=a.support + b.support,
                )
                model.stems = [s for k, s in enumerate(stems) if k not in (i, j)]
                model.stems.append(merged)
                changed = True
                break
            if changed:
                break


def attach_stems(model: PlantModel,
                 xy_threshold: float = STEM_ATTACH_XY_THRESHOLD) -> PlantModel:
    """Attach each fitted fruit to the nearest stem line within the
    horizontal distance threshold."""
    for fruit in model.fruits:
        if fruit.center is None:
            continue
        best, best_d = None, xy_threshold
        for stem in model.stems:
            d = stem.line.horizontal_distance(fruit.center)
            if d <= best_d:
                best, best_d = stem, d
        fruit.stem_id = best.id if best is not None else None
    return model


def canonical_summary(model: PlantModel) -> list[dict]:
    """Order-independent description of the fruit instances, for comparing
    models built from permuted detection streams."""
    rows = []
    for f in model.fruits:
        if f.center is None:
            continue
        rows.append({
            "center": np.round(f.center, 4).tolist(),
            "dims": np.round(f.dims, 3).tolist(),
            "has_peduncle": f.peduncle_id is not None,
            "has_stem": f.stem_id is not None,
        })
    rows.sort(key=lambda r: tuple(r["center"]))
    return rows


# ---------------------------------------------------------------------------
# Online fruit following
# ---------------------------------------------------------------------------

def update_fruit_estimate(
    fruit: FruitInstance,
    detections: list[tuple[np.ndarray, np.ndarray]],
    config: FollowFilterConfig = FollowFilterConfig(),
) -> bool:
    """Gate fresh (center, dims) detections against the current estimate and
    blend an accepted one through the complementary filter.

    Within 1 cm: greedy accept. In (1 cm, 3 cm]: nearest candidate. Farther:
    estimate unchanged. Returns True when the estimate moved."""
    if fruit.center is None:
        raise WorldModelError("not-fitted", f"fruit {fruit.id}")
    accepted = None
    candidates = []
    for center, dims in detections:
        center = np.asarray(center, float).reshape(3)
        d = np.linalg.norm(center - fruit.center)
        if d <= GREEDY_ACCEPT_DIST:
            accepted = (center, dims)
            break
        if d <= CANDIDATE_MAX_DIST:
            candidates.append((d, center, dims))
    if accepted is None and candidates:
        candidates.sort(key=lambda c: c[0])
        accepted = (candidates[0][1], candidates[0][2])
    if accepted is None:
        return False
    center, dims = accepted
    fruit.center = filter_center(fruit.center, center, config.alpha)
    if dims is not None and fruit.dims is not None:
        fruit.dims = config.alpha * np.asarray(dims, float) + (1 - config.alpha) * fruit.dims
    return True


def peduncle_roi(center, dims, camera: CameraModel,
                 top_margin: float = 0.05) -> tuple[float, float, float, float]:
    """Project the above-fruit 3D search box into the image and take the
    min/max of the corner pixels as the peduncle ROI, clamped to the image.

    Box: x in p^x +/- l^x, y in p^y +/- l^y, z in [p^z, p^z + l^z + margin].
    """
    p = np.asarray(center, float).reshape(3)
    l = np.asarray(dims, float).reshape(3)
    xs = [p[0] - l[0], p[0] + l[0]]
    ys = [p[1] - l[1], p[1] + l[1]]
    zs = [p[2], p[2] + l[2] + top_margin]
    pixels = []
    for x in xs:
        for y in ys:
            for z in zs:
                uv = project_point(camera, [x, y, z])
                if uv is not None:
                    pixels.append(uv)
    if not pixels:
        raise WorldModelError("roi-unprojectable", "all corners behind camera")
    pixels = np.array(pixels)
    u0 = float(np.clip(pixels[:, 0].min(), 0, camera.width - 1))
    u1 = float(np.clip(pixels[:, 0].max(), 0, camera.width - 1))
    v0 = float(np.clip(pixels[:, 1].min(), 0, camera.height - 1))
    v1 = float(np.clip(pixels[:, 1].max(), 0, camera.height - 1))
    return (u0, v0, u1, v1)


@dataclass
class PeduncleBuffer:
    """Rolling buffer of timestamped peduncle clouds for cut-point smoothing."""

    capacity: int = BUFFER_CAPACITY
    max_age: float = BUFFER_MAX_AGE
    entries: list[tuple[float, PointCloud]] = field(default_factory=list)

    def push(self, timestamp: float, cloud: PointCloud) -> None:
        self.entries.append((timestamp, cloud))
        if len(self.entries) > self.capacity:
            self.entries.pop(0)


def merge_peduncle_buffer(buffer: PeduncleBuffer, now: float,
                          smooth_k: int = 8, smooth_sigma: float = 0.005):
    """Concatenate the buffer's fresh clouds, smooth, and re-extract the
    (fruit point, stem point) pair. None when every entry is stale."""
    fresh = [c for t, c in buffer.entries
             if now - t <= buffer.max_age and not c.is_empty]
    if not fresh:
        return None
    merged = PointCloud(np.vstack([c.points for c in fresh]))
    if len(merged) >= smooth_k:
        merged = smooth_cloud(merged, k=smooth_k, sigma=smooth_sigma)
    return peduncle_endpoints(merged)


@dataclass(frozen=True)
class ViewposeConfig:
    """Observer placement constants relative to the fruit center."""

    head_base: np.ndarray = field(default_factory=lambda: np.zeros(3))
    standoff_y: float = 0.35
    z_clearance: float = 0.15
    x_pull_in: float = 0.8
    cut_advance: float = 0.05
    cut_raise: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "head_base",
                           np.asarray(self.head_base, float).reshape(3))
        if self.standoff_y <= 0:
            raise WorldModelError("invalid-config", "standoff must be positive")


def viewpose_position(center, dims, config: ViewposeConfig) -> np.ndarray:
    p_f = np.asarray(center, float).reshape(3)
    l_z = float(np.asarray(dims, float).reshape(3)[2])
    p_h = config.head_base
    return np.array([
        config.x_pull_in * (p_f[0] - p_h[0]) + p_h[0],
        p_f[1] - config.standoff_y,
        p_f[2] + l_z + config.z_clearance,
    ])


def viewpose(fruit_center, fruit_dims, config: ViewposeConfig,
             phase: str = "grasp") -> Pose:
    """Observer camera pose fixating the fruit: position from the standoff
    rules, orientation looking along the normalized fruit direction with
    camera-up nearest world-up. The cut phase advances toward the fruit and
    lifts for peduncle fixation."""
    p_f = np.asarray(fruit_center, float).reshape(3)
    p_vp = viewpose_position(p_f, fruit_dims, config)
    delta = p_f - p_vp
    norm = np.linalg.norm(delta)
    if norm < 1e-9:
        raise WorldModelError("degenerate-direction")
    if phase == "cut":
        p_vp = p_vp + config.cut_advance * (delta / norm)
        p_vp = p_vp + np.array([0.0, 0.0, config.cut_raise])
        if np.linalg.norm(p_f - p_vp) < 1e-9:
            raise WorldModelError("degenerate-direction")
    elif phase != "grasp":
        raise WorldModelError("invalid-phase", phase)
    return look_at_pose(p_vp, p_f)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def model_to_dict(model: PlantModel) -> dict:
    return {
        "fruits": [
            {
                "id": f.id,
                "center": None if f.center is None else f.center.tolist(),
                "dims": None if f.dims is None else f.dims.tolist(),
                "observed_ratio": f.observed_ratio,
                "stem_id": f.stem_id,
                "peduncle_id": f.peduncle_id,
                "n_points": len(f.cloud),
                "fit_failed": f.fit_failed,
            }
            for f in model.fruits
        ],
        "peduncles": [
            {
                "id": p.id,
                "fruit_id": p.fruit_id,
                "fruit_point": None if p.fruit_point is None else p.fruit_point.tolist(),
                "stem_point": None if p.stem_point is None else p.stem_point.tolist(),
                "n_points": len(p.cloud),
            }
            for p in model.peduncles
        ],
        "stems": [
            {
                "id": s.id,
                "point": s.line.point.tolist(),
                "direction": s.line.direction.tolist(),
                "extent": [s.line.t_min, s.line.t_max],
                "support": s.support,
            }
            for s in model.stems
        ],
    }


def save_model(model: PlantModel, path) -> None:
    with open(path, "w") as f:
        json.dump(model_to_dict(model), f, indent=2)
