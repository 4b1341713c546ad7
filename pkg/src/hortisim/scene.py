"""Synthetic plant scenes and sensor simulation.

Replaces the trained detectors and depth hardware with analytic geometry:
scenes are built from superellipsoid fruits, cylinder stems, polyline
peduncles and disc leaves; `render` ray-casts them into depth + instance
masks, and a parametric noise model injects the failure modes a learned
detector would exhibit (dropout, id loss, boundary erosion, depth noise).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import ndimage

from .geom import CameraModel, GeomError, PointCloud, Pose, SemanticClass
from .fit import Superellipsoid

GRAVITY = 9.81


class SceneError(ValueError):
    def __init__(self, code: str, message: str = ""):
        super().__init__(message or code)
        self.code = code


# ---------------------------------------------------------------------------
# Scene description
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Stem:
    base: np.ndarray       # bottom point (m)
    direction: np.ndarray  # unit, near-vertical
    length: float
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "base", np.asarray(self.base, float).reshape(3))
        d = np.asarray(self.direction, float).reshape(3)
        object.__setattr__(self, "direction", d / np.linalg.norm(d))

    def point_at(self, t: float) -> np.ndarray:
        return self.base + t * self.direction


@dataclass(frozen=True)
class Fruit:
    shape: Superellipsoid
    stem_index: int
    color: str = "red"  # red | yellow | orange

    @property
    def center(self) -> np.ndarray:
        return self.shape.center

    def top_center(self) -> np.ndarray:
        return self.center + np.array([0.0, 0.0, self.shape.c])


@dataclass(frozen=True)
class Peduncle:
    polyline: np.ndarray   # (k, 3), fruit top -> stem attach point
    radius: float
    fruit_index: int

    def __post_init__(self):
        object.__setattr__(self, "polyline", np.asarray(self.polyline, float).reshape(-1, 3))


@dataclass(frozen=True)
class Disc:
    center: np.ndarray
    normal: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, float).reshape(3))
        n = np.asarray(self.normal, float).reshape(3)
        object.__setattr__(self, "normal", n / np.linalg.norm(n))


@dataclass
class PlantScene:
    stems: list[Stem]
    fruits: list[Fruit]
    peduncles: list[Peduncle]
    occluders: list[Disc] = field(default_factory=list)

    def validate(self) -> None:
        for ped in self.peduncles:
            fruit = self.fruits[ped.fruit_index]
            if np.linalg.norm(ped.polyline[0] - fruit.top_center()) > 0.01:
                raise SceneError("scene-invalid", "peduncle detached from fruit top")
            stem = self.stems[fruit.stem_index]
            end = ped.polyline[-1]
            rel = end - stem.base
            along = rel @ stem.direction
            perp = np.linalg.norm(rel - along * stem.direction)
            if perp > stem.radius + 1e-6:
                raise SceneError("scene-invalid", "peduncle detached from stem")

    def peduncle_for_fruit(self, fruit_index: int) -> Peduncle | None:
        for ped in self.peduncles:
            if ped.fruit_index == fruit_index:
                return ped
        return None


@dataclass(frozen=True)
class SceneSpec:
    """Parameters for deterministic scene generation."""

    n_fruits: int = 4
    n_stems: int = 3
    n_leaves: int = 4
    standoff: float = 0.5       # y distance of the stem row from the platform
    row_extent: float = 0.8     # x spread of stems
    fruit_height: tuple[float, float] = (0.85, 1.25)
    fruit_radius: tuple[float, float] = (0.030, 0.045)
    stem_height: float = 1.8
    stem_radius: float = 0.010
    peduncle_radius: float = 0.004
    slots_per_stem: int = 3


@dataclass(frozen=True)
class NoiseConfig:
    depth_sigma: float = 0.0       # m
    boundary_px: int = 0           # mask erosion (>0) / dilation (<0)
    dropout_prob: float = 0.0      # per frame per instance
    track_loss_prob: float = 0.0   # per frame per instance
    pixel_sigma: float = 0.0       # mask/bbox jitter, px

    def __post_init__(self):
        for p in (self.dropout_prob, self.track_loss_prob):
            if not 0.0 <= p <= 1.0:
                raise SceneError("invalid-noise", "probability outside [0, 1]")
        if self.depth_sigma < 0 or self.pixel_sigma < 0:
            raise SceneError("invalid-noise", "negative sigma")


NOISE_PROFILES = {
    "zero": NoiseConfig(),
    "nominal": NoiseConfig(
        depth_sigma=0.002, boundary_px=1, dropout_prob=0.05,
        track_loss_prob=0.03, pixel_sigma=0.5,
    ),
    "harsh": NoiseConfig(
        depth_sigma=0.005, boundary_px=2, dropout_prob=0.15,
        track_loss_prob=0.10, pixel_sigma=1.5,
    ),
}


def generate_scene(spec: SceneSpec, seed: int) -> PlantScene:
    """Build a deterministic mock plant row: near-vertical stems, fruits
    hanging beside them, curved peduncles linking fruit tops to the stems,
    and leaf discs as occluders."""
    if spec.n_fruits < 0 or spec.n_stems < 0:
        raise SceneError("scene-infeasible", "negative counts")
    slots = spec.n_stems * spec.slots_per_stem
    if spec.n_fruits > slots:
        raise SceneError("scene-infeasible", f"{spec.n_fruits} fruits > {slots} slots")
    rng = np.random.default_rng(seed)

    stems = []
    for i in range(spec.n_stems):
        x = (-0.5 + (i + 0.5) / max(spec.n_stems, 1)) * spec.row_extent
        x += rng.uniform(-0.02, 0.02)
        base = np.array([x, spec.standoff + rng.uniform(-0.02, 0.02), 0.0])
        tilt = rng.uniform(-0.05, 0.05, size=2)
        direction = np.array([tilt[0], tilt[1], 1.0])
        stems.append(Stem(base, direction, spec.stem_height, spec.stem_radius))

    # Round-robin fruit-to-stem assignment over the available slots.
    slot_order = [(f % spec.n_stems) for f in range(spec.n_fruits)]
    fruits = []
    peduncles = []
    colors = ["red"] * max(spec.n_fruits - 2, 0) + ["yellow", "orange"]
    for fi in range(spec.n_fruits):
        stem = stems[slot_order[fi]]
        z = rng.uniform(*spec.fruit_height)
        attach = stem.point_at((z + 0.06 - stem.base[2]) / stem.direction[2])
        side = rng.uniform(0, 2 * np.pi)
        # Keep the fruit on the robot side of the row so it is observable.
        offset_dir = np.array([0.35 * np.cos(side), -1.0, 0.0])
        offset_dir /= np.linalg.norm(offset_dir)
        r = rng.uniform(*spec.fruit_radius)
        a = r * rng.uniform(0.9, 1.1)
        b = r * rng.uniform(0.9, 1.1)
        c = r * rng.uniform(1.1, 1.35)
        center = attach + offset_dir * (0.05 + r) - np.array([0.0, 0.0, 0.06])
        e1 = rng.uniform(0.6, 1.0)
        e2 = rng.uniform(0.6, 1.0)
        yaw = rng.uniform(-np.pi, np.pi)
        shape = Superellipsoid(a, b, c, e1, e2, Pose.from_rotvec([0, 0, yaw], center))
        fruit = Fruit(shape, stem_index=slot_order[fi], color=colors[fi % len(colors)])
        fruits.append(fruit)

        top = fruit.top_center()
        n_vertices = 5
        ts = np.linspace(0.0, 1.0, n_vertices)
        straight = top[None, :] + ts[:, None] * (attach - top)[None, :]
        # Slight random bow, zero at both endpoints.
        bow = rng.uniform(-0.008, 0.008, size=3)
        curve = np.sin(np.pi * ts)[:, None] * bow[None, :]
        peduncles.append(Peduncle(straight + curve, spec.peduncle_radius, fi))

    occluders = []
    for _ in range(spec.n_leaves):
        stem = stems[rng.integers(0, max(spec.n_stems, 1))] if spec.n_stems else None
        if stem is None:
            break
        z = rng.uniform(*spec.fruit_height)
        center = stem.point_at(z - stem.base[2]) + np.array(
            [rng.uniform(-0.12, 0.12), rng.uniform(-0.03, 0.10), 0.0]
        )
        normal = np.array([rng.uniform(-0.3, 0.3), -1.0, rng.uniform(-0.3, 0.3)])
        occluders.append(Disc(center, normal, rng.uniform(0.03, 0.06)))

    scene = PlantScene(stems, fruits, peduncles, occluders)
    scene.validate()
    return scene


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

@dataclass
class InstanceMask:
    track_id: int
    semantic: SemanticClass
    pixels: np.ndarray              # (n, 2) as (row, col)
    bbox: tuple[int, int, int, int]  # (u0, v0, u1, v1) inclusive
    associated_fruit_track: int | None = None


@dataclass
class DetectionFrame:
    timestamp: float
    camera: CameraModel
    depth: np.ndarray               # (h, w) camera-frame z, 0 = invalid
    masks: list[InstanceMask]

    def masks_of(self, semantic: SemanticClass) -> list[InstanceMask]:
        return [m for m in self.masks if m.semantic == semantic]


def _ray_grid(camera: CameraModel):
    """World-frame ray origins/directions; parameter s equals camera-frame z."""
    us, vs = np.meshgrid(np.arange(camera.width), np.arange(camera.height))
    x = (us - camera.cx) / camera.fx
    y = (vs - camera.cy) / camera.fy
    d_cam = np.stack([x, y, np.ones_like(x)], axis=-1).reshape(-1, 3)
    rot = camera.pose.rotation.as_matrix()
    d_world = d_cam @ rot.T
    origin = camera.pose.trans
    return origin, d_world


def _hit_superellipsoid(origin, dirs, shape: Superellipsoid, n_coarse=24, n_bisect=22):
    """Per-ray first-hit parameter against a superellipsoid (inf = miss)."""
    inv = shape.pose.inverse()
    o = inv.apply(origin)
    d = dirs @ inv.rotation.as_matrix().T
    rb = float(np.linalg.norm(shape.semi_axes)) * 1.02

    a = np.einsum("ij,ij->i", d, d)
    b = 2.0 * d @ o
    cc = o @ o - rb * rb
    disc = b * b - 4 * a * cc
    hits = np.full(len(dirs), np.inf)
    cand = disc > 0
    if not np.any(cand):
        return hits
    sq = np.sqrt(disc[cand])
    t0 = np.maximum((-b[cand] - sq) / (2 * a[cand]), 1e-6)
    t1 = (-b[cand] + sq) / (2 * a[cand])
    ok = t1 > t0
    idx = np.flatnonzero(cand)[ok]
    t0, t1 = t0[ok], t1[ok]
    if len(idx) == 0:
        return hits

    dl = d[idx]
    taus = np.linspace(0.0, 1.0, n_coarse)
    ts = t0[:, None] + (t1 - t0)[:, None] * taus[None, :]
    pts = o[None, None, :] + ts[..., None] * dl[:, None, :]
    from .fit import _implicit_local
    f = _implicit_local(pts.reshape(-1, 3), shape.a, shape.b, shape.c,
                        shape.e1, shape.e2).reshape(len(idx), n_coarse)
    inside = f <= 1.0
    any_in = inside.any(axis=1)
    if not np.any(any_in):
        return hits
    first = np.argmax(inside, axis=1)
    sel = np.flatnonzero(any_in)
    first = first[sel]
    # Bracket [previous sample, first inside sample]; entry from outside.
    lo = ts[sel, np.maximum(first - 1, 0)]
    hi = ts[sel, first]
    o_sel = np.repeat(o[None, :], len(sel), axis=0)
    d_sel = dl[sel]
    for _ in range(n_bisect):
        mid = 0.5 * (lo + hi)
        pm = o_sel + mid[:, None] * d_sel
        fm = _implicit_local(pm, shape.a, shape.b, shape.c, shape.e1, shape.e2)
        go_lo = fm > 1.0
        lo = np.where(go_lo, mid, lo)
        hi = np.where(go_lo, hi, mid)
    hits[idx[sel]] = 0.5 * (lo + hi)
    return hits


def _hit_cylinder(origin, dirs, p0, p1, radius):
    """First-hit parameter against a finite cylinder segment (inf = miss)."""
    axis = p1 - p0
    h = np.linalg.norm(axis)
    v = axis / h
    o_rel = origin - p0
    oc = o_rel - (o_rel @ v) * v
    dv = dirs @ v
    dc = dirs - np.outer(dv, v)
    a = np.einsum("ij,ij->i", dc, dc)
    b = 2.0 * dc @ oc
    cc = oc @ oc - radius * radius
    hits = np.full(len(dirs), np.inf)
    with np.errstate(invalid="ignore", divide="ignore"):
        disc = b * b - 4 * a * cc
        valid = (disc > 0) & (a > 1e-14)
        sq = np.sqrt(np.where(valid, disc, 0.0))
        t = np.where(valid, (-b - sq) / (2 * a), np.inf)
    t = np.where(t > 1e-6, t, np.inf)
    axial = (o_rel @ v) + t * dv
    inside = (axial >= 0.0) & (axial <= h)
    hits = np.where(valid & inside & np.isfinite(t), t, np.inf)
    return hits


def _hit_disc(origin, dirs, disc: Disc):
    denom = dirs @ disc.normal
    with np.errstate(divide="ignore", invalid="ignore"):
        t = ((disc.center - origin) @ disc.normal) / denom
    t = np.where(np.abs(denom) > 1e-12, t, np.inf)
    t = np.where(t > 1e-6, t, np.inf)
    pts = origin[None, :] + t[:, None] * dirs
    ok = np.linalg.norm(pts - disc.center, axis=1) <= disc.radius
    return np.where(ok & np.isfinite(t), t, np.inf)


def _cast_all(scene: PlantScene, camera: CameraModel):
    """Z-buffer over all scene primitives.

    Returns (depth, instance index, class code) flat arrays; instance -1 = miss.
    Instance indices: fruits [0..F), peduncles [F..F+P), stems, then leaves.
    """
    origin, dirs = _ray_grid(camera)
    n = len(dirs)
    depth = np.full(n, np.inf)
    inst = np.full(n, -1, dtype=int)
    cls = np.full(n, -1, dtype=int)

    def register(hit, instance, code):
        closer = hit < depth
        depth[closer] = hit[closer]
        inst[closer] = instance
        cls[closer] = code

    fruit_codes = {SemanticClass.FRUIT: 0, SemanticClass.PEDUNCLE: 1,
                   SemanticClass.STEM: 2, SemanticClass.LEAF: 3}
    idx = 0
    for fruit in scene.fruits:
        register(_hit_superellipsoid(origin, dirs, fruit.shape), idx,
                 fruit_codes[SemanticClass.FRUIT])
        idx += 1
    for ped in scene.peduncles:
        hit = np.full(n, np.inf)
        for k in range(len(ped.polyline) - 1):
            h = _hit_cylinder(origin, dirs, ped.polyline[k], ped.polyline[k + 1],
                              ped.radius)
            hit = np.minimum(hit, h)
        register(hit, idx, fruit_codes[SemanticClass.PEDUNCLE])
        idx += 1
    for stem in scene.stems:
        h = _hit_cylinder(origin, dirs, stem.base,
                          stem.base + stem.direction * stem.length, stem.radius)
        register(h, idx, fruit_codes[SemanticClass.STEM])
        idx += 1
    for disc in scene.occluders:
        register(_hit_disc(origin, dirs, disc), idx, fruit_codes[SemanticClass.LEAF])
        idx += 1
    return depth, inst, cls


_CLASS_ORDER = [SemanticClass.FRUIT, SemanticClass.PEDUNCLE,
                SemanticClass.STEM, SemanticClass.LEAF]


def render(
    scene: PlantScene,
    camera: CameraModel,
    noise: NoiseConfig = NoiseConfig(),
    seed: int = 0,
    timestamp: float = 0.0,
) -> DetectionFrame:
    """Ray-cast the scene into a depth image and per-instance masks, then
    apply the detector noise model. Pure: identical inputs give identical
    frames. Track ids are 1 + ground-truth instance index unless id loss
    reassigns a fresh id for this frame."""
    h, w = camera.height, camera.width
    depth, inst, cls = _cast_all(scene, camera)
    rng = np.random.default_rng(seed)

    depth_img = np.where(np.isfinite(depth), depth, 0.0).reshape(h, w)
    if noise.depth_sigma > 0:
        jitter = rng.normal(0.0, noise.depth_sigma, size=depth_img.shape)
        depth_img = np.where(depth_img > 0, depth_img + jitter, 0.0)

    n_fruits = len(scene.fruits)
    masks: list[InstanceMask] = []
    fresh_id = 10_000 + seed % 1000 * 10
    for instance in np.unique(inst):
        if instance < 0:
            continue
        code = cls[inst == instance][0]
        semantic = _CLASS_ORDER[code]
        mask_img = (inst == instance).reshape(h, w)
        if rng.random() < noise.dropout_prob:
            continue
        if noise.boundary_px > 0:
            mask_img = ndimage.binary_erosion(mask_img, iterations=noise.boundary_px)
        elif noise.boundary_px < 0:
            mask_img = ndimage.binary_dilation(mask_img, iterations=-noise.boundary_px)
        if noise.pixel_sigma > 0:
            du, dv = np.round(rng.normal(0.0, noise.pixel_sigma, size=2)).astype(int)
            mask_img = np.roll(np.roll(mask_img, dv, axis=0), du, axis=1)
        pixels = np.argwhere(mask_img)
        if len(pixels) == 0:
            continue
        track_id = 1 + int(instance)
        if rng.random() < noise.track_loss_prob:
            fresh_id += 1
            track_id = fresh_id
        u0, u1 = int(pixels[:, 1].min()), int(pixels[:, 1].max())
        v0, v1 = int(pixels[:, 0].min()), int(pixels[:, 0].max())
        assoc = None
        if semantic == SemanticClass.PEDUNCLE:
            ped = scene.peduncles[int(instance) - n_fruits]
            assoc = 1 + ped.fruit_index
        masks.append(InstanceMask(track_id, semantic, pixels, (u0, v0, u1, v1), assoc))
    return DetectionFrame(timestamp, camera, depth_img, masks)


def mask_to_cloud(frame: DetectionFrame, mask: InstanceMask,
                  stride: int = 1,
                  depth_band: float | None = None) -> PointCloud:
    """Back-project a mask's valid-depth pixels into a world point cloud.

    `depth_band` drops pixels whose depth deviates from the mask's median
    by more than the band; mask boundaries bleed onto the background, and
    those mixed pixels otherwise back-project far behind the object."""
    cam = frame.camera
    px = mask.pixels[::stride]
    z = frame.depth[px[:, 0], px[:, 1]]
    ok = z > 0
    px, z = px[ok], z[ok]
    if depth_band is not None and len(z):
        ok = np.abs(z - np.median(z)) <= depth_band
        px, z = px[ok], z[ok]
    x = (px[:, 1] - cam.cx) / cam.fx * z
    y = (px[:, 0] - cam.cy) / cam.fy * z
    pts_cam = np.column_stack([x, y, z])
    return PointCloud(cam.pose.apply(pts_cam))


def inflate_bbox(bbox, factor: float = 0.5, bounds: tuple[int, int] | None = None):
    """Grow a pixel box by factor/2 per side about its center, clamped to
    the image. bbox = (u0, v0, u1, v1)."""
    if factor < 0:
        raise SceneError("invalid-factor", "inflation factor must be >= 0")
    u0, v0, u1, v1 = (float(x) for x in bbox)
    du = (u1 - u0) * factor / 2.0
    dv = (v1 - v0) * factor / 2.0
    u0, u1 = u0 - du, u1 + du
    v0, v1 = v0 - dv, v1 + dv
    if bounds is not None:
        w, h = bounds
        u0, u1 = max(0.0, u0), min(float(w - 1), u1)
        v0, v1 = max(0.0, v0), min(float(h - 1), v1)
    return (u0, v0, u1, v1)


def detect_peduncle_in_roi(frame: DetectionFrame, roi):
    """Peduncle mask restricted to a pixel region of interest, in full-image
    coordinates, tagged with the associated fruit's track id. None when no
    peduncle pixels survive."""
    u0, v0, u1, v1 = roi
    best = None
    for mask in frame.masks_of(SemanticClass.PEDUNCLE):
        px = mask.pixels
        keep = (
            (px[:, 1] >= u0) & (px[:, 1] <= u1)
            & (px[:, 0] >= v0) & (px[:, 0] <= v1)
        )
        if not np.any(keep):
            continue
        sub = px[keep]
        bu0, bu1 = int(sub[:, 1].min()), int(sub[:, 1].max())
        bv0, bv1 = int(sub[:, 0].min()), int(sub[:, 0].max())
        cand = InstanceMask(mask.track_id, SemanticClass.PEDUNCLE, sub,
                            (bu0, bv0, bu1, bv1), mask.associated_fruit_track)
        if best is None or len(sub) > len(best.pixels):
            best = cand
    return best


# ---------------------------------------------------------------------------
# Force-torque simulation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FtParams:
    """Ground-truth or calibrated F/T sensor parameters."""

    mass: float
    com: np.ndarray            # sensor frame (m)
    force_bias: np.ndarray     # N
    torque_bias: np.ndarray    # N*m

    def __post_init__(self):
        if self.mass <= 0:
            raise SceneError("invalid-ft", "mass must be positive")
        object.__setattr__(self, "com", np.asarray(self.com, float).reshape(3))
        object.__setattr__(self, "force_bias", np.asarray(self.force_bias, float).reshape(3))
        object.__setattr__(self, "torque_bias", np.asarray(self.torque_bias, float).reshape(3))


@dataclass(frozen=True)
class WrenchReading:
    force: np.ndarray
    torque: np.ndarray
    sensor_pose: Pose
    timestamp: float = 0.0

    def __post_init__(self):
        f = np.asarray(self.force, float).reshape(3)
        t = np.asarray(self.torque, float).reshape(3)
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(t))):
            raise GeomError("non-finite wrench")
        object.__setattr__(self, "force", f)
        object.__setattr__(self, "torque", t)


@dataclass(frozen=True)
class ContactState:
    """Linear-spring contact: force = stiffness * penetration along normal."""

    penetration: float = 0.0
    normal: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    stiffness: float = 200.0

    def __post_init__(self):
        n = np.asarray(self.normal, float).reshape(3)
        nn = np.linalg.norm(n)
        object.__setattr__(self, "normal", n / nn if nn > 0 else n)


def simulate_wrench(
    contact: ContactState,
    truth: FtParams,
    sensor_pose: Pose,
    noise_sigma: float = 0.0,
    rng: np.random.Generator | None = None,
    timestamp: float = 0.0,
) -> WrenchReading:
    """Sensor reading = gravity load of the true mass/COM at this pose
    + spring contact wrench + bias + Gaussian noise, in the sensor frame."""
    r_ws = sensor_pose.rotation.as_matrix()
    f_gravity = r_ws.T @ np.array([0.0, 0.0, -truth.mass * GRAVITY])
    f_contact_world = contact.stiffness * max(contact.penetration, 0.0) * contact.normal
    f_contact = r_ws.T @ f_contact_world
    force = f_gravity + f_contact + truth.force_bias
    torque = np.cross(truth.com, f_gravity) + truth.torque_bias
    if noise_sigma > 0:
        gen = rng if rng is not None else np.random.default_rng(0)
        force = force + gen.normal(0.0, noise_sigma, 3)
        torque = torque + gen.normal(0.0, noise_sigma * 0.02, 3)
    return WrenchReading(force, torque, sensor_pose, timestamp)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def scene_spec_to_dict(spec: SceneSpec) -> dict:
    return asdict(spec)


def scene_spec_from_dict(data: dict) -> SceneSpec:
    d = dict(data)
    for key in ("fruit_height", "fruit_radius"):
        if key in d:
            d[key] = tuple(d[key])
    return SceneSpec(**d)


def load_scene_spec(path) -> SceneSpec:
    with open(path) as f:
        return scene_spec_from_dict(json.load(f))


def save_scene_spec(spec: SceneSpec, path) -> None:
    with open(path, "w") as f:
        json.dump(scene_spec_to_dict(spec), f, indent=2)


def dump_frame(frame: DetectionFrame, out_dir) -> None:
    """Write a frame as depth .npy + masks metadata JSON for debugging."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    np.save(os.path.join(out_dir, "depth.npy"), frame.depth)
    meta = {
        "timestamp": frame.timestamp,
        "camera": {
            "fx": frame.camera.fx, "fy": frame.camera.fy,
            "cx": frame.camera.cx, "cy": frame.camera.cy,
            "width": frame.camera.width, "height": frame.camera.height,
            "quat": frame.camera.pose.quat.tolist(),
            "trans": frame.camera.pose.trans.tolist(),
        },
        "masks": [
            {
                "track_id": m.track_id,
                "class": m.semantic.value,
                "bbox": list(m.bbox),
                "n_pixels": int(len(m.pixels)),
                "associated_fruit_track": m.associated_fruit_track,
            }
            for m in frame.masks
        ],
    }
    with open(os.path.join(out_dir, "frame.json"), "w") as f:
        json.dump(meta, f, indent=2)
