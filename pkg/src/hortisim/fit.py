"""Numerical estimators: superellipsoid fruit-shape fitting, robust 3D line
extraction for stems, k-NN cloud smoothing, and the center complementary filter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .geom import Pose, PointCloud

EXPONENT_MIN = 0.1
EXPONENT_MAX = 2.0

# Multi-start seeds for the shape exponents; guards against local minima
# between boxy (small e) and pinched (large e) solutions.
_EXPONENT_STARTS = [(0.4, 0.4), (0.8, 0.8), (1.2, 1.2), (0.4, 1.2), (1.2, 0.4)]


class FitError(ValueError):
    """Estimator failure; `code` is a stable machine-readable name."""

    def __init__(self, code: str, message: str = "", best=None):
        super().__init__(message or code)
        self.code = code
        self.best = best


@dataclass(frozen=True)
class Superellipsoid:
    """Superellipsoid solid: semi-axes (a, b, c), shape exponents (e1, e2),
    and pose (center + yaw-only orientation about world z).

    Implicit surface: f(p) = ((|x/a|^(2/e2) + |y/b|^(2/e2))^(e2/e1)
                              + |z/c|^(2/e1)) = 1 in the body frame.
    """

    a: float
    b: float
    c: float
    e1: float
    e2: float
    pose: Pose

    def __post_init__(self):
        if min(self.a, self.b, self.c) <= 0:
            raise FitError("invalid-shape", "non-positive semi-axis")

    @property
    def semi_axes(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c])

    @property
    def center(self) -> np.ndarray:
        return self.pose.trans

    def implicit(self, points_world: np.ndarray) -> np.ndarray:
        """Implicit function value per point (1 on the surface, <1 inside)."""
        local = self.pose.inverse().apply(np.atleast_2d(points_world))
        return _implicit_local(local, self.a, self.b, self.c, self.e1, self.e2)

    def contains(self, points_world: np.ndarray) -> np.ndarray:
        return self.implicit(points_world) <= 1.0

    def surface_points(self, n_eta: int = 24, n_omega: int = 48) -> np.ndarray:
        """Quasi-uniform surface sampling via the trigonometric parametrization."""
        eta = np.linspace(-np.pi / 2, np.pi / 2, n_eta)
        omega = np.linspace(-np.pi, np.pi, n_omega, endpoint=False)
        ee, ww = np.meshgrid(eta, omega, indexing="ij")
        local = _parametric_local(
            ee.ravel(), ww.ravel(), self.a, self.b, self.c, self.e1, self.e2
        )
        return self.pose.apply(local)

    def bounding_dims(self) -> np.ndarray:
        """Axis-aligned world extents of the shape (yaw-only orientation)."""
        pts = self.surface_points(32, 64)
        return pts.max(axis=0) - pts.min(axis=0)


def _signed_pow(x: np.ndarray, e: float) -> np.ndarray:
    return np.sign(x) * np.abs(x) ** e


def _parametric_local(eta, omega, a, b, c, e1, e2) -> np.ndarray:
    ce = _signed_pow(np.cos(eta), e1)
    x = a * ce * _signed_pow(np.cos(omega), e2)
    y = b * ce * _signed_pow(np.sin(omega), e2)
    z = c * _signed_pow(np.sin(eta), e1)
    return np.column_stack([x, y, z])


def _implicit_local(local: np.ndarray, a, b, c, e1, e2) -> np.ndarray:
    eps = 1e-12
    xa = np.abs(local[:, 0] / a) + eps
    yb = np.abs(local[:, 1] / b) + eps
    zc = np.abs(local[:, 2] / c) + eps
    return (xa ** (2.0 / e2) + yb ** (2.0 / e2)) ** (e2 / e1) + zc ** (2.0 / e1)


@dataclass(frozen=True)
class Line3D:
    """3D line with a unit direction and an inlier extent [t_min, t_max]
    measured along the direction from `point`."""

    point: np.ndarray
    direction: np.ndarray
    t_min: float
    t_max: float

    def __post_init__(self):
        object.__setattr__(self, "point", np.asarray(self.point, float).reshape(3))
        d = np.asarray(self.direction, float).reshape(3)
        n = np.linalg.norm(d)
        if n < 1e-12:
            raise FitError("degenerate-extent", "zero direction")
        object.__setattr__(self, "direction", d / n)
        if self.t_min >= self.t_max:
            raise FitError("degenerate-extent", "empty line extent")

    @property
    def length(self) -> float:
        return self.t_max - self.t_min

    def endpoints(self) -> tuple[np.ndarray, np.ndarray]:
        return (
            self.point + self.t_min * self.direction,
            self.point + self.t_max * self.direction,
        )

    def distance(self, points: np.ndarray) -> np.ndarray:
        """Perpendicular distance of points to the infinite line."""
        rel = np.atleast_2d(points) - self.point
        proj = rel @ self.direction
        return np.linalg.norm(rel - np.outer(proj, self.direction), axis=1)

    def horizontal_distance(self, point) -> float:
        """Distance from a point to the line measured in the x-y plane."""
        p = np.asarray(point, float).reshape(3)
        d2 = self.direction[:2]
        rel = p[:2] - self.point[:2]
        n2 = np.linalg.norm(d2)
        if n2 < 1e-9:
            return float(np.linalg.norm(rel))
        d2 = d2 / n2
        return float(abs(rel[0] * d2[1] - rel[1] * d2[0]))


@dataclass(frozen=True)
class FollowFilterConfig:
    """Complementary-filter blend weight for online fruit-center updates."""

    alpha: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise FitError("invalid-alpha", "alpha must be in [0, 1]")


def filter_center(prev, curr, alpha: float) -> np.ndarray:
    """First-order complementary blend: alpha*curr + (1-alpha)*prev."""
    if not 0.0 <= alpha <= 1.0:
        raise FitError("invalid-alpha", "alpha must be in [0, 1]")
    prev = np.asarray(prev, float).reshape(3)
    curr = np.asarray(curr, float).reshape(3)
    return alpha * curr + (1.0 - alpha) * prev


@dataclass(frozen=True)
class FitResult:
    shape: Superellipsoid
    residual: float


def fit_superellipsoid(
    cloud: PointCloud,
    prior: tuple[np.ndarray, np.ndarray] | None = None,
    bias_weight: float = 0.0,
    min_points: int = 30,
    max_nfev: int = 400,
) -> FitResult:
    """Fit a yaw-only superellipsoid to a (possibly partial) fruit cloud.

    Minimizes the scale-normalized implicit residual
    sqrt(a*b*c) * (f^(e1/2) - 1) per point, with an optional quadratic pull
    of the center towards `prior` = (center, dims) weighted by `bias_weight`.
    Multi-start over the shape exponents; the lowest-cost start wins.
    """
    pts = cloud.points
    if len(pts) < min_points:
        raise FitError("insufficient-points", f"need >= {min_points} points")
    span = pts.max(axis=0) - pts.min(axis=0)
    if np.min(span) < 0.0:
        raise FitError("insufficient-points", "degenerate cloud span")

    center0 = pts.mean(axis=0)
    if prior is not None:
        prior_center = np.asarray(prior[0], float).reshape(3)
        prior_dims = None if prior[1] is None else np.asarray(prior[1], float).reshape(3)
        if bias_weight > 0:
            # Under heavy bias, trust the prior for initialization too.
            center0 = 0.5 * (center0 + prior_center)
    else:
        prior_center, prior_dims = None, None

    axes0 = np.maximum(span / 2.0, 5e-3)
    if prior_dims is not None:
        axes0 = np.maximum(prior_dims / 2.0, 5e-3)

    n = len(pts)
    w_bias = np.sqrt(bias_weight * n) if bias_weight > 0 else 0.0

    def residuals(params):
        cx, cy, cz, yaw, la, lb, lc, e1, e2 = params
        a, b, c = np.exp([la, lb, lc])
        rot = Rotation.from_rotvec([0.0, 0.0, yaw])
        local = rot.inv().apply(pts - [cx, cy, cz])
        f = _implicit_local(local, a, b, c, e1, e2)
        res = np.sqrt(a * b * c) * (f ** (e1 / 2.0) - 1.0)
        if w_bias > 0:
            res = np.concatenate(
                [res, w_bias * (np.array([cx, cy, cz]) - prior_center)]
            )
        return res

    # A center far outside the observed cloud is never supported by the
    # data; one-sided partial clouds would otherwise let the shape balloon
    # and slide away along the unobserved direction. Bound the center to
    # the cloud box inflated by half the largest extent, and the semi-axes
    # to the cloud scale. Percentile spans keep stray pixels from widening
    # the bounds.
    p_lo = np.percentile(pts, 2, axis=0)
    p_hi = np.percentile(pts, 98, axis=0)
    margin = max(0.5 * float(np.max(p_hi - p_lo)), 0.02)
    lo_c = p_lo - margin
    hi_c = p_hi + margin
    axis_cap = float(np.clip(1.5 * np.max(p_hi - p_lo), 0.02, 1.0))
    lo = [*lo_c] + [-np.pi] + [np.log(1e-3)] * 3 + [EXPONENT_MIN] * 2
    hi = [*hi_c] + [np.pi] + [np.log(axis_cap)] * 3 + [EXPONENT_MAX] * 2
    center0 = np.clip(center0, lo_c + 1e-9, hi_c - 1e-9)
    la0, lb0, lc0 = np.log(np.minimum(axes0, axis_cap * 0.999))

    best = None
    best_cost = np.inf
    for e1s, e2s in _EXPONENT_STARTS:
        x0 = np.array([*center0, 0.0, la0, lb0, lc0, e1s, e2s])
        try:
            sol = least_squares(
                residuals, x0, bounds=(lo, hi), max_nfev=max_nfev, xtol=1e-12
            )
        except Exception:
            continue
        if sol.cost < best_cost:
            best_cost = sol.cost
            best = sol
    if best is None:
        raise FitError("fit-diverged", "all starts failed")

    cx, cy, cz, yaw, la, lb, lc, e1, e2 = best.x
    a, b, c = np.exp([la, lb, lc])
    shape = Superellipsoid(
        a, b, c,
        float(np.clip(e1, EXPONENT_MIN, EXPONENT_MAX)),
        float(np.clip(e2, EXPONENT_MIN, EXPONENT_MAX)),
        Pose.from_rotvec([0.0, 0.0, yaw], [cx, cy, cz]),
    )
    rms = float(np.sqrt(2.0 * best.cost / max(n, 1)))
    return FitResult(shape=shape, residual=rms)


@dataclass(frozen=True)
class RansacResult:
    line: Line3D
    inlier_indices: np.ndarray


def ransac_line3d(
    cloud: PointCloud,
    iterations: int = 250,
    inlier_threshold: float = 0.008,
    seed: int = 0,
) -> RansacResult:
    """Seeded two-point RANSAC with least-squares refinement on the inliers.

    The refined direction is the principal component of the inlier set; the
    extent covers the inlier projections.
    """
    pts = cloud.points
    n = len(pts)
    if n < 2:
        raise FitError("insufficient-points", "need >= 2 points")

    rng = np.random.default_rng(seed)
    best_count = -1
    best_inliers = None
    for _ in range(iterations):
        i, j = rng.choice(n, size=2, replace=False)
        d = pts[j] - pts[i]
        nd = np.linalg.norm(d)
        if nd < 1e-12:
            continue
        d = d / nd
        rel = pts - pts[i]
        proj = rel @ d
        dist = np.linalg.norm(rel - np.outer(proj, d), axis=1)
        inliers = dist <= inlier_threshold
        count = int(inliers.sum())
        if count > best_count:
            best_count = count
            best_inliers = inliers
    if best_inliers is None:
        raise FitError("degenerate-extent", "all candidate pairs coincident")

    idx = np.flatnonzero(best_inliers)
    sel = pts[idx]
    mean = sel.mean(axis=0)
    centered = sel - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    direction = vt[0]
    if direction[2] < 0:
        direction = -direction
    t = centered @ direction
    t_min, t_max = float(t.min()), float(t.max())
    if t_max - t_min < 1e-12:
        raise FitError("degenerate-extent", "all inliers coincident")
    line = Line3D(mean, direction, t_min, t_max)
    return RansacResult(line=line, inlier_indices=idx)


def smooth_cloud(cloud: PointCloud, k: int = 8, sigma: float = 0.005) -> PointCloud:
    """Replace each point by the Gaussian-weighted mean of its k nearest
    neighbors (self included); suppresses depth noise before shape fitting."""
    n = len(cloud)
    if k < 1 or k > n:
        raise FitError("insufficient-points", f"k={k} out of range for {n} points")
    if k == 1:
        return PointCloud(cloud.points.copy(), cloud.instance_ids, cloud.classes)
    tree = cKDTree(cloud.points)
    dist, idx = tree.query(cloud.points, k=k)
    w = np.exp(-0.5 * (dist / max(sigma, 1e-12)) ** 2)
    w /= w.sum(axis=1, keepdims=True)
    smoothed = np.einsum("nk,nkd->nd", w, cloud.points[idx])
    return PointCloud(smoothed, cloud.instance_ids, cloud.classes)
