"""Segment fusion, duplicate resolution, association thresholds, following
gates, viewposes, and the peduncle ROI."""

import numpy as np
import pytest

from hortisim.fit import Line3D, Superellipsoid
from hortisim.geom import CameraModel, PointCloud, Pose, look_at_pose
from hortisim.worldmodel import (
    CANDIDATE_MAX_DIST,
    GREEDY_ACCEPT_DIST,
    PEDUNCLE_ATTACH_THRESHOLD,
    STEM_ATTACH_XY_THRESHOLD,
    FruitInstance,
    PeduncleBuffer,
    PlantModel,
    StemEstimate,
    ViewposeConfig,
    WorldModelError,
    add_peduncle_segment,
    add_stem_cloud,
    attach_peduncles,
    attach_stems,
    canonical_summary,
    complete_shapes,
    estimate_stems,
    fuse_segment,
    merge_peduncle_buffer,
    model_to_dict,
    peduncle_endpoints,
    peduncle_roi,
    resolve_overlaps,
    update_fruit_estimate,
    viewpose,
    viewpose_position,
)


def sphere_cloud(center, radius=0.04, n=300, seed=0) -> PointCloud:
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return PointCloud(np.asarray(center) + radius * d)


def fitted_fruit(model, center, seed=0) -> FruitInstance:
    fruit = fuse_segment(model, sphere_cloud(center, seed=seed),
                         track_id=100 + seed)
    complete_shapes(model)
    return fruit


class TestFuseSegment:
    def test_same_track_merges(self):
        model = PlantModel()
        a = fuse_segment(model, sphere_cloud((0, 0, 1), seed=0), track_id=1)
        b = fuse_segment(model, sphere_cloud((0, 0, 1), seed=1), track_id=1)
        assert a is b
        assert len(model.fruits) == 1

    def test_voxel_overlap_merges_new_track(self):
        model = PlantModel()
        a = fuse_segment(model, sphere_cloud((0, 0, 1), seed=0), track_id=1)
        b = fuse_segment(model, sphere_cloud((0.002, 0, 1), seed=1),
                         track_id=2)
        assert a is b
        assert b.track_ids == {1, 2}

    def test_distant_segment_new_instance(self):
        model = PlantModel()
        fuse_segment(model, sphere_cloud((0, 0, 1), seed=0), track_id=1)
        fuse_segment(model, sphere_cloud((0.5, 0, 1), seed=1), track_id=2)
        assert len(model.fruits) == 2

    def test_empty_segment_rejected(self):
        with pytest.raises(WorldModelError):
            fuse_segment(PlantModel(), PointCloud.empty(), track_id=1)


class TestCompleteShapes:
    def test_under_observed_flagged_not_raised(self):
        model = PlantModel()
        fuse_segment(model, PointCloud(np.random.default_rng(0).normal(
            size=(5, 3))), track_id=1)
        complete_shapes(model)
        assert model.fruits[0].fit_failed
        assert model.fruits[0].shape is None

    def test_fitted_center_close(self):
        model = PlantModel()
        fruit = fitted_fruit(model, (0.1, 0.4, 1.0))
        assert np.linalg.norm(fruit.center - [0.1, 0.4, 1.0]) <= 0.003
        assert fruit.dims is not None


class TestResolveOverlaps:
    def test_duplicate_removed(self):
        # Full-coverage instance and a half-shell duplicate of the same
        # fruit, forced into separate instances (over-segmentation).
        model = PlantModel()
        full = FruitInstance(id=model.next_id(),
                             cloud=sphere_cloud((0, 0, 1), n=400, seed=0),
                             track_ids={1})
        shell_cloud = sphere_cloud((0.005, 0, 1), n=400, seed=1)
        shell_cloud = shell_cloud.select(shell_cloud.points[:, 1] <= 1e-4)
        shell = FruitInstance(id=model.next_id(), cloud=shell_cloud,
                              track_ids={2})
        model.fruits += [full, shell]
        complete_shapes(model)
        assert len(model.fruits) == 2
        resolve_overlaps(model)
        assert len(model.fruits) == 1
        # The survivor is the better-observed full instance.
        assert 1 in model.fruits[0].track_ids

    def test_disjoint_kept(self):
        model = PlantModel()
        fitted_fruit(model, (0, 0, 1), seed=0)
        fuse_segment(model, sphere_cloud((0.3, 0, 1), seed=1), track_id=2)
        complete_shapes(model)
        resolve_overlaps(model)
        assert len(model.fruits) == 2


class TestPeduncleAssociation:
    def attach_case(self, offset_z: float) -> bool:
        """Build one fitted fruit and a peduncle whose bottom endpoint sits
        offset_z above the fruit top; report whether they associate."""
        model = PlantModel()
        fruit = fitted_fruit(model, (0.0, 0.4, 1.0))
        top = fruit.top_center()
        line = top + np.array([0.0, 0.0, offset_z]) + np.outer(
            np.linspace(0.0, 0.05, 40), [0.0, 0.0, 1.0])
        add_peduncle_segment(model, PointCloud(line), track_id=50)
        attach_peduncles(model)
        return model.peduncles[0].fruit_id == fruit.id

    def test_attach_inside_threshold(self):
        assert self.attach_case(PEDUNCLE_ATTACH_THRESHOLD - 0.002)

    def test_no_attach_outside_threshold(self):
        assert not self.attach_case(PEDUNCLE_ATTACH_THRESHOLD + 0.005)

    def test_endpoints_low_high(self):
        pts = np.outer(np.linspace(0, 0.08, 30), [0.0, 0.0, 1.0]) + [0, 0.4, 1]
        fp, sp = peduncle_endpoints(PointCloud(pts))
        assert fp[2] < sp[2]

    def test_duplicate_peduncles_merged(self):
        model = PlantModel()
        fruit = fitted_fruit(model, (0.0, 0.4, 1.0))
        top = fruit.top_center()
        seg = top + np.outer(np.linspace(0.0, 0.05, 30), [0, 0, 1.0])
        add_peduncle_segment(model, PointCloud(seg), track_id=50)
        # Same physical peduncle seen under a fresh track id, displaced just
        # beyond the centroid merge radius so it starts a second estimate.
        add_peduncle_segment(model, PointCloud(seg + [0.0, 0.0, 0.04]),
                             track_id=51, merge_dist=0.001)
        assert len(model.peduncles) == 2
        attach_peduncles(model, threshold=0.05)
        assert len(model.peduncles) == 1
        assert model.peduncles[0].fruit_id == fruit.id


class TestStemAssociation:
    def stem_case(self, dx: float) -> bool:
        model = PlantModel()
        fruit = fitted_fruit(model, (0.0, 0.4, 1.0))
        line = Line3D((dx, 0.4, 0.0), (0, 0, 1), 0.0, 1.8)
        model.stems.append(StemEstimate(id=99, line=line, support=100))
        attach_stems(model)
        return fruit.stem_id == 99

    def test_attach_inside_threshold(self):
        assert self.stem_case(STEM_ATTACH_XY_THRESHOLD - 0.005)

    def test_no_attach_outside_threshold(self):
        assert not self.stem_case(STEM_ATTACH_XY_THRESHOLD + 0.01)

    def test_estimate_stems_rejects_horizontal(self):
        model = PlantModel()
        vertical = np.outer(np.linspace(0, 1.0, 100), [0.02, 0.01, 1.0])
        horizontal = np.outer(np.linspace(0, 1.0, 100), [1.0, 0.0, 0.05])
        add_stem_cloud(model, PointCloud(vertical), track_id=1)
        add_stem_cloud(model, PointCloud(horizontal + [2.0, 0, 0]), track_id=2)
        estimate_stems(model)
        assert len(model.stems) == 1

    def test_aligned_stems_merged(self):
        model = PlantModel()
        base = np.outer(np.linspace(0, 0.8, 120), [0.0, 0.0, 1.0])
        add_stem_cloud(model, PointCloud(base), track_id=1)
        add_stem_cloud(model, PointCloud(base + [0.0, 0.0, 0.9]), track_id=2)
        estimate_stems(model)
        assert len(model.stems) == 1
        assert model.stems[0].line.length >= 1.5


class TestPermutationInvariance:
    def test_summary_ignores_stream_order(self):
        centers = [(0.12 * i - 0.3, 0.4, 1.0 + 0.03 * i) for i in range(6)]

        def build(order):
            model = PlantModel()
            for k in order:
                fuse_segment(model, sphere_cloud(centers[k], seed=k),
                             track_id=10 + k)
            complete_shapes(model)
            resolve_overlaps(model)
            return canonical_summary(model)

        rng = np.random.default_rng(13)
        base = build(range(6))
        assert len(base) == 6
        for _ in range(3):
            order = rng.permutation(6)
            assert build(order) == base


class TestFollowingGates:
    def make_fruit(self) -> FruitInstance:
        fruit = FruitInstance(id=1, cloud=PointCloud.empty())
        fruit.center = np.array([0.0, 0.4, 1.0])
        fruit.dims = np.array([0.08, 0.08, 0.10])
        return fruit

    def test_greedy_accept_inside_1cm(self):
        fruit = self.make_fruit()
        det = fruit.center + [GREEDY_ACCEPT_DIST - 0.002, 0, 0]
        assert update_fruit_estimate(fruit, [(det, fruit.dims)])

    def test_candidate_band_accepts_nearest(self):
        fruit = self.make_fruit()
        near = fruit.center + [0.015, 0, 0]
        far = fruit.center + [0.028, 0, 0]
        prev = fruit.center.copy()
        assert update_fruit_estimate(fruit, [(far, fruit.dims),
                                             (near, fruit.dims)])
        # Complementary blend with alpha = 0.5 lands midway to `near`.
        np.testing.assert_allclose(fruit.center, prev + [0.0075, 0, 0],
                                   atol=1e-12)

    def test_outside_band_rejected(self):
        fruit = self.make_fruit()
        det = fruit.center + [CANDIDATE_MAX_DIST + 0.005, 0, 0]
        prev = fruit.center.copy()
        assert not update_fruit_estimate(fruit, [(det, fruit.dims)])
        np.testing.assert_array_equal(fruit.center, prev)

    def test_boundary_distances(self):
        for d, expect in ((GREEDY_ACCEPT_DIST, True),
                          (CANDIDATE_MAX_DIST, True),
                          (CANDIDATE_MAX_DIST + 1e-6, False)):
            fruit = self.make_fruit()
            det = fruit.center + [d, 0, 0]
            assert update_fruit_estimate(fruit, [(det, fruit.dims)]) == expect


class TestViewpose:
    def test_hand_computed_position(self):
        config = ViewposeConfig(head_base=(0.0, 0.0, 0.8))
        p = viewpose_position((1.0, 0.5, 1.2), (0.08, 0.08, 0.10), config)
        # x: 0.8*(1.0-0) + 0 = 0.8; y: 0.5-0.35 = 0.15; z: 1.2+0.10+0.15.
        np.testing.assert_allclose(p, [0.8, 0.15, 1.45], atol=1e-12)

    def test_optical_axis_fixates_fruit(self):
        config = ViewposeConfig(head_base=(0.0, 0.0, 0.8))
        rng = np.random.default_rng(14)
        for _ in range(50):
            center = rng.uniform([-0.5, 0.3, 0.8], [0.5, 0.6, 1.3])
            dims = rng.uniform(0.06, 0.12, 3)
            pose = viewpose(center, dims, config)
            fwd = pose.rotation.apply([0.0, 0.0, 1.0])
            expect = center - pose.trans
            expect /= np.linalg.norm(expect)
            np.testing.assert_allclose(fwd, expect, atol=1e-9)
            assert np.linalg.norm(pose.rotation.apply([0, 0, 1])) == (
                pytest.approx(1.0))

    def test_cut_phase_advances(self):
        config = ViewposeConfig(head_base=(0.0, 0.0, 0.8))
        center, dims = (0.2, 0.5, 1.0), (0.08, 0.08, 0.10)
        grasp = viewpose(center, dims, config, phase="grasp")
        cut = viewpose(center, dims, config, phase="cut")
        d_grasp = np.linalg.norm(np.asarray(center) - grasp.trans)
        d_cut = np.linalg.norm(np.asarray(center) - cut.trans)
        assert d_cut < d_grasp

    def test_invalid_phase(self):
        config = ViewposeConfig()
        with pytest.raises(WorldModelError):
            viewpose((0, 0.5, 1.0), (0.08, 0.08, 0.1), config, phase="pull")


class TestPeduncleRoi:
    def make_camera(self):
        return CameraModel(
            fx=300.0, fy=300.0, cx=160.0, cy=120.0, width=320, height=240,
            pose=look_at_pose((0.0, 0.0, 1.0), (0.0, 0.5, 1.0)))

    def test_hand_computed_box(self):
        # Fruit centered on the optical axis 0.5 m ahead; box corners are at
        # x,y = +/-0.04 and z in [1.0, 1.0 + 0.10 + 0.05]. With the camera
        # looking along +y, the corner pixels follow directly from the
        # pinhole model: u = 160 +/- 300*0.04/y_cam, v from the z corners.
        cam = self.make_camera()
        u0, v0, u1, v1 = peduncle_roi((0.0, 0.5, 1.0), (0.04, 0.04, 0.10), cam)
        assert u0 == pytest.approx(160.0 - 300.0 * 0.04 / 0.46, abs=1e-9)
        assert u1 == pytest.approx(160.0 + 300.0 * 0.04 / 0.46, abs=1e-9)
        # Image v grows downward; the top corner (z = 1.15) gives v0.
        assert v0 == pytest.approx(120.0 - 300.0 * 0.15 / 0.46, abs=1e-9)
        assert v1 == pytest.approx(120.0, abs=1e-9)

    def test_roi_contains_projected_top(self):
        from hortisim.geom import project_point
        rng = np.random.default_rng(15)
        for _ in range(100):
            center = rng.uniform([-0.3, 0.4, 0.8], [0.3, 0.6, 1.2])
            dims = rng.uniform(0.06, 0.12, 3)
            cam_pos = rng.uniform([-0.2, -0.2, 0.8], [0.2, 0.1, 1.3])
            cam = CameraModel(
                fx=300.0, fy=300.0, cx=160.0, cy=120.0, width=320, height=240,
                pose=look_at_pose(cam_pos, center))
            u0, v0, u1, v1 = peduncle_roi(center, dims, cam)
            uv = project_point(cam, center + [0.0, 0.0, dims[2] / 2.0])
            assert uv is not None
            u = np.clip(uv[0], 0, cam.width - 1)
            v = np.clip(uv[1], 0, cam.height - 1)
            assert u0 - 1e-9 <= u <= u1 + 1e-9
            assert v0 - 1e-9 <= v <= v1 + 1e-9

    def test_behind_camera_raises(self):
        cam = self.make_camera()
        with pytest.raises(WorldModelError):
            peduncle_roi((0.0, -1.0, 1.0), (0.04, 0.04, 0.1), cam)


class TestPeduncleBuffer:
    def test_capacity_and_age(self):
        buf = PeduncleBuffer(capacity=2, max_age=0.5)
        pts = np.outer(np.linspace(0, 0.05, 30), [0, 0, 1.0])
        for t in range(4):
            buf.push(float(t), PointCloud(pts + [0.001 * t, 0, 0]))
        assert len(buf.entries) == 2
        # At t=10 every entry is stale.
        assert merge_peduncle_buffer(buf, now=10.0) is None
        out = merge_peduncle_buffer(buf, now=3.2)
        assert out is not None
        fp, sp = out
        assert fp[2] < sp[2]


class TestSerialization:
    def test_model_to_dict(self):
        model = PlantModel()
        fitted_fruit(model, (0.0, 0.4, 1.0))
        data = model_to_dict(model)
        assert len(data["fruits"]) == 1
        assert data["fruits"][0]["center"] is not None
