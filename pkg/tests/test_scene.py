import numpy as np
import pytest
from scipy.spatial import cKDTree

from occsplat.errors import ContractError
from occsplat.geometry import RigidTransform
from occsplat.grids import GridSpec
from occsplat.scene import (LidarPattern, Primitive, SceneRecipe, World,
                            aggregate_sweeps, class_palette, default_cameras,
                            generate_scene, ground_slab, rasterize_ground_truth,
                            render_views, simulate_lidar)

GRID = GridSpec((-10.0, -10.0, -0.5), 0.5, (40, 40, 8))


def _worlds_equal(a: World, b: World) -> bool:
    if len(a.primitives) != len(b.primitives):
        return False
    for pa, pb in zip(a.primitives, b.primitives):
        if (pa.kind != pb.kind or pa.class_id != pb.class_id or pa.yaw != pb.yaw
                or not np.array_equal(pa.center, pb.center)
                or not np.array_equal(pa.extent, pb.extent)):
            return False
    return True


class TestGenerateScene:
    def test_primitive_count(self):
        w = generate_scene(0, SceneRecipe(n_boxes=2, n_spheres=0), 6, GRID)
        assert len(w.primitives) == 3  # 1 ground + 2 boxes
        assert w.primitives[0].kind == "ground"

    def test_same_seed_same_world(self):
        r = SceneRecipe()
        assert _worlds_equal(generate_scene(7, r, 6), generate_scene(7, r, 6))

    def test_zero_extent_rejected(self):
        with pytest.raises(ContractError):
            Primitive("box", np.zeros(3), np.array([1.0, 0.0, 1.0]), 2)
        with pytest.raises(ContractError):
            generate_scene(0, SceneRecipe(box_extent=(0.0, 1.0)), 6)


class TestRasterize:
    def test_empty_world_all_zero(self):
        grid = rasterize_ground_truth(World([], 6), GRID)
        assert not grid.values.any()

    def test_unit_box_matches_point_in_box_oracle(self):
        spec = GridSpec((-2.0, -2.0, -2.0), 0.5, (8, 8, 8))
        center = np.array([0.25, 0.25, 0.25])  # a voxel center
        box = Primitive("box", center, np.array([1.0, 1.0, 1.0]), 3)
        labels = rasterize_ground_truth(World([box], 6), spec).values
        expected = np.zeros(spec.dims, dtype=np.uint8)
        centers = spec.centers()
        inside = np.all(np.abs(centers - center) <= 0.5, axis=-1)
        expected[inside] = 3
        np.testing.assert_array_equal(labels, expected)
        assert labels.sum() > 0

    def test_ground_plane_labels_exactly_one_layer(self):
        labels = rasterize_ground_truth(World([ground_slab(0.0, 0.5, 1)], 6), GRID).values
        occupied_layers = np.unique(np.nonzero(labels)[2])
        np.testing.assert_array_equal(occupied_layers, [0])
        assert (labels[:, :, 0] == 1).all()

    def test_last_primitive_wins(self):
        spec = GridSpec((-1.0, -1.0, -1.0), 0.5, (4, 4, 4))
        a = Primitive("box", np.zeros(3), np.ones(3), 2)
        b = Primitive("box", np.zeros(3), np.ones(3), 4)
        assert (rasterize_ground_truth(World([a, b], 6), spec).values[1, 1, 1]) == 4
        assert (rasterize_ground_truth(World([b, a], 6), spec).values[1, 1, 1]) == 2


class TestSimulateLidar:
    def test_occluded_sphere_gets_no_points(self):
        box = Primitive("box", np.array([3.0, 0.0, 0.0]), np.array([1.0, 4.0, 4.0]), 2)
        sphere = Primitive("sphere", np.array([6.0, 0.0, 0.0]), np.ones(3), 3)
        world = World([box, sphere], 6)
        pose = RigidTransform()
        pc = simulate_lidar(world, pose, LidarPattern(64, (0.0,), 50.0))
        pts = pc.world_points()
        assert len(pc) > 0
        d_sphere = np.linalg.norm(pts - sphere.center, axis=1)
        assert np.sum(np.abs(d_sphere - 1.0) < 1e-6) == 0
        assert pts[:, 0].max() <= 3.5 + 1e-9  # everything stops at the box

    def test_plane_hits_match_ray_plane_oracle(self):
        world = World([ground_slab(0.0, 0.5, 1)], 6)
        pose = RigidTransform(t=np.array([0.0, 0.0, 1.5]))
        elev = -0.5
        pc = simulate_lidar(world, pose, LidarPattern(8, (elev,), 100.0))
        assert len(pc) == 8
        # ray-plane oracle: o_z + t*sin(e) = 0 -> t = -o_z / sin(e)
        t_expected = -1.5 / np.sin(elev)
        np.testing.assert_allclose(np.linalg.norm(pc.points, axis=1), t_expected,
                                   atol=1e-9)
        np.testing.assert_allclose(pc.world_points()[:, 2], 0.0, atol=1e-9)

    def test_empty_world_empty_cloud(self):
        pc = simulate_lidar(World([], 6), RigidTransform(), LidarPattern())
        assert len(pc) == 0

    def test_first_hit_property_by_remarching(self):
        world = generate_scene(3, SceneRecipe(), 6, GRID)
        pose = RigidTransform(t=np.array([0.5, -0.5, 1.4]))
        pc = simulate_lidar(world, pose, LidarPattern(24, (-0.3, -0.1), 30.0))
        pts_world = pc.world_points()
        dirs = pc.points / np.linalg.norm(pc.points, axis=1, keepdims=True)
        dirs_world = pose.rotate(dirs)
        for i in range(len(pc)):
            t_hit = np.linalg.norm(pc.points[i])
            ts = np.linspace(1e-3, t_hit - 1e-3, 400)
            march = pose.t + ts[:, None] * dirs_world[i]
            for prim in world.primitives:
                assert not prim.contains(march).any(), "hit is not the first surface"
        assert len(pc) > 0 and pts_world.shape[1] == 3


class TestAggregateSweeps:
    def test_single_sweep_is_frame_transform(self):
        pose = RigidTransform(t=np.array([1.0, 2.0, 0.5]))
        pc = simulate_lidar(World([ground_slab(0.0, 0.5, 1)], 6), pose,
                            LidarPattern(16, (-0.4,), 50.0))
        agg = aggregate_sweeps([pc])
        np.testing.assert_allclose(agg.points, pc.world_points(), atol=1e-12)
        assert len(agg) == len(pc)

    def test_duplicate_sweeps_double_the_count(self):
        pose = RigidTransform(t=np.array([0.0, 0.0, 1.5]))
        pc = simulate_lidar(World([ground_slab(0.0, 0.5, 1)], 6), pose,
                            LidarPattern(16, (-0.4,), 50.0))
        agg = aggregate_sweeps([pc, pc])
        assert len(agg) == 2 * len(pc)
        np.testing.assert_allclose(agg.points[:len(pc)], agg.points[len(pc):])

    def test_aggregate_is_superset_of_each_sweep(self):
        world = generate_scene(5, SceneRecipe(), 6, GRID)
        sweeps = []
        for k in range(4):
            pose = RigidTransform(t=np.array([-6.0 + 4.0 * k, 0.0, 1.5]))
            sweeps.append(simulate_lidar(world, pose, LidarPattern(32, (-0.3,), 40.0)))
        agg = aggregate_sweeps(sweeps)
        assert len(agg) == sum(len(s) for s in sweeps)
        tree = cKDTree(agg.points)
        for s in sweeps:
            if len(s):
                d, _ = tree.query(s.world_points())
                assert d.max() < 1e-9

    def test_hidden_faces_appear_across_sweeps(self):
        box = Primitive("box", np.array([0.0, 3.0, 0.5]), np.ones(3), 2)
        world = World([box], 6)
        pattern = LidarPattern(128, (-0.12, 0.0), 30.0)
        poses = [RigidTransform(t=np.array([x, 0.0, 1.0]))
                 for x in np.linspace(-6, 6, 20)]
        sweeps = [simulate_lidar(world, p, pattern) for p in poses]

        def on_plus_x_face(pts):
            return np.sum((np.abs(pts[:, 0] - 0.5) < 1e-6)
                          & (np.abs(pts[:, 1] - 3.0) < 0.5 + 1e-6))

        assert on_plus_x_face(sweeps[0].world_points()) == 0  # viewed from -x
        assert on_plus_x_face(aggregate_sweeps(sweeps).points) > 0


class TestRenderViews:
    def test_empty_world_is_black(self):
        imgs = render_views(World([], 6), default_cameras(1, (64, 64)))
        assert imgs[0].shape == (64, 64, 3)
        assert not imgs[0].any()

    def test_frustum_filling_box_color(self):
        box = Primitive("box", np.array([3.0, 0.0, 1.6]), np.array([1.0, 50.0, 50.0]), 4)
        world = World([box], 6)
        cam = default_cameras(1, (64, 64))[0]
        img = render_views(world, [cam])[0]
        pal = class_palette(6)[4]
        shade = img.max(axis=-1) / pal.max()
        assert (shade > 0).all()
        np.testing.assert_allclose(img, shade[:, :, None] * pal, atol=1e-12)

    def test_surface_point_projects_to_its_palette_color(self):
        box = Primitive("box", np.array([4.0, 0.5, 1.0]), np.array([2.0, 1.0, 2.0]), 3)
        world = World([ground_slab(0.0, 0.5, 1), box], 6)
        cam = default_cameras(4, (128, 128), focal=64.0)[0]  # faces +x
        surface = np.array([3.0, 0.5, 1.2])  # on the box's -x face
        p_cam = cam.extrinsics.apply(surface)
        pix = np.array([cam.fx * p_cam[0] / p_cam[2] + cam.cx,
                        cam.fy * p_cam[1] / p_cam[2] + cam.cy])
        img = render_views(world, [cam])[0]
        color = img[int(round(pix[1])), int(round(pix[0]))]
        pal = class_palette(6)[3]
        shade = color.max() / pal.max()
        assert shade > 0
        np.testing.assert_allclose(color, shade * pal, atol=5e-2)

    def test_indivisible_image_dims_rejected(self):
        cam = default_cameras(1, (64, 64))[0]
        cam.image_size = (60, 64)
        with pytest.raises(ContractError):
            render_views(World([], 6), [cam])
