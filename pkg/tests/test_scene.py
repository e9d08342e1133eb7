import math

import numpy as np
import pytest

from shadowkit.scene import (Box, CameraPose, Emitter, PerturbationSpec, Plane,
                             Scene, SceneError, Sphere, Trajectory, TriMesh,
                             emitter_radius, load_scene, load_trajectory,
                             sample_perturbation, trajectory_at)


class TestEmitter:
    def test_radius_endpoints(self):
        assert emitter_radius(0.0) == 0.0
        assert emitter_radius(4.0) == pytest.approx(0.25)

    def test_radius_monotone_linear(self):
        s = np.linspace(0, 4, 17)
        r = [emitter_radius(x) for x in s]
        assert all(b > a for a, b in zip(r, r[1:]))
        np.testing.assert_allclose(r, s * 0.0625)

    def test_out_of_range_rejected(self):
        with pytest.raises(SceneError):
            Emitter((0, 0, 0), 4.5)
        with pytest.raises(SceneError):
            Emitter((0, 0, 0), -0.1)


class TestCamera:
    def test_orthonormal_basis(self):
        cam = CameraPose((0, 1, -3), (0.2, -0.3, 1.0), (0, 1, 0),
                         math.radians(50), (64, 128))
        assert np.linalg.norm(cam.forward) == pytest.approx(1.0)
        assert np.linalg.norm(cam.up) == pytest.approx(1.0)
        assert abs(cam.forward @ cam.up) < 1e-12
        assert abs(cam.forward @ cam.right) < 1e-12

    def test_project_inverts_rays(self):
        cam = CameraPose.look_at((0, 2, -3), (0, 0, 0), resolution=(48, 96))
        dirs = cam.pixel_rays()
        pts = cam.position + 2.5 * dirs.reshape(-1, 3)
        row, col, depth = cam.project(pts)
        ys, xs = np.mgrid[0:48, 0:96]
        np.testing.assert_allclose(row, ys.ravel(), atol=1e-9)
        np.testing.assert_allclose(col, xs.ravel(), atol=1e-9)
        assert np.all(depth > 0)

    def test_degenerate_up_rejected(self):
        with pytest.raises(SceneError):
            CameraPose((0, 0, 0), (0, 1, 0), (0, 1, 0), 1.0, (8, 8))


class TestPrimitives:
    def test_sphere_axial_hit(self):
        s = Sphere((0, 0, 5), 1.0)
        t, n = s.intersect(np.array([[0.0, 0, 0]]), np.array([[0.0, 0, 1]]))
        assert t[0] == pytest.approx(4.0)
        np.testing.assert_allclose(n[0], [0, 0, -1])

    def test_box_face_normal(self):
        b = Box((-1, -1, 2), (1, 1, 4))
        t, n = b.intersect(np.array([[0.0, 0, 0]]), np.array([[0.0, 0, 1]]))
        assert t[0] == pytest.approx(2.0)
        np.testing.assert_allclose(n[0], [0, 0, -1])

    def test_plane_extent(self):
        p = Plane((0, 0, 0), (0, 1, 0), (1.0, 1.0))
        origins = np.array([[0.0, 1, 0], [3.0, 1, 0]])
        dirs = np.array([[0.0, -1, 0], [0.0, -1, 0]])
        t, _ = p.intersect(origins, dirs)
        assert t[0] == pytest.approx(1.0)
        assert np.isinf(t[1])

    def test_mesh_triangle(self):
        m = TriMesh(np.array([[-1, 0, 3], [1, 0, 3], [0, 2, 3]], float),
                    np.array([[0, 1, 2]]))
        t, n = m.intersect(np.array([[0.0, 0.5, 0]]), np.array([[0.0, 0, 1]]))
        assert t[0] == pytest.approx(3.0)
        assert n[0] @ np.array([0, 0, 1]) < 0  # faces the ray

    def test_scene_needs_objects(self):
        with pytest.raises(SceneError):
            Scene((), Emitter((0, 2, 0), 0.0))

    def test_occluder_depth_range_sphere(self):
        scene = Scene((Plane((0, 0, 0), (0, 1, 0)), Sphere((0, 1, 0), 0.5)),
                      Emitter((0, 4, 0), 1.0))
        z_min, z_max = scene.occluder_depth_range((0, 4, 0))
        assert z_min == pytest.approx(3.0 - 0.5)
        assert z_max == pytest.approx(3.0 + 0.5)


class TestTrajectory:
    def _traj(self):
        poses = [CameraPose.look_at((0, 0, -3), (0, 0, 0), resolution=(8, 16)),
                 CameraPose.look_at((2, 0, -3), (0, 0, 0), resolution=(8, 16))]
        return Trajectory(np.array([0.0, 1.0]), poses=tuple(poses))

    def test_keyframe_identity(self):
        traj = self._traj()
        np.testing.assert_allclose(trajectory_at(traj, 0.0).position, [0, 0, -3])
        np.testing.assert_allclose(trajectory_at(traj, 1.0).position, [2, 0, -3])

    def test_midpoint(self):
        pts = Trajectory(np.array([0.0, 1.0]),
                         points=np.array([[0.0, 0, 0], [2.0, 0, 0]]))
        np.testing.assert_allclose(trajectory_at(pts, 0.5), [1.0, 0, 0])

    def test_clamping(self):
        traj = self._traj()
        np.testing.assert_allclose(trajectory_at(traj, -1.0).position, [0, 0, -3])
        np.testing.assert_allclose(trajectory_at(traj, 9.0).position, [2, 0, -3])

    def test_continuity_at_keys(self):
        traj = self._traj()
        for t in (0.0, 0.5, 1.0):
            a = trajectory_at(traj, t - 1e-9)
            b = trajectory_at(traj, t + 1e-9)
            assert np.linalg.norm(a.position - b.position) < 1e-7
            assert np.linalg.norm(a.forward - b.forward) < 1e-7

    def test_unsorted_times_rejected(self):
        with pytest.raises(SceneError):
            Trajectory(np.array([1.0, 0.0]),
                       points=np.array([[0, 0, 0], [1, 1, 1.0]]))


class TestPerturbation:
    def _scene(self):
        return Scene((Plane((0, 0, 0), (0, 1, 0)), Sphere((0, 1, 0), 0.5)),
                     Emitter((0, 4, 0), 2.0))

    def test_zero_scales_are_identity(self, rng):
        scene = self._scene()
        cam = CameraPose.look_at((0, 2, -3), (0, 0, 0), resolution=(8, 16))
        spec = PerturbationSpec(count=4, camera_scale=0.0, emitter_scale=0.0)
        for c, e in sample_perturbation(scene, cam, spec, rng):
            np.testing.assert_array_equal(c.position, cam.position)
            np.testing.assert_array_equal(e.center, scene.emitter.center)

    def test_exact_displacement_norms(self, rng):
        scene = self._scene()
        cam = CameraPose.look_at((0, 2, -10), (0, 0, 0), resolution=(8, 16))
        spec = PerturbationSpec(count=8, camera_scale=0.01, emitter_scale=0.1)
        d_scene = np.linalg.norm(cam.position - scene.bounds_center)
        for c, e in sample_perturbation(scene, cam, spec, rng):
            assert np.linalg.norm(c.position - cam.position) == pytest.approx(
                0.01 * d_scene)
            assert np.linalg.norm(e.center - scene.emitter.center) == pytest.approx(
                0.1 * max(scene.emitter.radius, 0.01))
            # orientation untouched
            np.testing.assert_array_equal(c.forward, cam.forward)

    def test_point_light_uses_radius_floor(self, rng):
        scene = Scene(self._scene().objects, Emitter((0, 4, 0), 0.0))
        cam = CameraPose.look_at((0, 2, -3), (0, 0, 0), resolution=(8, 16))
        spec = PerturbationSpec(count=2, camera_scale=0.0, emitter_scale=1.0)
        for _, e in sample_perturbation(scene, cam, spec, rng):
            assert np.linalg.norm(e.center - scene.emitter.center) == pytest.approx(0.01)

    def test_three_distinct_states(self, rng):
        scene = self._scene()
        cam = CameraPose.look_at((0, 2, -3), (0, 0, 0), resolution=(8, 16))
        out = sample_perturbation(scene, cam, PerturbationSpec(count=3), rng)
        assert len(out) == 3
        positions = [tuple(c.position) for c, _ in out]
        assert len(set(positions)) == 3


class TestConfigLoading:
    def test_scene_round_trip(self, tmp_path):
        from shadowkit.experiments import canonical_scene_toml
        path = tmp_path / "scene.toml"
        path.write_text(canonical_scene_toml())
        scene, camera, spec = load_scene(path)
        assert len(scene.objects) == 2
        assert scene.emitter.size_index == 2.0
        assert camera.resolution == (128, 256)
        assert spec.count == 3

    def test_trajectory_round_trip(self, tmp_path):
        from shadowkit.experiments import (emitter_pan_trajectory_toml,
                                           orbit_trajectory_toml)
        path = tmp_path / "traj.toml"
        path.write_text(orbit_trajectory_toml(keys=3) + "\n"
                        + emitter_pan_trajectory_toml())
        cam = CameraPose.look_at((0, 2, -3), (0, 0, 0), resolution=(8, 16))
        trajs = load_trajectory(path, cam)
        assert set(trajs) == {"camera", "emitter"}
        pose = trajectory_at(trajs["camera"], 0.5)
        assert pose.resolution == cam.resolution

    def test_missing_section_errors(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("[scene]\n")
        with pytest.raises(SceneError):
            load_scene(path)
