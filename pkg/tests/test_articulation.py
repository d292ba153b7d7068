import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gsmaps import quat
from gsmaps.articulation import (JointTransforms, Pose, PoseSequenceError, deform_gaussians, forward_kinematics,
                                 load_pose_sequence, parse_pose_sequence, part_crop, pose_shells, pose_to_dict,
                                 regress_joints, skin_vertices, vertex_quaternions)
from gsmaps.mesh import Joint, RigBundle, build_shell_stack
from gsmaps.render import Camera
from gsmaps.shellmap import GaussianAnchors, sample_gaussians


def chain_rig(n_vertices=3, weights=None, basis=None, seed=0):
    """Root at the origin with one child at (1, 0, 0)."""
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(n_vertices, 3))
    if weights is None:
        weights = np.tile([1.0, 0.0], (n_vertices, 1))
    joints = [Joint("root", None, np.zeros(3)), Joint("child", 0, np.array([1.0, 0.0, 0.0]))]
    return RigBundle(v, np.array([[0, 1, 2]]), np.array([[0, 0], [1, 0], [0, 1.0]]), np.array([[0, 1, 2]]),
                     joints, weights, basis, {"both": [0, 1], "child": [1]})


def random_weights(rng, V, J, active=3):
    w = np.zeros((V, J))
    for v in range(V):
        idx = rng.choice(J, size=min(active, J), replace=False)
        w[v, idx] = rng.uniform(0.1, 1.0, len(idx))
    return w / w.sum(axis=1, keepdims=True)


def random_pose(rng, J, scale=0.6):
    return Pose(rng.normal(scale=scale, size=(J, 3)), rng.normal(size=3))


def naive_skin(vertices, R, t, weights):
    out = np.zeros_like(vertices)
    for v in range(len(vertices)):
        for j in range(len(R)):
            out[v] += weights[v, j] * (R[j] @ vertices[v] + t[j])
    return out


def rigid_pose(rig, axis_angle, translation):
    rot = np.zeros((rig.n_joints, 3))
    rot[0] = axis_angle
    return Pose(rot, translation)


class TestRegressJoints:
    def test_empty_shape_returns_stored(self, template):
        assert np.array_equal(regress_joints(template, []), template.rest_joints)
        assert np.array_equal(regress_joints(template, None), template.rest_joints)

    def test_zero_shape(self, template):
        np.testing.assert_allclose(regress_joints(template, np.zeros(2)), template.rest_joints, atol=1e-6)

    def test_weighted_mean_displacement(self):
        basis = np.zeros((3, 3, 1))
        basis[:, 0, 0] = 1.0
        rig = RigBundle(np.eye(3), np.array([[0, 1, 2]]), np.eye(3)[:, :2], np.array([[0, 1, 2]]),
                        [Joint("root", None, np.zeros(3))], np.ones((3, 1)), basis)
        np.testing.assert_allclose(regress_joints(rig, [0.7]), [[0.7, 0.0, 0.0]])

    def test_length_mismatch(self, template):
        with pytest.raises(ValueError, match="expected 2 shape coefficients"):
            regress_joints(template, [1.0, 2.0, 3.0])


class TestForwardKinematics:
    def test_identity_pose(self, template):
        tf = forward_kinematics(template, Pose.rest(template.n_joints))
        R, t = tf.matrices()
        np.testing.assert_allclose(R, np.broadcast_to(np.eye(3), R.shape), atol=1e-15)
        np.testing.assert_allclose(t, 0.0, atol=1e-12)

    def test_child_of_rotated_root(self):
        rig = chain_rig()
        tf = forward_kinematics(rig, rigid_pose(rig, [0, 0, np.pi / 2], np.zeros(3)))
        np.testing.assert_allclose(tf.translation[1], [0.0, 1.0, 0.0], atol=1e-15)

    def test_root_translation(self, template):
        pose = Pose(np.zeros((template.n_joints, 3)), [0, 0, 1])
        R, t = forward_kinematics(template, pose).matrices()
        np.testing.assert_allclose(R, np.broadcast_to(np.eye(3), R.shape), atol=1e-15)
        np.testing.assert_allclose(t, np.tile([0, 0, 1.0], (template.n_joints, 1)), atol=1e-12)

    def test_wrong_joint_count(self, template):
        with pytest.raises(ValueError, match="joint rotations"):
            forward_kinematics(template, Pose.rest(3))

    def test_non_finite_rotation(self):
        with pytest.raises(ValueError, match="finite"):
            Pose(np.array([[np.nan, 0, 0]]))


class TestSkinning:
    def test_identity(self, template):
        tf = forward_kinematics(template, Pose.rest(template.n_joints))
        np.testing.assert_allclose(skin_vertices(template.vertices, tf, template.weights), template.vertices,
                                   atol=1e-12)

    def test_single_joint_rigid(self):
        rig = chain_rig(20)
        pose = rigid_pose(rig, [0.3, -0.2, 0.9], [1.0, 2.0, -0.5])
        tf = forward_kinematics(rig, pose)
        R, t = tf.matrices()
        np.testing.assert_allclose(skin_vertices(rig.vertices, tf, rig.weights), rig.vertices @ R[0].T + t[0],
                                   atol=1e-15)

    def test_half_half_translations(self):
        tf = JointTransforms(np.tile([1.0, 0, 0, 0], (2, 1)), np.array([[1.0, 0, 0], [0, 1.0, 0]]), np.zeros((2, 3)))
        v = np.array([[0.3, -0.4, 2.0]])
        np.testing.assert_allclose(skin_vertices(v, tf, np.array([[0.5, 0.5]])), v + [0.5, 0.5, 0.0])

    def test_matches_dense_loop_on_500_vertices(self):
        rng = np.random.default_rng(0)
        J = 6
        joints = [Joint("j0", None, rng.normal(size=3))] + [Joint(f"j{k}", int(rng.integers(0, k)), rng.normal(size=3))
                                                          for k in range(1, J)]
        rig = RigBundle(rng.normal(size=(500, 3)), np.array([[0, 1, 2]]), np.zeros((3, 2)), np.array([[0, 1, 2]]),
                        joints, random_weights(rng, 500, J))
        tf = forward_kinematics(rig, random_pose(rng, J))
        R, t = tf.matrices()
        np.testing.assert_allclose(skin_vertices(rig.vertices, tf, rig.weights),
                                   naive_skin(rig.vertices, R, t, rig.weights), atol=1e-6)

    def test_shells_share_weights(self, template):
        st_ = build_shell_stack(template, 3, 0.08)
        pose = random_pose(np.random.default_rng(1), template.n_joints, 0.3)
        posed, _, tf = pose_shells(template, st_, pose)
        for k in range(3):
            np.testing.assert_array_equal(posed[k], skin_vertices(st_.shells[k].vertices, tf, template.weights))


class TestVertexQuaternions:
    def tf(self, rotations):
        J = len(rotations)
        return JointTransforms(quat.from_axis_angle(np.asarray(rotations, float)), np.zeros((J, 3)), np.zeros((J, 3)))

    def test_identity(self):
        q = vertex_quaternions(self.tf([[0, 0, 0], [0, 0, 0]]), np.array([[0.3, 0.7], [1.0, 0.0]]))
        np.testing.assert_array_equal(q, np.tile([1.0, 0, 0, 0], (2, 1)))

    def test_single_weight_returns_joint_quaternion(self):
        tf = self.tf([[0.1, 0.2, 0.3], [1.0, -0.5, 0.2]])
        q = vertex_quaternions(tf, np.array([[0.0, 1.0]]))
        np.testing.assert_allclose(q[0], tf.rotation[1], atol=1e-15)

    def test_half_way_between_0_and_90_degrees(self):
        q = vertex_quaternions(self.tf([[0, 0, 0], [0, 0, np.pi / 2]]), np.array([[0.5, 0.5]]))
        np.testing.assert_allclose(q[0], quat.from_axis_angle([0, 0, np.pi / 4]), atol=1e-6)

    def test_opposite_sign_quaternions_do_not_cancel(self):
        # q and -q are the same rotation; hemisphere alignment keeps the blend away from zero
        tf = JointTransforms(np.array([[1.0, 0, 0, 0], [-1.0, 0, 0, 0]]), np.zeros((2, 3)), np.zeros((2, 3)))
        q = vertex_quaternions(tf, np.array([[0.5, 0.5]]))
        np.testing.assert_allclose(np.abs(q[0]), [1, 0, 0, 0])


@pytest.fixture(scope="module")
def setup(template):
    st_ = build_shell_stack(template, 2, 0.08)
    anchors = sample_gaussians(st_, 12000, 0)
    rng = np.random.default_rng(0)
    q = quat.normalize(rng.normal(size=(len(anchors), 4)))
    return template, st_, anchors, q


class TestDeformGaussians:
    def deform(self, setup, pose):
        rig, st_, anchors, q = setup
        posed, vq, _ = pose_shells(rig, st_, pose)
        return deform_gaussians(anchors, posed, st_.faces, vq, q)

    def test_rest_pose_round_trip(self, setup):
        rig, st_, anchors, q = setup
        out = self.deform(setup, Pose.rest(rig.n_joints))
        np.testing.assert_allclose(out.positions, anchors.positions(st_.vertex_array(), st_.faces), atol=1e-6)
        np.testing.assert_allclose(out.rotations, q, atol=1e-6)

    def test_global_rigid_motion(self, setup):
        rig, st_, anchors, q = setup
        aa, t = np.array([0.4, -1.1, 0.7]), np.array([0.5, -2.0, 1.5])
        out = self.deform(setup, rigid_pose(rig, aa, t))
        R = quat.to_matrix(quat.from_axis_angle(aa))
        j0 = rig.rest_joints[0]
        rest = anchors.positions(st_.vertex_array(), st_.faces)
        np.testing.assert_allclose(out.positions, (rest - j0) @ R.T + j0 + t, atol=1e-6)
        expect = quat.multiply(quat.from_axis_angle(aa), q)
        assert quat.same_rotation(out.rotations, expect, atol=1e-6).all()

    def test_anchor_at_vertex(self, setup):
        rig, st_, anchors, q = setup
        pose = random_pose(np.random.default_rng(4), rig.n_joints, 0.4)
        posed, vq, _ = pose_shells(rig, st_, pose)
        bary = np.tile([1.0, 0.0, 0.0], (len(anchors), 1))
        at_vertex = GaussianAnchors(anchors.shell_index, anchors.face_index, bary, anchors.uv)
        out = deform_gaussians(at_vertex, posed, st_.faces, vq, q)
        expect = quat.multiply(vq[st_.faces[anchors.face_index, 0]], q)
        np.testing.assert_allclose(out.rotations, expect, atol=1e-15)

    def test_scales_untouched_and_count(self, setup):
        out = self.deform(setup, random_pose(np.random.default_rng(5), setup[0].n_joints, 0.3))
        assert len(out) == len(setup[2])

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_unit_quaternions_for_random_poses(self, setup, seed):
        out = self.deform(setup, random_pose(np.random.default_rng(seed), setup[0].n_joints, 1.5))
        np.testing.assert_allclose(np.linalg.norm(out.rotations, axis=1), 1.0, atol=1e-6)


class TestPartCrop:
    def rig(self, positions):
        rig = chain_rig()
        for k, p in enumerate(positions):
            rig.joints[k] = Joint(rig.joints[k].name, rig.joints[k].parent, np.asarray(p, float))
        return rig

    def test_joint_on_axis_margin_zero(self):
        cam = Camera(100, 100, 64, 64, 128, 128)
        rig = self.rig([[0, 0, 5], [0, 0, 5]])
        r = part_crop(rig, Pose.rest(2), cam, "both", margin=0.0)
        assert (r.x0, r.y0, r.x1, r.y1) == (64, 64, 65, 65)

    def test_two_joints_hand_computed(self):
        cam = Camera(100, 100, 0, 0, 256, 256)
        rig = self.rig([[1.0, 1.0, 1.0], [1.4, 1.2, 1.0]])
        r = part_crop(rig, Pose.rest(2), cam, "both", margin=0.0)
        assert (r.x0, r.y0, r.x1, r.y1) == (100, 90, 140, 130)
        assert r.x1 - r.x0 == r.y1 - r.y0 == 40

    def test_margin_expands_side(self):
        cam = Camera(100, 100, 0, 0, 256, 256)
        rig = self.rig([[1.0, 1.0, 1.0], [1.4, 1.2, 1.0]])
        r = part_crop(rig, Pose.rest(2), cam, "both", margin=0.5)
        assert r.x1 - r.x0 == 60

    def test_behind_camera_is_empty(self):
        cam = Camera(100, 100, 64, 64, 128, 128)
        r = part_crop(self.rig([[0, 0, -3], [1, 0, -3]]), Pose.rest(2), cam, "both")
        assert r.empty

    def test_unknown_part(self):
        with pytest.raises(KeyError, match="wing"):
            part_crop(chain_rig(), Pose.rest(2), Camera(1, 1, 0, 0, 4, 4), "wing")


class TestPoseSequence:
    def test_parse_and_round_trip(self, template, tmp_path):
        doc = {"shape": [0.1, -0.2], "frames": [
            {"root_translation": [0, 1, 0], "rotations": {"l_elbow": [0, 0, 0.5]}},
            {"rotations": {}},
        ]}
        p = tmp_path / "poses.json"
        p.write_text(json.dumps(doc))
        poses = load_pose_sequence(p, template)
        assert len(poses) == 2
        assert poses[0].joint_rotations[template.joint_index("l_elbow"), 2] == 0.5
        assert pose_to_dict(poses[0], template.joint_names)["rotations"] == {"l_elbow": [0, 0, 0.5]}

    def test_unknown_joint(self, template):
        with pytest.raises(PoseSequenceError, match="tail"):
            parse_pose_sequence({"frames": [{"rotations": {"tail": [0, 0, 1]}}]}, template)

    def test_bad_shape_length(self, template):
        with pytest.raises(PoseSequenceError, match="shape"):
            parse_pose_sequence({"shape": [1.0], "frames": []}, template)
