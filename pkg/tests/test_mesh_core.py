import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gsmaps.mesh import (Mesh, RigError, ShellBuildError, ShellStack, build_shell_stack, check_shell_separation,
                         laplacian_offset, load_obj, load_rig_bundle, rig_from_dict, save_rig_bundle,
                         vertex_normals)
from gsmaps.template import icosphere, mannequin, sphere_rig

from conftest import triangle_rig


def minimal_doc(**over):
    doc = {
        "version": 1,
        "vertices": [[0, 0, 0], [1, 0, 0], [0, 1, 0]],
        "faces": [[0, 1, 2]],
        "uvs": [[0, 0], [1, 0], [0, 1]],
        "uv_faces": [[0, 1, 2]],
        "joints": [{"name": "root", "parent": None, "rest": [0, 0, 0]}],
        "weights": [[0, 0, 1.0], [1, 0, 1.0], [2, 0, 1.0]],
    }
    doc.update(over)
    return doc


def mean_radius(v):
    return float(np.linalg.norm(v, axis=1).mean())


def naive_smoothing(vertices, faces, factor, iterations):
    """Per-vertex loop over explicit neighbor sets."""
    nbrs = [set() for _ in range(len(vertices))]
    for a, b, c in faces:
        nbrs[a] |= {b, c}
        nbrs[b] |= {a, c}
        nbrs[c] |= {a, b}
    v = np.array(vertices, dtype=np.float64)
    for _ in range(iterations):
        new = v.copy()
        for i, ns in enumerate(nbrs):
            centroid = np.mean([v[j] for j in sorted(ns)], axis=0)
            new[i] = v[i] + factor * (centroid - v[i])
        v = new
    return v


class TestRigBundle:
    def test_minimal_bundle(self, tmp_path):
        p = tmp_path / "rig.json"
        p.write_text(json.dumps(minimal_doc()))
        rig = load_rig_bundle(p)
        assert rig.vertices.shape == (3, 3)
        assert rig.n_joints == 1
        np.testing.assert_array_equal(rig.weights[:, 0], 1.0)

    def test_small_weight_drift_is_renormalized(self):
        doc = minimal_doc(weights=[[0, 0, 0.9995], [1, 0, 0.9995], [2, 0, 0.9995]])
        rig = rig_from_dict(doc)
        np.testing.assert_allclose(rig.weights.sum(axis=1), 1.0, atol=1e-15)

    def test_large_weight_drift_rejected(self):
        with pytest.raises(RigError, match="vertex 0"):
            rig_from_dict(minimal_doc(weights=[[0, 0, 0.9], [1, 0, 1.0], [2, 0, 1.0]]))

    def test_child_before_parent_rejected(self):
        joints = [{"name": "child", "parent": 1, "rest": [0, 0, 0]}, {"name": "root", "parent": None, "rest": [0, 0, 0]}]
        with pytest.raises(RigError, match="joint order"):
            rig_from_dict(minimal_doc(joints=joints, weights=[[0, 1, 1.0], [1, 1, 1.0], [2, 1, 1.0]]))

    def test_unsupported_version(self):
        with pytest.raises(RigError, match="version"):
            rig_from_dict(minimal_doc(version=7))

    def test_face_index_out_of_range_names_face(self):
        with pytest.raises(RigError, match="face 0"):
            rig_from_dict(minimal_doc(faces=[[0, 1, 5]]))

    def test_unparseable_file(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        with pytest.raises(RigError, match="cannot parse"):
            load_rig_bundle(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="nope.json"):
            load_rig_bundle(tmp_path / "nope.json")

    def test_save_load_round_trip(self, tmp_path):
        rig = mannequin(1)
        save_rig_bundle(rig, tmp_path / "m.json")
        back = load_rig_bundle(tmp_path / "m.json")
        np.testing.assert_allclose(back.vertices, rig.vertices, atol=1e-7)
        np.testing.assert_array_equal(back.faces, rig.faces)
        np.testing.assert_allclose(back.weights, rig.weights, atol=1e-8)
        assert back.parts == rig.parts
        assert back.joint_names == rig.joint_names

    def test_shipped_template_is_valid(self, template):
        template.validate()
        assert len(template.faces) == len(template.uv_faces)
        assert "left_hand" in template.parts


class TestObj:
    def test_quad_is_fan_triangulated(self, tmp_path):
        p = tmp_path / "q.obj"
        p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvt 0 0\nvt 1 0\nvt 1 1\nvt 0 1\nf 1/1 2/2 3/3 4/4\n")
        m = load_obj(p)
        np.testing.assert_array_equal(m.faces, [[0, 1, 2], [0, 2, 3]])
        np.testing.assert_array_equal(m.uv_faces, [[0, 1, 2], [0, 2, 3]])


class TestLaplacianOffset:
    def setup_method(self):
        v, f = icosphere(2)
        self.mesh = Mesh(v, f)

    def test_zero_factor_is_bitwise_identity(self):
        out = laplacian_offset(self.mesh, 0.0, 25)
        assert np.array_equal(out.vertices, self.mesh.vertices)

    def test_deflation_shrinks(self):
        out = laplacian_offset(self.mesh, 0.5, 10)
        assert mean_radius(out.vertices) < mean_radius(self.mesh.vertices)

    def test_inflation_grows(self):
        out = laplacian_offset(self.mesh, -0.5, 10)
        assert mean_radius(out.vertices) > mean_radius(self.mesh.vertices)

    @pytest.mark.parametrize("factor", [0.5, -0.5])
    def test_matches_naive_loop(self, factor):
        out = laplacian_offset(self.mesh, factor, 10)
        ref = naive_smoothing(self.mesh.vertices, self.mesh.faces, factor, 10)
        np.testing.assert_allclose(out.vertices, ref, atol=1e-12)

    def test_connectivity_unchanged(self):
        out = laplacian_offset(self.mesh, 0.3, 3)
        assert out.faces is self.mesh.faces

    @pytest.mark.parametrize("factor", [1.0, -1.0, 2.5])
    def test_unstable_factor_rejected(self, factor):
        with pytest.raises(ValueError, match="stability"):
            laplacian_offset(self.mesh, factor, 1)

    def test_isolated_vertex_rejected(self):
        v = np.vstack([self.mesh.vertices, [[5.0, 5.0, 5.0]]])
        with pytest.raises(ValueError, match=f"isolated vertex {len(v) - 1}"):
            laplacian_offset(Mesh(v, self.mesh.faces), 0.1, 1)


class TestBuildShellStack:
    def test_single_shell_is_template(self, template):
        st_ = build_shell_stack(template, 1, 0.08)
        assert st_.n_shells == 1 and st_.base_index == 0
        assert np.array_equal(st_.shells[0].vertices, template.vertices)

    def test_default_stack_adjacent_offset(self, template):
        st_ = build_shell_stack(template, 8, 0.08)
        assert st_.n_shells == 8
        n = vertex_normals(template.vertices, template.faces)
        V = st_.vertex_array()
        for k in range(7):
            d = np.mean(np.sum((V[k + 1] - V[k]) * n, axis=1))
            assert abs(d - 0.08) <= 0.05 * 0.08

    def test_sphere_radii(self):
        rig = sphere_rig(2)
        st_ = build_shell_stack(rig, 3, 0.1)
        for shell, r in zip(st_.shells, (0.9, 1.0, 1.1)):
            assert abs(mean_radius(shell.vertices) - r) <= 0.05 * r

    def test_connectivity_shared(self, template):
        st_ = build_shell_stack(template, 4, 0.08)
        for s in st_.shells:
            assert np.array_equal(s.faces, template.faces)
            assert np.array_equal(s.uv_faces, template.uv_faces)

    def test_intermediate_shells_are_exact_lerps(self):
        st_ = build_shell_stack(sphere_rig(2), 6, 0.05)
        V = st_.vertex_array()
        for k in range(6):
            t = k / 5
            assert np.array_equal(V[k], (1.0 - t) * V[0] + t * V[-1])

    def test_offset_too_large_reports_achieved_displacement(self):
        with pytest.raises(ShellBuildError, match="mean displacement"):
            build_shell_stack(sphere_rig(1), 3, 5.0)

    def test_invalid_arguments(self, sphere):
        with pytest.raises(ValueError):
            build_shell_stack(sphere, 0, 0.1)
        with pytest.raises(ValueError):
            build_shell_stack(sphere, 3, 0.0)

    def test_save_load_round_trip(self, tmp_path, sphere_stack):
        sphere_stack.save(tmp_path / "s.npz")
        back = ShellStack.load(tmp_path / "s.npz")
        assert np.array_equal(back.vertex_array(), sphere_stack.vertex_array())
        assert back.base_index == sphere_stack.base_index
        sphere_stack.save(tmp_path / "t.npz")
        assert (tmp_path / "s.npz").read_bytes() == (tmp_path / "t.npz").read_bytes()

    @settings(max_examples=15, deadline=None)
    @given(n=st.integers(2, 9), offset=st.floats(0.01, 0.1))
    def test_sphere_radius_monotone(self, n, offset):
        st_ = build_shell_stack(sphere_rig(1), n, offset)
        radii = [mean_radius(s.vertices) for s in st_.shells]
        assert all(a < b for a, b in zip(radii, radii[1:]))


class TestSeparation:
    def test_concentric_spheres_have_no_flags(self):
        report = check_shell_separation(build_shell_stack(sphere_rig(2), 5, 0.05))
        assert report.flag_count == 0
        assert np.all(report.min_gaps > 0)

    def test_one_swapped_vertex_is_flagged(self):
        st_ = build_shell_stack(sphere_rig(2), 3, 0.05)
        V = st_.vertex_array()
        V[[0, 1], 17] = V[[1, 0], 17]
        report = check_shell_separation(st_.with_vertex_array(V))
        assert report.flag_count == 1
        assert report.flagged.tolist() == [[0, 17]]

    def test_default_template_baseline(self, template):
        # measured once on the shipped mannequin
        report = check_shell_separation(build_shell_stack(template, 8, 0.08))
        assert report.flag_count == 0
        np.testing.assert_allclose(report.min_gaps, 0.02916838, rtol=1e-6)

    def test_single_shell_report_is_empty(self):
        report = check_shell_separation(build_shell_stack(triangle_rig_mesh(), 1, 0.1))
        assert report.flag_count == 0 and len(report.min_gaps) == 0


def triangle_rig_mesh():
    return triangle_rig().template_mesh()
