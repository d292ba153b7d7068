"""Skeletal articulation of shells and the Gaussians anchored on them."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import quat
from .mesh import RigBundle, ShellStack
from .shellmap import GaussianAnchors


@dataclass
class Pose:
    """Per-joint axis-angle rotations (radians), root translation, shape coefficients."""

    joint_rotations: np.ndarray
    root_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    shape_coeffs: Optional[np.ndarray] = None

    def __post_init__(self):
        self.joint_rotations = np.asarray(self.joint_rotations, dtype=np.float64).reshape(-1, 3)
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64).reshape(3)
        if self.shape_coeffs is not None:
            self.shape_coeffs = np.asarray(self.shape_coeffs, dtype=np.float64).ravel()
        if not np.all(np.isfinite(self.joint_rotations)):
            raise ValueError("joint rotations must be finite")

    @classmethod
    def rest(cls, n_joints: int) -> "Pose":
        return cls(np.zeros((n_joints, 3)))


@dataclass
class JointTransforms:
    """World rotations/translations per joint and the derived skinning transforms.

    A skinning transform maps a rest-pose point ``v`` to
    ``rotate(rotation[j], v - rest[j]) + translation[j]``.
    """

    rotation: np.ndarray  # (J, 4) world rotations, unit quaternions
    translation: np.ndarray  # (J, 3) posed joint positions
    rest: np.ndarray  # (J, 3) rest joint positions (after shape regression)

    def matrices(self):
        """Skinning transforms as (J, 3, 3) rotations and (J, 3) offsets: x' = R x + t."""
        R = quat.to_matrix(self.rotation)
        t = self.translation - np.einsum("jab,jb->ja", R, self.rest)
        return R, t


@dataclass
class PosedGaussians:
    positions: np.ndarray
    rotations: np.ndarray

    def __len__(self):
        return len(self.positions)


def regress_joints(rig: RigBundle, shape_coeffs=None) -> np.ndarray:
    """Rest joint positions for shape coefficients.

    Each joint moves by the skinning-weight average of the shape-induced
    vertex displacements.
    """
    rest = rig.rest_joints
    if shape_coeffs is None or len(shape_coeffs) == 0:
        return rest
    beta = np.asarray(shape_coeffs, dtype=np.float64)
    if rig.shape_basis is None or rig.shape_basis.shape[2] != len(beta):
        have = 0 if rig.shape_basis is None else rig.shape_basis.shape[2]
        raise ValueError(f"expected {have} shape coefficients, got {len(beta)}")
    disp = rig.shape_basis @ beta  # (V, 3)
    w = rig.weights
    wsum = w.sum(axis=0)
    offset = (w.T @ disp) / np.where(wsum > 0, wsum, 1.0)[:, None]
    return rest + offset


def shaped_vertices(rig: RigBundle, vertices: np.ndarray, shape_coeffs=None) -> np.ndarray:
    if shape_coeffs is None or len(shape_coeffs) == 0:
        return vertices
    return vertices + rig.shape_basis @ np.asarray(shape_coeffs, dtype=np.float64)


def forward_kinematics(rig: RigBundle, pose: Pose) -> JointTransforms:
    J = rig.n_joints
    if len(pose.joint_rotations) != J:
        raise ValueError(f"pose has {len(pose.joint_rotations)} joint rotations, rig has {J}")
    rest = regress_joints(rig, pose.shape_coeffs)
    local = quat.from_axis_angle(pose.joint_rotations)
    rot = np.empty((J, 4))
    pos = np.empty((J, 3))
    for j, joint in enumerate(rig.joints):
        if joint.parent is None:
            rot[j] = local[j]
            pos[j] = rest[j] + pose.root_translation
        else:
            p = joint.parent
            rot[j] = quat.normalize(quat.multiply(rot[p], local[j]))
            pos[j] = pos[p] + quat.rotate(rot[p], rest[j] - rest[p])
    return JointTransforms(rot, pos, rest)


def skin_vertices(vertices: np.ndarray, transforms: JointTransforms, weights: np.ndarray) -> np.ndarray:
    """Linear blend skinning of (V, 3) or (N, V, 3) vertices; shells share the weights."""
    R, t = transforms.matrices()
    # blended affine map per vertex, then apply
    A = np.einsum("vj,jab->vab", weights, R)
    b = weights @ t
    return np.einsum("vab,...vb->...va", A, vertices) + b


def _align_hemisphere(qs: np.ndarray, ref: np.ndarray) -> np.ndarray:
    sign = np.where(np.sum(qs * ref, axis=-1, keepdims=True) < 0, -1.0, 1.0)
    return qs * sign


def vertex_quaternions(transforms: JointTransforms, weights: np.ndarray) -> np.ndarray:
    """Per-vertex rotation from weighted quaternion blending (QLERP).

    Joint quaternions are flipped into the hemisphere of the vertex's
    highest-weight joint before blending, then normalized.
    """
    q = transforms.rotation
    top = np.argmax(weights, axis=1)
    ref = q[top]  # (V, 4)
    aligned = _align_hemisphere(q[None, :, :], ref[:, None, :])  # (V, J, 4)
    blended = np.einsum("vj,vjc->vc", weights, aligned)
    n = np.linalg.norm(blended, axis=1, keepdims=True)
    degenerate = n[:, 0] < 1e-8
    out = blended / np.where(degenerate[:, None], 1.0, n)
    out[degenerate] = ref[degenerate]
    return out


def deform_gaussians(anchors: GaussianAnchors, posed_vertices: np.ndarray, faces: np.ndarray,
                     vertex_quats: np.ndarray, canonical_rotations: np.ndarray) -> PosedGaussians:
    """New positions by barycentric interpolation on the posed shells and
    rotations ``normalize(interp(P)) * q``.

    ``posed_vertices`` is (N, V, 3); ``vertex_quats`` is (V, 4), shared by all
    shells because they inherit the template weights by vertex index.
    """
    corners = faces[anchors.face_index]  # (G, 3)
    positions = anchors.positions(posed_vertices, faces)
    p = local_rotation_field(anchors.barycentric, vertex_quats[corners])
    rotations = quat.multiply(p, canonical_rotations)
    return PosedGaussians(positions, rotations)


def local_rotation_field(barycentric: np.ndarray, corner_quats: np.ndarray) -> np.ndarray:
    """Normalized barycentric blend of corner quaternions (hemisphere-aligned)."""
    ref = corner_quats[np.arange(len(barycentric)), np.argmax(barycentric, axis=1)]
    aligned = _align_hemisphere(corner_quats, ref[:, None, :])
    p = np.einsum("nk,nkc->nc", barycentric, aligned)
    return quat.normalize(p)


def pose_shells(rig: RigBundle, stack: ShellStack, pose: Pose, vertices: Optional[np.ndarray] = None):
    """Posed shell vertices (N, V, 3) and the vertex quaternion field (V, 4).

    With ``vertices`` (template indices) only those are posed, in that order.
    """
    transforms = forward_kinematics(rig, pose)
    verts = stack.vertex_array()
    weights = rig.weights
    basis = rig.shape_basis
    if vertices is not None:
        verts, weights = verts[:, vertices], weights[vertices]
        basis = None if basis is None else basis[vertices]
    if pose.shape_coeffs is not None and len(pose.shape_coeffs):
        verts = verts + (basis @ pose.shape_coeffs)[None]
    posed = skin_vertices(verts, transforms, weights)
    return posed, vertex_quaternions(transforms, weights), transforms


@dataclass(frozen=True)
class PixelRect:
    """Half-open pixel rectangle [x0, x1) x [y0, y1); all zeros means empty."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def empty(self) -> bool:
        return self.x1 <= self.x0 or self.y1 <= self.y0


EMPTY_RECT = PixelRect(0, 0, 0, 0)


def part_crop(rig: RigBundle, pose: Pose, camera, part: str, margin: float = 0.4) -> PixelRect:
    """Square crop around a part's projected posed joints.

    The bounding square's side is expanded by ``1 + margin`` and clamped to
    the image; joints behind the near plane are ignored.
    """
    if part not in rig.parts:
        raise KeyError(f"unknown part {part!r}")
    joints = forward_kinematics(rig, pose).translation[rig.parts[part]]
    view = joints @ camera.rotation.T + camera.translation
    front = view[:, 2] > camera.near
    if not front.any():
        return EMPTY_RECT
    view = view[front]
    px = camera.fx * view[:, 0] / view[:, 2] + camera.cx
    py = camera.fy * view[:, 1] / view[:, 2] + camera.cy
    cx, cy = 0.5 * (px.min() + px.max()), 0.5 * (py.min() + py.max())
    half = 0.5 * max(px.max() - px.min(), py.max() - py.min()) * (1.0 + margin)
    x0, y0 = int(np.floor(cx - half)), int(np.floor(cy - half))
    x1, y1 = max(int(np.ceil(cx + half)), x0 + 1), max(int(np.ceil(cy + half)), y0 + 1)
    x0, x1 = min(max(x0, 0), camera.width), min(max(x1, 0), camera.width)
    y0, y1 = min(max(y0, 0), camera.height), min(max(y1, 0), camera.height)
    if x1 <= x0 or y1 <= y0:
        return EMPTY_RECT
    return PixelRect(x0, y0, x1, y1)


class PoseSequenceError(ValueError):
    pass


def parse_pose_sequence(doc: dict, rig: RigBundle) -> List[Pose]:
    """Frames keyed by joint name: ``{"shape": [...], "frames": [{"root_translation": [...],
    "rotations": {"l_elbow": [x, y, z]}}]}``. Unlisted joints stay at rest."""
    names = {n: i for i, n in enumerate(rig.joint_names)}
    shape = doc.get("shape")
    if shape is not None:
        shape = np.asarray(shape, dtype=np.float64)
        have = 0 if rig.shape_basis is None else rig.shape_basis.shape[2]
        if len(shape) != have:
            raise PoseSequenceError(f"shape has {len(shape)} coefficients, rig expects {have}")
    frames = doc.get("frames")
    if not isinstance(frames, list):
        raise PoseSequenceError("pose sequence needs a 'frames' list")
    poses = []
    for k, fr in enumerate(frames):
        rot = np.zeros((rig.n_joints, 3))
        for name, aa in fr.get("rotations", {}).items():
            if name not in names:
                raise PoseSequenceError(f"frame {k}: unknown joint {name!r}")
            rot[names[name]] = np.asarray(aa, dtype=np.float64).reshape(3)
        poses.append(Pose(rot, fr.get("root_translation", [0.0, 0.0, 0.0]), shape))
    return poses


def load_pose_sequence(path, rig: RigBundle) -> List[Pose]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise PoseSequenceError(f"cannot parse {path}: {exc}") from exc
    return parse_pose_sequence(doc, rig)


def pose_to_dict(pose: Pose, joint_names: Sequence[str]) -> Dict:
    rot = {n: pose.joint_rotations[i].tolist() for i, n in enumerate(joint_names) if np.any(pose.joint_rotations[i])}
    return {"root_translation": pose.root_translation.tolist(), "rotations": rot}
