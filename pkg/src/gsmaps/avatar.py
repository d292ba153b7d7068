"""Textures -> activated Gaussians -> (optionally posed) splat scene, and back."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import quat
from .articulation import Pose, deform_gaussians, local_rotation_field, pose_shells
from .mesh import RigBundle, ShellStack
from .render import RenderGradients, SplatScene
from .shellmap import (ActivationConfig, BilinearLookup, GaussianAnchors, GaussianParams, ShellTextureStack,
                       activations_backward, apply_activations)


def is_rest(pose: Pose) -> bool:
    """True for the exact identity pose; it is rendered on the canonical path."""
    return (not np.any(pose.joint_rotations) and not np.any(pose.root_translation)
            and (pose.shape_coeffs is None or not np.any(pose.shape_coeffs)))


@dataclass
class SceneContext:
    """What ``GaussianAvatar.backward`` needs from the forward evaluation."""

    raw: np.ndarray
    params: GaussianParams
    local_rotations: Optional[np.ndarray]  # per-Gaussian rotation field P, None at rest


class GaussianAvatar:
    """A rig, its shell stack, anchored Gaussians and their texture stack.

    ``s_ref`` defaults to the mean log nearest-neighbour distance of the
    canonical Gaussian centers and sets the activation scale cap.
    """

    def __init__(self, rig: Optional[RigBundle], stack: ShellStack, anchors: GaussianAnchors,
                 textures: ShellTextureStack, s_ref: Optional[float] = None,
                 config: Optional[ActivationConfig] = None):
        if textures.shape[0] != stack.n_shells:
            raise ValueError(f"texture stack has {textures.shape[0]} shells, shell stack has {stack.n_shells}")
        self.rig = rig
        self.stack = stack
        self.anchors = anchors
        self.textures = textures
        self.lookup = BilinearLookup(anchors, textures.shape)
        self.canonical_positions = anchors.positions(stack.vertex_array(), stack.faces)
        # posing only touches vertices of faces that carry Gaussians
        self._used_vertices = np.unique(stack.faces[anchors.face_index])
        remap = np.full(len(stack.shells[0].vertices), -1, dtype=np.int64)
        remap[self._used_vertices] = np.arange(len(self._used_vertices))
        self._compact_faces = remap[stack.faces]
        if s_ref is None:
            from .optimize import compute_s_ref

            s_ref = compute_s_ref(self.canonical_positions)
        self.s_ref = float(s_ref)
        self.config = config or ActivationConfig.from_s_ref(self.s_ref)

    def __len__(self):
        return len(self.anchors)

    def with_textures(self, textures: ShellTextureStack) -> "GaussianAvatar":
        return GaussianAvatar(self.rig, self.stack, self.anchors, textures, self.s_ref, self.config)

    def evaluate(self, data: Optional[np.ndarray] = None):
        raw = self.lookup(self.textures.data if data is None else data)
        return raw, apply_activations(raw, self.config)

    def scene(self, pose: Optional[Pose] = None, data: Optional[np.ndarray] = None):
        """Splat scene for ``pose`` (None = canonical rest) and the context for ``backward``."""
        raw, params = self.evaluate(data)
        if pose is None or is_rest(pose):
            positions, rotations, local = self.canonical_positions, params.rotation, None
        else:
            if self.rig is None:
                raise ValueError("posing needs a rig")
            posed, vquats, _ = pose_shells(self.rig, self.stack, pose, self._used_vertices)
            out = deform_gaussians(self.anchors, posed, self._compact_faces, vquats, params.rotation)
            positions, rotations = out.positions, out.rotations
            local = local_rotation_field(self.anchors.barycentric, vquats[self._compact_faces[self.anchors.face_index]])
        scene = SplatScene(positions, rotations, params.scale, params.opacity, params.color,
                           shell_index=self.anchors.shell_index)
        return scene, SceneContext(raw, params, local)

    def backward(self, ctx: SceneContext, grads: RenderGradients) -> np.ndarray:
        """Gradient w.r.t. the raw texture stack from per-Gaussian render gradients."""
        d_rot = grads.rotation
        if ctx.local_rotations is not None:
            # q_new = p * q is linear in q: d q = L(p)^T d q_new
            L = quat.left_matrix(ctx.local_rotations)
            d_rot = np.einsum("nji,nj->ni", L, d_rot)
        d_raw = activations_backward(ctx.raw, self.config, grads.color, grads.opacity, grads.scale, d_rot)
        return self.lookup.adjoint(d_raw)
