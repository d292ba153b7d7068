"""Procedural rigs: icospheres, a single-joint sphere rig and a segmented mannequin.

The mannequin stands in for a licensed body model. It is a T-posed figure of
overlapping ellipsoid segments, one per bone, each with its own UV chart in a
shared atlas and skinning weights that blend into the neighboring bones near
the joints. The shipped ``assets/mannequin.json`` is ``mannequin()`` written
with ``save_rig_bundle``.
"""

from __future__ import annotations

from importlib import resources

import numpy as np

from .mesh import Joint, RigBundle, load_rig_bundle

_PHI = (1.0 + 5.0**0.5) / 2.0


def icosphere(subdivisions: int = 2):
    """Unit icosphere as (vertices, faces), outward counter-clockwise winding."""
    v = [
        (-1, _PHI, 0), (1, _PHI, 0), (-1, -_PHI, 0), (1, -_PHI, 0),
        (0, -1, _PHI), (0, 1, _PHI), (0, -1, -_PHI), (0, 1, -_PHI),
        (_PHI, 0, -1), (_PHI, 0, 1), (-_PHI, 0, -1), (-_PHI, 0, 1),
    ]
    f = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in v]
    faces = list(f)
    for _ in range(subdivisions):
        cache = {}

        def midpoint(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return np.array(verts), np.array(faces, dtype=np.int64)


def spherical_uv_chart(directions: np.ndarray, faces: np.ndarray):
    """Per-corner longitude/latitude UVs with seam and pole fix-up.

    Returns (uvs, uv_faces) with uvs in [0, 1]^2; faces crossing the
    longitude seam are unwrapped and the chart is rescaled to fit.
    """
    d = directions / np.linalg.norm(directions, axis=1, keepdims=True)
    lon = np.arctan2(d[:, 1], d[:, 0]) / (2 * np.pi) + 0.5
    lat = np.arccos(np.clip(d[:, 2], -1.0, 1.0)) / np.pi
    corner_u = lon[faces].copy()
    corner_v = lat[faces].copy()
    for f in range(len(faces)):
        u = corner_u[f]
        if u.max() - u.min() > 0.5:
            u[u < 0.5] += 1.0
        pole = np.abs(d[faces[f], 2]) > 1 - 1e-9
        if pole.any() and not pole.all():
            u[pole] = u[~pole].mean()
    corner_u /= corner_u.max()
    uv = np.stack([corner_u.ravel(), corner_v.ravel()], axis=1)
    uniq, inverse = np.unique(np.round(uv, 12), axis=0, return_inverse=True)
    return uniq, inverse.reshape(-1, 3).astype(np.int64)


def sphere_rig(subdivisions: int = 2, radius: float = 1.0) -> RigBundle:
    """Single-joint icosphere rig with a spherical UV chart."""
    verts, faces = icosphere(subdivisions)
    uvs, uv_faces = spherical_uv_chart(verts, faces)
    inset = 0.01
    uvs = inset + (1 - 2 * inset) * uvs
    weights = np.ones((len(verts), 1))
    rig = RigBundle(verts * radius, faces, uvs, uv_faces, [Joint("root", None, np.zeros(3))], weights,
                    parts={"all": [0]})
    rig.validate()
    return rig


# name, parent, rest position
_JOINTS = [
    ("pelvis", None, (0.0, 3.6, 0.0)),
    ("spine", 0, (0.0, 4.4, 0.0)),
    ("neck", 1, (0.0, 5.8, 0.0)),
    ("head", 2, (0.0, 6.25, 0.0)),
    ("l_shoulder", 1, (0.8, 5.55, 0.0)),
    ("l_elbow", 4, (2.05, 5.55, 0.0)),
    ("l_wrist", 5, (3.15, 5.55, 0.0)),
    ("r_shoulder", 1, (-0.8, 5.55, 0.0)),
    ("r_elbow", 7, (-2.05, 5.55, 0.0)),
    ("r_wrist", 8, (-3.15, 5.55, 0.0)),
    ("l_hip", 0, (0.45, 3.35, 0.0)),
    ("l_knee", 10, (0.5, 1.85, 0.0)),
    ("l_ankle", 11, (0.5, 0.35, 0.0)),
    ("r_hip", 0, (-0.45, 3.35, 0.0)),
    ("r_knee", 13, (-0.5, 1.85, 0.0)),
    ("r_ankle", 14, (-0.5, 0.35, 0.0)),
]

# owning joint, start, end, (lateral radius a, lateral radius b), parent blend joint, child blend joint
_SEGMENTS = [
    ("pelvis", (0.0, 3.05, 0.0), (0.0, 3.95, 0.0), (0.85, 0.5), None, "spine"),
    ("spine", (0.0, 3.7, 0.0), (0.0, 5.85, 0.0), (0.9, 0.52), "pelvis", "neck"),
    ("neck", (0.0, 5.6, 0.0), (0.0, 6.3, 0.0), (0.3, 0.3), "spine", "head"),
    ("head", (0.0, 6.1, 0.0), (0.0, 7.2, 0.0), (0.45, 0.5), "neck", None),
    ("l_shoulder", (0.55, 5.55, 0.0), (2.05, 5.55, 0.0), (0.32, 0.32), "spine", "l_elbow"),
    ("l_elbow", (2.05, 5.55, 0.0), (3.15, 5.55, 0.0), (0.26, 0.26), "l_shoulder", "l_wrist"),
    ("l_wrist", (3.1, 5.55, 0.0), (3.75, 5.55, 0.0), (0.14, 0.25), "l_elbow", None),
    ("r_shoulder", (-0.55, 5.55, 0.0), (-2.05, 5.55, 0.0), (0.32, 0.32), "spine", "r_elbow"),
    ("r_elbow", (-2.05, 5.55, 0.0), (-3.15, 5.55, 0.0), (0.26, 0.26), "r_shoulder", "r_wrist"),
    ("r_wrist", (-3.1, 5.55, 0.0), (-3.75, 5.55, 0.0), (0.14, 0.25), "r_elbow", None),
    ("l_hip", (0.47, 3.4, 0.0), (0.5, 1.85, 0.0), (0.4, 0.4), "pelvis", "l_knee"),
    ("l_knee", (0.5, 1.85, 0.0), (0.5, 0.35, 0.0), (0.31, 0.31), "l_hip", "l_ankle"),
    ("l_ankle", (0.5, 0.15, -0.2), (0.5, 0.15, 0.75), (0.22, 0.16), "l_knee", None),
    ("r_hip", (-0.47, 3.4, 0.0), (-0.5, 1.85, 0.0), (0.4, 0.4), "pelvis", "r_knee"),
    ("r_knee", (-0.5, 1.85, 0.0), (-0.5, 0.35, 0.0), (0.31, 0.31), "r_hip", "r_ankle"),
    ("r_ankle", (-0.5, 0.15, -0.2), (-0.5, 0.15, 0.75), (0.22, 0.16), "r_knee", None),
]

_PARTS = {
    "head": ["head"],
    "face": ["head"],
    "neck": ["neck"],
    "torso": ["pelvis", "spine"],
    "left_arm": ["l_shoulder", "l_elbow", "l_wrist"],
    "right_arm": ["r_shoulder", "r_elbow", "r_wrist"],
    "left_hand": ["l_wrist"],
    "right_hand": ["r_wrist"],
    "left_leg": ["l_hip", "l_knee", "l_ankle"],
    "right_leg": ["r_hip", "r_knee", "r_ankle"],
    "left_foot": ["l_ankle"],
    "right_foot": ["r_ankle"],
    "upper_body": ["spine", "neck", "head", "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow", "r_wrist"],
    "lower_body": ["pelvis", "l_hip", "l_knee", "l_ankle", "r_hip", "r_knee", "r_ankle"],
}

_BLEND = 0.3  # fraction of the segment length over which weight ramps to a neighbor


def _segment_frame(start, end):
    axis = end - start
    length = np.linalg.norm(axis)
    z = axis / length
    helper = np.array([0.0, 0.0, 1.0]) if abs(z[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    x = np.cross(helper, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1), length


def mannequin(subdivisions: int = 2, scale: float = 2.0) -> RigBundle:
    """Build the segmented T-pose mannequin rig.

    ``scale`` multiplies the joint/segment tables (about 7.2 units tall at
    scale 1); the default keeps the thinnest parts wider than the default
    shell half-span of 0.28.
    """
    names = [j[0] for j in _JOINTS]
    index = {n: i for i, n in enumerate(names)}
    joints = [Joint(n, p, scale * np.array(r, dtype=np.float64)) for n, p, r in _JOINTS]

    unit_v, unit_f = icosphere(subdivisions)
    chart_uv, chart_uf = spherical_uv_chart(unit_v, unit_f)
    grid = int(np.ceil(np.sqrt(len(_SEGMENTS))))
    cell = 1.0 / grid
    pad = 0.04 * cell

    verts, faces, uvs, uv_faces, weight_rows, girth, stretch = [], [], [], [], [], [], []
    v_off = uv_off = 0
    for s, (owner, start, end, (ra, rb), parent, child) in enumerate(_SEGMENTS):
        start, end = scale * np.asarray(start, float), scale * np.asarray(end, float)
        ra, rb = scale * ra, scale * rb
        frame, length = _segment_frame(start, end)
        center = 0.5 * (start + end)
        local = unit_v * np.array([ra, rb, 0.5 * length])
        pos = center + local @ frame.T
        verts.append(pos)
        faces.append(unit_f + v_off)

        gx, gy = s % grid, s // grid
        uv = chart_uv * (cell - 2 * pad) + np.array([gx * cell + pad, gy * cell + pad])
        uvs.append(uv)
        uv_faces.append(chart_uf + uv_off)

        t = np.clip(0.5 + unit_v[:, 2] * 0.5, 0.0, 1.0)
        w = np.zeros((len(pos), len(joints)))
        w_parent = 0.5 * np.clip(1.0 - t / _BLEND, 0.0, 1.0) if parent else np.zeros(len(pos))
        w_child = 0.5 * np.clip((t - (1 - _BLEND)) / _BLEND, 0.0, 1.0) if child else np.zeros(len(pos))
        if parent:
            w[:, index[parent]] += w_parent
        if child:
            w[:, index[child]] += w_child
        w[:, index[owner]] += 1.0 - w_parent - w_child
        weight_rows.append(w)

        # shape basis: radial girth and vertical stretch about the pelvis
        axial = center + np.outer(local[:, 2], frame[:, 2])
        girth.append(pos - axial)
        stretch.append(np.stack([np.zeros(len(pos)), 0.1 * (pos[:, 1] - 3.6 * scale), np.zeros(len(pos))], axis=1))

        v_off += len(pos)
        uv_off += len(uv)

    verts = np.concatenate(verts)
    basis = np.stack([np.concatenate(girth), np.concatenate(stretch)], axis=2) * 0.1
    parts = {k: sorted(index[n] for n in v) for k, v in _PARTS.items()}
    rig = RigBundle(
        verts, np.concatenate(faces), np.concatenate(uvs), np.concatenate(uv_faces),
        joints, np.concatenate(weight_rows), basis, parts,
    )
    rig.validate()
    return rig


def shipped_template_path():
    return resources.files("gsmaps") / "assets" / "mannequin.json"


def load_template() -> RigBundle:
    """Load the shipped mannequin rig bundle."""
    with resources.as_file(shipped_template_path()) as p:
        return load_rig_bundle(p)
