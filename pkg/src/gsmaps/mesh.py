"""Rigged template loading and shell-stack construction."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import scipy.sparse as sp

from ._npz import save_npz

logger = logging.getLogger(__name__)

RIG_FORMAT_VERSION = 1
WEIGHT_DRIFT_TOL = 1e-3


class RigError(ValueError):
    """Malformed or inconsistent rig bundle."""


class ShellBuildError(RuntimeError):
    """Boundary shell construction did not reach its target offset."""


@dataclass(frozen=True)
class Joint:
    name: str
    parent: Optional[int]
    rest: np.ndarray


@dataclass
class RigBundle:
    """Template mesh with UVs, skeleton, dense skinning weights and parts.

    ``weights`` is a dense (V, J) array; the file format stores it as sparse
    (vertex, joint, weight) triples. ``shape_basis`` is (V, 3, K) or None.
    """

    vertices: np.ndarray
    faces: np.ndarray
    uvs: np.ndarray
    uv_faces: np.ndarray
    joints: List[Joint]
    weights: np.ndarray
    shape_basis: Optional[np.ndarray] = None
    parts: Dict[str, List[int]] = field(default_factory=dict)

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @property
    def joint_names(self) -> List[str]:
        return [j.name for j in self.joints]

    @property
    def parents(self) -> np.ndarray:
        return np.array([-1 if j.parent is None else j.parent for j in self.joints], dtype=np.int64)

    @property
    def rest_joints(self) -> np.ndarray:
        return np.array([j.rest for j in self.joints], dtype=np.float64).reshape(-1, 3)

    def template_mesh(self) -> "Mesh":
        return Mesh(self.vertices.copy(), self.faces, self.uvs, self.uv_faces)

    def joint_index(self, name: str) -> int:
        for i, j in enumerate(self.joints):
            if j.name == name:
                return i
        raise KeyError(f"unknown joint {name!r}")

    def validate(self) -> None:
        """Raise RigError on the first violated invariant."""
        V = len(self.vertices)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise RigError("vertices must be (V, 3)")
        if not np.all(np.isfinite(self.vertices)):
            bad = int(np.argwhere(~np.isfinite(self.vertices))[0, 0])
            raise RigError(f"non-finite vertex {bad}")
        if len(self.faces) != len(self.uv_faces):
            raise RigError(f"faces ({len(self.faces)}) and uv_faces ({len(self.uv_faces)}) differ in length")
        _check_index_range(self.faces, V, "face")
        _check_index_range(self.uv_faces, len(self.uvs), "uv_face")
        for i, j in enumerate(self.joints):
            if j.parent is not None and not (0 <= j.parent < i):
                raise RigError(f"joint order: joint {i} ({j.name}) has parent {j.parent}")
        if self.weights.shape != (V, self.n_joints):
            raise RigError(f"weights shape {self.weights.shape} != ({V}, {self.n_joints})")
        if np.any(self.weights < 0):
            bad = np.argwhere(self.weights < 0)[0]
            raise RigError(f"negative skinning weight at vertex {bad[0]}, joint {bad[1]}")
        dev = np.abs(self.weights.sum(axis=1) - 1.0)
        if np.any(dev > 1e-6):
            bad = int(np.argmax(dev))
            raise RigError(f"skinning weights of vertex {bad} sum to {self.weights[bad].sum():.8f}")
        if self.shape_basis is not None and self.shape_basis.shape[:2] != (V, 3):
            raise RigError(f"shape_basis shape {self.shape_basis.shape} does not match ({V}, 3, K)")
        for name, idx in self.parts.items():
            for j in idx:
                if not 0 <= j < self.n_joints:
                    raise RigError(f"part {name!r} references joint {j}")

    def to_dict(self) -> dict:
        nz = np.argwhere(self.weights > 0)
        out = {
            "version": RIG_FORMAT_VERSION,
            "vertices": np.round(self.vertices, 7).tolist(),
            "faces": self.faces.tolist(),
            "uvs": np.round(self.uvs, 7).tolist(),
            "uv_faces": self.uv_faces.tolist(),
            "joints": [
                {"name": j.name, "parent": j.parent, "rest": np.round(j.rest, 7).tolist()} for j in self.joints
            ],
            "weights": [[int(v), int(j), round(float(self.weights[v, j]), 9)] for v, j in nz],
            "parts": {k: list(map(int, v)) for k, v in self.parts.items()},
        }
        if self.shape_basis is not None:
            out["shape_basis"] = self.shape_basis.tolist()
        return out


def _check_index_range(idx: np.ndarray, n: int, what: str) -> None:
    if idx.ndim != 2 or idx.shape[1] != 3:
        raise RigError(f"{what}s must be index triples")
    bad = np.argwhere((idx < 0) | (idx >= n))
    if len(bad):
        raise RigError(f"{what} {bad[0, 0]} index {idx[tuple(bad[0])]} out of range [0, {n})")


def rig_from_dict(doc: dict) -> RigBundle:
    version = doc.get("version")
    if version != RIG_FORMAT_VERSION:
        raise RigError(f"unsupported rig bundle version {version!r}")
    try:
        vertices = np.asarray(doc["vertices"], dtype=np.float64).reshape(-1, 3)
        faces = np.asarray(doc["faces"], dtype=np.int64).reshape(-1, 3)
        uvs = np.asarray(doc["uvs"], dtype=np.float64).reshape(-1, 2)
        uv_faces = np.asarray(doc["uv_faces"], dtype=np.int64).reshape(-1, 3)
        joints = [
            Joint(str(j["name"]), None if j["parent"] is None else int(j["parent"]),
                  np.asarray(j["rest"], dtype=np.float64).reshape(3))
            for j in doc["joints"]
        ]
        triples = np.asarray(doc["weights"], dtype=np.float64).reshape(-1, 3)
    except (KeyError, TypeError, ValueError) as exc:
        raise RigError(f"malformed rig bundle: {exc}") from exc

    V, J = len(vertices), len(joints)
    vi = triples[:, 0].astype(np.int64)
    ji = triples[:, 1].astype(np.int64)
    bad = np.flatnonzero((vi < 0) | (vi >= V) | (ji < 0) | (ji >= J))
    if len(bad):
        raise RigError(f"weight triple {bad[0]} references vertex {vi[bad[0]]}, joint {ji[bad[0]]}")
    weights = np.zeros((V, J))
    np.add.at(weights, (vi, ji), triples[:, 2])

    # renormalize small drift (rounded exports) only; larger deviations fail validation
    sums = weights.sum(axis=1)
    drift = np.abs(sums - 1.0)
    fix = (drift > 0) & (drift < WEIGHT_DRIFT_TOL)
    weights[fix] /= sums[fix, None]

    basis = doc.get("shape_basis")
    if basis is not None:
        basis = np.asarray(basis, dtype=np.float64)
        if basis.ndim == 2:
            basis = basis.reshape(V, 3, -1)
    parts = {str(k): [int(i) for i in v] for k, v in doc.get("parts", {}).items()}
    rig = RigBundle(vertices, faces, uvs, uv_faces, joints, weights, basis, parts)
    rig.validate()
    return rig


def load_rig_bundle(path) -> RigBundle:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"rig bundle not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise RigError(f"cannot parse {path}: {exc}") from exc
    return rig_from_dict(doc)


def save_rig_bundle(rig: RigBundle, path) -> None:
    Path(path).write_text(json.dumps(rig.to_dict(), separators=(",", ":")))


@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray
    uvs: Optional[np.ndarray] = None
    uv_faces: Optional[np.ndarray] = None

    def with_vertices(self, vertices: np.ndarray) -> "Mesh":
        return Mesh(vertices, self.faces, self.uvs, self.uv_faces)


def load_obj(path) -> Mesh:
    """Read positions, UVs and (triangulated) faces from a Wavefront OBJ file."""
    verts, uvs, faces, uv_faces = [], [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "vt":
            uvs.append([float(x) for x in parts[1:3]])
        elif parts[0] == "f":
            corners = [p.split("/") for p in parts[1:]]
            vi = [int(c[0]) for c in corners]
            ti = [int(c[1]) if len(c) > 1 and c[1] else None for c in corners]
            vi = [i - 1 if i > 0 else len(verts) + i for i in vi]
            # fan triangulation for polygons
            for k in range(1, len(vi) - 1):
                faces.append([vi[0], vi[k], vi[k + 1]])
                if ti[0] is not None:
                    t = [ti[0], ti[k], ti[k + 1]]
                    uv_faces.append([i - 1 if i > 0 else len(uvs) + i for i in t])
    mesh = Mesh(np.asarray(verts, dtype=np.float64).reshape(-1, 3), np.asarray(faces, dtype=np.int64).reshape(-1, 3))
    if uvs and len(uv_faces) == len(faces):
        mesh.uvs = np.asarray(uvs, dtype=np.float64)
        mesh.uv_faces = np.asarray(uv_faces, dtype=np.int64)
    return mesh


def face_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    tri = vertices[faces]
    return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted average of incident face normals, unit length."""
    tri = vertices[faces]
    fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])  # length = 2 * area
    vn = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(vn, faces[:, k], fn)
    n = np.linalg.norm(vn, axis=1, keepdims=True)
    return vn / np.where(n > 0, n, 1.0)


def umbrella_operator(n_vertices: int, faces: np.ndarray) -> sp.csr_matrix:
    """Row-normalized 1-ring adjacency; ``A @ v`` is the neighbor centroid."""
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.concatenate([e, e[:, ::-1]])
    e = np.unique(e, axis=0)
    adj = sp.csr_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n_vertices, n_vertices))
    deg = np.asarray(adj.sum(axis=1)).ravel()
    if np.any(deg == 0):
        raise ValueError(f"isolated vertex {int(np.flatnonzero(deg == 0)[0])} has no neighbors")
    return sp.diags(1.0 / deg) @ adj


def laplacian_offset(mesh: Mesh, factor: float, iterations: int) -> Mesh:
    """Umbrella-Laplacian smoothing; negative ``factor`` inflates."""
    if iterations < 1:
        raise ValueError("iterations must be positive")
    if abs(factor) >= 1:
        raise ValueError(f"|factor| must be < 1 for stability, got {factor}")
    A = umbrella_operator(len(mesh.vertices), mesh.faces)
    v = mesh.vertices.copy()
    if factor == 0:
        return mesh.with_vertices(v)
    for _ in range(iterations):
        v = v + factor * (A @ v - v)
    return mesh.with_vertices(v)


@dataclass
class ShellStack:
    """Shells ordered inner to outer; all share the template's connectivity."""

    shells: List[Mesh]
    base_index: int
    adjacent_offset: float

    @property
    def n_shells(self) -> int:
        return len(self.shells)

    @property
    def faces(self) -> np.ndarray:
        return self.shells[0].faces

    @property
    def uvs(self) -> np.ndarray:
        return self.shells[0].uvs

    @property
    def uv_faces(self) -> np.ndarray:
        return self.shells[0].uv_faces

    def vertex_array(self) -> np.ndarray:
        """(N, V, 3) stacked shell vertices."""
        return np.stack([s.vertices for s in self.shells])

    def with_vertex_array(self, verts: np.ndarray) -> "ShellStack":
        return ShellStack([s.with_vertices(v) for s, v in zip(self.shells, verts)], self.base_index, self.adjacent_offset)

    def save(self, path) -> None:
        save_npz(
            path,
            vertices=self.vertex_array(),
            faces=self.faces,
            uvs=self.uvs if self.uvs is not None else np.zeros((0, 2)),
            uv_faces=self.uv_faces if self.uv_faces is not None else np.zeros((0, 3), dtype=np.int64),
            base_index=self.base_index,
            adjacent_offset=self.adjacent_offset,
        )

    @classmethod
    def load(cls, path) -> "ShellStack":
        with np.load(path) as z:
            uvs = z["uvs"] if len(z["uvs"]) else None
            uv_faces = z["uv_faces"] if len(z["uv_faces"]) else None
            shells = [Mesh(v, z["faces"], uvs, uv_faces) for v in z["vertices"]]
            return cls(shells, int(z["base_index"]), float(z["adjacent_offset"]))


SMOOTHING_STEP = 0.1


def _offset_to_target(vertices, A, normals, target, factor, max_steps):
    """Iterate smoothing until mean signed normal displacement reaches ``target``.

    The last step is cut by linear interpolation so the mean displacement hits
    the target exactly (it is linear in the vertex positions).
    """
    sign = -1.0 if factor < 0 else 1.0  # inflation moves along +normal
    v0 = vertices
    prev, d_prev = vertices, 0.0
    for _ in range(max_steps):
        cur = prev + factor * (A @ prev - prev)
        d_cur = -sign * float(np.mean(np.sum((cur - v0) * normals, axis=1)))
        if d_cur >= target:
            t = (target - d_prev) / (d_cur - d_prev)
            return prev + t * (cur - prev)
        if d_cur <= d_prev:
            break
        prev, d_prev = cur, d_cur
    raise ShellBuildError(
        f"{'inflation' if factor < 0 else 'deflation'} stalled at mean displacement {d_prev:.6g} "
        f"(target {target:.6g})"
    )


def build_shell_stack(rig_or_mesh, n_shells: int = 8, adjacent_offset: float = 0.08,
                      max_steps: int = 5000, inflation: str = "reflect") -> ShellStack:
    """Inflate/deflate the template into boundary shells and interpolate between them.

    The inner boundary comes from positive-factor smoothing. With
    ``inflation="reflect"`` the outer boundary is the mirror image of that
    path about the template (``2 v0 - inner``), which equals a negative-factor
    step for one iteration and stays stable for many. ``"explicit"`` iterates
    negative-factor steps directly; anti-smoothing amplifies high-frequency
    modes, so it is only usable for small offsets on smooth meshes.
    """
    if n_shells < 1:
        raise ValueError("n_shells must be >= 1")
    if adjacent_offset <= 0:
        raise ValueError("adjacent_offset must be positive")
    if inflation not in ("reflect", "explicit"):
        raise ValueError(f"unknown inflation mode {inflation!r}")
    template = rig_or_mesh.template_mesh() if isinstance(rig_or_mesh, RigBundle) else rig_or_mesh
    if n_shells == 1:
        return ShellStack([template.with_vertices(template.vertices.copy())], 0, adjacent_offset)

    A = umbrella_operator(len(template.vertices), template.faces)
    normals = vertex_normals(template.vertices, template.faces)
    half_span = 0.5 * (n_shells - 1) * adjacent_offset
    inner = _offset_to_target(template.vertices, A, normals, half_span, SMOOTHING_STEP, max_steps)
    if inflation == "reflect":
        outer = 2.0 * template.vertices - inner
    else:
        outer = _offset_to_target(template.vertices, A, normals, half_span, -SMOOTHING_STEP, max_steps)

    shells = []
    for k in range(n_shells):
        t = k / (n_shells - 1)
        shells.append(template.with_vertices((1.0 - t) * inner + t * outer))
    logger.debug("built %d shells, half span %.4g", n_shells, half_span)
    return ShellStack(shells, (n_shells - 1) // 2, adjacent_offset)


@dataclass
class SeparationReport:
    min_gaps: np.ndarray  # (N-1,) minimum signed gap per adjacent pair
    flagged: np.ndarray  # (M, 2) rows of (pair index, vertex index) with inverted order

    @property
    def flag_count(self) -> int:
        return len(self.flagged)

    def summary(self) -> str:
        lines = [f"pairs: {len(self.min_gaps)}", f"flagged vertices: {self.flag_count}"]
        for k, g in enumerate(self.min_gaps):
            lines.append(f"  shells {k}-{k + 1}: min gap {g:.6g}")
        return "\n".join(lines)


def check_shell_separation(stack: ShellStack) -> SeparationReport:
    base = stack.shells[stack.base_index]
    normals = vertex_normals(base.vertices, base.faces)
    verts = stack.vertex_array()
    gaps = np.einsum("kvi,vi->kv", verts[1:] - verts[:-1], normals)
    if len(gaps) == 0:
        return SeparationReport(np.zeros(0), np.zeros((0, 2), dtype=np.int64))
    return SeparationReport(gaps.min(axis=1), np.argwhere(gaps < 0))
