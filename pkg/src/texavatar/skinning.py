"""Skeleton, linear blend skinning and per-triangle frames of the posed mesh."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rotations import quat_to_matrix, quat_normalize

ROOT = -1
MAX_INFLUENCES = 4


class DegenerateGeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Skeleton:
    parent: np.ndarray  # (J,) int, ROOT for the root
    rest_rotation: np.ndarray  # (J, 4) quaternions, local to parent
    rest_translation: np.ndarray  # (J, 3)

    def __post_init__(self):
        parent = np.asarray(self.parent, dtype=np.int64)
        object.__setattr__(self, "parent", parent)
        object.__setattr__(self, "rest_rotation", quat_normalize(self.rest_rotation).reshape(-1, 4))
        object.__setattr__(self, "rest_translation", np.asarray(self.rest_translation, dtype=np.float64).reshape(-1, 3))
        if (parent == ROOT).sum() != 1 or parent[0] != ROOT:
            raise ValueError("skeleton needs exactly one root, at index 0")
        for j, p in enumerate(parent):
            if p != ROOT and not 0 <= p < j:
                raise ValueError(f"joint {j} has parent {p}; joints must be topologically sorted")

    @property
    def joint_count(self):
        return len(self.parent)

    def children(self, joint):
        return [j for j, p in enumerate(self.parent) if p == joint]

    def subtree(self, joint):
        members = {joint}
        for j in range(joint + 1, self.joint_count):
            if self.parent[j] in members:
                members.add(j)
        return sorted(members)


@dataclass(frozen=True)
class Pose:
    joint_rotations: np.ndarray  # (J, 4)
    root_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.joint_rotations, dtype=np.float64).reshape(-1, 4)
        if np.any(np.abs(np.linalg.norm(q, axis=1) - 1.0) > 1e-9):
            raise ValueError("pose quaternions must have unit norm")
        object.__setattr__(self, "joint_rotations", q)
        object.__setattr__(self, "root_translation", np.asarray(self.root_translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls, joint_count):
        q = np.zeros((joint_count, 4))
        q[:, 0] = 1.0
        return cls(q, np.zeros(3))

    def to_json(self):
        return {"joint_rotations": self.joint_rotations.tolist(), "root_translation": self.root_translation.tolist()}

    @classmethod
    def from_json(cls, obj):
        return cls(np.array(obj["joint_rotations"]), np.array(obj["root_translation"]))


@dataclass(frozen=True)
class TemplateMesh:
    vertices: np.ndarray  # (V, 3)
    triangles: np.ndarray  # (T, 3)
    uv: np.ndarray  # (V, 2)
    skin_weights: np.ndarray  # dense (V, J); at most MAX_INFLUENCES nonzeros per row

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        t = np.asarray(self.triangles, dtype=np.int64)
        uv = np.asarray(self.uv, dtype=np.float64)
        w = np.asarray(self.skin_weights, dtype=np.float64)
        if w.ndim == 1:
            w = w[:, None]
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle index out of range")
        if uv.shape != (len(v), 2) or np.any(uv < 0) or np.any(uv > 1):
            raise ValueError("uv must be (V, 2) within [0, 1]")
        if w.shape[0] != len(v) or np.any(w < 0) or np.any(np.abs(w.sum(axis=1) - 1) > 1e-6):
            raise ValueError("skin weights must be nonnegative and sum to 1 per vertex")
        if np.any((w > 0).sum(axis=1) > MAX_INFLUENCES):
            raise ValueError(f"at most {MAX_INFLUENCES} influences per vertex")
        for name, value in (("vertices", v), ("triangles", t), ("uv", uv), ("skin_weights", w)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def vertex_count(self):
        return len(self.vertices)

    @property
    def triangle_count(self):
        return len(self.triangles)


@dataclass(frozen=True)
class PosedMesh:
    vertices: np.ndarray  # (V, 3)
    triangle_normals: np.ndarray  # (T, 3)
    triangle_frames: np.ndarray  # (T, 3, 3), columns tangent / bitangent / normal
    triangles: np.ndarray | None = None  # (T, 3), shared with the template


def local_transforms(skeleton, pose):
    """Per-joint 4x4 parent-from-joint transforms for a pose."""
    j = skeleton.joint_count
    mats = np.tile(np.eye(4), (j, 1, 1))
    mats[:, :3, :3] = quat_to_matrix(skeleton.rest_rotation) @ quat_to_matrix(pose.joint_rotations)
    mats[:, :3, 3] = skeleton.rest_translation
    mats[0, :3, 3] += pose.root_translation
    return mats


def world_transforms(skeleton, pose):
    local = local_transforms(skeleton, pose)
    world = np.empty_like(local)
    for j, p in enumerate(skeleton.parent):
        world[j] = local[j] if p == ROOT else world[p] @ local[j]
    return world


def skinning_matrices(skeleton, pose):
    """World-from-rest transforms that carry canonical points to posed ones."""
    posed = world_transforms(skeleton, pose)
    rest = world_transforms(skeleton, Pose.identity(skeleton.joint_count))
    return posed @ np.linalg.inv(rest)


def triangle_frames(vertices, triangles, uv):
    """Unit normals and tangent frames for every triangle.

    The tangent follows the UV-u direction of the triangle's affine map,
    projected onto the triangle plane.
    """
    p0, p1, p2 = (vertices[triangles[:, i]] for i in range(3))
    e1, e2 = p1 - p0, p2 - p0
    n = np.cross(e1, e2)
    norm = np.linalg.norm(n, axis=1)
    if np.any(norm <= 0):
        raise DegenerateGeometryError("degenerate geometry")
    n = n / norm[:, None]

    uv0, uv1, uv2 = (uv[triangles[:, i]] for i in range(3))
    d1, d2 = uv1 - uv0, uv2 - uv0
    det = d1[:, 0] * d2[:, 1] - d2[:, 0] * d1[:, 1]
    ok = np.abs(det) > 1e-14
    safe = np.where(ok, det, 1.0)
    dxdu = (e1 * d2[:, 1:2] - e2 * d1[:, 1:2]) / safe[:, None]
    tangent = dxdu - (dxdu * n).sum(axis=1, keepdims=True) * n
    tnorm = np.linalg.norm(tangent, axis=1)
    ok &= tnorm > 1e-12 * np.maximum(np.linalg.norm(dxdu, axis=1), 1e-300)
    tangent = tangent / np.where(ok, tnorm, 1.0)[:, None]
    if not ok.all():
        tangent[~ok] = _any_perpendicular(n[~ok])
    bitangent = np.cross(n, tangent)
    frames = np.stack([tangent, bitangent, n], axis=2)
    return n, frames


def _any_perpendicular(n):
    helper = np.where(np.abs(n[:, :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    t = np.cross(helper, n)
    return t / np.linalg.norm(t, axis=1, keepdims=True)


def pose_mesh(skeleton, pose, template):
    if template.skin_weights.shape[1] > skeleton.joint_count:
        raise ValueError("skin weights reference joints beyond the skeleton")
    mats = skinning_matrices(skeleton, pose)[: template.skin_weights.shape[1]]
    blended = np.einsum("vj,jab->vab", template.skin_weights, mats)
    verts = np.einsum("vab,vb->va", blended[:, :3, :3], template.vertices) + blended[:, :3, 3]
    normals, frames = triangle_frames(verts, template.triangles, template.uv)
    return PosedMesh(verts, normals, frames, template.triangles)


def apply_root_transform(skeleton, pose, rotation, translation):
    """Pose whose skinned result equals the rigid map (rotation, translation) applied to `pose`'s."""
    from .rotations import quat_from_matrix

    rest_rot = quat_to_matrix(skeleton.rest_rotation[0])
    q0 = quat_to_matrix(pose.joint_rotations[0])
    new_q0 = rest_rot.T @ rotation @ rest_rot @ q0
    r = skeleton.rest_translation[0]
    new_t = translation + rotation @ (pose.root_translation + r) - r
    rots = pose.joint_rotations.copy()
    rots[0] = quat_from_matrix(new_q0)
    return Pose(rots, new_t)


def rigid_subtree_check(skeleton, pose, template, joint, tol=1e-6):
    if not 0 <= joint < skeleton.joint_count:
        raise IndexError(joint)
    members = skeleton.subtree(joint)
    w = template.skin_weights
    members = [m for m in members if m < w.shape[1]]
    inside = np.flatnonzero(w[:, members].sum(axis=1) >= 1.0 - 1e-9)
    if len(inside) < 2:
        return True
    posed = pose_mesh(skeleton, pose, template).vertices[inside]
    rest = template.vertices[inside]
    d_rest = np.linalg.norm(rest[:, None] - rest[None], axis=-1)
    d_posed = np.linalg.norm(posed[:, None] - posed[None], axis=-1)
    return bool(np.max(np.abs(d_rest - d_posed)) <= tol)


def texel_skin_weights(template, tri, bary):
    """Barycentric interpolation of vertex skin weights at surface points."""
    corner = template.skin_weights[template.triangles[tri]]  # (N, 3, J)
    return np.einsum("nc,ncj->nj", bary, corner)


# --- file formats -----------------------------------------------------------

def write_obj(path, template):
    lines = ["# texavatar template mesh"]
    lines += [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in template.vertices]
    lines += [f"vt {u:.17g} {v:.17g}" for u, v in template.uv]
    lines += [f"f {a+1}/{a+1} {b+1}/{b+1} {c+1}/{c+1}" for a, b, c in template.triangles]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path):
    verts, uvs, faces = [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "vt":
            uvs.append([float(x) for x in parts[1:3]])
        elif parts[0] == "f":
            if len(parts) != 4:
                raise ValueError("only triangle faces are supported")
            faces.append([tuple(int(i) - 1 if i else -1 for i in (p.split("/") + [""])[:2]) for p in parts[1:]])
    verts = np.array(verts, dtype=np.float64)
    uv = np.full((len(verts), 2), np.nan)
    tris = np.zeros((len(faces), 3), dtype=np.int64)
    for f, face in enumerate(faces):
        for c, (vi, ti) in enumerate(face):
            tris[f, c] = vi
            if ti < 0:
                raise ValueError("faces must reference texture coordinates")
            if not np.isnan(uv[vi, 0]) and not np.allclose(uv[vi], uvs[ti]):
                raise ValueError(f"vertex {vi} has conflicting UVs; split it in the OBJ")
            uv[vi] = uvs[ti]
    unused = np.isnan(uv[:, 0])
    if unused.any() and len(uvs) == len(verts):  # vertices outside any face keep their own vt line
        uv[unused] = np.asarray(uvs)[unused]
    if np.isnan(uv).any():
        raise ValueError("some vertices have no UV")
    return verts, tris, uv


def skeleton_to_json(skeleton, weights):
    joints = [
        {"parent": int(p), "rest_rotation": q.tolist(), "rest_translation": t.tolist()}
        for p, q, t in zip(skeleton.parent, skeleton.rest_rotation, skeleton.rest_translation)
    ]
    sparse = [[[int(j), float(w)] for j, w in enumerate(row) if w > 0] for row in weights]
    return {"joints": joints, "weights": sparse}


def skeleton_from_json(obj, vertex_count):
    joints = obj["joints"]
    skeleton = Skeleton(
        np.array([j["parent"] for j in joints]),
        np.array([j["rest_rotation"] for j in joints]),
        np.array([j["rest_translation"] for j in joints]),
    )
    weights = np.zeros((vertex_count, skeleton.joint_count))
    if len(obj["weights"]) != vertex_count:
        raise ValueError("weights list length must match the vertex count")
    for v, row in enumerate(obj["weights"]):
        for j, w in row:
            weights[v, int(j)] = w
    return skeleton, weights


def save_rig(obj_path, json_path, skeleton, template):
    write_obj(obj_path, template)
    Path(json_path).write_text(json.dumps(skeleton_to_json(skeleton, template.skin_weights)))


def load_rig(obj_path, json_path):
    verts, tris, uv = read_obj(obj_path)
    skeleton, weights = skeleton_from_json(json.loads(Path(json_path).read_text()), len(verts))
    return skeleton, TemplateMesh(verts, tris, uv, weights)
