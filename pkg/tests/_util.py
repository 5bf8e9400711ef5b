"""Shared builders and independent oracles for the tests."""
import numpy as np

from texavatar.camera import Camera
from texavatar.primitives import PrimitiveSet
from texavatar.rotations import quat_to_matrix, random_quaternion
from texavatar.skinning import Pose, Skeleton, TemplateMesh


def quad_template(u_max=1.0, size=1.0):
    """Two triangles spanning [0,size]^2 in the z=0 plane, UVs spanning [0,u_max] x [0,1]."""
    v = np.array([[0, 0, 0], [size, 0, 0], [size, size, 0], [0, size, 0]], dtype=float)
    uv = np.array([[0, 0], [u_max, 0], [u_max, 1], [0, 1]], dtype=float)
    tri = np.array([[0, 1, 2], [0, 2, 3]])
    return TemplateMesh(v, tri, uv, np.ones((4, 1)))


def single_joint():
    return Skeleton([-1], [[1.0, 0, 0, 0]], [[0.0, 0, 0]])


def chain_rig(rng, joints=3, vertices=40, triangles=30):
    """Random topologically sorted chain with blended weights on random geometry."""
    parent = [-1] + list(range(joints - 1))
    rest_q = np.array([random_quaternion(rng) for _ in range(joints)])
    rest_t = rng.normal(scale=0.5, size=(joints, 3))
    skel = Skeleton(parent, rest_q, rest_t)
    verts = rng.normal(size=(vertices, 3))
    uv = rng.uniform(size=(vertices, 2))
    tri = np.array([rng.choice(vertices, 3, replace=False) for _ in range(triangles)])
    w = np.zeros((vertices, joints))
    for i in range(vertices):
        pick = rng.choice(joints, size=min(joints, 4), replace=False)
        w[i, pick] = rng.uniform(0.1, 1.0, size=len(pick))
    w /= w.sum(axis=1, keepdims=True)
    return skel, TemplateMesh(verts, tri, uv, w)


def random_pose(rng, joints, translation=0.3):
    return Pose(np.array([random_quaternion(rng) for _ in range(joints)]), rng.normal(scale=translation, size=3))


def _matrix(q):
    # written out independently of the package's quaternion helper
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z],
    ])


def brute_force_lbs(skeleton, pose, template):
    """Explicit world-matrix chain per joint, rest and posed, then a weighted blend of points."""
    J = skeleton.joint_count

    def world(rotations, root_t):
        mats = []
        for j in range(J):
            m = np.eye(4)
            m[:3, :3] = _matrix(skeleton.rest_rotation[j]) @ _matrix(rotations[j])
            m[:3, 3] = skeleton.rest_translation[j] + (root_t if j == 0 else 0.0)
            p = skeleton.parent[j]
            mats.append(m if p < 0 else mats[p] @ m)
        return mats

    ident = np.tile([1.0, 0, 0, 0], (J, 1))
    rest = world(ident, np.zeros(3))
    posed = world(pose.joint_rotations, pose.root_translation)
    out = np.zeros_like(template.vertices)
    for i, x in enumerate(template.vertices):
        xh = np.append(x, 1.0)
        for j in range(J):
            w = template.skin_weights[i, j] if j < template.skin_weights.shape[1] else 0.0
            if w:
                out[i] += w * (posed[j] @ np.linalg.solve(rest[j], xh))[:3]
    return out


def random_rigid(rng):
    return quat_to_matrix(random_quaternion(rng)), rng.normal(size=3)


def random_prims(rng, K, S, spread=0.6, scale=(0.15, 0.35), density=2.0):
    pos = rng.uniform(-spread, spread, size=(K, 3))
    rot = quat_to_matrix(np.array([random_quaternion(rng) for _ in range(K)]))
    scl = rng.uniform(*scale, size=(K, 3))
    rgb = rng.uniform(size=(K, 3, S, S, S))
    alpha = density * rng.uniform(size=(K, S, S, S))
    return PrimitiveSet(pos, rot, scl, rgb, alpha, np.arange(K))


def constant_box(center, half, rotation, density, color, S=4):
    K = 1
    rgb = np.broadcast_to(np.asarray(color, float)[None, :, None, None, None], (K, 3, S, S, S)).copy()
    alpha = np.full((K, S, S, S), float(density))
    return PrimitiveSet(np.asarray(center, float)[None], np.asarray(rotation, float)[None],
                        np.asarray(half, float)[None], rgb, alpha, np.arange(K))


def look_camera(eye, size=8, fov=40.0, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)):
    return Camera.look_at(eye, target, up, fov, size, size)
