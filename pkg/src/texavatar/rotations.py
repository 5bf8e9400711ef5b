"""Quaternion and SO(3) helpers shared by skinning, primitives and the renderer.

Quaternions are stored ``[w, x, y, z]``. Axis-angle vectors are 3-vectors whose
norm is the rotation angle in radians.
"""
import numpy as np

_SMALL_ANGLE = 1e-8


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_matrix(q):
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def quat_from_matrix(m):
    m = np.asarray(m, dtype=np.float64)
    tr = np.trace(m)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    return q if q[0] >= 0 else -q


def random_quaternion(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def skew(v):
    v = np.asarray(v, dtype=np.float64)
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def so3_exp(omega):
    """Rodrigues' formula. Accepts (3,) or (..., 3)."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega, axis=-1)[..., None, None]
    k = np.zeros(omega.shape[:-1] + (3, 3))
    k[..., 0, 1] = -omega[..., 2]
    k[..., 0, 2] = omega[..., 1]
    k[..., 1, 0] = omega[..., 2]
    k[..., 1, 2] = -omega[..., 0]
    k[..., 2, 0] = -omega[..., 1]
    k[..., 2, 1] = omega[..., 0]
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta ** 2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta ** 2 / 24.0, (1.0 - np.cos(safe)) / safe ** 2)
    return np.eye(3) + a * k + b * (k @ k)


def so3_log(m):
    m = np.asarray(m, dtype=np.float64)
    cos = np.clip(0.5 * (np.trace(m) - 1.0), -1.0, 1.0)
    theta = np.arccos(cos)
    vee = np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])
    if theta < 1e-7:
        return 0.5 * vee
    if np.pi - theta < 1e-5:
        # near pi the antisymmetric part vanishes; recover the axis from the symmetric part
        q = quat_from_matrix(m)
        axis = q[1:] / np.linalg.norm(q[1:])
        return axis * theta
    return vee * (theta / (2.0 * np.sin(theta)))


def so3_exp_jacobian(omega):
    """Derivatives dR/domega_i, shape (3, 3, 3) indexed [i, row, col].

    Uses the closed form of Gallego & Yezzi; reduces to the generators at zero.
    """
    omega = np.asarray(omega, dtype=np.float64)
    theta2 = float(omega @ omega)
    eye = np.eye(3)
    if theta2 < _SMALL_ANGLE ** 2:
        return np.stack([skew(eye[i]) for i in range(3)])
    r = so3_exp(omega)
    k = skew(omega)
    out = np.empty((3, 3, 3))
    for i in range(3):
        tail = skew(np.cross(omega, (eye - r)[:, i]))
        out[i] = (omega[i] * k + tail) @ r / theta2
    return out


def matrix_grad_to_axis_angle(omega, grad_r):
    """Chain dL/dR (3x3) through R = exp(omega)."""
    jac = so3_exp_jacobian(omega)
    return np.einsum("irc,rc->i", jac, grad_r)


def rigid(rotation, translation):
    m = np.eye(4)
    m[:3, :3] = rotation
    m[:3, 3] = translation
    return m
