"""Texel-aligned conditioning and the per-texel affine decoder.

Feature maps live on the texel grid as (C, W, W) arrays. The decoder maps the
feature vector of each valid texel through shared affine weights plus a
per-texel ("untied") bias, one branch each for motion correctives, opacity
and appearance. View features only enter the appearance branch.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .atlas import warp_to_uv
from .primitives import Correctives
from .skinning import texel_skin_weights

POSE_CHANNELS = 16
IMAGE_CHANNELS = 3
MAX_ANGLE = np.pi - 1e-6
BORDER_RAW = -6.0  # softplus(-6) ~ 2.5e-3: opacity that is effectively zero on a box's border voxels


@dataclass
class FeatureMaps:
    pose: np.ndarray  # (C_theta, W, W)
    image: np.ndarray  # (C_I, W, W)
    view: np.ndarray  # (1, W, W)

    def texel_vectors(self, texels):
        """(K, C_theta + C_I) motion/opacity inputs and (K,) view scalars."""
        w = self.pose.shape[-1]
        pose = self.pose.reshape(-1, w * w)[:, texels]
        image = self.image.reshape(-1, w * w)[:, texels]
        return np.concatenate([pose, image], axis=0).T, self.view.reshape(w * w)[texels]


# --- pose -------------------------------------------------------------------

def pose_channel_count(joint_count):
    return 4 * joint_count + 3


def pose_vector(pose):
    """Per-joint channels: quaternion for every joint, root also its translation."""
    q = pose.joint_rotations
    return [np.concatenate([q[0], pose.root_translation])] + [q[j] for j in range(1, len(q))]


def random_projection(out_channels, in_channels, rng):
    """Random matrix with orthonormal rows (or columns, whichever is shorter)."""
    a = rng.normal(size=(max(out_channels, in_channels), min(out_channels, in_channels)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    return q if out_channels >= in_channels else q.T


def masked_pose(pose, template, grid):
    """(P, K) pose channels scaled by each texel's interpolated skinning weight per joint."""
    texels = grid.valid_texels
    weights = texel_skin_weights(template, grid.triangle[texels], grid.barycentric[texels])  # (K, J')
    blocks = []
    for j, channels in enumerate(pose_vector(pose)):
        wj = weights[:, j] if j < weights.shape[1] else np.zeros(len(texels))
        blocks.append(channels[:, None] * wj[None, :])
    return np.concatenate(blocks, axis=0)


def pose_features(pose, template, grid, proj):
    W = grid.resolution
    masked = masked_pose(pose, template, grid)
    if proj.shape[1] != masked.shape[0]:
        raise ValueError(f"projection expects {proj.shape[1]} pose channels, pose has {masked.shape[0]}")
    out = np.zeros((proj.shape[0], W * W))
    out[:, grid.valid_texels] = proj @ masked
    return out.reshape(proj.shape[0], W, W)


# --- image ------------------------------------------------------------------

def image_features(texture, W):
    """Visibility-weighted box pooling of a multi-view UV texture down to W x W."""
    R = texture.resolution
    if W <= 0 or R < W or R % W:
        raise ValueError(f"texture resolution {R} is not a multiple of {W}")
    b = R // W
    wgt = texture.weight.reshape(W, b, W, b)
    num = (texture.data.reshape(texture.channels, W, b, W, b) * wgt[None]).sum(axis=(2, 4))
    den = wgt.sum(axis=(1, 3))
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


# --- view -------------------------------------------------------------------

def view_features(camera, posed, grid):
    """v . n_t per triangle, v the unit vector from the triangle centroid to the camera."""
    v = posed.vertices
    triangles = posed.triangles
    centroid = (v[triangles[:, 0]] + v[triangles[:, 1]] + v[triangles[:, 2]]) / 3.0
    to_cam = camera.center - centroid
    dist = np.linalg.norm(to_cam, axis=1)
    ok = dist > 1e-12
    vt = np.where(ok, (to_cam * posed.triangle_normals).sum(axis=1) / np.where(ok, dist, 1.0), 0.0)
    return warp_to_uv(vt, grid)[None]


# --- decoder ----------------------------------------------------------------

@dataclass
class DecoderParams:
    motion_weight: np.ndarray  # (9, C)
    motion_bias: np.ndarray  # (K, 9)
    opacity_weight: np.ndarray  # (S^3, C)
    opacity_bias: np.ndarray  # (K, S^3)
    appearance_weight: np.ndarray  # (3 S^3, C + 1)
    appearance_bias: np.ndarray  # (K, 3 S^3)

    @classmethod
    def zeros(cls, texel_count, in_channels, voxels):
        s3 = voxels ** 3
        return cls(np.zeros((9, in_channels)), np.zeros((texel_count, 9)),
                   np.zeros((s3, in_channels)), np.zeros((texel_count, s3)),
                   np.zeros((3 * s3, in_channels + 1)), np.zeros((texel_count, 3 * s3)))

    @classmethod
    def random(cls, texel_count, in_channels, voxels, rng, scale=0.1):
        p = cls.zeros(texel_count, in_channels, voxels)
        for name in p.names():
            setattr(p, name, rng.normal(scale=scale, size=getattr(p, name).shape))
        return p

    @staticmethod
    def names():
        return [f.name for f in fields(DecoderParams)]

    def as_dict(self):
        return {n: getattr(self, n) for n in self.names()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{n: np.asarray(d[n], dtype=np.float64) for n in cls.names()})

    def copy(self):
        return DecoderParams.from_dict({n: v.copy() for n, v in self.as_dict().items()})

    @property
    def voxels(self):
        return round(self.opacity_weight.shape[0] ** (1 / 3))

    @property
    def texel_count(self):
        return self.motion_bias.shape[0]


@dataclass(frozen=True)
class DecoderConfig:
    motion_scale: float = 0.05  # sigma_m, world units per unit of raw motion output
    density_scale: float = 1.0  # opacity density = density_scale * softplus(raw)
    max_angle: float = MAX_ANGLE


@dataclass
class Decoded:
    correctives: Correctives
    rgb: np.ndarray  # (K, 3, S, S, S)
    alpha: np.ndarray  # (K, S, S, S)


def border_voxels(S):
    """(S, S, S) bool, True on the outer shell of voxels."""
    idx = np.arange(S)
    edge = (idx == 0) | (idx == S - 1)
    return edge[:, None, None] | edge[None, :, None] | edge[None, None, :]


def vanishing_border_bias(texel_count, S):
    """Opacity biases that put (near) zero density on every box's border voxels.

    With zero border density the field is continuous across box faces, so the
    sampled render varies smoothly as boxes move and geometry gradients see
    the whole effect of a motion.
    """
    return np.tile(np.where(border_voxels(S), BORDER_RAW, 0.0).ravel(), (texel_count, 1))


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _clamp_angles(delta_r, max_angle):
    n = np.linalg.norm(delta_r, axis=1, keepdims=True)
    over = n > max_angle
    return np.where(over, delta_r * (max_angle / np.where(over, n, 1.0)), delta_r), over[:, 0], n[:, 0]


def decode(features, params, grid, config=DecoderConfig()):
    texels = grid.valid_texels
    f, v = features.texel_vectors(texels)
    if f.shape[1] != params.motion_weight.shape[1]:
        raise ValueError("feature channels do not match decoder parameters")
    S = params.voxels
    motion = config.motion_scale * (f @ params.motion_weight.T + params.motion_bias)
    motion[:, 3:6], _, _ = _clamp_angles(motion[:, 3:6], config.max_angle)
    alpha = config.density_scale * softplus(f @ params.opacity_weight.T + params.opacity_bias)
    fv = np.concatenate([f, v[:, None]], axis=1)
    rgb = sigmoid(fv @ params.appearance_weight.T + params.appearance_bias)
    K = len(texels)
    return Decoded(Correctives.from_array(motion), rgb.reshape(K, 3, S, S, S), alpha.reshape(K, S, S, S))


def decode_backward(features, params, grid, grad_correctives, grad_rgb, grad_alpha, config=DecoderConfig()):
    """Adjoint of `decode`.

    ``grad_correctives`` is (K, 9) ordered (dt, dR, ds); ``grad_rgb`` and
    ``grad_alpha`` have the payload shapes. Any of them may be None.
    Returns (DecoderParams of gradients, FeatureMaps of gradients).
    """
    texels = grid.valid_texels
    K = len(texels)
    f, v = features.texel_vectors(texels)
    s3 = params.opacity_weight.shape[0]
    C = f.shape[1]
    fv = np.concatenate([f, v[:, None]], axis=1)
    grads = DecoderParams.zeros(K, C, params.voxels)
    d_f = np.zeros((K, C))
    d_v = np.zeros(K)

    if grad_correctives is not None:
        g = np.array(grad_correctives, dtype=np.float64).reshape(K, 9)
        raw = f @ params.motion_weight.T + params.motion_bias
        scaled = config.motion_scale * raw[:, 3:6]
        _, over, norm = _clamp_angles(scaled, config.max_angle)
        if over.any():
            # d/dx of x * m / |x| = (m / |x|) (I - x x^T / |x|^2)
            x = scaled[over]
            u = x / norm[over, None]
            gr = g[over, 3:6]
            g[over, 3:6] = (config.max_angle / norm[over, None]) * (gr - (gr * u).sum(axis=1, keepdims=True) * u)
        d_raw = config.motion_scale * g
        grads.motion_bias = d_raw
        grads.motion_weight = d_raw.T @ f
        d_f += d_raw @ params.motion_weight

    if grad_alpha is not None:
        raw = f @ params.opacity_weight.T + params.opacity_bias
        d_raw = config.density_scale * np.asarray(grad_alpha, dtype=np.float64).reshape(K, s3) * sigmoid(raw)
        grads.opacity_bias = d_raw
        grads.opacity_weight = d_raw.T @ f
        d_f += d_raw @ params.opacity_weight

    if grad_rgb is not None:
        out = sigmoid(fv @ params.appearance_weight.T + params.appearance_bias)
        d_raw = np.asarray(grad_rgb, dtype=np.float64).reshape(K, 3 * s3) * out * (1.0 - out)
        grads.appearance_bias = d_raw
        grads.appearance_weight = d_raw.T @ fv
        d_fv = d_raw @ params.appearance_weight
        d_f += d_fv[:, :C]
        d_v += d_fv[:, C]

    W = grid.resolution
    c_pose = features.pose.shape[0]
    d_maps = np.zeros((C, W * W))
    d_maps[:, texels] = d_f.T
    d_view = np.zeros(W * W)
    d_view[texels] = d_v
    feature_grads = FeatureMaps(d_maps[:c_pose].reshape(c_pose, W, W), d_maps[c_pose:].reshape(C - c_pose, W, W),
                                d_view.reshape(1, W, W))
    return grads, feature_grads


# --- slab layout --------------------------------------------------------------

def to_slab(per_texel, grid):
    """(K, [c,] S, S, S) payloads -> ([c,] S, W*S, W*S) slab; texel (j, i) owns rows j*S.., cols i*S.."""
    per_texel = np.asarray(per_texel)
    lead = per_texel.shape[1:-3]
    S = per_texel.shape[-1]
    W = grid.resolution
    full = np.zeros((W * W,) + lead + (S, S, S), dtype=per_texel.dtype)
    full[grid.valid_texels] = per_texel
    full = full.reshape((W, W) + lead + (S, S, S))
    nl = len(lead)
    # (j, i, *lead, z, y, x) -> (*lead, z, j, y, i, x)
    axes = tuple(range(2, 2 + nl)) + (2 + nl, 0, 3 + nl, 1, 4 + nl)
    return full.transpose(axes).reshape(lead + (S, W * S, W * S))


def from_slab(slab, grid):
    slab = np.asarray(slab)
    S = slab.shape[-3]
    W = grid.resolution
    lead = slab.shape[:-3]
    nl = len(lead)
    full = slab.reshape(lead + (S, W, S, W, S))
    # (*lead, z, j, y, i, x) -> (j, i, *lead, z, y, x)
    axes = (nl + 1, nl + 3) + tuple(range(nl)) + (nl, nl + 2, nl + 4)
    full = full.transpose(axes).reshape((W * W,) + lead + (S, S, S))
    return full[grid.valid_texels]


# --- file format --------------------------------------------------------------

def save_decoder(path, params, grid, proj, config=DecoderConfig(), **extra):
    """float32 blocks in manifest order; JSON manifest next to the binary."""
    path = Path(path)
    blocks = params.as_dict()
    blocks["pose_projection"] = proj
    with open(path, "wb") as f:
        for arr in blocks.values():
            f.write(np.asarray(arr, dtype="<f4").tobytes())
    manifest = {
        "kind": "decoder",
        "C_theta": int(proj.shape[0]),
        "C_I": int(params.motion_weight.shape[1] - proj.shape[0]),
        "S": int(params.voxels),
        "W": int(grid.resolution),
        "texel_count": int(params.texel_count),
        "blocks": [[name, list(np.shape(arr))] for name, arr in blocks.items()],
        "motion_scale": config.motion_scale,
        "density_scale": config.density_scale,
        "max_angle": config.max_angle,
    }
    manifest.update(extra)
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1))


def load_decoder(path):
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    if manifest.get("kind") != "decoder":
        raise ValueError(f"{path} is not a decoder parameter file")
    raw = np.frombuffer(path.read_bytes(), dtype="<f4").astype(np.float64)
    arrays, offset = {}, 0
    for name, shape in manifest["blocks"]:
        size = int(np.prod(shape))
        arrays[name] = raw[offset:offset + size].reshape(shape)
        offset += size
    if offset != raw.size:
        raise ValueError(f"{path}: payload size does not match manifest")
    proj = arrays.pop("pose_projection")
    config = DecoderConfig(manifest["motion_scale"], manifest["density_scale"], manifest["max_angle"])
    return DecoderParams.from_dict(arrays), proj, config, manifest
