"""Volumetric primitives: articulated basis, correctives and serialization."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .atlas import texel_surface_points
from .rotations import matrix_grad_to_axis_angle, so3_exp, so3_log

DEFAULT_VOXELS = 16
SCALE_FLOOR = 1e-4
THICKNESS = 1.0


@dataclass(frozen=True)
class PrimitiveBasis:
    """Articulation-driven placement of every primitive, one row per valid texel."""

    positions: np.ndarray  # (K, 3)
    orientations: np.ndarray  # (K, 3, 3)
    scales: np.ndarray  # (K, 3) half-extents
    texels: np.ndarray  # (K,)

    @property
    def count(self):
        return len(self.positions)


@dataclass(frozen=True)
class Correctives:
    delta_position: np.ndarray  # (K, 3)
    delta_rotation: np.ndarray  # (K, 3) axis-angle
    delta_scale: np.ndarray  # (K, 3)

    @classmethod
    def zeros(cls, count):
        return cls(np.zeros((count, 3)), np.zeros((count, 3)), np.zeros((count, 3)))

    @classmethod
    def from_array(cls, values):
        values = np.asarray(values, dtype=np.float64).reshape(-1, 9)
        return cls(values[:, 0:3], values[:, 3:6], values[:, 6:9])

    def as_array(self):
        return np.concatenate([self.delta_position, self.delta_rotation, self.delta_scale], axis=1)


@dataclass
class PrimitiveSet:
    positions: np.ndarray  # (K, 3)
    rotations: np.ndarray  # (K, 3, 3)
    scales: np.ndarray  # (K, 3)
    rgb: np.ndarray  # (K, 3, S, S, S)
    alpha: np.ndarray  # (K, S, S, S) opacity density per unit length
    texels: np.ndarray  # (K,)
    clamped_scales: int = 0
    delta_rotation: np.ndarray | None = field(default=None, repr=False)

    @property
    def count(self):
        return len(self.positions)

    @property
    def voxels(self):
        return self.alpha.shape[-1]

    def bounding_radii(self):
        return np.linalg.norm(self.scales, axis=1)

    def axis_angles(self):
        return np.array([so3_log(r) for r in self.rotations])

    def with_payload(self, rgb, alpha):
        return replace(self, rgb=np.asarray(rgb, dtype=np.float64), alpha=np.asarray(alpha, dtype=np.float64))


def init_basis(template, posed, grid, thickness=THICKNESS):
    texels = grid.valid_texels
    tri = grid.triangle[texels]
    positions = texel_surface_points(grid, posed.vertices, texels)
    orientations = posed.triangle_frames[tri].copy()
    du, dv = uv_gradients(template)
    if np.isnan(du[tri]).any():
        raise ValueError("degenerate UV")
    W = grid.resolution
    su = np.linalg.norm(du[tri], axis=1) / (2.0 * W)
    sv = np.linalg.norm(dv[tri], axis=1) / (2.0 * W)
    sn = thickness * 0.5 * (su + sv)
    return PrimitiveBasis(positions, orientations, np.stack([su, sv, sn], axis=1), texels)


def uv_gradients(template):
    """Per-triangle dX/du and dX/dv of the canonical rest shape; NaN rows for zero UV area."""
    v, t, uv = template.vertices, template.triangles, template.uv
    e1, e2 = v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]]
    d1, d2 = uv[t[:, 1]] - uv[t[:, 0]], uv[t[:, 2]] - uv[t[:, 0]]
    det = d1[:, 0] * d2[:, 1] - d2[:, 0] * d1[:, 1]
    safe = np.where(np.abs(det) <= 1e-15, np.nan, det)[:, None]
    du = (e1 * d2[:, 1:2] - e2 * d1[:, 1:2]) / safe
    dv = (e2 * d1[:, 0:1] - e1 * d2[:, 0:1]) / safe
    return du, dv


def apply_correctives(basis, corr, rgb, alpha, scale_floor=SCALE_FLOOR):
    """t = dt + t_hat, R = exp(dR) R_hat, s = max(ds + s_hat, floor)."""
    if corr.delta_position.shape[0] != basis.count:
        raise ValueError("basis and correctives differ in length")
    raw_scale = corr.delta_scale + basis.scales
    clamped = int((raw_scale <= scale_floor).sum())
    rotations = so3_exp(corr.delta_rotation) @ basis.orientations
    return PrimitiveSet(
        positions=corr.delta_position + basis.positions,
        rotations=rotations,
        scales=np.maximum(raw_scale, scale_floor),
        rgb=np.asarray(rgb, dtype=np.float64),
        alpha=np.asarray(alpha, dtype=np.float64),
        texels=basis.texels,
        clamped_scales=clamped,
        delta_rotation=np.asarray(corr.delta_rotation, dtype=np.float64),
    )


def corrective_backward(basis, corr, grad_position, grad_rotation_matrix, grad_scale, scale_floor=SCALE_FLOOR):
    """Chain primitive-geometry gradients back to the (K, 9) corrective vector (dt, dR, ds)."""
    out = np.zeros((basis.count, 9))
    out[:, 0:3] = grad_position
    # R = E R_hat, so dL/dE = dL/dR R_hat^T
    g_e = np.einsum("kab,kcb->kac", grad_rotation_matrix, basis.orientations)
    out[:, 3:6] = [matrix_grad_to_axis_angle(w, g) for w, g in zip(corr.delta_rotation, g_e)]
    out[:, 6:9] = np.where(corr.delta_scale + basis.scales > scale_floor, grad_scale, 0.0)
    return out


def correctives_relative_to(prims, basis):
    """Correctives that carry `basis` onto the geometry of `prims`."""
    drot = np.array([so3_log(r @ b.T) for r, b in zip(prims.rotations, basis.orientations)])
    return Correctives(prims.positions - basis.positions, drot, prims.scales - basis.scales)


def world_to_local(points, positions, rotations, scales):
    """local = diag(1/s) R^T (x - t); broadcasts over leading axes."""
    rel = np.asarray(points) - positions
    return np.einsum("...ji,...j->...i", rotations, rel) / scales


def local_to_world(local, positions, rotations, scales):
    return np.einsum("...ij,...j->...i", rotations, np.asarray(local) * scales) + positions


# --- file format ------------------------------------------------------------
# <u32 K><u32 S>, then K x 9 float32 (t, axis-angle of R, s), rgb K x 3 x S^3, alpha K x S^3.

def save_primitives(path, prims, **manifest):
    path = Path(path)
    k, s = prims.count, prims.voxels
    geom = np.concatenate([prims.positions, prims.axis_angles(), prims.scales], axis=1)
    with open(path, "wb") as f:
        f.write(struct.pack("<II", k, s))
        f.write(np.asarray(geom, dtype="<f4").tobytes())
        f.write(np.asarray(prims.rgb, dtype="<f4").tobytes())
        f.write(np.asarray(prims.alpha, dtype="<f4").tobytes())
    meta = {"kind": "primitives", "K": k, "S": s, "texels": [int(t) for t in prims.texels]}
    meta.update(manifest)
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1))


def load_primitives(path):
    path = Path(path)
    raw = path.read_bytes()
    k, s = struct.unpack("<II", raw[:8])
    body = np.frombuffer(raw[8:], dtype="<f4").astype(np.float64)
    n_geom, n_rgb, n_alpha = 9 * k, 3 * k * s ** 3, k * s ** 3
    if body.size != n_geom + n_rgb + n_alpha:
        raise ValueError(f"{path}: size does not match header K={k}, S={s}")
    geom = body[:n_geom].reshape(k, 9)
    rgb = body[n_geom:n_geom + n_rgb].reshape(k, 3, s, s, s)
    alpha = body[n_geom + n_rgb:].reshape(k, s, s, s)
    meta_path = path.with_suffix(".json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    texels = np.array(meta.get("texels", range(k)), dtype=np.int64)
    return PrimitiveSet(geom[:, 0:3], so3_exp(geom[:, 3:6]), geom[:, 6:9], rgb, alpha, texels), meta
