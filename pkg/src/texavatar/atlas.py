"""UV texel grid, multi-view texture unwrapping and UV warping."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import imageio

DEFAULT_UNWRAP_RESOLUTION = 256
DEPTH_TOLERANCE = 1e-3  # fraction of the scene diagonal


class EmptyAtlasError(ValueError):
    pass


@dataclass(frozen=True)
class TexelGrid:
    """W x W texels; flat index ``j * W + i`` for texel center ((i+.5)/W, (j+.5)/W)."""

    resolution: int
    triangle: np.ndarray  # (W*W,) owning triangle or -1
    barycentric: np.ndarray  # (W*W, 3), zeros where invalid
    corners: np.ndarray  # (W*W, 3) vertex indices of the owning triangle, -1 where invalid

    @property
    def valid_mask(self):
        return self.triangle >= 0

    @property
    def valid_texels(self):
        return np.flatnonzero(self.triangle >= 0)

    @property
    def valid_count(self):
        return int((self.triangle >= 0).sum())


@dataclass
class UvImage:
    data: np.ndarray  # (C, R, R)
    weight: np.ndarray  # (R, R)

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def resolution(self):
        return self.data.shape[1]

    def save(self, pfm_path, weight_path=None):
        """PFM payload plus a JSON header next to it; weights in their own PFM."""
        pfm_path = Path(pfm_path)
        if self.channels not in (1, 3):
            raise ValueError("PFM stores 1 or 3 channels")
        imageio.write_pfm(pfm_path, np.moveaxis(self.data, 0, -1))
        weight_path = Path(weight_path) if weight_path else pfm_path.with_name(pfm_path.stem + "_weight.pfm")
        imageio.write_pfm(weight_path, self.weight)
        header = {"channels": self.channels, "resolution": self.resolution, "weight": weight_path.name}
        pfm_path.with_suffix(".json").write_text(json.dumps(header))
        return weight_path

    @classmethod
    def load(cls, pfm_path):
        pfm_path = Path(pfm_path)
        header = json.loads(pfm_path.with_suffix(".json").read_text())
        data = imageio.read_pfm(pfm_path).astype(np.float64)
        data = data[None] if data.ndim == 2 else np.moveaxis(data, -1, 0)
        weight = imageio.read_pfm(pfm_path.with_name(header["weight"])).astype(np.float64)
        if data.shape != (header["channels"], header["resolution"], header["resolution"]):
            raise ValueError("UV image header does not match payload")
        return cls(data, weight)


def build_texel_grid(template, W):
    if W <= 0:
        raise ValueError("texel grid resolution must be positive")
    centers = (np.arange(W) + 0.5) / W
    tri_of = np.full(W * W, -1, dtype=np.int64)
    bary_of = np.zeros((W * W, 3))
    uv = template.uv
    eps = 1e-12
    for t, (a, b, c) in enumerate(template.triangles):
        pa, pb, pc = uv[a], uv[b], uv[c]
        det = (pb[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (pb[1] - pa[1])
        if abs(det) <= 1e-15:
            continue  # zero UV area: excluded from the atlas
        lo = np.minimum(np.minimum(pa, pb), pc)
        hi = np.maximum(np.maximum(pa, pb), pc)
        i0, i1 = np.searchsorted(centers, lo[0] - eps), np.searchsorted(centers, hi[0] + eps, side="right")
        j0, j1 = np.searchsorted(centers, lo[1] - eps), np.searchsorted(centers, hi[1] + eps, side="right")
        if i0 >= i1 or j0 >= j1:
            continue
        ii, jj = np.meshgrid(np.arange(i0, i1), np.arange(j0, j1))
        ii, jj = ii.ravel(), jj.ravel()
        flat = jj * W + ii
        free = tri_of[flat] < 0
        if not free.any():
            continue
        ii, jj, flat = ii[free], jj[free], flat[free]
        px, py = centers[ii], centers[jj]
        l1 = ((px - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (py - pa[1])) / det
        l2 = ((pb[0] - pa[0]) * (py - pa[1]) - (px - pa[0]) * (pb[1] - pa[1])) / det
        l0 = 1.0 - l1 - l2
        bary = np.stack([l0, l1, l2], axis=1)
        inside = (bary >= -1e-9).all(axis=1)
        bary = np.clip(bary[inside], 0.0, None)
        bary /= bary.sum(axis=1, keepdims=True)
        tri_of[flat[inside]] = t
        bary_of[flat[inside]] = bary
    if not (tri_of >= 0).any():
        raise EmptyAtlasError("empty atlas")
    corners = np.where(tri_of[:, None] >= 0, template.triangles[np.maximum(tri_of, 0)], -1)
    return TexelGrid(W, tri_of, bary_of, corners)


def texel_surface_points(grid, vertices, texels=None):
    """Barycentric surface points for texels (default: every valid texel in flat order)."""
    texels = grid.valid_texels if texels is None else np.atleast_1d(np.asarray(texels))
    if np.any(grid.triangle[texels] < 0):
        raise ValueError("invalid texel")
    corner = vertices[grid.corners[texels]]  # (N, 3, 3)
    return np.einsum("nc,ncd->nd", grid.barycentric[texels], corner)


def texel_surface_point(grid, posed, texel):
    return texel_surface_points(grid, posed.vertices, [texel])[0]


def warp_to_uv(per_triangle_values, grid):
    values = np.asarray(per_triangle_values, dtype=np.float64)
    out = np.zeros(grid.resolution * grid.resolution)
    valid = grid.triangle >= 0
    out[valid] = values[grid.triangle[valid]]
    return out.reshape(grid.resolution, grid.resolution)


def scene_diagonal(vertices):
    return float(np.linalg.norm(vertices.max(axis=0) - vertices.min(axis=0)))


def occluded(origin, points, vertices, triangles, tolerance, chunk=2048):
    """True where the segment origin -> point hits any triangle before point - tolerance."""
    a = vertices[triangles[:, 0]]
    e1 = vertices[triangles[:, 1]] - a
    e2 = vertices[triangles[:, 2]] - a
    out = np.zeros(len(points), dtype=bool)
    for s in range(0, len(points), chunk):
        p = points[s:s + chunk]
        d = p - origin
        dist = np.linalg.norm(d, axis=1)
        d = d / dist[:, None]
        # Moller-Trumbore, rays x triangles
        pv = np.cross(d[:, None, :], e2[None])
        det = (pv * e1[None]).sum(-1)
        ok = np.abs(det) > 1e-14
        inv = 1.0 / np.where(ok, det, 1.0)
        tv = origin - a
        u = (pv * tv[None]).sum(-1) * inv
        qv = np.cross(tv, e1)
        v = (d @ qv.T) * inv
        t = (qv * e2).sum(-1)[None, :] * inv
        hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 1e-12) & (t < (dist - tolerance)[:, None])
        out[s:s + chunk] = hit.any(axis=1)
    return out


def bilinear_sample(image, px):
    """Sample an (H, W, C) image at continuous pixel coords (pixel centers at +0.5), edge clamped."""
    h, w = image.shape[:2]
    x = np.clip(px[:, 0] - 0.5, 0.0, w - 1.0)
    y = np.clip(px[:, 1] - 0.5, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.int64), w - 2) if w > 1 else np.zeros(len(x), np.int64)
    y0 = np.minimum(np.floor(y).astype(np.int64), h - 2) if h > 1 else np.zeros(len(y), np.int64)
    x1, y1 = np.minimum(x0 + 1, w - 1), np.minimum(y0 + 1, h - 1)
    fx, fy = (x - x0)[:, None], (y - y0)[:, None]
    img = image.reshape(h, w, -1)
    return ((1 - fy) * ((1 - fx) * img[y0, x0] + fx * img[y0, x1])
            + fy * ((1 - fx) * img[y1, x0] + fx * img[y1, x1]))


def unwrap_view(posed, template, grid, camera, image, tolerance):
    """Color sum and hit count of a single view on the grid's texels.

    Returns (color (N, C), seen (N,) bool) over ``grid.valid_texels``.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.shape[:2] != (camera.height, camera.width):
        raise ValueError("image does not match camera resolution")
    if image.ndim == 2:
        image = image[:, :, None]
    texels = grid.valid_texels
    points = texel_surface_points(grid, posed.vertices, texels)
    normals = posed.triangle_normals[grid.triangle[texels]]
    center = camera.center
    to_cam = center - points
    facing = (to_cam * normals).sum(axis=1) > 0
    px, depth = camera.project(points)
    in_frame = (depth > 0) & (px[:, 0] >= 0) & (px[:, 0] <= camera.width) & (px[:, 1] >= 0) & (px[:, 1] <= camera.height)
    seen = facing & in_frame
    idx = np.flatnonzero(seen)
    if len(idx):
        seen[idx[occluded(center, points[idx], posed.vertices, template.triangles, tolerance)]] = False
    color = np.zeros((len(texels), image.shape[2]))
    color[seen] = bilinear_sample(image, px[seen])
    return color, seen


def unwrap_views(posed, template, cameras, images, resolution=DEFAULT_UNWRAP_RESOLUTION, grid=None):
    """Average of visible, camera-facing image samples over the views, in UV space."""
    if len(cameras) != len(images):
        raise ValueError("need exactly one image per camera")
    grid = build_texel_grid(template, resolution) if grid is None else grid
    tol = DEPTH_TOLERANCE * scene_diagonal(posed.vertices)
    channels = np.asarray(images[0]).shape[2] if np.ndim(images[0]) == 3 else 1
    total = np.zeros((grid.valid_count, channels))
    count = np.zeros(grid.valid_count)
    # views summed in a fixed order: result does not depend on list order up to rounding
    parts = [unwrap_view(posed, template, grid, cam, img, tol) for cam, img in zip(cameras, images)]
    for color, seen in parts:
        total += color
        count += seen
    return assemble_uv_image(grid, total, count)


def assemble_uv_image(grid, total, count):
    r = grid.resolution
    channels = total.shape[1]
    data = np.zeros((channels, r * r))
    weight = np.zeros(r * r)
    texels = grid.valid_texels
    nz = count > 0
    data[:, texels[nz]] = (total[nz] / count[nz, None]).T
    weight[texels] = count
    return UvImage(data.reshape(channels, r, r), weight.reshape(r, r))
