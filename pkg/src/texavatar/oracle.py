"""Dense-quadrature reference renderer.

Shares no code with the marching kernels: every sample is tested against
every primitive, interpolation goes through ``scipy.ndimage.map_coordinates``
and the saturating accumulation is written out independently. Used only to
check the engine.
"""
import numpy as np
from scipy.ndimage import map_coordinates

MIN_SAMPLES = 1024


def _rays(camera):
    xs, ys = np.meshgrid(np.arange(camera.width) + 0.5, np.arange(camera.height) + 0.5)
    cam_dirs = np.stack([(xs - camera.cx) / camera.fx, (ys - camera.cy) / camera.fy, np.ones_like(xs)], axis=-1)
    world = cam_dirs.reshape(-1, 3) @ camera.rotation
    world /= np.linalg.norm(world, axis=1, keepdims=True)
    origin = -camera.rotation.T @ camera.translation
    return origin, world


def _ray_range(origin, dirs, prims):
    """Parameter range covering every primitive's bounding sphere along each ray."""
    radii = np.linalg.norm(prims.scales, axis=1)
    along = (prims.positions - origin) @ dirs.T  # (K, N)
    lo = np.clip((along - radii[:, None]).min(axis=0), 0.0, None)
    hi = (along + radii[:, None]).max(axis=0)
    return lo, np.maximum(hi, lo)


def _field(origin, dirs, ts, valid, prims):
    """Summed (rgb, alpha) at samples origin + ts * dirs over all containing primitives.

    Rays are culled per primitive against its bounding sphere before any
    sample is tested; ``valid`` masks padding samples.
    """
    n, m = ts.shape
    S = prims.alpha.shape[-1]
    rgb = np.zeros((n, m, 3))
    alpha = np.zeros((n, m))
    radii = np.linalg.norm(prims.scales, axis=1)
    for k in range(prims.count):
        rel = prims.positions[k] - origin
        along = dirs @ rel
        miss2 = rel @ rel - along * along
        rays = np.flatnonzero(miss2 <= radii[k] ** 2 * (1 + 1e-9))
        if len(rays) == 0:
            continue
        pts = origin + ts[rays, :, None] * dirs[rays, None, :]
        local = (pts - prims.positions[k]) @ prims.rotations[k] / prims.scales[k]
        inside = (np.max(np.abs(local), axis=2) <= 1.0) & valid[rays]
        if not inside.any():
            continue
        ri, si = np.nonzero(inside)
        # voxel-center coordinates, numpy axis order (z, y, x); mode="nearest" clamps to the border voxels
        coords = ((local[ri, si] + 1.0) * S / 2.0 - 0.5)[:, ::-1].T
        alpha[rays[ri], si] += map_coordinates(prims.alpha[k], coords, order=1, mode="nearest")
        for c in range(3):
            rgb[rays[ri], si, c] += map_coordinates(prims.rgb[k, c], coords, order=1, mode="nearest")
    return rgb, alpha


def _composite(rgb, alpha, h, background):
    """Front-to-back saturating sum; rgb (n, m, 3), alpha (n, m), h (n,)."""
    n, m = alpha.shape
    total = np.zeros(n)
    color = np.zeros((n, 3))
    done = np.zeros(n, dtype=bool)
    for i in range(m):
        opacity = total + alpha[:, i] * h
        hit = ~done & (opacity >= 1.0)
        color[hit] += (1.0 - total[hit, None]) * rgb[hit, i]
        total[hit] = 1.0
        done |= hit
        live = ~done
        color[live] += (alpha[live, i] * h[live])[:, None] * rgb[live, i]
        total[live] = opacity[live]
    return color + (1.0 - total)[:, None] * np.asarray(background), total


def oracle_render(prims, camera, sample_count=MIN_SAMPLES, step=None, background=(0.0, 0.0, 0.0),
                  batch_points=1_000_000):
    """Render by brute-force quadrature.

    With ``step`` the samples sit at ``(i + 1/2) * step`` from the camera
    (the engine's grid); otherwise each ray's covered range is split into
    ``sample_count`` equal cells sampled at their midpoints.
    """
    if step is None and sample_count < 1:
        raise ValueError("sample_count must be positive")
    origin, dirs = _rays(camera)
    n = len(dirs)
    out_rgb = np.tile(np.asarray(background, dtype=np.float64), (n, 1))
    out_alpha = np.zeros(n)
    shape = (camera.height, camera.width)
    if prims.count == 0:
        return out_rgb.reshape(*shape, 3), out_alpha.reshape(shape)
    lo, hi = _ray_range(origin, dirs, prims)
    rays = np.flatnonzero(hi > lo)
    if step is None:
        h = (hi - lo) / sample_count
        first = np.zeros(n, dtype=np.int64)
        count = np.where(hi > lo, sample_count, 0)
    else:
        h = np.full(n, float(step))
        first = np.maximum(np.ceil(lo / step - 0.5), 0).astype(np.int64)
        count = np.maximum(np.floor(hi / step - 0.5).astype(np.int64) + 1 - first, 0)
    m = int(count.max()) if len(rays) else 0
    if m == 0:
        return out_rgb.reshape(*shape, 3), out_alpha.reshape(shape)
    per = max(1, batch_points // m)
    j = np.arange(m)
    for s in range(0, len(rays), per):
        rs = rays[s:s + per]
        if step is None:
            ts = lo[rs, None] + (j[None] + 0.5) * h[rs, None]
        else:
            ts = (first[rs, None] + j[None] + 0.5) * step
        valid = j[None] < count[rs, None]
        rgb, alpha = _field(origin, dirs[rs], ts, valid, prims)
        out_rgb[rs], out_alpha[rs] = _composite(rgb, alpha, h[rs], background)
    return out_rgb.reshape(*shape, 3), out_alpha.reshape(shape)
