"""Uniform world-space grid over primitive boxes, and ray/box intersection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_CELLS_PER_AXIS = 128


@dataclass(frozen=True)
class UniformGrid:
    origin: np.ndarray  # (3,)
    cell: np.ndarray  # (3,) cell edge lengths
    dims: np.ndarray  # (3,) int64, x fastest in the flat cell index
    cell_start: np.ndarray  # (ncells + 1,) CSR offsets
    cell_items: np.ndarray  # primitive ids

    def flat(self, ijk):
        return (ijk[2] * self.dims[1] + ijk[1]) * self.dims[0] + ijk[0]

    def items(self, ijk):
        c = self.flat(ijk)
        return self.cell_items[self.cell_start[c]:self.cell_start[c + 1]]


def world_aabbs(prims):
    half = np.einsum("kij,kj->ki", np.abs(prims.rotations), prims.scales)
    return prims.positions - half, prims.positions + half


def build_grid(prims):
    if prims.count == 0:
        return UniformGrid(np.zeros(3), np.ones(3), np.ones(3, dtype=np.int64),
                           np.zeros(2, dtype=np.int64), np.zeros(0, dtype=np.int64))
    lo, hi = world_aabbs(prims)
    g_lo, g_hi = lo.min(axis=0), hi.max(axis=0)
    extent = np.maximum(g_hi - g_lo, 1e-9)
    pad = 1e-6 * extent.max()
    g_lo, extent = g_lo - pad, extent + 2 * pad
    typical = 2.0 * np.median(hi - lo, axis=0).max()
    dims = np.clip(np.ceil(extent / max(typical, 1e-12)), 1, MAX_CELLS_PER_AXIS).astype(np.int64)
    cell = extent / dims
    first = np.clip(np.floor((lo - g_lo) / cell).astype(np.int64), 0, dims - 1)
    last = np.clip(np.floor((hi - g_lo) / cell).astype(np.int64), 0, dims - 1)
    owners, cells = [], []
    for k in range(prims.count):
        ii, jj, kk = np.meshgrid(*(np.arange(first[k, a], last[k, a] + 1) for a in range(3)), indexing="ij")
        flat = (kk * dims[1] + jj) * dims[0] + ii
        cells.append(flat.ravel())
        owners.append(np.full(flat.size, k, dtype=np.int64))
    cells = np.concatenate(cells)
    owners = np.concatenate(owners)
    order = np.lexsort((owners, cells))
    counts = np.bincount(cells, minlength=int(np.prod(dims)))
    start = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return UniformGrid(g_lo, cell, dims, start, owners[order])


def slab_intervals(origin, direction, prims, t_min, t_max):
    """Entry/exit of one ray against every primitive's local cube; NaN where missed."""
    rel = origin - prims.positions
    o = np.einsum("kji,kj->ki", prims.rotations, rel) / prims.scales
    d = np.einsum("kji,j->ki", prims.rotations, direction) / prims.scales
    with np.errstate(divide="ignore", invalid="ignore"):
        ta = (-1.0 - o) / d
        tb = (1.0 - o) / d
    parallel = np.abs(d) < 1e-300
    inside = np.abs(o) <= 1.0
    near = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(ta, tb))
    far = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(ta, tb))
    t0 = np.maximum(near.max(axis=1), t_min)
    t1 = np.minimum(far.min(axis=1), t_max)
    hit = t0 <= t1
    return np.where(hit, t0, np.nan), np.where(hit, t1, np.nan)


def intersect_brute_force(ray, prims):
    t0, t1 = slab_intervals(ray.origin, ray.direction, prims, ray.t_min, ray.t_max)
    idx = np.flatnonzero(~np.isnan(t0))
    order = np.lexsort((idx, t0[idx]))
    idx = idx[order]
    return [(int(k), float(t0[k]), float(t1[k])) for k in idx]


def grid_candidates(ray, grid):
    """Primitive ids stored in the cells the ray segment visits (3D DDA)."""
    o, d = ray.origin, ray.direction
    g_lo = grid.origin
    g_hi = grid.origin + grid.cell * grid.dims
    lo, hi = ray.t_min, ray.t_max
    for a in range(3):
        if abs(d[a]) < 1e-300:
            if not g_lo[a] <= o[a] <= g_hi[a]:
                return []
            continue
        ta, tb = sorted(((g_lo[a] - o[a]) / d[a], (g_hi[a] - o[a]) / d[a]))
        lo, hi = max(lo, ta), min(hi, tb)
    if lo > hi:
        return []
    p = o + lo * d
    cell = np.clip(np.floor((p - g_lo) / grid.cell).astype(np.int64), 0, grid.dims - 1)
    step = np.zeros(3, dtype=np.int64)
    t_next = np.full(3, np.inf)
    t_delta = np.full(3, np.inf)
    for a in range(3):
        if d[a] > 0:
            step[a] = 1
            t_next[a] = (g_lo[a] + (cell[a] + 1) * grid.cell[a] - o[a]) / d[a]
            t_delta[a] = grid.cell[a] / d[a]
        elif d[a] < 0:
            step[a] = -1
            t_next[a] = (g_lo[a] + cell[a] * grid.cell[a] - o[a]) / d[a]
            t_delta[a] = -grid.cell[a] / d[a]
    found = []
    seen = set()
    while True:
        for k in grid.items(cell):
            if k not in seen:
                seen.add(int(k))
                found.append(int(k))
        a = int(np.argmin(t_next))
        if t_next[a] > hi:
            break
        cell[a] += step[a]
        if not 0 <= cell[a] < grid.dims[a]:
            break
        t_next[a] += t_delta[a]
    return found


def intersect_primitives(ray, prims, grid):
    """Sorted (primitive, t_enter, t_exit) for every box the ray crosses inside [t_min, t_max]."""
    cand = np.array(sorted(grid_candidates(ray, grid)), dtype=np.int64)
    if len(cand) == 0:
        return []
    sub = _subset(prims, cand)
    t0, t1 = slab_intervals(ray.origin, ray.direction, sub, ray.t_min, ray.t_max)
    keep = np.flatnonzero(~np.isnan(t0))
    order = keep[np.lexsort((cand[keep], t0[keep]))]
    return [(int(cand[i]), float(t0[i]), float(t1[i])) for i in order]


class _subset:
    def __init__(self, prims, idx):
        self.positions = prims.positions[idx]
        self.rotations = prims.rotations[idx]
        self.scales = prims.scales[idx]
