"""Vectorized numpy implementation of the ray-marching kernels.

Same discretization as the compiled kernels: samples sit at (i + 1/2) * dt
along each ray, fields are summed over the primitives whose slab interval
covers the sample and whose local cube contains it, and opacity saturates
at 1. Candidate primitives come from brute-force slab tests, which return
the same intervals as grid traversal.
"""
import numpy as np

EPS_T = 1e-9


def _slab_all(origins, dirs, pos, rot, scl, tmin, tmax):
    """(n, K) entry/exit parameters; NaN where the ray misses."""
    R = rot.reshape(-1, 3, 3)
    rel = origins[:, None, :] - pos[None]
    o = np.einsum("kji,nkj->nki", R, rel) / scl[None]
    d = np.einsum("kji,nj->nki", R, dirs) / scl[None]
    with np.errstate(divide="ignore", invalid="ignore"):
        ta = (-1.0 - o) / d
        tb = (1.0 - o) / d
    parallel = np.abs(d) < 1e-300
    inside = np.abs(o) <= 1.0
    near = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(ta, tb))
    far = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(ta, tb))
    t0 = np.maximum(near.max(axis=2), tmin[:, None])
    t1 = np.minimum(far.min(axis=2), tmax[:, None])
    hit = t0 <= t1
    return np.where(hit, t0, np.nan), np.where(hit, t1, np.nan)


def _voxel_coords(u, S):
    g = (u + 1.0) * 0.5 * S - 0.5
    dgdu = np.where((g > 0.0) & (g < S - 1), 0.5 * S, 0.0)
    g = np.clip(g, 0.0, S - 1)
    if S == 1:
        return np.zeros(u.shape, np.int64), np.zeros(u.shape), np.zeros(u.shape)
    i0 = np.minimum(np.floor(g).astype(np.int64), S - 2)
    return i0, g - i0, dgdu


_CORNERS = [(dx, dy, dz) for dz in (0, 1) for dy in (0, 1) for dx in (0, 1)]


def _trilinear(pay_k, i0, f, S):
    """pay_k: (S, S, S, 4) indexed [z, y, x, ch]; returns (m, 4)."""
    out = np.zeros((len(i0), 4))
    for dx, dy, dz in _CORNERS:
        w = (f[:, 0] if dx else 1 - f[:, 0]) * (f[:, 1] if dy else 1 - f[:, 1]) * (f[:, 2] if dz else 1 - f[:, 2])
        ix, iy, iz = (np.minimum(i0[:, a] + o, S - 1) for a, o in enumerate((dx, dy, dz)))
        out += w[:, None] * pay_k[iz, iy, ix]
    return out


def _sample_window(tmin, tmax, t0, t1, dt, max_steps):
    i_start = np.maximum(np.ceil(tmin / dt - 0.5), 0).astype(np.int64)
    i_end = np.minimum(np.floor(tmax / dt - 0.5).astype(np.int64) + 1, i_start + max_steps)
    lo = np.min(np.where(np.isnan(t0), np.inf, t0), axis=1)
    hi = np.max(np.where(np.isnan(t1), -np.inf, t1), axis=1)
    any_hit = np.isfinite(lo)
    # rays that hit nothing carry +-inf bounds; their window is discarded below
    lo, hi = np.where(any_hit, lo, 0.0), np.where(any_hit, hi, 0.0)
    first = np.where(any_hit, np.maximum(np.ceil((lo - EPS_T * (1 + np.abs(lo))) / dt - 0.5), 0), 0).astype(np.int64)
    i_lo = np.maximum(i_start, first)
    last = np.where(any_hit, np.floor((hi + EPS_T * (1 + np.abs(hi))) / dt - 0.5) + 1, 0).astype(np.int64)
    i_hi = np.where(any_hit, np.minimum(i_end, last), i_lo)
    i_hi = np.maximum(i_hi, i_lo)
    return i_lo, i_hi


def _fields(origins, dirs, ts, valid, t0, t1, pos, rot, scl, pay, record=False):
    n, ns = ts.shape
    K, S = pay.shape[0], pay.shape[1]
    A = np.zeros((n, ns))
    C = np.zeros((n, ns, 3))
    hits = []
    R = rot.reshape(-1, 3, 3)
    for k in range(K):
        lo = t0[:, k, None]
        hi = t1[:, k, None]
        with np.errstate(invalid="ignore"):
            m = valid & (ts >= lo - EPS_T * (1 + np.abs(lo))) & (ts <= hi + EPS_T * (1 + np.abs(hi)))
        rows, cols = np.nonzero(m)
        if len(rows) == 0:
            continue
        x = origins[rows] + ts[rows, cols, None] * dirs[rows]
        rel = x - pos[k]
        u = (rel @ R[k]) / scl[k]
        inside = np.all(np.abs(u) <= 1.0, axis=1)
        rows, cols, u, rel = rows[inside], cols[inside], u[inside], rel[inside]
        i0, f, dg = _voxel_coords(u, S)
        vals = _trilinear(pay[k], i0, f, S)
        A[rows, cols] += vals[:, 3]
        C[rows, cols] += vals[:, :3]
        if record:
            hits.append((k, rows, cols, u, rel, i0, f, dg))
    return A, C, hits


def _accumulate(A, dt):
    """Saturating accumulation; returns weights, final opacity and saturation index (-1 if none)."""
    T = np.cumsum(A * dt, axis=1)
    sat = T >= 1.0
    has = sat.any(axis=1)
    s = np.where(has, sat.argmax(axis=1), -1)
    n, ns = A.shape
    idx = np.arange(ns)[None, :]
    w = np.where(idx < np.where(has, s, ns)[:, None], A * dt, 0.0)
    prev = np.where(s > 0, T[np.arange(n), np.maximum(s - 1, 0)], 0.0)
    w[has, s[has]] = 1.0 - prev[has]
    final = np.where(has, 1.0, T[:, -1] if ns else 0.0)
    return w, final, s


def _chunks(n, K):
    size = int(max(16, min(1024, 2_000_000 // max(K, 1))))
    for s in range(0, n, size):
        yield slice(s, min(n, s + size))


def _setup(origins, dirs, tmin, tmax, pos, rot, scl, dt, max_steps):
    t0, t1 = _slab_all(origins, dirs, pos, rot, scl, tmin, tmax)
    i_lo, i_hi = _sample_window(tmin, tmax, t0, t1, dt, max_steps)
    ns = int((i_hi - i_lo).max()) if len(i_lo) else 0
    j = np.arange(ns)[None, :]
    ts = (i_lo[:, None] + j + 0.5) * dt
    valid = j < (i_hi - i_lo)[:, None]
    return t0, t1, ts, valid


def march_forward(origins, dirs, tmin, tmax, pos, rot, scl, pay, dt, bg, max_steps):
    n, K = len(origins), len(pos)
    rgb = np.tile(np.asarray(bg, dtype=np.float64), (n, 1))
    alpha = np.zeros(n)
    if K == 0:
        return rgb, alpha
    for sl in _chunks(n, K):
        t0, t1, ts, valid = _setup(origins[sl], dirs[sl], tmin[sl], tmax[sl], pos, rot, scl, dt, max_steps)
        if ts.shape[1] == 0:
            continue
        A, C, _ = _fields(origins[sl], dirs[sl], ts, valid, t0, t1, pos, rot, scl, pay)
        w, final, _ = _accumulate(A, dt)
        rgb[sl] = (w[:, :, None] * C).sum(axis=1) + (1.0 - final)[:, None] * bg
        alpha[sl] = final
    return rgb, alpha


def march_backward(origins, dirs, tmin, tmax, pos, rot, scl, pay, dt, bg, max_steps, grad_rgb, grad_alpha):
    n, K = len(origins), len(pos)
    S = pay.shape[1] if K else 1
    d_pay = np.zeros_like(pay)
    d_pos = np.zeros((K, 3))
    d_rot = np.zeros((K, 3, 3))
    d_scl = np.zeros((K, 3))
    if K == 0:
        return d_pay, d_pos, d_rot, d_scl
    R = rot.reshape(-1, 3, 3)
    flat_pay = d_pay.reshape(K, -1)
    for sl in _chunks(n, K):
        t0, t1, ts, valid = _setup(origins[sl], dirs[sl], tmin[sl], tmax[sl], pos, rot, scl, dt, max_steps)
        if ts.shape[1] == 0:
            continue
        A, C, hits = _fields(origins[sl], dirs[sl], ts, valid, t0, t1, pos, rot, scl, pay, record=True)
        w, final, s = _accumulate(A, dt)
        rows = np.arange(len(A))
        sat = s >= 0
        c_end = np.where(sat[:, None], C[rows, np.maximum(s, 0)], np.asarray(bg)[None])
        g = grad_rgb[sl]
        idx = np.arange(A.shape[1])[None, :]
        before = idx < np.where(sat, s, A.shape[1])[:, None]
        dA = dt * ((C - c_end[:, None, :]) * g[:, None, :]).sum(axis=2)
        dA += np.where(sat, 0.0, dt * grad_alpha[sl])[:, None]
        dA = np.where(before, dA, 0.0)
        up = np.concatenate([w[:, :, None] * g[:, None, :], dA[:, :, None]], axis=2)  # (n, ns, 4)
        for k, hr, hc, u, rel, i0, f, dg in hits:
            upk = up[hr, hc]
            dval = np.zeros((len(hr), 3))
            for dx, dy, dz in _CORNERS:
                fx = f[:, 0] if dx else 1 - f[:, 0]
                fy = f[:, 1] if dy else 1 - f[:, 1]
                fz = f[:, 2] if dz else 1 - f[:, 2]
                sx, sy, sz = (1.0 if dx else -1.0), (1.0 if dy else -1.0), (1.0 if dz else -1.0)
                ix, iy, iz = (np.minimum(i0[:, a] + o, S - 1) for a, o in enumerate((dx, dy, dz)))
                wv = fx * fy * fz
                flat = ((iz * S + iy) * S + ix) * 4
                for ch in range(4):
                    np.add.at(flat_pay[k], flat + ch, wv * upk[:, ch])
                cw = (upk * pay[k][iz, iy, ix]).sum(axis=1)
                dval[:, 0] += sx * fy * fz * cw
                dval[:, 1] += fx * sy * fz * cw
                dval[:, 2] += fx * fy * sz * cw
            gu = dval * dg / scl[k]
            d_scl[k] -= (gu * u).sum(axis=0)
            d_rot[k] += rel.T @ gu
            d_pos[k] -= R[k] @ gu.sum(axis=0)
    return d_pay, d_pos, d_rot, d_scl
