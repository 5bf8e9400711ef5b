# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled ray-marching kernels. Semantics mirror ``_fallback``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor, ceil, fabs, sqrt

cnp.import_array()

cdef double EPS_T = 1e-9


cdef inline int slab(double* o, double* d, double* t, double* R, double* s,
                     double tmin, double tmax, double* t0, double* t1) noexcept nogil:
    """Entry/exit of a ray against the primitive's local cube [-1, 1]^3."""
    cdef double lo = tmin, hi = tmax, ol, dl, ta, tb, tmp, rx, ry, rz
    cdef int a
    rx = o[0] - t[0]
    ry = o[1] - t[1]
    rz = o[2] - t[2]
    for a in range(3):
        # column a of R, scaled
        ol = (R[a] * rx + R[3 + a] * ry + R[6 + a] * rz) / s[a]
        dl = (R[a] * d[0] + R[3 + a] * d[1] + R[6 + a] * d[2]) / s[a]
        if fabs(dl) < 1e-300:
            if ol < -1.0 or ol > 1.0:
                return 0
            continue
        ta = (-1.0 - ol) / dl
        tb = (1.0 - ol) / dl
        if ta > tb:
            tmp = ta
            ta = tb
            tb = tmp
        if ta > lo:
            lo = ta
        if tb < hi:
            hi = tb
    if lo <= hi:
        t0[0] = lo
        t1[0] = hi
        return 1
    return 0


cdef int gather_hits(double* o, double* d, double tmin, double tmax,
                     double[:, ::1] pos, double[:, ::1] rot, double[:, ::1] scl,
                     double[::1] g_origin, double[::1] g_cell, long[::1] g_dims,
                     long[::1] cell_start, long[::1] cell_items,
                     long[::1] stamp, long ray_id,
                     long* hit_k, double* hit_t0, double* hit_t1) noexcept nogil:
    """Uniform-grid traversal collecting candidate primitives, slab-tested and sorted by entry."""
    cdef int n = 0, a, j
    cdef double ta, tb, lo = tmin, hi = tmax, e0, e1, tmp
    cdef double inv[3]
    cdef double tnext[3]
    cdef double tdelta[3]
    cdef long cell[3]
    cdef long stepc[3]
    cdef long c, it, k, kk
    cdef double x, t0, t1
    if tmax <= tmin:
        return 0
    # clip against the grid box
    for a in range(3):
        e0 = g_origin[a]
        e1 = g_origin[a] + g_cell[a] * g_dims[a]
        if fabs(d[a]) < 1e-300:
            if o[a] < e0 or o[a] > e1:
                return 0
            continue
        ta = (e0 - o[a]) / d[a]
        tb = (e1 - o[a]) / d[a]
        if ta > tb:
            tmp = ta
            ta = tb
            tb = tmp
        if ta > lo:
            lo = ta
        if tb < hi:
            hi = tb
    if lo > hi:
        return 0
    for a in range(3):
        x = o[a] + lo * d[a]
        cell[a] = <long>floor((x - g_origin[a]) / g_cell[a])
        if cell[a] < 0:
            cell[a] = 0
        if cell[a] >= g_dims[a]:
            cell[a] = g_dims[a] - 1
        if d[a] > 0:
            stepc[a] = 1
            tnext[a] = (g_origin[a] + (cell[a] + 1) * g_cell[a] - o[a]) / d[a]
            tdelta[a] = g_cell[a] / d[a]
        elif d[a] < 0:
            stepc[a] = -1
            tnext[a] = (g_origin[a] + cell[a] * g_cell[a] - o[a]) / d[a]
            tdelta[a] = -g_cell[a] / d[a]
        else:
            stepc[a] = 0
            tnext[a] = 1e300
            tdelta[a] = 1e300
    while True:
        c = (cell[2] * g_dims[1] + cell[1]) * g_dims[0] + cell[0]
        for it in range(cell_start[c], cell_start[c + 1]):
            k = cell_items[it]
            if stamp[k] == ray_id:
                continue
            stamp[k] = ray_id
            if slab(o, d, &pos[k, 0], &rot[k, 0], &scl[k, 0], tmin, tmax, &t0, &t1):
                # insertion sort by (t0, k)
                j = n
                while j > 0 and (hit_t0[j - 1] > t0 or (hit_t0[j - 1] == t0 and hit_k[j - 1] > k)):
                    hit_k[j] = hit_k[j - 1]
                    hit_t0[j] = hit_t0[j - 1]
                    hit_t1[j] = hit_t1[j - 1]
                    j -= 1
                hit_k[j] = k
                hit_t0[j] = t0
                hit_t1[j] = t1
                n += 1
        # advance to the neighbouring cell with the nearest boundary
        if tnext[0] <= tnext[1] and tnext[0] <= tnext[2]:
            a = 0
        elif tnext[1] <= tnext[2]:
            a = 1
        else:
            a = 2
        if tnext[a] > hi:
            break
        cell[a] += stepc[a]
        if cell[a] < 0 or cell[a] >= g_dims[a]:
            break
        tnext[a] += tdelta[a]
    return n


cdef inline int locate(double* x, double* t, double* R, double* s, double* u) noexcept nogil:
    cdef double rx = x[0] - t[0], ry = x[1] - t[1], rz = x[2] - t[2]
    cdef int a
    for a in range(3):
        u[a] = (R[a] * rx + R[3 + a] * ry + R[6 + a] * rz) / s[a]
        if u[a] < -1.0 or u[a] > 1.0:
            return 0
    return 1


cdef inline void voxel_coords(double* u, int S, long* i0, double* f, double* dgdu) noexcept nogil:
    """Local [-1,1] -> voxel index + fraction, clamped half a voxel from the border."""
    cdef int a
    cdef double g
    for a in range(3):
        g = (u[a] + 1.0) * 0.5 * S - 0.5
        dgdu[a] = 0.5 * S
        if g <= 0.0:
            g = 0.0
            dgdu[a] = 0.0
        elif g >= S - 1:
            g = S - 1
            dgdu[a] = 0.0
        if S == 1:
            i0[a] = 0
            f[a] = 0.0
            dgdu[a] = 0.0
            continue
        i0[a] = <long>floor(g)
        if i0[a] > S - 2:
            i0[a] = S - 2
        f[a] = g - i0[a]


cdef inline void trilinear(double[:, :, :, :, ::1] pay, long k, long* i0, double* f, int S,
                           double* val) noexcept nogil:
    """val[0:4] = interpolated (r, g, b, alpha); axes: f[0]=x, f[1]=y, f[2]=z."""
    cdef int ch, dx, dy, dz
    cdef long x1, y1, z1
    cdef double w
    for ch in range(4):
        val[ch] = 0.0
    for dz in range(2):
        for dy in range(2):
            for dx in range(2):
                w = (f[0] if dx else 1.0 - f[0]) * (f[1] if dy else 1.0 - f[1]) * (f[2] if dz else 1.0 - f[2])
                x1 = i0[0] + dx if S > 1 else 0
                y1 = i0[1] + dy if S > 1 else 0
                z1 = i0[2] + dz if S > 1 else 0
                for ch in range(4):
                    val[ch] += w * pay[k, z1, y1, x1, ch]


cdef inline double eval_fields(double* x, long* act, int n_act, long* hit_k,
                               double[:, ::1] pos, double[:, ::1] rot, double[:, ::1] scl,
                               double[:, :, :, :, ::1] pay, int S, double* C) noexcept nogil:
    cdef int q, ch
    cdef long k
    cdef double u[3]
    cdef double f[3]
    cdef double dg[3]
    cdef long i0[3]
    cdef double val[4]
    cdef double A = 0.0
    C[0] = 0.0
    C[1] = 0.0
    C[2] = 0.0
    for q in range(n_act):
        k = hit_k[act[q]]
        if not locate(x, &pos[k, 0], &rot[k, 0], &scl[k, 0], u):
            continue
        voxel_coords(u, S, i0, f, dg)
        trilinear(pay, k, i0, f, S, val)
        C[0] += val[0]
        C[1] += val[1]
        C[2] += val[2]
        A += val[3]
    return A


cdef inline long first_sample(double t, double dt) noexcept nogil:
    cdef double v = ceil(t / dt - 0.5)
    return <long>v if v > 0 else 0


cdef inline long last_sample_excl(double t, double dt) noexcept nogil:
    return <long>floor(t / dt - 0.5) + 1


cdef struct Walk:
    long i
    long i_end
    int ptr
    int n_act


cdef inline int walk_next(Walk* w, double dt, int n_hits, double* hit_t0, double* hit_t1,
                          long* act, double* t_out) noexcept nogil:
    """Advance to the next sample covered by at least one interval. Returns 0 when done."""
    cdef double t
    cdef int q, m
    cdef long nxt
    while w.i < w.i_end:
        t = (w.i + 0.5) * dt
        while w.ptr < n_hits and hit_t0[w.ptr] - EPS_T * (1.0 + fabs(hit_t0[w.ptr])) <= t:
            act[w.n_act] = w.ptr
            w.n_act += 1
            w.ptr += 1
        m = 0
        for q in range(w.n_act):
            if hit_t1[act[q]] + EPS_T * (1.0 + fabs(hit_t1[act[q]])) >= t:
                act[m] = act[q]
                m += 1
        w.n_act = m
        if m == 0:
            if w.ptr >= n_hits:
                return 0
            nxt = first_sample(hit_t0[w.ptr] - EPS_T * (1.0 + fabs(hit_t0[w.ptr])), dt)
            w.i = nxt if nxt > w.i + 1 else w.i + 1
            continue
        t_out[0] = t
        return 1
    return 0


def march_forward(double[:, ::1] origins, double[:, ::1] dirs, double[::1] tmin, double[::1] tmax,
                  double[:, ::1] pos, double[:, ::1] rot, double[:, ::1] scl,
                  double[:, :, :, :, ::1] pay, double dt, double[::1] bg, long max_steps,
                  double[::1] g_origin, double[::1] g_cell, long[::1] g_dims,
                  long[::1] cell_start, long[::1] cell_items):
    cdef long N = origins.shape[0], K = pos.shape[0]
    cdef int S = pay.shape[1]
    out_rgb = np.zeros((N, 3))
    out_a = np.zeros(N)
    cdef double[:, ::1] rgb = out_rgb
    cdef double[::1] alpha = out_a
    hk = np.zeros(max(K, 1), dtype=np.int64)
    h0 = np.zeros(max(K, 1))
    h1 = np.zeros(max(K, 1))
    ac = np.zeros(max(K, 1), dtype=np.int64)
    st = np.full(max(K, 1), -1, dtype=np.int64)
    cdef long[::1] hit_k = hk, act = ac, stamp = st
    cdef double[::1] hit_t0 = h0, hit_t1 = h1
    cdef long r
    cdef int n_hits
    cdef Walk w
    cdef double t, A, T, Tn, wgt
    cdef double x[3]
    cdef double C[3]
    cdef double acc[3]
    with nogil:
        for r in range(N):
            acc[0] = 0.0
            acc[1] = 0.0
            acc[2] = 0.0
            T = 0.0
            n_hits = 0
            if K > 0:
                n_hits = gather_hits(&origins[r, 0], &dirs[r, 0], tmin[r], tmax[r], pos, rot, scl,
                                     g_origin, g_cell, g_dims, cell_start, cell_items, stamp, r,
                                     &hit_k[0], &hit_t0[0], &hit_t1[0])
            if n_hits > 0:
                w.i = first_sample(tmin[r], dt)
                w.i_end = last_sample_excl(tmax[r], dt)
                if w.i_end > w.i + max_steps:
                    w.i_end = w.i + max_steps
                w.ptr = 0
                w.n_act = 0
                while walk_next(&w, dt, n_hits, &hit_t0[0], &hit_t1[0], &act[0], &t):
                    x[0] = origins[r, 0] + t * dirs[r, 0]
                    x[1] = origins[r, 1] + t * dirs[r, 1]
                    x[2] = origins[r, 2] + t * dirs[r, 2]
                    A = eval_fields(x, &act[0], w.n_act, &hit_k[0], pos, rot, scl, pay, S, C)
                    Tn = T + A * dt
                    if Tn >= 1.0:
                        wgt = 1.0 - T
                        T = 1.0
                    else:
                        wgt = A * dt
                        T = Tn
                    acc[0] += wgt * C[0]
                    acc[1] += wgt * C[1]
                    acc[2] += wgt * C[2]
                    if T >= 1.0:
                        break
                    w.i += 1
            rgb[r, 0] = acc[0] + (1.0 - T) * bg[0]
            rgb[r, 1] = acc[1] + (1.0 - T) * bg[1]
            rgb[r, 2] = acc[2] + (1.0 - T) * bg[2]
            alpha[r] = T
    return out_rgb, out_a


def march_backward(double[:, ::1] origins, double[:, ::1] dirs, double[::1] tmin, double[::1] tmax,
                   double[:, ::1] pos, double[:, ::1] rot, double[:, ::1] scl,
                   double[:, :, :, :, ::1] pay, double dt, double[::1] bg, long max_steps,
                   double[::1] g_origin, double[::1] g_cell, long[::1] g_dims,
                   long[::1] cell_start, long[::1] cell_items,
                   double[:, ::1] grad_rgb, double[::1] grad_alpha):
    """Adjoint of ``march_forward``. Returns (d_payload, d_pos, d_rot, d_scale)."""
    cdef long N = origins.shape[0], K = pos.shape[0]
    cdef int S = pay.shape[1]
    gp = np.zeros((K, S, S, S, 4))
    gt = np.zeros((K, 3))
    gr = np.zeros((K, 3, 3))
    gs = np.zeros((K, 3))
    cdef double[:, :, :, :, ::1] d_pay = gp
    cdef double[:, ::1] d_pos = gt
    cdef double[:, :, ::1] d_rot = gr
    cdef double[:, ::1] d_scl = gs
    hk = np.zeros(max(K, 1), dtype=np.int64)
    h0 = np.zeros(max(K, 1))
    h1 = np.zeros(max(K, 1))
    ac = np.zeros(max(K, 1), dtype=np.int64)
    st = np.full(max(K, 1), -1, dtype=np.int64)
    cdef long[::1] hit_k = hk, act = ac, stamp = st
    cdef double[::1] hit_t0 = h0, hit_t1 = h1
    cdef long r, k, n_samp, si, z1, y1, x1
    cdef int n_hits, q, a, b, ch, dx, dy, dz
    cdef Walk w
    cdef double t, A, T, Tn, wgt, ga, gc0, gc1, gc2, dA, wv, cw
    cdef bint saturated
    cdef double x[3]
    cdef double C[3]
    cdef double Cend[3]
    cdef double u[3]
    cdef double f[3]
    cdef double dg[3]
    cdef double gu[3]
    cdef double up[4]
    cdef double dval[3]
    cdef double rel[3]
    cdef long i0[3]
    cdef double val[4]
    cdef double fw[3][2]
    cdef double dfw[3][2]
    with nogil:
        for r in range(N):
            gc0 = grad_rgb[r, 0]
            gc1 = grad_rgb[r, 1]
            gc2 = grad_rgb[r, 2]
            ga = grad_alpha[r]
            if gc0 == 0.0 and gc1 == 0.0 and gc2 == 0.0 and ga == 0.0:
                continue
            if K == 0:
                continue
            n_hits = gather_hits(&origins[r, 0], &dirs[r, 0], tmin[r], tmax[r], pos, rot, scl,
                                 g_origin, g_cell, g_dims, cell_start, cell_items, stamp, r,
                                 &hit_k[0], &hit_t0[0], &hit_t1[0])
            if n_hits == 0:
                continue
            # pass 1: locate saturation and the color that terminates the ray
            w.i = first_sample(tmin[r], dt)
            w.i_end = last_sample_excl(tmax[r], dt)
            if w.i_end > w.i + max_steps:
                w.i_end = w.i + max_steps
            w.ptr = 0
            w.n_act = 0
            T = 0.0
            saturated = False
            Cend[0] = bg[0]
            Cend[1] = bg[1]
            Cend[2] = bg[2]
            while walk_next(&w, dt, n_hits, &hit_t0[0], &hit_t1[0], &act[0], &t):
                x[0] = origins[r, 0] + t * dirs[r, 0]
                x[1] = origins[r, 1] + t * dirs[r, 1]
                x[2] = origins[r, 2] + t * dirs[r, 2]
                A = eval_fields(x, &act[0], w.n_act, &hit_k[0], pos, rot, scl, pay, S, C)
                Tn = T + A * dt
                if Tn >= 1.0:
                    saturated = True
                    Cend[0] = C[0]
                    Cend[1] = C[1]
                    Cend[2] = C[2]
                    break
                T = Tn
                w.i += 1
            # pass 2: per-sample adjoints, scattered to voxels and geometry
            w.i = first_sample(tmin[r], dt)
            w.ptr = 0
            w.n_act = 0
            T = 0.0
            while walk_next(&w, dt, n_hits, &hit_t0[0], &hit_t1[0], &act[0], &t):
                x[0] = origins[r, 0] + t * dirs[r, 0]
                x[1] = origins[r, 1] + t * dirs[r, 1]
                x[2] = origins[r, 2] + t * dirs[r, 2]
                A = eval_fields(x, &act[0], w.n_act, &hit_k[0], pos, rot, scl, pay, S, C)
                Tn = T + A * dt
                if Tn >= 1.0:
                    wgt = 1.0 - T
                    dA = 0.0
                else:
                    wgt = A * dt
                    dA = dt * (gc0 * (C[0] - Cend[0]) + gc1 * (C[1] - Cend[1]) + gc2 * (C[2] - Cend[2]))
                    if not saturated:
                        dA += dt * ga
                up[0] = wgt * gc0
                up[1] = wgt * gc1
                up[2] = wgt * gc2
                up[3] = dA
                for q in range(w.n_act):
                    k = hit_k[act[q]]
                    if not locate(x, &pos[k, 0], &rot[k, 0], &scl[k, 0], u):
                        continue
                    voxel_coords(u, S, i0, f, dg)
                    for a in range(3):
                        fw[a][0] = 1.0 - f[a]
                        fw[a][1] = f[a]
                        dfw[a][0] = -1.0
                        dfw[a][1] = 1.0
                    dval[0] = 0.0
                    dval[1] = 0.0
                    dval[2] = 0.0
                    for dz in range(2):
                        for dy in range(2):
                            for dx in range(2):
                                x1 = i0[0] + dx if S > 1 else 0
                                y1 = i0[1] + dy if S > 1 else 0
                                z1 = i0[2] + dz if S > 1 else 0
                                wv = fw[0][dx] * fw[1][dy] * fw[2][dz]
                                cw = 0.0
                                for ch in range(4):
                                    d_pay[k, z1, y1, x1, ch] += wv * up[ch]
                                    cw = cw + up[ch] * pay[k, z1, y1, x1, ch]
                                dval[0] += dfw[0][dx] * fw[1][dy] * fw[2][dz] * cw
                                dval[1] += fw[0][dx] * dfw[1][dy] * fw[2][dz] * cw
                                dval[2] += fw[0][dx] * fw[1][dy] * dfw[2][dz] * cw
                    for a in range(3):
                        gu[a] = dval[a] * dg[a] / scl[k, a]  # dL/d(R^T (x - t))
                    rel[0] = x[0] - pos[k, 0]
                    rel[1] = x[1] - pos[k, 1]
                    rel[2] = x[2] - pos[k, 2]
                    for a in range(3):
                        d_scl[k, a] -= gu[a] * u[a]
                        for b in range(3):
                            d_rot[k, b, a] += gu[a] * rel[b]
                            d_pos[k, b] -= rot[k, b * 3 + a] * gu[a]
                if Tn >= 1.0:
                    break
                T = Tn
                w.i += 1
    return gp, gt, gr, gs


def intersect_ray(double[::1] o, double[::1] d, double tmin, double tmax,
                  double[:, ::1] pos, double[:, ::1] rot, double[:, ::1] scl,
                  double[::1] g_origin, double[::1] g_cell, long[::1] g_dims,
                  long[::1] cell_start, long[::1] cell_items):
    cdef long K = pos.shape[0]
    hk = np.zeros(max(K, 1), dtype=np.int64)
    h0 = np.zeros(max(K, 1))
    h1 = np.zeros(max(K, 1))
    st = np.full(max(K, 1), -1, dtype=np.int64)
    cdef long[::1] hit_k = hk, stamp = st
    cdef double[::1] hit_t0 = h0, hit_t1 = h1
    cdef int n = 0
    if K > 0:
        n = gather_hits(&o[0], &d[0], tmin, tmax, pos, rot, scl, g_origin, g_cell, g_dims,
                        cell_start, cell_items, stamp, 0, &hit_k[0], &hit_t0[0], &hit_t1[0])
    return hk[:n].copy(), h0[:n].copy(), h1[:n].copy()
