# cython: language_level=3
"""Compiled hot kernels. Mirrors ``_pykernels`` operation for operation."""

import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, hypot, fabs, INFINITY, NAN

cnp.import_array()

cdef enum:
    MAXV = 32
cdef double DEGENERATE_AREA = 1e-12


cdef void _footprint(double x, double y, double l, double w, double yaw, double* px, double* py) noexcept nogil:
    cdef double c = cos(yaw), s = sin(yaw)
    cdef double hl = l / 2.0, hw = w / 2.0
    cdef double lx[4]
    cdef double ly[4]
    cdef int k
    lx[0] = hl; ly[0] = hw
    lx[1] = -hl; ly[1] = hw
    lx[2] = -hl; ly[2] = -hw
    lx[3] = hl; ly[3] = -hw
    for k in range(4):
        px[k] = x + c * lx[k] - s * ly[k]
        py[k] = y + s * lx[k] + c * ly[k]


cdef int _clip(double* sx_in, double* sy_in, int n_in, double* cx, double* cy, int nc,
               double* ox, double* oy) noexcept nogil:
    cdef double bufx[MAXV]
    cdef double bufy[MAXV]
    cdef double ax, ay, ex, ey, sx, sy, ss, px, py, sp, t
    cdef int i, j, m, n_out
    m = n_in
    for j in range(m):
        bufx[j] = sx_in[j]
        bufy[j] = sy_in[j]
    n_out = m
    for i in range(nc):
        if m == 0:
            break
        ax = cx[i]
        ay = cy[i]
        ex = cx[(i + 1) % nc] - ax
        ey = cy[(i + 1) % nc] - ay
        n_out = 0
        sx = bufx[m - 1]
        sy = bufy[m - 1]
        ss = ex * (sy - ay) - ey * (sx - ax)
        for j in range(m):
            px = bufx[j]
            py = bufy[j]
            sp = ex * (py - ay) - ey * (px - ax)
            if sp >= 0.0:
                if ss < 0.0:
                    t = ss / (ss - sp)
                    ox[n_out] = sx + t * (px - sx)
                    oy[n_out] = sy + t * (py - sy)
                    n_out += 1
                ox[n_out] = px
                oy[n_out] = py
                n_out += 1
            elif ss >= 0.0:
                t = ss / (ss - sp)
                ox[n_out] = sx + t * (px - sx)
                oy[n_out] = sy + t * (py - sy)
                n_out += 1
            sx = px
            sy = py
            ss = sp
        m = n_out
        for j in range(m):
            bufx[j] = ox[j]
            bufy[j] = oy[j]
    return m


cdef double _area(double* x, double* y, int n) noexcept nogil:
    cdef double acc = 0.0
    cdef int i
    if n < 3:
        return 0.0
    for i in range(n):
        acc += x[i] * y[(i + 1) % n] - x[(i + 1) % n] * y[i]
    return fabs(acc) * 0.5


def convex_intersection_area(poly_a, poly_b):
    cdef double[:, ::1] a = np.ascontiguousarray(poly_a, dtype=np.float64)
    cdef double[:, ::1] b = np.ascontiguousarray(poly_b, dtype=np.float64)
    cdef double ax[MAXV]
    cdef double ay[MAXV]
    cdef double bx[MAXV]
    cdef double by[MAXV]
    cdef double ox[MAXV]
    cdef double oy[MAXV]
    cdef int na = a.shape[0], nb = b.shape[0], k, n
    cdef double area
    if na > 8 or nb > 8:
        raise ValueError("polygons are limited to 8 vertices")
    for k in range(na):
        ax[k] = a[k, 0]
        ay[k] = a[k, 1]
    for k in range(nb):
        bx[k] = b[k, 0]
        by[k] = b[k, 1]
    n = _clip(ax, ay, na, bx, by, nb, ox, oy)
    area = _area(ox, oy, n)
    return 0.0 if area < DEGENERATE_AREA else area


def bev_overlap_matrix(boxes_a, boxes_b):
    cdef double[:, ::1] a = np.ascontiguousarray(np.asarray(boxes_a, dtype=np.float64).reshape(-1, 5))
    cdef double[:, ::1] b = np.ascontiguousarray(np.asarray(boxes_b, dtype=np.float64).reshape(-1, 5))
    cdef Py_ssize_t na = a.shape[0], nb = b.shape[0], i, j
    out_arr = np.zeros((na, nb), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double fax[4]
    cdef double fay[4]
    cdef double fbx[4]
    cdef double fby[4]
    cdef double ox[MAXV]
    cdef double oy[MAXV]
    cdef double ra, rb, area
    cdef int n
    with nogil:
        for i in range(na):
            _footprint(a[i, 0], a[i, 1], a[i, 2], a[i, 3], a[i, 4], fax, fay)
            ra = 0.5 * hypot(a[i, 2], a[i, 3])
            for j in range(nb):
                rb = 0.5 * hypot(b[j, 2], b[j, 3])
                if hypot(a[i, 0] - b[j, 0], a[i, 1] - b[j, 1]) > ra + rb:
                    continue
                _footprint(b[j, 0], b[j, 1], b[j, 2], b[j, 3], b[j, 4], fbx, fby)
                n = _clip(fax, fay, 4, fbx, fby, 4, ox, oy)
                area = _area(ox, oy, n)
                out[i, j] = 0.0 if area < DEGENERATE_AREA else area
    return out_arr


def zbuffer_min(rows, cols, depth, int height, int width):
    cdef cnp.int64_t[::1] r = np.ascontiguousarray(rows, dtype=np.int64)
    cdef cnp.int64_t[::1] c = np.ascontiguousarray(cols, dtype=np.int64)
    cdef double[::1] d = np.ascontiguousarray(depth, dtype=np.float64)
    out_arr = np.full((height, width), np.nan)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t k, n = r.shape[0]
    cdef double cur
    with nogil:
        for k in range(n):
            cur = out[r[k], c[k]]
            # NaN compares false, so the first write always lands
            if not (cur <= d[k]):
                out[r[k], c[k]] = d[k]
    return out_arr


def bev_scatter(ix, iy, z, int nx, int ny):
    cdef cnp.int64_t[::1] a = np.ascontiguousarray(ix, dtype=np.int64)
    cdef cnp.int64_t[::1] b = np.ascontiguousarray(iy, dtype=np.int64)
    cdef double[::1] h = np.ascontiguousarray(z, dtype=np.float64)
    density_arr = np.zeros((nx, ny), dtype=np.int64)
    maxh_arr = np.zeros((nx, ny), dtype=np.float64)
    cdef cnp.int64_t[:, ::1] density = density_arr
    cdef double[:, ::1] maxh = maxh_arr
    cdef Py_ssize_t k, n = a.shape[0]
    with nogil:
        for k in range(n):
            if density[a[k], b[k]] == 0 or h[k] > maxh[a[k], b[k]]:
                maxh[a[k], b[k]] = h[k]
            density[a[k], b[k]] += 1
    return density_arr, maxh_arr
