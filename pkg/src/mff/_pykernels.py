"""Pure-Python / numpy implementations of the hot kernels.

Semantics are identical to ``_ckernels.pyx``; this module is used when the
compiled extension is unavailable or ``MFF_FORCE_PYTHON`` is set.
"""

import math

import numpy as np

DEGENERATE_AREA = 1e-12


def _footprint(x, y, l, w, yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    hl, hw = l / 2.0, w / 2.0
    pts = []
    for lx, ly in ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)):
        pts.append((x + c * lx - s * ly, y + s * lx + c * ly))
    return pts


def clip_polygon(subject, clipper):
    """Sutherland-Hodgman clip of a polygon by a convex counter-clockwise clipper."""
    out = list(subject)
    n = len(clipper)
    for i in range(n):
        if not out:
            break
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp = out
        out = []
        m = len(inp)
        sx, sy = inp[m - 1]
        ss = ex * (sy - ay) - ey * (sx - ax)
        for j in range(m):
            px, py = inp[j]
            sp = ex * (py - ay) - ey * (px - ax)
            if sp >= 0.0:
                if ss < 0.0:
                    t = ss / (ss - sp)
                    out.append((sx + t * (px - sx), sy + t * (py - sy)))
                out.append((px, py))
            elif ss >= 0.0:
                t = ss / (ss - sp)
                out.append((sx + t * (px - sx), sy + t * (py - sy)))
            sx, sy, ss = px, py, sp
    return out


def polygon_area(poly):
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        acc += x0 * y1 - x1 * y0
    return abs(acc) * 0.5


def convex_intersection_area(poly_a, poly_b):
    a = [tuple(map(float, p)) for p in poly_a]
    b = [tuple(map(float, p)) for p in poly_b]
    area = polygon_area(clip_polygon(a, b))
    return 0.0 if area < DEGENERATE_AREA else area


def bev_overlap_matrix(boxes_a, boxes_b):
    """Pairwise footprint intersection areas for ``(N, 5)`` x ``(M, 5)`` ``(x, y, l, w, yaw)`` rows."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 5)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 5)
    out = np.zeros((a.shape[0], b.shape[0]))
    fa = [_footprint(*row) for row in a.tolist()]
    fb = [_footprint(*row) for row in b.tolist()]
    # circumradius pre-check avoids clipping far-apart pairs
    ra = [0.5 * math.hypot(r[2], r[3]) for r in a.tolist()]
    rb = [0.5 * math.hypot(r[2], r[3]) for r in b.tolist()]
    for i in range(len(fa)):
        xi, yi = a[i, 0], a[i, 1]
        for j in range(len(fb)):
            if math.hypot(xi - b[j, 0], yi - b[j, 1]) > ra[i] + rb[j]:
                continue
            area = polygon_area(clip_polygon(fa[i], fb[j]))
            out[i, j] = 0.0 if area < DEGENERATE_AREA else area
    return out


def zbuffer_min(rows, cols, depth, height, width):
    """Minimum depth per pixel; untouched pixels are NaN. Indices must be in range."""
    out = np.full((height, width), np.nan)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    depth = np.asarray(depth, dtype=np.float64)
    if rows.size == 0:
        return out
    flat = rows * width + cols
    order = np.lexsort((depth, flat))
    flat_sorted = flat[order]
    first = np.ones(flat_sorted.shape[0], dtype=bool)
    first[1:] = flat_sorted[1:] != flat_sorted[:-1]
    out.reshape(-1)[flat_sorted[first]] = depth[order][first]
    return out


def bev_scatter(ix, iy, z, nx, ny):
    """Per-cell point count and maximum height; empty cells hold height 0."""
    ix = np.asarray(ix, dtype=np.int64)
    iy = np.asarray(iy, dtype=np.int64)
    z = np.asarray(z, dtype=np.float64)
    density = np.zeros((nx, ny), dtype=np.int64)
    max_h = np.full((nx, ny), -np.inf)
    np.add.at(density, (ix, iy), 1)
    np.maximum.at(max_h, (ix, iy), z)
    max_h[density == 0] = 0.0
    return density, max_h
