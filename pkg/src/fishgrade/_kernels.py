"""Numba inner loops for rasterized polygon geometry.

Every mask here samples the same global lattice: pixel (row r, col c) has its
center at (x=c, y=r) and covers the cell [c-0.5, c+0.5) x [r-0.5, r+0.5).
With supersampling factor ss, the cell splits into ss*ss subcells sampled at
their centers. Masks over different windows of the lattice therefore agree
point-for-point wherever they overlap, which keeps the dense-NMS fast path
bit-identical to pairwise polygon_iou.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def fill_polygon_mask(vx, vy, x0, y0, w, h, ss, out):
    """Even-odd scanline fill of a simple polygon into out[(h*ss), (w*ss)].

    (x0, y0) is the integer pixel origin of the window. Sample points are
    x = x0 - 0.5 + (j + 0.5)/ss, y = y0 - 0.5 + (i + 0.5)/ss.
    """
    n = vx.shape[0]
    nrows = h * ss
    ncols = w * ss
    xs_cross = np.empty(n, np.float64)
    for i in range(nrows):
        y = y0 - 0.5 + (i + 0.5) / ss
        ncross = 0
        for k in range(n):
            x1 = vx[k]
            y1 = vy[k]
            x2 = vx[(k + 1) % n]
            y2 = vy[(k + 1) % n]
            if (y1 <= y < y2) or (y2 <= y < y1):
                xs_cross[ncross] = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
                ncross += 1
        # insertion sort: crossing counts are tiny
        for a in range(1, ncross):
            key = xs_cross[a]
            b = a - 1
            while b >= 0 and xs_cross[b] > key:
                xs_cross[b + 1] = xs_cross[b]
                b -= 1
            xs_cross[b + 1] = key
        for p in range(0, ncross - 1, 2):
            xa = xs_cross[p]
            xb = xs_cross[p + 1]
            # subcolumn centers in [xa, xb): j such that x0-0.5+(j+0.5)/ss >= xa
            j_lo = int(np.ceil((xa - x0 + 0.5) * ss - 0.5))
            j_hi = int(np.ceil((xb - x0 + 0.5) * ss - 0.5))
            if j_lo < 0:
                j_lo = 0
            if j_hi > ncols:
                j_hi = ncols
            for j in range(j_lo, j_hi):
                out[i, j] = True


@njit(cache=True)
def star_vertices(cx, cy, dists):
    """Vertices of a star polygon: ray k at angle 2*pi*k/n, y downward."""
    n = dists.shape[0]
    vx = np.empty(n, np.float64)
    vy = np.empty(n, np.float64)
    for k in range(n):
        ang = 2.0 * np.pi * k / n
        vx[k] = cx + dists[k] * np.cos(ang)
        vy[k] = cy + dists[k] * np.sin(ang)
    return vx, vy


@njit(cache=True)
def _row_intervals(vx, vy, x0, y0, h, ss, starts, ends, row_ptr):
    """Even-odd subcell intervals per subrow, in ABSOLUTE subcolumn indices
    J = x0*ss + j. Counts the exact subcells fill_polygon_mask would set:
    J_lo = ceil((xa + 0.5)*ss - 0.5), J_hi likewise for xb. Returns the total
    interval count written into starts/ends with row_ptr CSR offsets."""
    n = vx.shape[0]
    nrows = h * ss
    xs_cross = np.empty(n, np.float64)
    pos = 0
    for i in range(nrows):
        row_ptr[i] = pos
        y = y0 - 0.5 + (i + 0.5) / ss
        ncross = 0
        for k in range(n):
            x1 = vx[k]
            y1 = vy[k]
            x2 = vx[(k + 1) % n]
            y2 = vy[(k + 1) % n]
            if (y1 <= y < y2) or (y2 <= y < y1):
                xs_cross[ncross] = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
                ncross += 1
        for a in range(1, ncross):
            key = xs_cross[a]
            b = a - 1
            while b >= 0 and xs_cross[b] > key:
                xs_cross[b + 1] = xs_cross[b]
                b -= 1
            xs_cross[b + 1] = key
        for p in range(0, ncross - 1, 2):
            j_lo = int(np.ceil((xs_cross[p] + 0.5) * ss - 0.5))
            j_hi = int(np.ceil((xs_cross[p + 1] + 0.5) * ss - 0.5))
            if j_hi > j_lo:
                starts[pos] = j_lo
                ends[pos] = j_hi
                pos += 1
    row_ptr[nrows] = pos
    return pos


@njit(cache=True)
def nms_star_polygons(cx, cy, dists, order, iou_thr, ss):
    """Greedy star-polygon NMS over pre-sorted candidate indices.

    Returns a bool keep-flag array. Counts subcells through per-row even-odd
    intervals, which is exactly the set fill_polygon_mask rasterizes, so the
    keep-set matches a brute-force loop over pairwise polygon_iou.
    """
    n = order.shape[0]
    n_all = cx.shape[0]
    keep = np.zeros(n_all, np.bool_)
    alive = np.ones(n_all, np.bool_)
    n_rays = dists.shape[1]

    bx0 = np.empty(n_all, np.int64)
    by0 = np.empty(n_all, np.int64)
    bx1 = np.empty(n_all, np.int64)
    by1 = np.empty(n_all, np.int64)
    areas = np.full(n_all, -1, np.int64)
    for t in range(n):
        i = order[t]
        vx, vy = star_vertices(cx[i], cy[i], dists[i])
        bx0[i] = int(np.floor(np.min(vx)))
        bx1[i] = int(np.ceil(np.max(vx)))
        by0[i] = int(np.floor(np.min(vy)))
        by1[i] = int(np.ceil(np.max(vy)))

    max_iv = (n_rays // 2 + 2)
    for t in range(n):
        i = order[t]
        if not alive[i]:
            continue
        keep[i] = True
        alive[i] = False
        kh = (by1[i] - by0[i] + 1) * ss
        kvx, kvy = star_vertices(cx[i], cy[i], dists[i])
        k_starts = np.empty(kh * max_iv, np.int64)
        k_ends = np.empty(kh * max_iv, np.int64)
        k_ptr = np.empty(kh + 1, np.int64)
        _row_intervals(kvx, kvy, bx0[i], by0[i], by1[i] - by0[i] + 1, ss, k_starts, k_ends, k_ptr)
        karea = 0
        for p in range(k_ptr[kh]):
            karea += k_ends[p] - k_starts[p]

        c_starts = np.empty(max_iv, np.int64)
        c_ends = np.empty(max_iv, np.int64)
        for u in range(t + 1, n):
            j = order[u]
            if not alive[j]:
                continue
            if bx0[j] > bx1[i] or bx1[j] < bx0[i] or by0[j] > by1[i] or by1[j] < by0[i]:
                continue  # disjoint bboxes -> IoU 0
            jvx, jvy = star_vertices(cx[j], cy[j], dists[j])
            area_j = 0
            inter = 0
            jrows = (by1[j] - by0[j] + 1) * ss
            xs_cross = np.empty(n_rays, np.float64)
            for r in range(jrows):
                y = by0[j] - 0.5 + (r + 0.5) / ss
                ncross = 0
                for k in range(n_rays):
                    x1 = jvx[k]
                    y1 = jvy[k]
                    x2 = jvx[(k + 1) % n_rays]
                    y2 = jvy[(k + 1) % n_rays]
                    if (y1 <= y < y2) or (y2 <= y < y1):
                        xs_cross[ncross] = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
                        ncross += 1
                for a in range(1, ncross):
                    key = xs_cross[a]
                    b = a - 1
                    while b >= 0 and xs_cross[b] > key:
                        xs_cross[b + 1] = xs_cross[b]
                        b -= 1
                    xs_cross[b + 1] = key
                niv = 0
                for p in range(0, ncross - 1, 2):
                    j_lo = int(np.ceil((xs_cross[p] + 0.5) * ss - 0.5))
                    j_hi = int(np.ceil((xs_cross[p + 1] + 0.5) * ss - 0.5))
                    if j_hi > j_lo:
                        c_starts[niv] = j_lo
                        c_ends[niv] = j_hi
                        area_j += j_hi - j_lo
                        niv += 1
                # same absolute subrow in the kept polygon's interval table
                ki = r + (by0[j] - by0[i]) * ss
                if 0 <= ki < kh and niv > 0:
                    for p in range(k_ptr[ki], k_ptr[ki + 1]):
                        for q in range(niv):
                            lo = max(k_starts[p], c_starts[q])
                            hi = min(k_ends[p], c_ends[q])
                            if hi > lo:
                                inter += hi - lo
            union = karea + area_j - inter
            if union > 0 and inter / union > iou_thr:
                alive[j] = False
    return keep


@njit(cache=True)
def ray_distances_from_points(px, py, vx, vy, n_rays):
    """Exact distance from each point along each uniform-angle ray to the
    polygon boundary (nearest ray-segment intersection with t >= 0).

    Points are assumed inside the polygon; returns 0 where no intersection
    is found (degenerate input).
    """
    npts = px.shape[0]
    nseg = vx.shape[0]
    out = np.zeros((npts, n_rays), np.float64)
    for k in range(n_rays):
        ang = 2.0 * np.pi * k / n_rays
        ux = np.cos(ang)
        uy = np.sin(ang)
        for p in range(npts):
            best = np.inf
            for s in range(nseg):
                ax = vx[s]
                ay = vy[s]
                bx = vx[(s + 1) % nseg]
                by = vy[(s + 1) % nseg]
                ex = bx - ax
                ey = by - ay
                denom = ux * ey - uy * ex
                if abs(denom) < 1e-12:
                    continue
                qx = ax - px[p]
                qy = ay - py[p]
                t = (qx * ey - qy * ex) / denom
                ssg = (qx * uy - qy * ux) / denom
                if t >= 0.0 and -1e-9 <= ssg <= 1.0 + 1e-9 and t < best:
                    best = t
            if best < np.inf:
                out[p, k] = best
    return out


@njit(cache=True)
def mask_ray_march(labels, px, py, owner, n_rays, step):
    """Distance from each point along each ray until leaving its labeled
    component (sub-pixel marching with nearest-pixel lookup)."""
    h, w = labels.shape
    npts = px.shape[0]
    out = np.zeros((npts, n_rays), np.float64)
    for k in range(n_rays):
        ang = 2.0 * np.pi * k / n_rays
        ux = np.cos(ang) * step
        uy = np.sin(ang) * step
        for p in range(npts):
            lab = owner[p]
            t = 0.0
            x = px[p]
            y = py[p]
            while True:
                t += 1.0
                xi = int(np.floor(x + t * ux + 0.5))
                yi = int(np.floor(y + t * uy + 0.5))
                if xi < 0 or xi >= w or yi < 0 or yi >= h or labels[yi, xi] != lab:
                    break
            out[p, k] = t * step
    return out
