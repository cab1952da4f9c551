"""Reference implementations used as test oracles.

Each one is written independently of the package code path it checks:
explicit loops, closed-form geometry, or a different decomposition.
"""

import math

import numpy as np

from spgt.shape_model import ShapeBasis, VolumeMeta


def naive_trilinear(meta, values, p):
    """Scalar trilinear interpolation with 3D indexing and explicit weights."""
    nx, ny, nz = meta.dims
    grid = np.asarray(values).reshape(nz, ny, nx)
    g = []
    for a in range(3):
        t = (p[a] - meta.origin[a]) / meta.spacing[a]
        g.append(min(max(t, 0.0), meta.dims[a] - 1))
    base = [min(int(math.floor(t)), meta.dims[a] - 2) for a, t in enumerate(g)]
    frac = [t - b for t, b in zip(g, base)]
    total = 0.0
    for di in (0, 1):
        for dj in (0, 1):
            for dk in (0, 1):
                w = ((frac[0] if di else 1 - frac[0]) * (frac[1] if dj else 1 - frac[1])
                     * (frac[2] if dk else 1 - frac[2]))
                total += w * grid[base[2] + dk, base[1] + dj, base[0] + di]
    return total


def box_to_canonical(p, box):
    """Inverse yaw written out component-wise."""
    dx, dy, dz = (p[0] - box.center[0], p[1] - box.center[1], p[2] - box.center[2])
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    return (c * dx - s * dz, dy, s * dx + c * dz)


def inside_box(p, box):
    x, y, z = box_to_canonical(p, box)
    length, width, height = box.dims
    return abs(x) <= length / 2 and abs(y) <= height / 2 and abs(z) <= width / 2


def rounded_block_distance(p, center, half, radius):
    """Signed distance to a rounded block via closest point on the inner block."""
    inner = [h - radius for h in half]
    d = [p[a] - center[a] for a in range(3)]
    clamped = [min(max(d[a], -inner[a]), inner[a]) for a in range(3)]
    outside = math.sqrt(sum((d[a] - clamped[a]) ** 2 for a in range(3)))
    if outside > 0:
        return outside - radius
    # inside the inner block: distance to its nearest face, negated
    return -min(inner[a] - abs(d[a]) for a in range(3)) - radius


def ray_mesh_depth(origin, direction, vertices, triangles):
    """Nearest hit parameter t along rays (Moller-Trumbore), inf where missed.

    ``direction`` is (R, 3); returns (R,) t values with hit = origin + t * direction.
    """
    a = vertices[triangles[:, 0]]
    e1 = vertices[triangles[:, 1]] - a
    e2 = vertices[triangles[:, 2]] - a
    best = np.full(len(direction), np.inf)
    for r, d in enumerate(direction):
        pvec = np.cross(d, e2)
        det = np.einsum("ij,ij->i", e1, pvec)
        ok = np.abs(det) > 1e-15
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = origin - a
        u = np.einsum("ij,ij->i", tvec, pvec) * inv
        qvec = np.cross(tvec, e1)
        v = (qvec @ d) * inv
        t = np.einsum("ij,ij->i", e2, qvec) * inv
        eps = 1e-9
        hit = ok & (u >= -eps) & (v >= -eps) & (u + v <= 1 + eps) & (t > 0)
        if hit.any():
            best[r] = t[hit].min()
    return best


def point_in_triangle(px, py, tri):
    """Strict interior test via signed areas (no pixel may sit on an edge)."""
    (ax, ay), (bx, by), (cx, cy) = tri

    def side(x0, y0, x1, y1):
        return (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)

    s = [side(ax, ay, bx, by), side(bx, by, cx, cy), side(cx, cy, ax, ay)]
    return all(v > 0 for v in s) or all(v < 0 for v in s)


def sphere_meta(dims=(24, 24, 24), extent=2.0, truncation=1.0):
    return VolumeMeta.centered((extent, extent, extent), dims, truncation)


def two_mode_basis(dims=(20, 20, 20)):
    """K=2 basis on a compact grid: a sphere mean plus two smooth modes.

    Mode 1 grows the radius, mode 2 stretches along x. Columns are
    orthonormalized; sigma values are arbitrary but sorted.
    """
    meta = sphere_meta(dims)
    c = meta.voxel_centers()
    r = np.linalg.norm(c, axis=1)
    mean = r - 0.5
    m1 = -np.ones(len(c))
    m2 = -(c[:, 0] ** 2) + 0.5 * (c[:, 1] ** 2 + c[:, 2] ** 2)
    Q, R = np.linalg.qr(np.stack([m1, m2], axis=1))
    Q *= np.sign(np.diag(R))
    return ShapeBasis(meta, mean, Q, np.array([2.0, 1.0]))


def grid_search_argmin(offset, slope, lo=-2.0, hi=2.0, step=0.01):
    """Brute-force minimizer of mean((offset + slope @ z)^2) over a 2D grid."""
    axis = np.round(np.arange(lo, hi + step / 2, step), 10)
    best, best_z = np.inf, None
    for a in axis:
        zz = np.stack([np.full(len(axis), a), axis], axis=1)
        cost = np.mean((offset[:, None] + slope @ zz.T) ** 2, axis=0)
        i = int(np.argmin(cost))
        if cost[i] < best:
            best, best_z = cost[i], zz[i]
    return best_z, best
