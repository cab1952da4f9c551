"""Surface extraction and depth rendering of reconstructed shapes."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._mc_tables import CORNER_OFFSETS, EDGE_CORNERS, TRI_TABLE
from .disparity import InstanceDisparityMap, NATIVE, RoiPair, StereoRig
from .shape_fit import Box3, yaw_matrix
from .shape_model import TsdfVolume

NEAR_PLANE = 0.1
NO_HIT = -1.0

__all__ = [
    "TriangleMesh", "ObjectPose", "DepthMap", "StereoRig", "marching_cubes",
    "render_depth", "depth_to_instance_disparity", "NEAR_PLANE", "NO_HIT",
]


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def face_normals(self) -> np.ndarray:
        """Unnormalized normals; length equals twice the triangle area."""
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return np.cross(b - a, c - a)

    def areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(), axis=1)

    def transformed(self, rotation, translation) -> "TriangleMesh":
        v = self.vertices @ np.asarray(rotation).T + np.asarray(translation)
        return TriangleMesh(v, self.triangles)


@dataclass(frozen=True)
class ObjectPose:
    """Rigid placement canonical -> left camera: yaw about Y, then translate."""

    yaw: float
    translation: tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "translation", tuple(float(t) for t in self.translation))
        if not (math.isfinite(self.yaw) and all(math.isfinite(t) for t in self.translation)):
            raise ValueError("pose must be finite")

    @classmethod
    def from_box(cls, box: Box3) -> "ObjectPose":
        return cls(box.yaw, box.center)

    @property
    def rotation(self) -> np.ndarray:
        return yaw_matrix(self.yaw)

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + np.asarray(self.translation)

    def to_dict(self) -> dict:
        return {"yaw": self.yaw, "translation": list(self.translation)}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["yaw"]), tuple(d["translation"]))


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Depth over ``roi = (x0, y0, width, height)``; ``NO_HIT`` where nothing was drawn."""

    values: np.ndarray
    roi: tuple[int, int, int, int]

    @property
    def width(self) -> int:
        return self.roi[2]

    @property
    def height(self) -> int:
        return self.roi[3]

    @property
    def hit(self) -> np.ndarray:
        return self.values > 0


def marching_cubes(volume: TsdfVolume) -> TriangleMesh:
    """Zero isosurface of a TSDF volume as a welded triangle mesh.

    Classic table-driven marching cubes, no ambiguity resolution. Vertices sit
    at the linear zero crossing along each cell edge and are shared between
    neighbouring cells. Triangles wind counter-clockwise seen from outside
    (positive side). Zero-area triangles are dropped.
    """
    meta = volume.meta
    F = volume.grid
    nx, ny, nz = meta.dims
    inside = F < 0

    cube = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int64)
    for c, (dx, dy, dz) in enumerate(CORNER_OFFSETS):
        cube |= inside[dx:nx - 1 + dx, dy:ny - 1 + dy, dz:nz - 1 + dz].astype(np.int64) << c
    active = np.nonzero((cube != 0) & (cube != 255))
    if len(active[0]) == 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    cell = np.stack(active, axis=1)
    edges = TRI_TABLE[cube[active]]
    cell_id, slot = np.nonzero(edges >= 0)
    edge_no = edges[cell_id, slot]

    # global edge key: (start node, axis) with the start at the lower corner
    c0 = CORNER_OFFSETS[EDGE_CORNERS[:, 0]]
    c1 = CORNER_OFFSETS[EDGE_CORNERS[:, 1]]
    lo = np.minimum(c0, c1)
    axis = np.argmax(np.abs(c1 - c0), axis=1)
    start = cell[cell_id] + lo[edge_no]
    n_nodes = nx * ny * nz
    key = axis[edge_no] * n_nodes + start[:, 0] + nx * (start[:, 1] + ny * start[:, 2])

    uniq, inverse = np.unique(key, return_inverse=True)
    e_axis = uniq // n_nodes
    node = uniq % n_nodes
    i, j, k = node % nx, (node // nx) % ny, node // (nx * ny)
    step = np.eye(3, dtype=np.int64)[e_axis]
    f0 = F[i, j, k]
    f1 = F[i + step[:, 0], j + step[:, 1], k + step[:, 2]]
    t = f0 / (f0 - f1)
    ijk = np.stack([i, j, k], axis=1) + t[:, None] * step
    verts = meta.node_position(ijk)

    tris = inverse.reshape(-1, 3)
    # table winding is clockwise from outside in this axis layout
    tris = tris[:, ::-1]
    mesh = TriangleMesh(verts, tris)
    keep = mesh.areas() > 0
    tris = tris[keep]
    used, remap = np.unique(tris, return_inverse=True)
    return TriangleMesh(verts[used], remap.reshape(-1, 3))


def _edge_bias(ax, ay, bx, by):
    """Top-left fill rule for an edge of a positively oriented triangle."""
    dx, dy = bx - ax, by - ay
    return (dy < 0) | ((dy == 0) & (dx > 0))


def render_depth(mesh: TriangleMesh, pose: ObjectPose, rig: StereoRig, roi,
                 chunk: int = 1 << 20) -> DepthMap:
    """Z-buffered depth of a posed mesh over ``roi`` pixels of the left camera.

    Pixel centers sit at integer coordinates. Depth is interpolated
    perspective-correctly (barycentric in 1/Z). No back-face culling;
    triangles with any vertex at ``Z <= NEAR_PLANE`` are discarded.
    """
    x0, y0, w, h = (int(v) for v in roi)
    width, height = rig.image_size
    if x0 < 0 or y0 < 0 or x0 + w > width or y0 + h > height or w <= 0 or h <= 0:
        raise ValueError(f"roi {roi} is not inside the {width}x{height} image")
    zbuf = np.full(h * w, np.inf)
    if mesh.is_empty:
        return DepthMap(np.full((h, w), NO_HIT), (x0, y0, w, h))

    cam = pose.apply(mesh.vertices)
    tri = mesh.triangles
    Z = cam[:, 2][tri]
    tri = tri[np.all(Z > NEAR_PLANE, axis=1)]
    Z = cam[:, 2][tri]
    su = rig.f_u * cam[:, 0] / cam[:, 2] + rig.c_u
    sv = rig.f_v * cam[:, 1] / cam[:, 2] + rig.c_v
    U, V = su[tri], sv[tri]

    area = (U[:, 1] - U[:, 0]) * (V[:, 2] - V[:, 0]) - (V[:, 1] - V[:, 0]) * (U[:, 2] - U[:, 0])
    keep = area != 0
    U, V, Z, area = U[keep], V[keep], Z[keep], area[keep]
    # orient every triangle to positive area
    flip = area < 0
    U[flip] = U[flip][:, ::-1]
    V[flip] = V[flip][:, ::-1]
    Z[flip] = Z[flip][:, ::-1]
    area = np.abs(area)

    umin = np.maximum(np.ceil(U.min(axis=1)), x0).astype(np.int64)
    umax = np.minimum(np.floor(U.max(axis=1)), x0 + w - 1).astype(np.int64)
    vmin = np.maximum(np.ceil(V.min(axis=1)), y0).astype(np.int64)
    vmax = np.minimum(np.floor(V.max(axis=1)), y0 + h - 1).astype(np.int64)
    bw = np.maximum(umax - umin + 1, 0)
    bh = np.maximum(vmax - vmin + 1, 0)
    counts = bw * bh
    nz = np.flatnonzero(counts)
    U, V, Z, area = U[nz], V[nz], Z[nz], area[nz]
    umin, vmin, bw, counts = umin[nz], vmin[nz], bw[nz], counts[nz]

    bias = np.stack([_edge_bias(U[:, a], V[:, a], U[:, b], V[:, b])
                     for a, b in ((1, 2), (2, 0), (0, 1))], axis=1)

    # split triangles into chunks of bounded pair count
    ends = np.cumsum(counts)
    start = 0
    while start < len(counts):
        base = ends[start - 1] if start else 0
        stop = int(np.searchsorted(ends, base + chunk, side="right"))
        stop = max(stop, start + 1)
        sl = slice(start, stop)
        c = counts[sl]
        t_id = np.repeat(np.arange(start, stop), c)
        local = np.arange(c.sum()) - np.repeat(np.cumsum(c) - c, c)
        pu = umin[t_id] + local % bw[t_id]
        pv = vmin[t_id] + local // bw[t_id]
        Ut, Vt = U[t_id], V[t_id]
        inside = np.ones(len(t_id), dtype=bool)
        wts = []
        for e, (a, b) in enumerate(((1, 2), (2, 0), (0, 1))):
            we = (Ut[:, b] - Ut[:, a]) * (pv - Vt[:, a]) - (Vt[:, b] - Vt[:, a]) * (pu - Ut[:, a])
            inside &= (we > 0) | ((we == 0) & bias[t_id, e])
            wts.append(we)
        if inside.any():
            sel = np.flatnonzero(inside)
            tz = Z[t_id[sel]]
            ar = area[t_id[sel]]
            inv_z = (wts[0][sel] / tz[:, 0] + wts[1][sel] / tz[:, 1] + wts[2][sel] / tz[:, 2]) / ar
            depth = 1.0 / inv_z
            pix = (pv[sel] - y0) * w + (pu[sel] - x0)
            np.minimum.at(zbuf, pix, depth)
        start = stop

    zbuf[~np.isfinite(zbuf)] = NO_HIT
    return DepthMap(zbuf.reshape(h, w), (x0, y0, w, h))


def depth_to_instance_disparity(depth: DepthMap, rig: StereoRig, pair: RoiPair) -> InstanceDisparityMap:
    """Instance disparity ``B f_u / Z - (b_l - b_r)`` on hit pixels; mask = hit set."""
    if tuple(depth.roi) != pair.native_roi():
        raise ValueError(f"depth roi {depth.roi} does not match roi pair {pair.native_roi()}")
    hit = depth.hit
    if np.any((depth.values <= 0) & (depth.values != NO_HIT)):
        raise AssertionError("internal invariant violated: nonpositive rendered depth")
    values = np.zeros(depth.values.shape)
    values[hit] = rig.bf / depth.values[hit] - pair.offset
    return InstanceDisparityMap(values, hit, pair, NATIVE, depth.roi)


def mesh_inside_fraction(mesh: TriangleMesh, box: Box3) -> float:
    """Fraction of (world-frame) mesh vertices inside the closed box."""
    if len(mesh.vertices) == 0:
        return 0.0
    return float(np.mean(box.contains(mesh.vertices)))
