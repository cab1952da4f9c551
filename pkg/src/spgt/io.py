"""Binary and text formats: TSDF1 volumes, SPCA1 bases, PLY, PFM, disparity sidecars."""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .disparity import InstanceDisparityMap, RoiPair, StereoRig
from .geometry import NO_HIT, DepthMap, TriangleMesh
from .shape_model import ShapeBasis, ShapeModelError, TsdfVolume, VolumeMeta

TSDF_MAGIC = b"TSDF1"
SPCA_MAGIC = b"SPCA1"
_META = struct.Struct("<3I3f3ff")


class FormatError(ValueError):
    pass


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_json(path, obj):
    atomic_write_bytes(path, dump_json(obj).encode())


def read_json(path):
    with open(path) as f:
        return json.load(f)


# -- TSDF1 / SPCA1 -----------------------------------------------------------

def _pack_meta(meta: VolumeMeta) -> bytes:
    return _META.pack(*meta.dims, *meta.extent, *meta.origin, meta.truncation)


def _unpack_meta(buf, offset) -> VolumeMeta:
    try:
        vals = _META.unpack_from(buf, offset)
    except struct.error as exc:
        raise FormatError("truncated volume header") from exc
    # float32 storage: keep the stored values exactly
    return VolumeMeta(vals[0:3], vals[3:6], vals[6:9], vals[9])


def tsdf_bytes(volume: TsdfVolume) -> bytes:
    return TSDF_MAGIC + _pack_meta(volume.meta) + volume.values.astype("<f4").tobytes()


def write_tsdf(path, volume: TsdfVolume):
    atomic_write_bytes(path, tsdf_bytes(volume))


def read_tsdf(path) -> TsdfVolume:
    buf = Path(path).read_bytes()
    if not buf.startswith(TSDF_MAGIC):
        raise FormatError(f"{path}: not a TSDF1 file")
    meta = _unpack_meta(buf, len(TSDF_MAGIC))
    start = len(TSDF_MAGIC) + _META.size
    if len(buf) - start != 4 * meta.size:
        raise FormatError(f"{path}: expected {meta.size} values")
    values = np.frombuffer(buf, "<f4", count=meta.size, offset=start).astype(float)
    return TsdfVolume(meta, values)


def basis_bytes(basis: ShapeBasis) -> bytes:
    parts = [SPCA_MAGIC, struct.pack("<I", basis.K), _pack_meta(basis.meta),
             basis.mean.astype("<f4").tobytes(),
             np.asfortranarray(basis.basis).astype("<f4").tobytes(order="F"),
             basis.sigma.astype("<f4").tobytes()]
    return b"".join(parts)


def write_basis(path, basis: ShapeBasis):
    atomic_write_bytes(path, basis_bytes(basis))


def read_basis(path) -> ShapeBasis:
    buf = Path(path).read_bytes()
    if not buf.startswith(SPCA_MAGIC):
        raise FormatError(f"{path}: not an SPCA1 file")
    (K,) = struct.unpack_from("<I", buf, len(SPCA_MAGIC))
    meta = _unpack_meta(buf, len(SPCA_MAGIC) + 4)
    N = meta.size
    off = len(SPCA_MAGIC) + 4 + _META.size
    if len(buf) - off != 4 * (N + N * K + K):
        raise FormatError(f"{path}: payload size does not match K={K}, N={N}")
    mean = np.frombuffer(buf, "<f4", N, off).astype(float)
    off += 4 * N
    V = np.frombuffer(buf, "<f4", N * K, off).astype(float).reshape((N, K), order="F")
    off += 4 * N * K
    sigma = np.frombuffer(buf, "<f4", K, off).astype(float)
    try:
        return ShapeBasis(meta, mean, V, sigma)
    except ShapeModelError as exc:
        raise FormatError(f"{path}: {exc}") from exc


# -- PLY ---------------------------------------------------------------------

def ply_bytes(vertices, triangles=None, binary: bool = False, precision: str = "float") -> bytes:
    v = np.asarray(vertices, dtype=float).reshape(-1, 3)
    t = None if triangles is None else np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    vtype = {"float": "<f4", "double": "<f8"}[precision]
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {len(v)}",
              f"property {precision} x", f"property {precision} y", f"property {precision} z"]
    if t is not None:
        header += [f"element face {len(t)}", "property list uchar int vertex_indices"]
    header.append("end_header")
    out = ("\n".join(header) + "\n").encode()
    if binary:
        out += v.astype(vtype).tobytes()
        if t is not None and len(t):
            rec = np.zeros(len(t), dtype=[("n", "u1"), ("idx", "<i4", 3)])
            rec["n"] = 3
            rec["idx"] = t
            out += rec.tobytes()
        return out
    fmt = "%.9g" if precision == "float" else "%.17g"
    vv = v.astype(vtype)
    lines = [" ".join(fmt % c for c in row) for row in vv]
    if t is not None:
        lines += [f"3 {a} {b} {c}" for a, b, c in t]
    return out + ("\n".join(lines) + ("\n" if lines else "")).encode()


def write_ply(path, mesh_or_points, binary: bool = False, precision: str = "float"):
    if isinstance(mesh_or_points, TriangleMesh):
        data = ply_bytes(mesh_or_points.vertices, mesh_or_points.triangles, binary, precision)
    else:
        data = ply_bytes(mesh_or_points, None, binary, precision)
    atomic_write_bytes(path, data)


def read_ply(path):
    """Returns ``(vertices, triangles)``; triangles is None for point clouds."""
    buf = Path(path).read_bytes()
    end = buf.find(b"end_header\n")
    if not buf.startswith(b"ply") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    header = buf[:end].decode().splitlines()
    body = buf[end + len(b"end_header\n"):]
    binary = False
    n_vert, n_face, vtype = 0, None, "<f4"
    for line in header:
        tok = line.split()
        if tok[:1] == ["format"]:
            if tok[1] == "binary_little_endian":
                binary = True
            elif tok[1] != "ascii":
                raise FormatError(f"{path}: unsupported PLY format {tok[1]}")
        elif tok[:2] == ["element", "vertex"]:
            n_vert = int(tok[2])
        elif tok[:2] == ["element", "face"]:
            n_face = int(tok[2])
        elif tok[:2] == ["property", "double"]:
            vtype = "<f8"
    if binary:
        size = np.dtype(vtype).itemsize * 3 * n_vert
        verts = np.frombuffer(body, vtype, 3 * n_vert).astype(float).reshape(-1, 3)
        tris = None
        if n_face is not None:
            rec = np.frombuffer(body, dtype=[("n", "u1"), ("idx", "<i4", 3)], count=n_face, offset=size)
            tris = rec["idx"].astype(np.int64)
        return verts, tris
    lines = body.decode().splitlines()
    verts = np.array([[float(x) for x in ln.split()[:3]] for ln in lines[:n_vert]]).reshape(-1, 3)
    tris = None
    if n_face is not None:
        tris = np.array([[int(x) for x in ln.split()[1:4]] for ln in lines[n_vert:n_vert + n_face]],
                        dtype=np.int64).reshape(-1, 3)
    return verts, tris


def read_mesh(path) -> TriangleMesh:
    v, t = read_ply(path)
    return TriangleMesh(v, np.zeros((0, 3), dtype=np.int64) if t is None else t)


# -- PFM ---------------------------------------------------------------------

def pfm_bytes(image) -> bytes:
    """Single-channel little-endian PFM; rows are stored bottom-up."""
    img = np.asarray(image, dtype="<f4")
    h, w = img.shape
    return f"Pf\n{w} {h}\n-1.0\n".encode() + np.flipud(img).tobytes()


def write_pfm(path, image):
    atomic_write_bytes(path, pfm_bytes(image))


def read_pfm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    parts = buf.split(b"\n", 3)
    if len(parts) < 4 or parts[0].strip() != b"Pf":
        raise FormatError(f"{path}: not a grayscale PFM file")
    w, h = (int(x) for x in parts[1].split())
    scale = float(parts[2])
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(parts[3], dtype, w * h).reshape(h, w)
    return np.flipud(data).astype(float)


def write_depth_map(path, depth: DepthMap):
    write_pfm(path, depth.values)


def write_pgm_mask(path, mask):
    m = np.asarray(mask, dtype=bool)
    h, w = m.shape
    atomic_write_bytes(path, f"P5\n{w} {h}\n255\n".encode() + (m.astype(np.uint8) * 255).tobytes())


# -- disparity maps with sidecars -----------------------------------------------

def rle_encode(mask) -> dict:
    """Row-major run lengths, starting with a (possibly empty) run of False."""
    m = np.asarray(mask, dtype=bool)
    flat = m.ravel().astype(np.int8)
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        counts = [0] + counts
    return {"shape": list(m.shape), "counts": [int(c) for c in counts]}


def rle_decode(rle: dict) -> np.ndarray:
    h, w = rle["shape"]
    flat = np.zeros(h * w, dtype=bool)
    pos, val = 0, False
    for c in rle["counts"]:
        if val:
            flat[pos:pos + c] = True
        pos += c
        val = not val
    if pos != h * w:
        raise FormatError("mask run lengths do not cover the map")
    return flat.reshape(h, w)


def _sibling(stem: Path, suffix: str) -> Path:
    # stems may contain dots ("007.disp"), so append rather than replace
    return stem.with_name(stem.name + suffix)


def write_disparity_map(stem, dmap: InstanceDisparityMap, rig: StereoRig, extra: dict | None = None):
    """Writes ``<stem>.pfm``, ``<stem>.json`` sidecar and ``<stem>.mask.pgm``."""
    stem = Path(stem)
    img = np.where(dmap.mask, dmap.values, NO_HIT)
    write_pfm(_sibling(stem, ".pfm"), img)
    write_pgm_mask(_sibling(stem, ".mask.pgm"), dmap.mask)
    side = {"units": dmap.units, "roi": list(dmap.roi) if dmap.roi else None,
            "roi_pair": dmap.roi_pair.to_dict(), "rig": rig.to_dict(),
            "mask_rle": rle_encode(dmap.mask), "sentinel": NO_HIT}
    side.update(extra or {})
    write_json(_sibling(stem, ".json"), side)


def read_disparity_map(stem):
    """Returns ``(map, sidecar dict)``."""
    stem = Path(stem)
    side = read_json(_sibling(stem, ".json"))
    values = read_pfm(_sibling(stem, ".pfm"))
    mask = rle_decode(side["mask_rle"])
    values = np.where(mask, values, 0.0)
    dmap = InstanceDisparityMap(values, mask, RoiPair.from_dict(side["roi_pair"]),
                                side["units"], tuple(side["roi"]) if side["roi"] else None)
    return dmap, side
