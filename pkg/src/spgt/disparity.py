"""Full-frame and instance disparity, crop-and-align normalization, back-projection.

Pixel coordinates are absolute left-image coordinates with integer values at
pixel centers. Camera frame: X right, Y down, Z forward, meters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SEARCH_RANGE = (-48.0, 48.0)
ROI_OUT_SIZE = (224, 224)
MAX_LIFTED_POINTS = 768
SMOOTH_L1_BETA = 1.0

NATIVE = "native"
NORMALIZED = "normalized"


class InvalidDisparityError(ValueError):
    """Effective full-frame disparity is not positive (point at or beyond infinity)."""


@dataclass(frozen=True)
class StereoRig:
    f_u: float
    f_v: float
    c_u: float
    c_v: float
    B: float
    image_size: tuple[int, int]

    def __post_init__(self):
        if not (self.f_u > 0 and self.f_v > 0 and self.B > 0):
            raise ValueError("focal lengths and baseline must be positive")
        object.__setattr__(self, "image_size", tuple(int(s) for s in self.image_size))

    @classmethod
    def kitti(cls):
        """Rig with KITTI-like intrinsics (1242 x 375)."""
        return cls(721.5377, 721.5377, 609.5593, 172.854, 0.54, (1242, 375))

    @property
    def bf(self) -> float:
        return self.B * self.f_u

    def to_dict(self) -> dict:
        return {"f_u": self.f_u, "f_v": self.f_v, "c_u": self.c_u, "c_v": self.c_v,
                "B": self.B, "image_size": list(self.image_size)}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["f_u"]), float(d["f_v"]), float(d["c_u"]), float(d["c_v"]),
                   float(d["B"]), tuple(d["image_size"]))


@dataclass(frozen=True)
class RoiPair:
    """Left/right 2D boxes ``(x_min, y_min, width, height)`` of one instance."""

    left_box: tuple[float, float, float, float]
    right_box: tuple[float, float, float, float]
    out_size: tuple[int, int] = ROI_OUT_SIZE

    def __post_init__(self):
        object.__setattr__(self, "left_box", tuple(float(v) for v in self.left_box))
        object.__setattr__(self, "right_box", tuple(float(v) for v in self.right_box))
        object.__setattr__(self, "out_size", tuple(int(v) for v in self.out_size))
        if self.left_box[2] <= 0 or self.right_box[2] <= 0:
            raise ValueError("RoI widths must be positive")
        if min(self.out_size) <= 0:
            raise ValueError("out_size must be positive")

    @property
    def b_l(self) -> float:
        return self.left_box[0]

    @property
    def b_r(self) -> float:
        return self.right_box[0]

    @property
    def offset(self) -> float:
        """Global offset ``b_l - b_r`` removed by crop-and-align."""
        return self.b_l - self.b_r

    @property
    def aligned_width(self) -> float:
        return max(self.left_box[2], self.right_box[2])

    def native_roi(self) -> tuple[int, int, int, int]:
        """Integer left-image pixel window of the aligned crop.

        Starts at the left border, spans the aligned width, and takes the union
        of both boxes' vertical extents.
        """
        x0 = math.floor(self.b_l)
        x1 = math.ceil(self.b_l + self.aligned_width)
        y0 = math.floor(min(self.left_box[1], self.right_box[1]))
        y1 = math.ceil(max(self.left_box[1] + self.left_box[3],
                           self.right_box[1] + self.right_box[3]))
        return (x0, y0, x1 - x0, y1 - y0)

    def to_dict(self) -> dict:
        return {"left_box": list(self.left_box), "right_box": list(self.right_box),
                "b_l": self.b_l, "b_r": self.b_r, "aligned_width": self.aligned_width,
                "out_size": list(self.out_size)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["left_box"]), tuple(d["right_box"]),
                   tuple(d.get("out_size", ROI_OUT_SIZE)))


@dataclass(frozen=True, eq=False)
class InstanceDisparityMap:
    """Per-pixel instance disparity over a crop.

    ``roi`` is the absolute left-image window ``(x0, y0, W, H)`` the map covers
    when ``units == "native"``; normalized maps are resized to ``out_size``.
    """

    values: np.ndarray
    mask: np.ndarray
    roi_pair: RoiPair
    units: str = NATIVE
    roi: tuple[int, int, int, int] | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        mask = np.asarray(self.mask, dtype=bool)
        if values.shape != mask.shape or values.ndim != 2:
            raise ValueError("values and mask must be matching 2D arrays")
        if self.units not in (NATIVE, NORMALIZED):
            raise ValueError(f"unknown units {self.units!r}")
        if not np.all(np.isfinite(values[mask])):
            raise ValueError("disparity must be finite on the mask")
        roi = self.roi
        if roi is None and self.units == NATIVE:
            roi = self.roi_pair.native_roi()
        if roi is not None:
            roi = tuple(int(v) for v in roi)
            if (roi[3], roi[2]) != values.shape:
                raise ValueError(f"map shape {values.shape} does not match roi {roi}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "roi", roi)

    @property
    def shape(self):
        return self.values.shape

    def pixel_coords(self):
        """Absolute (u, v) of every map pixel, as two (H, W) arrays."""
        if self.units != NATIVE:
            raise ValueError("pixel coordinates are defined for native-unit maps only")
        x0, y0, w, h = self.roi
        v, u = np.mgrid[y0:y0 + h, x0:x0 + w]
        return u.astype(float), v.astype(float)

    def full_frame(self) -> np.ndarray:
        """Full-frame disparity on the mask (NaN elsewhere)."""
        if self.units != NATIVE:
            raise ValueError("convert to native units first")
        out = np.full(self.shape, np.nan)
        out[self.mask] = instance_to_full(self.values[self.mask], self.roi_pair)
        return out


def full_to_instance(d_full, pair: RoiPair):
    return np.asarray(d_full, dtype=float) - pair.offset


def instance_to_full(d_inst, pair: RoiPair):
    return np.asarray(d_inst, dtype=float) + pair.offset


def normalize_disparity(d_inst, pair: RoiPair):
    """Scale native instance disparity to the resized crop width."""
    if pair.aligned_width <= 0:
        raise ValueError("aligned width must be positive")
    return np.asarray(d_inst, dtype=float) * (pair.out_size[0] / pair.aligned_width)


def denormalize_disparity(d_norm, pair: RoiPair):
    return np.asarray(d_norm, dtype=float) * (pair.aligned_width / pair.out_size[0])


def project(points, rig: StereoRig):
    """Project camera-frame points; returns ``(u, v, d_full)`` arrays."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    X, Y, Z = p[:, 0], p[:, 1], p[:, 2]
    u = rig.f_u * X / Z + rig.c_u
    v = rig.f_v * Y / Z + rig.c_v
    return u, v, rig.bf / Z


def backproject(u, v, d_inst, pair: RoiPair | None, rig: StereoRig) -> np.ndarray:
    """Camera-frame point(s) from pixel coordinates and instance disparity.

    With ``pair=None`` the disparity is taken as full-frame.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    d_full = np.asarray(d_inst, dtype=float) + (pair.offset if pair is not None else 0.0)
    if np.any(~(d_full > 0)):
        raise InvalidDisparityError("effective full-frame disparity must be positive")
    Z = rig.bf / d_full
    X = (u - rig.c_u) / rig.f_u * Z
    Y = (v - rig.c_v) / rig.f_v * Z
    return np.stack(np.broadcast_arrays(X, Y, Z), axis=-1)


@dataclass
class LiftedCloud:
    points: np.ndarray
    pixels: np.ndarray
    skipped: int
    seed: int | None
    rng: str = "PCG64"


def lift_instance_cloud(dmap: InstanceDisparityMap, rig: StereoRig,
                        max_points: int | None = MAX_LIFTED_POINTS,
                        seed: int = 0) -> LiftedCloud:
    """Back-project every foreground pixel; subsample to ``max_points``.

    Pixels with nonpositive effective disparity are skipped and counted.
    Output order is row-major; subsampling keeps that order.
    """
    if dmap.units != NATIVE:
        raise ValueError("lift requires a native-unit map; denormalize first")
    u, v = dmap.pixel_coords()
    rows, cols = np.nonzero(dmap.mask)
    d_full = dmap.values[rows, cols] + dmap.roi_pair.offset
    valid = d_full > 0
    skipped = int(np.sum(~valid))
    rows, cols = rows[valid], cols[valid]
    pts = backproject(u[rows, cols], v[rows, cols], dmap.values[rows, cols], dmap.roi_pair, rig)
    pix = np.stack([u[rows, cols], v[rows, cols]], axis=1)
    used_seed = None
    if max_points is not None and len(pts) > max_points:
        rng = np.random.Generator(np.random.PCG64(seed))
        keep = np.sort(rng.choice(len(pts), size=max_points, replace=False))
        pts, pix = pts[keep], pix[keep]
        used_seed = seed
    return LiftedCloud(pts.reshape(-1, 3), pix.reshape(-1, 2), skipped, used_seed)


def smooth_l1(e, beta: float = SMOOTH_L1_BETA):
    a = np.abs(np.asarray(e, dtype=float))
    return np.where(a < beta, 0.5 * a ** 2 / beta, a - 0.5 * beta)


def smooth_l1_disparity_loss(pred: InstanceDisparityMap, gt: InstanceDisparityMap,
                             beta: float = SMOOTH_L1_BETA) -> float:
    """Mean smooth-L1 error over the ground-truth foreground, normalized units."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if not gt.mask.any():
        raise ValueError("empty foreground: mean is undefined")
    pv, gv = pred.values, gt.values
    if pred.units == NATIVE:
        pv = normalize_disparity(pv, pred.roi_pair)
    if gt.units == NATIVE:
        gv = normalize_disparity(gv, gt.roi_pair)
    return float(np.mean(smooth_l1(pv[gt.mask] - gv[gt.mask], beta)))


def resize_nearest(arr: np.ndarray, out_hw) -> np.ndarray:
    h, w = arr.shape
    oh, ow = out_hw
    rows = np.minimum(((np.arange(oh) + 0.5) * h / oh).astype(int), h - 1)
    cols = np.minimum(((np.arange(ow) + 0.5) * w / ow).astype(int), w - 1)
    return arr[np.ix_(rows, cols)]


def to_normalized(dmap: InstanceDisparityMap) -> InstanceDisparityMap:
    """Resize a native map to ``out_size`` (nearest) and scale values by width only."""
    if dmap.units == NORMALIZED:
        return dmap
    W, H = dmap.roi_pair.out_size
    values = resize_nearest(np.where(dmap.mask, dmap.values, 0.0), (H, W))
    mask = resize_nearest(dmap.mask, (H, W))
    return InstanceDisparityMap(normalize_disparity(values, dmap.roi_pair), mask,
                                dmap.roi_pair, NORMALIZED, None)


def in_search_range(dmap: InstanceDisparityMap, search_range=SEARCH_RANGE) -> bool:
    """True when every foreground native instance disparity lies in the range."""
    vals = dmap.values[dmap.mask]
    if dmap.units == NORMALIZED:
        vals = denormalize_disparity(vals, dmap.roi_pair)
    lo, hi = search_range
    return bool(np.all((vals >= lo) & (vals <= hi)))
