"""Disparity end-point error, depth RMSE, and box containment."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .disparity import NATIVE, InstanceDisparityMap, StereoRig
from .geometry import mesh_inside_fraction

CONTAINMENT_THRESHOLD = 0.7
EVAL_UNITS = "full-frame native pixels"


@dataclass
class ObjectError:
    id: str
    epe: float
    rmse: float
    pixel_count: int


@dataclass
class DisparityEvalReport:
    pixel_epe: float
    pixel_depth_rmse: float
    object_epe: float
    object_depth_rmse: float
    per_object: list = field(default_factory=list)
    skipped_instances: list = field(default_factory=list)
    skipped_pixels: int = 0

    def to_dict(self) -> dict:
        return {
            "pixel_epe": self.pixel_epe,
            "pixel_depth_rmse": self.pixel_depth_rmse,
            "object_epe": self.object_epe,
            "object_depth_rmse": self.object_depth_rmse,
            "per_object": [{"id": o.id, "epe": o.epe, "rmse": o.rmse, "pixel_count": o.pixel_count}
                           for o in self.per_object],
            "metadata": {"units": EVAL_UNITS, "skipped": len(self.skipped_instances),
                         "skipped_ids": list(self.skipped_instances),
                         "skipped_pixels": self.skipped_pixels},
        }


@dataclass
class ContainmentReport:
    per_object_fraction: list
    pass_fraction: float
    threshold: float = CONTAINMENT_THRESHOLD

    def to_dict(self) -> dict:
        return {"per_object_fraction": list(self.per_object_fraction),
                "pass_fraction": self.pass_fraction,
                "metadata": {"threshold": self.threshold}}


def _native_full_frame(dmap: InstanceDisparityMap) -> np.ndarray:
    values = dmap.values
    if dmap.units != NATIVE:
        raise ValueError("evaluation needs native-unit maps")
    return values + dmap.roi_pair.offset


def _overlap(a: InstanceDisparityMap, b: InstanceDisparityMap):
    """Slices of a and b covering their common absolute pixel window."""
    ax, ay, aw, ah = a.roi
    bx, by, bw, bh = b.roi
    x0, y0 = max(ax, bx), max(ay, by)
    x1, y1 = min(ax + aw, bx + bw), min(ay + ah, by + bh)
    if x1 <= x0 or y1 <= y0:
        return None
    sa = (slice(y0 - ay, y1 - ay), slice(x0 - ax, x1 - ax))
    sb = (slice(y0 - by, y1 - by), slice(x0 - bx, x1 - bx))
    return sa, sb


def instance_errors(pred: InstanceDisparityMap, gt: InstanceDisparityMap, rig: StereoRig):
    """Per-pixel absolute disparity and depth errors on gt mask and valid pred.

    Returns ``(disp_err, depth_err, n_invalid)``.
    """
    sl = _overlap(pred, gt)
    if sl is None:
        return np.zeros(0), np.zeros(0), 0
    sp, sg = sl
    dp = _native_full_frame(pred)[sp]
    dg = _native_full_frame(gt)[sg]
    dom = pred.mask[sp] & gt.mask[sg]
    valid = dom & (dp > 0) & (dg > 0)
    n_invalid = int(np.sum(dom & ~valid))
    dp, dg = dp[valid], dg[valid]
    return np.abs(dp - dg), np.abs(rig.bf / dp - rig.bf / dg), n_invalid


def eval_disparity(pred: dict, gt: dict, rig: StereoRig) -> DisparityEvalReport:
    """Pixel-wise and object-wise disparity EPE and depth RMSE.

    ``pred`` and ``gt`` map instance ids to native-unit maps. Pixel-wise values
    pool all evaluated pixels; object-wise values average per-instance means
    uniformly. Instances missing from ``pred`` or with an empty evaluation
    domain are skipped and listed in the report.
    """
    per_object, skipped = [], []
    all_disp, all_depth = [], []
    skipped_pixels = 0
    for ident in sorted(gt):
        if ident not in pred:
            skipped.append(ident)
            continue
        disp_err, depth_err, n_bad = instance_errors(pred[ident], gt[ident], rig)
        skipped_pixels += n_bad
        if disp_err.size == 0:
            skipped.append(ident)
            continue
        per_object.append(ObjectError(ident, float(disp_err.mean()),
                                      float(np.sqrt(np.mean(depth_err ** 2))), int(disp_err.size)))
        all_disp.append(disp_err)
        all_depth.append(depth_err)
    if not per_object:
        return DisparityEvalReport(float("nan"), float("nan"), float("nan"), float("nan"),
                                   [], skipped, skipped_pixels)
    disp = np.concatenate(all_disp)
    depth = np.concatenate(all_depth)
    return DisparityEvalReport(
        pixel_epe=float(disp.mean()),
        pixel_depth_rmse=float(np.sqrt(np.mean(depth ** 2))),
        object_epe=float(np.mean([o.epe for o in per_object])),
        object_depth_rmse=float(np.mean([o.rmse for o in per_object])),
        per_object=per_object, skipped_instances=skipped, skipped_pixels=skipped_pixels)


def eval_containment(meshes, boxes, threshold: float = CONTAINMENT_THRESHOLD) -> ContainmentReport:
    """Fraction of world-frame mesh vertices inside each box, and the share above ``threshold``."""
    meshes, boxes = list(meshes), list(boxes)
    if len(meshes) != len(boxes):
        raise ValueError("need exactly one mesh per box")
    fractions = [mesh_inside_fraction(m, b) for m, b in zip(meshes, boxes)]
    passed = [f > threshold for f in fractions]
    return ContainmentReport(fractions, float(np.mean(passed)) if passed else 0.0, threshold)
