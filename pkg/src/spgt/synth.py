"""Procedural stand-in data: car-like TSDF shapes, posed instances, stereo scenes."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .disparity import InstanceDisparityMap, RoiPair, StereoRig
from .geometry import (NEAR_PLANE, ObjectPose, TriangleMesh, depth_to_instance_disparity,
                       marching_cubes, render_depth)
from .shape_fit import Box3
from .shape_model import (DEFAULT_DIMS, DEFAULT_TRUNCATION, ShapeBasis, TsdfVolume, VolumeMeta,
                          decode, pca_fit)

# upper bounds of the car family, (length, width, height) in meters
MAX_CAR_DIMS = (4.8, 1.9, 1.5)
CABIN_OVERLAP = 0.1


class SynthError(ValueError):
    pass


def canonical_meta(dims=DEFAULT_DIMS, truncation=DEFAULT_TRUNCATION) -> VolumeMeta:
    return VolumeMeta.for_box(MAX_CAR_DIMS, dims, truncation)


def rng_for(seed, *stream) -> np.random.Generator:
    """Independent PCG64 stream derived from a seed and a stream path."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *stream])))


@dataclass(frozen=True)
class RoundedBlock:
    center: tuple[float, float, float]
    half: tuple[float, float, float]
    radius: float

    def sdf(self, p) -> np.ndarray:
        q = np.abs(np.asarray(p) - self.center) - (np.asarray(self.half) - self.radius)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside - self.radius


@dataclass(frozen=True)
class CarParams:
    body: RoundedBlock
    cabin: RoundedBlock

    def sdf(self, p) -> np.ndarray:
        return np.minimum(self.body.sdf(p), self.cabin.sdf(p))

    @property
    def bounds(self):
        lo = np.minimum(np.subtract(self.body.center, self.body.half),
                        np.subtract(self.cabin.center, self.cabin.half))
        hi = np.maximum(np.add(self.body.center, self.body.half),
                        np.add(self.cabin.center, self.cabin.half))
        return lo, hi


def random_car(rng: np.random.Generator) -> CarParams:
    """Body plus cabin; the union's bounding box is centered on the origin."""
    L = rng.uniform(3.6, MAX_CAR_DIMS[0])
    W = rng.uniform(1.55, MAX_CAR_DIMS[1])
    Hb = rng.uniform(0.75, 1.0)
    Hc = rng.uniform(0.4, 0.6)
    Lc = L * rng.uniform(0.45, 0.6)
    Wc = W * rng.uniform(0.82, 0.95)
    xc = L * rng.uniform(-0.12, 0.05)
    xc = float(np.clip(xc, -(L - Lc) / 2, (L - Lc) / 2))
    rb = rng.uniform(0.08, 0.25)
    rc = rng.uniform(0.08, 0.2)
    # y points down: the cabin sits on top (negative y)
    yc = -(Hb / 2 + Hc / 2 - CABIN_OVERLAP)
    shift = -((yc - Hc / 2) + Hb / 2) / 2
    body = RoundedBlock((0.0, shift, 0.0), (L / 2, Hb / 2, W / 2), rb)
    cabin = RoundedBlock((xc, yc + shift, 0.0), (Lc / 2, Hc / 2, Wc / 2), rc)
    return CarParams(body, cabin)


def car_volume(params: CarParams, meta: VolumeMeta) -> TsdfVolume:
    tau = meta.truncation
    values = np.clip(params.sdf(meta.voxel_centers()), -tau, tau)
    return TsdfVolume(meta, values.astype(np.float32).astype(float))


def gen_training_params(seed: int, count: int) -> list[CarParams]:
    rng = rng_for(seed, 0)
    return [random_car(rng) for _ in range(count)]


def gen_training_shapes(seed: int, count: int, meta: VolumeMeta | None = None) -> list[TsdfVolume]:
    if count < 2:
        raise SynthError("need at least two training shapes")
    meta = meta or canonical_meta()
    return [car_volume(p, meta) for p in gen_training_params(seed, count)]


def sample_mesh_points(mesh: TriangleMesh, count: int, rng: np.random.Generator):
    """Area-uniform samples; returns ``(points, triangle_ids)``."""
    if mesh.is_empty:
        raise SynthError("cannot sample an empty mesh")
    areas = mesh.areas()
    tri_ids = rng.choice(len(areas), size=count, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    a, b, c = (mesh.vertices[mesh.triangles[tri_ids, i]] for i in range(3))
    pts = (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c
    return pts, tri_ids


def _perturb(pts, noise_sigma, dropout, rng):
    if noise_sigma > 0:
        pts = pts + rng.normal(0.0, noise_sigma, size=pts.shape)
    if dropout > 0:
        pts = pts[rng.random(len(pts)) >= dropout]
    return pts


def sample_surface_points(basis: ShapeBasis, z, count: int, noise_sigma: float = 0.02,
                          dropout: float = 0.3, seed: int = 0) -> np.ndarray:
    """Noisy, thinned samples of the decoded surface, canonical frame."""
    mesh = marching_cubes(decode(basis, z))
    rng = rng_for(seed, 1)
    pts, _ = sample_mesh_points(mesh, count, rng)
    return _perturb(pts, noise_sigma, dropout, rng)


@dataclass
class InstanceSpec:
    id: str
    z_true: np.ndarray
    box: Box3
    pose: ObjectPose
    roi_pair: RoiPair

    def to_dict(self) -> dict:
        return {"id": self.id, "z_true": [float(v) for v in self.z_true],
                "box": self.box.to_dict(), "pose": self.pose.to_dict(),
                "roi_pair": self.roi_pair.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(str(d["id"]), np.asarray(d["z_true"], dtype=float), Box3.from_dict(d["box"]),
                   ObjectPose.from_dict(d["pose"]), RoiPair.from_dict(d["roi_pair"]))


@dataclass
class SceneSpec:
    seed: int
    rig: StereoRig
    instances: list = field(default_factory=list)
    noise_sigma: float = 0.02
    dropout: float = 0.3
    n_surface_points: int = 2000
    visible_only: bool = True
    training_seed: int = 0
    training_count: int = 20
    k: int = 5

    def to_dict(self) -> dict:
        return {"seed": int(self.seed), "rig": self.rig.to_dict(),
                "instances": [inst.to_dict() for inst in self.instances],
                "noise_sigma": self.noise_sigma, "dropout": self.dropout,
                "n_surface_points": self.n_surface_points, "visible_only": self.visible_only,
                "training_seed": self.training_seed, "training_count": self.training_count,
                "k": self.k}

    @classmethod
    def from_dict(cls, d):
        allowed = {"seed", "rig", "instances", "noise_sigma", "dropout", "n_surface_points",
                   "visible_only", "training_seed", "training_count", "k"}
        unknown = sorted(set(d) - allowed)
        if unknown:
            raise SynthError(f"unknown SceneSpec keys: {', '.join(unknown)}")
        spec = cls(int(d["seed"]), StereoRig.from_dict(d["rig"]),
                   [InstanceSpec.from_dict(i) for i in d.get("instances", [])])
        for key in allowed - {"seed", "rig", "instances"}:
            if key in d:
                setattr(spec, key, type(getattr(spec, key))(d[key]))
        if not 0 <= spec.dropout <= 1 or spec.noise_sigma < 0:
            raise SynthError("dropout must be in [0, 1] and noise_sigma >= 0")
        return spec


def scene_basis(spec: SceneSpec) -> ShapeBasis:
    """Basis the scene's true shapes are decoded from."""
    return pca_fit(gen_training_shapes(spec.training_seed, spec.training_count), spec.k)


def box_for_shape(basis: ShapeBasis, z, center, yaw) -> Box3:
    """Tightest box centered on the canonical origin that holds the decoded surface."""
    mesh = marching_cubes(decode(basis, z))
    if mesh.is_empty:
        raise SynthError("decoded shape has no surface")
    half = np.abs(mesh.vertices).max(axis=0)
    return Box3(center, (2 * half[0], 2 * half[2], 2 * half[1]), yaw)


def roi_pair_for_box(box: Box3, rig: StereoRig) -> RoiPair:
    """Left/right 2D boxes enclosing the projected 3D box corners.

    Raises SynthError when the aligned crop leaves either image.
    """
    corners = box.corners()
    Z = corners[:, 2]
    if np.any(Z <= NEAR_PLANE):
        raise SynthError("box crosses the near plane")
    u = rig.f_u * corners[:, 0] / Z + rig.c_u
    v = rig.f_v * corners[:, 1] / Z + rig.c_v
    ur = u - rig.bf / Z

    def box2(uu, vv):
        x0, y0 = math.floor(uu.min()), math.floor(vv.min())
        return (x0, y0, math.ceil(uu.max()) - x0, math.ceil(vv.max()) - y0)

    pair = RoiPair(box2(u, v), box2(ur, v))
    width, height = rig.image_size
    for x0, y0, w, h in (pair.native_roi(), pair.right_box,
                         (pair.b_r, pair.native_roi()[1], pair.aligned_width, pair.native_roi()[3])):
        if x0 < 0 or y0 < 0 or x0 + w > width or y0 + h > height:
            raise SynthError(f"instance RoI {pair.native_roi()} leaves the {width}x{height} image")
    return pair


def random_instance(rng: np.random.Generator, basis: ShapeBasis, rig: StereoRig, ident: str,
                    depth_range=(5.0, 20.0), max_tries: int = 200) -> InstanceSpec:
    z = np.clip(rng.normal(0.0, basis.sigma), -2 * basis.sigma, 2 * basis.sigma)
    base = box_for_shape(basis, z, (0.0, 0.0, 0.0), 0.0)
    width, _ = rig.image_size
    for _ in range(max_tries):
        yaw = rng.uniform(-math.pi, math.pi)
        depth = rng.uniform(*depth_range)
        u = rng.uniform(0.1 * width, 0.9 * width)
        ground = rng.uniform(1.0, 1.7)
        X = (u - rig.c_u) * depth / rig.f_u
        Y = ground - base.dims[2] / 2
        box = Box3((X, Y, depth), base.dims, yaw)
        try:
            pair = roi_pair_for_box(box, rig)
        except SynthError:
            continue
        return InstanceSpec(ident, z, box, ObjectPose.from_box(box), pair)
    raise SynthError(f"could not place instance {ident} inside the image")


def random_scene_spec(seed: int, n_instances: int, basis: ShapeBasis | None = None,
                      rig: StereoRig | None = None, depth_range=(5.0, 20.0), **kwargs) -> SceneSpec:
    spec = SceneSpec(seed, rig or StereoRig.kitti(), **kwargs)
    basis = basis if basis is not None else scene_basis(spec)
    rng = rng_for(seed, 2)
    spec.instances = [random_instance(rng, basis, spec.rig, f"{i:03d}", depth_range)
                      for i in range(n_instances)]
    return spec


@dataclass
class SceneInstance:
    spec: InstanceSpec
    gt: InstanceDisparityMap
    points: np.ndarray
    mesh: TriangleMesh


@dataclass
class SceneBundle:
    spec: SceneSpec
    basis: ShapeBasis
    instances: list

    @property
    def rig(self) -> StereoRig:
        return self.spec.rig


def build_instance(spec: SceneSpec, inst: InstanceSpec, basis: ShapeBasis, index: int) -> SceneInstance:
    rig = spec.rig
    # fails loudly for boxes outside the image
    expected = roi_pair_for_box(inst.box, rig)
    if expected.native_roi() != inst.roi_pair.native_roi():
        raise SynthError(f"instance {inst.id}: roi pair does not match the projected box")
    mesh = marching_cubes(decode(basis, inst.z_true))
    if mesh.is_empty:
        raise SynthError(f"instance {inst.id}: decoded shape has no surface")
    depth = render_depth(mesh, inst.pose, rig, inst.roi_pair.native_roi())
    gt = depth_to_instance_disparity(depth, rig, inst.roi_pair)

    rng = rng_for(spec.seed, 3, index)
    pts, tri_ids = sample_mesh_points(mesh, spec.n_surface_points, rng)
    cam = inst.pose.apply(pts)
    if spec.visible_only:
        normals = mesh.face_normals()[tri_ids] @ inst.pose.rotation.T
        cam = cam[np.einsum("ij,ij->i", normals, cam) < 0]
    cam = _perturb(cam, spec.noise_sigma, spec.dropout, rng)
    return SceneInstance(inst, gt, cam, mesh)


def build_scene(spec: SceneSpec, basis: ShapeBasis | None = None) -> SceneBundle:
    """Render ground-truth instance disparity and simulate a point cloud per instance."""
    if basis is None:
        basis = scene_basis(spec)
    instances = [build_instance(spec, inst, basis, i) for i, inst in enumerate(spec.instances)]
    return SceneBundle(spec, basis, instances)
