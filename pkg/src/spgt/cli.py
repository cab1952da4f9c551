"""Command-line entry point: ``spgt <command> ...``.

Commands
--------
synth       materialize a synthetic scene bundle (training shapes, GT maps, clouds)
fit-basis   PCA shape basis from a directory of TSDF volumes
fit-shape   per-instance shape fitting against a scene's point clouds
render-pgt  render pseudo ground-truth instance disparity from fitted shapes
eval        disparity EPE / depth RMSE (and optionally box containment)

Verbosity is set with the ``SPGT_LOG`` environment variable (e.g. ``INFO``).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io as _io
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import io
from .disparity import StereoRig
from .geometry import (ObjectPose, TriangleMesh, depth_to_instance_disparity, marching_cubes,
                       render_depth)
from .metrics import eval_containment, eval_disparity
from .shape_fit import FALLBACK, Box3, FitConfig, optimize_shape
from .shape_model import ShapeModelError, decode, explained_variance_ratio, pca_fit
from .synth import (SceneSpec, SynthError, build_instance, gen_training_shapes, random_scene_spec)

log = logging.getLogger("spgt")


class CliError(Exception):
    """Fatal, user-facing error; exits with status 2."""


class Run:
    """Collects manifest fields for one command invocation."""

    def __init__(self, command: str, manifest_path: Path):
        self.command = command
        self.manifest_path = Path(manifest_path)
        self.start = time.perf_counter()
        self.config: dict = {}
        self.inputs: dict = {}
        self.outputs: dict = {}
        self.counters: dict = {}
        self.seed = None

    def write(self):
        digest = hashlib.sha256(io.dump_json(self.config).encode()).hexdigest()
        io.write_json(self.manifest_path, {
            "command": self.command, "config": self.config, "config_digest": digest,
            "inputs": self.inputs, "outputs": self.outputs, "seed": self.seed,
            "wall_time": round(time.perf_counter() - self.start, 6), "counters": self.counters,
        })


def _load_json(path, what):
    try:
        return io.read_json(path)
    except FileNotFoundError:
        raise CliError(f"{what} not found: {path}")
    except json.JSONDecodeError as exc:
        raise CliError(f"{what} is not valid JSON: {path}: {exc}")


def _pool_map(fn, items, jobs, initializer=None, initargs=()):
    if jobs <= 1:
        if initializer:
            initializer(*initargs)
        return [fn(it) for it in items]
    with ProcessPoolExecutor(jobs, initializer=initializer, initargs=initargs) as ex:
        return list(ex.map(fn, items))


# -- synth -------------------------------------------------------------------

_WORKER: dict = {}


def _init_worker(**state):
    _WORKER.clear()
    _WORKER.update(state)


def _init_synth(spec_dict, basis):
    _init_worker(spec=SceneSpec.from_dict(spec_dict), basis=basis)


def _synth_one(index):
    spec = _WORKER["spec"]
    return build_instance(spec, spec.instances[index], _WORKER["basis"], index)


def scene_spec_from_json(d: dict) -> SceneSpec:
    """Full SceneSpec, or a recipe with ``n_instances`` (and optional ``depth_range``)."""
    if "instances" in d or "n_instances" not in d:
        return SceneSpec.from_dict(d)
    d = dict(d)
    n = int(d.pop("n_instances"))
    depth_range = tuple(d.pop("depth_range", (5.0, 20.0)))
    rig = StereoRig.from_dict(d.pop("rig")) if "rig" in d else StereoRig.kitti()
    seed = int(d.pop("seed"))
    probe = SceneSpec.from_dict({"seed": seed, "rig": rig.to_dict(), **d})
    kwargs = {k: getattr(probe, k) for k in d}
    return random_scene_spec(seed, n, rig=rig, depth_range=depth_range, **kwargs)


def cmd_synth(args) -> Run:
    out = Path(args.out)
    run = Run("synth", out / "run_manifest.json")
    raw = _load_json(args.spec, "scene spec")
    try:
        spec = scene_spec_from_json(raw)
        shapes = gen_training_shapes(spec.training_seed, spec.training_count)
        basis = pca_fit(shapes, spec.k)
    except (SynthError, ShapeModelError, KeyError, TypeError, ValueError) as exc:
        raise CliError(f"invalid scene spec: {exc}")
    run.seed = spec.seed
    run.config = {"spec": raw}
    run.inputs = {"spec": str(args.spec)}

    for i, vol in enumerate(shapes):
        io.write_tsdf(out / "shapes" / f"shape_{i:03d}.tsdf", vol)
    spec_dict = spec.to_dict()
    try:
        built = _pool_map(_synth_one, range(len(spec.instances)), args.jobs,
                          _init_synth, (spec_dict, basis))
    except SynthError as exc:
        raise CliError(str(exc))

    files = {}
    for si in built:
        ident = si.spec.id
        io.write_ply(out / "points" / f"{ident}.ply", si.points, binary=True, precision="double")
        io.write_disparity_map(out / "gt" / f"{ident}.disp", si.gt, spec.rig,
                               {"id": ident, "box": si.spec.box.to_dict(), "source": "synthetic-gt"})
        files[ident] = {"points": f"points/{ident}.ply", "gt": f"gt/{ident}.disp",
                        "n_points": int(len(si.points))}
    io.write_json(out / "scene.json", {"spec": spec_dict, "files": files, "shapes": "shapes"})
    io.write_json(out / "rig.json", spec.rig.to_dict())
    run.outputs = {"scene": str(out / "scene.json"), "rig": str(out / "rig.json"),
                   "shapes": str(out / "shapes"), "gt": str(out / "gt"),
                   "points": str(out / "points")}
    run.counters = {"instances": len(built), "training_shapes": len(shapes),
                    "points": int(sum(len(si.points) for si in built))}
    print(f"synth: {len(built)} instances, {len(shapes)} training shapes -> {out}")
    return run


# -- fit-basis ---------------------------------------------------------------

def cmd_fit_basis(args) -> Run:
    out = Path(args.out)
    run = Run("fit-basis", out.with_name(out.name + ".manifest.json"))
    files = sorted(Path(args.shapes).glob("*.tsdf"))
    if not files:
        raise CliError(f"no .tsdf files in {args.shapes}")
    try:
        volumes = [io.read_tsdf(f) for f in files]
    except io.FormatError as exc:
        raise CliError(str(exc))
    try:
        basis = pca_fit(volumes, args.k)
    except ShapeModelError as exc:
        raise CliError(f"fit error: {exc}")
    io.write_basis(out, basis)
    ratios = explained_variance_ratio(volumes, basis)

    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["component", "sigma", "variance", "explained", "cumulative"])
    for k, (s, r, c) in enumerate(zip(basis.sigma, ratios, np.cumsum(ratios)), start=1):
        writer.writerow([k, f"{s:.6g}", f"{s * s:.6g}", f"{r:.6f}", f"{c:.6f}"])
    csv_path = out.with_name(out.name + ".variance.csv")
    io.atomic_write_bytes(csv_path, buf.getvalue().encode())

    print(f"{'k':>3} {'sigma':>12} {'variance':>12} {'explained':>10} {'cumulative':>10}")
    for k, (s, r, c) in enumerate(zip(basis.sigma, ratios, np.cumsum(ratios)), start=1):
        print(f"{k:>3} {s:12.5g} {s * s:12.5g} {r:10.4f} {c:10.4f}")

    run.outputs = {"basis": str(out), "variance_csv": str(csv_path)}
    if args.plot:
        from .plotting import plot_explained_variance
        png = out.with_name(out.name + ".variance.png")
        plot_explained_variance(ratios, png)
        run.outputs["variance_png"] = str(png)
    run.config = {"k": args.k}
    run.inputs = {"shapes": [str(f) for f in files]}
    run.counters = {"volumes": len(volumes)}
    return run


# -- fit-shape ---------------------------------------------------------------

def _load_scene(path):
    scene = _load_json(path, "scene")
    try:
        spec = SceneSpec.from_dict(scene["spec"])
        files = scene["files"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"malformed scene file {path}: {exc}")
    return spec, files, Path(path).parent


def _fit_one(item):
    ident, points_path, box_dict = item
    basis, cfg = _WORKER["basis"], _WORKER["cfg"]
    try:
        points, _ = io.read_ply(points_path)
        box = Box3.from_dict(box_dict)
        res = optimize_shape(basis, points, box, cfg)
        mesh = marching_cubes(decode(basis, res.z))
        return ident, res, mesh, None
    except Exception as exc:  # per-instance failures must not abort the batch
        return ident, None, None, f"{type(exc).__name__}: {exc}"


def _init_fit(basis, cfg):
    _init_worker(basis=basis, cfg=cfg)


def cmd_fit_shape(args) -> Run:
    out = Path(args.out)
    run = Run("fit-shape", out / "run_manifest.json")
    try:
        basis = io.read_basis(args.basis)
    except (FileNotFoundError, io.FormatError) as exc:
        raise CliError(f"cannot read basis: {exc}")
    if args.config:
        try:
            cfg = FitConfig.from_dict(_load_json(args.config, "fit config"))
        except (TypeError, ValueError) as exc:
            raise CliError(f"invalid fit config: {exc}")
    else:
        cfg = FitConfig()
    spec, files, scene_dir = _load_scene(args.scene)

    items = []
    for inst in spec.instances:
        if inst.id not in files:
            raise CliError(f"scene lists no point file for instance {inst.id}")
        items.append((inst.id, str(scene_dir / files[inst.id]["points"]), inst.box.to_dict()))
    results = _pool_map(_fit_one, items, args.jobs, _init_fit, (basis, cfg))

    counters = {"instances": len(items), "fit": 0, "fallbacks": 0, "failures": 0}
    for ident, res, mesh, err in results:
        if err is not None:
            counters["failures"] += 1
            log.error("fit-shape instance=%s failed: %s", ident, err)
            print(f"spgt: error: command=fit-shape instance={ident}: {err}", file=sys.stderr)
            continue
        counters["fit"] += 1
        counters["fallbacks"] += res.status == FALLBACK
        io.write_json(out / f"{ident}.fit.json", {"id": ident, **res.to_dict()})
        io.write_ply(out / f"{ident}.mesh.ply", mesh, precision="double")
        log.info("fit-shape instance=%s status=%s cost=%.6g", ident, res.status, res.final_cost)
    io.write_json(out / "config.json", asdict(cfg))
    run.config = asdict(cfg)
    run.seed = spec.seed
    run.inputs = {"basis": str(args.basis), "scene": str(args.scene), "config": args.config}
    run.outputs = {"fits": str(out)}
    run.counters = counters
    print(f"fit-shape: {counters['fit']} fit, {counters['fallbacks']} mean-shape fallbacks, "
          f"{counters['failures']} failures -> {out}")
    return run


# -- render-pgt --------------------------------------------------------------

def _render_one(item):
    ident, mesh_path, box_dict, pair_dict = item
    from .disparity import RoiPair
    rig = _WORKER["rig"]
    mesh = io.read_mesh(mesh_path)
    box = Box3.from_dict(box_dict)
    pair = RoiPair.from_dict(pair_dict)
    pose = ObjectPose.from_box(box)
    depth = render_depth(mesh, pose, rig, pair.native_roi())
    dmap = depth_to_instance_disparity(depth, rig, pair)
    return ident, dmap, mesh.transformed(pose.rotation, pose.translation)


def _init_render(rig):
    _init_worker(rig=rig)


def cmd_render_pgt(args) -> Run:
    out = Path(args.out)
    run = Run("render-pgt", out / "run_manifest.json")
    fits_dir = Path(args.fits)
    fit_files = sorted(fits_dir.glob("*.fit.json"))
    if not fit_files:
        raise CliError(f"no fits found in {fits_dir}")
    spec, _, _ = _load_scene(args.scene)
    fitted = {f.name[:-len(".fit.json")] for f in fit_files}

    items, missing = [], []
    for inst in spec.instances:
        mesh_path = fits_dir / f"{inst.id}.mesh.ply"
        if inst.id not in fitted or not mesh_path.exists():
            missing.append(inst.id)
            continue
        items.append((inst.id, str(mesh_path), inst.box.to_dict(), inst.roi_pair.to_dict()))
    if not items:
        raise CliError(f"fits in {fits_dir} match no instance of the scene")
    rendered = _pool_map(_render_one, items, args.jobs, _init_render, (spec.rig,))

    empty = 0
    for (ident, dmap, world_mesh), item in zip(rendered, items):
        empty += not dmap.mask.any()
        io.write_disparity_map(out / f"{ident}.disp", dmap, spec.rig,
                               {"id": ident, "box": item[2], "source": "pseudo-gt"})
        io.write_ply(out / f"{ident}.world.ply", world_mesh, precision="double")
    for ident in missing:
        log.warning("render-pgt instance=%s has no fit; skipped", ident)
    run.seed = spec.seed
    run.config = {"scene": str(args.scene)}
    run.inputs = {"fits": str(fits_dir), "scene": str(args.scene)}
    run.outputs = {"pgt": str(out)}
    run.counters = {"rendered": len(rendered), "skipped": len(missing), "empty_masks": empty}
    print(f"render-pgt: {len(rendered)} rendered, {len(missing)} skipped -> {out}")
    return run


# -- eval --------------------------------------------------------------------

def _load_maps(directory):
    maps, sides = {}, {}
    for side_path in sorted(Path(directory).glob("*.disp.json")):
        stem = side_path.with_suffix("")
        try:
            dmap, side = io.read_disparity_map(stem)
        except (FileNotFoundError, KeyError, io.FormatError, ValueError) as exc:
            raise CliError(f"cannot read disparity map {stem}: {exc}")
        ident = side.get("id", stem.name[:-len(".disp")])
        maps[ident], sides[ident] = dmap, side
    return maps, sides


def format_table(report, method: str, gt_label: str) -> str:
    """Text table laid out like a pixel-wise / object-wise EPE and RMSE comparison."""
    head1 = f"{'Method':<16}{'GT':<10}| {'Pixel-wise':^21}| {'Object-wise':^21}"
    head2 = f"{'':<16}{'':<10}| {'Disparity':>10} {'Depth':>10}| {'Disparity':>10} {'Depth':>10}"
    row = (f"{method[:15]:<16}{gt_label[:9]:<10}| {report.pixel_epe:>10.3f} "
           f"{report.pixel_depth_rmse:>10.3f}| {report.object_epe:>10.3f} "
           f"{report.object_depth_rmse:>10.3f}")
    rule = "-" * len(head1)
    return "\n".join([head1, head2, rule, row])


def eval_dirs(pred_dir, gt_dir, rig: StereoRig, containment: bool = False):
    pred, _ = _load_maps(pred_dir)
    gt, gt_sides = _load_maps(gt_dir)
    if not gt:
        raise CliError(f"no ground-truth maps in {gt_dir}")
    report = eval_disparity(pred, gt, rig)
    cont = None
    if containment:
        ids = sorted(gt)
        meshes, boxes = [], []
        for ident in ids:
            if "box" not in gt_sides[ident]:
                raise CliError(f"ground-truth sidecar for {ident} has no box")
            boxes.append(Box3.from_dict(gt_sides[ident]["box"]))
            path = Path(pred_dir) / f"{ident}.world.ply"
            meshes.append(io.read_mesh(path) if path.exists()
                          else TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)))
        cont = eval_containment(meshes, boxes)
        cont.ids = ids
    return report, cont


def cmd_eval(args) -> Run:
    out = Path(args.out) if args.out else Path(args.pred) / "eval"
    run = Run("eval", out / "run_manifest.json")
    rig = StereoRig.from_dict(_load_json(args.rig, "rig"))
    report, cont = eval_dirs(args.pred, args.gt, rig, args.containment)

    print(format_table(report, Path(args.pred).name or "pred", Path(args.gt).name or "gt"))
    meta = report.to_dict()["metadata"]
    print(f"evaluated {len(report.per_object)} instances, skipped {meta['skipped']}, "
          f"invalid pixels {meta['skipped_pixels']}")
    payload = report.to_dict()
    io.write_json(out / "eval_report.json", payload)
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "epe_px", "depth_rmse_m", "pixel_count"])
    for o in report.per_object:
        writer.writerow([o.id, f"{o.epe:.6f}", f"{o.rmse:.6f}", o.pixel_count])
    io.atomic_write_bytes(out / "per_object.csv", buf.getvalue().encode())
    run.outputs = {"report": str(out / "eval_report.json"), "csv": str(out / "per_object.csv")}
    if report.per_object:
        from .plotting import plot_eval_report
        plot_eval_report(report, out / "eval_report.png")
        run.outputs["figure"] = str(out / "eval_report.png")
    if cont is not None:
        cpay = cont.to_dict()
        cpay["metadata"]["ids"] = cont.ids
        io.write_json(out / "containment_report.json", cpay)
        run.outputs["containment"] = str(out / "containment_report.json")
        print(f"containment: pass fraction {cont.pass_fraction:.3f} "
              f"(> {cont.threshold:.0%} vertices inside), mean inside "
              f"{np.mean(cont.per_object_fraction):.3f}")
    run.config = {"containment": bool(args.containment)}
    run.inputs = {"pred": str(args.pred), "gt": str(args.gt), "rig": str(args.rig)}
    run.counters = {"evaluated": len(report.per_object), "skipped": meta["skipped"],
                    "skipped_pixels": meta["skipped_pixels"]}
    return run


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spgt", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="materialize a synthetic scene bundle")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("fit-basis", help="fit the PCA shape basis")
    s.add_argument("--shapes", required=True)
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--out", required=True)
    s.add_argument("--plot", action="store_true", help="also write an explained-variance figure")
    s.set_defaults(func=cmd_fit_basis)

    s = sub.add_parser("fit-shape", help="fit shape coefficients per instance")
    s.add_argument("--basis", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--config", default=None, help="FitConfig JSON (defaults if omitted)")
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_fit_shape)

    s = sub.add_parser("render-pgt", help="render pseudo-GT instance disparity")
    s.add_argument("--fits", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_render_pgt)

    s = sub.add_parser("eval", help="evaluate disparity maps against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--rig", required=True)
    s.add_argument("--containment", action="store_true")
    s.add_argument("--out", default=None, help="report directory (default: PRED/eval)")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("SPGT_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        run = args.func(args)
        run.write()
    except CliError as exc:
        print(f"spgt: error: command={args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
