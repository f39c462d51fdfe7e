"""Command-line entry point: one subcommand per pipeline stage.

Exit codes: 0 success, 2 I/O or parse error, 3 validation error, 4 numerical
failure.  Every command that writes outputs also writes a run manifest next
to them recording the arguments, seed, inputs, outputs and wall time.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .errors import BoxTemplateError, InputError, UnknownFamily, ValidationError

EXIT_OK, EXIT_IO, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3, 4


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: list
    outputs: list = field(default_factory=list)
    seed: int = 0
    tool_version: str = __version__
    wall_time: float = 0.0
    format: str = "boxtemplates-run/1"

    def write(self, path) -> None:
        from .io import atomic_write
        atomic_write(path, json.dumps(asdict(self), indent=1, sort_keys=True) + "\n")


def _float_triple(text):
    try:
        v = [float(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected x,y,z, got {text!r}") from None
    if len(v) != 3:
        raise argparse.ArgumentTypeError(f"expected x,y,z, got {text!r}")
    return tuple(v)


def _weights(text):
    from .energy import EnergyWeights
    try:
        return EnergyWeights.parse(text)
    except InputError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _fit_config(args):
    from .energy import EnergyWeights
    from .fitting import DEFAULT_CMA, FitConfig
    cma = replace(DEFAULT_CMA, seed=args.seed)
    if getattr(args, "max_evals", None):
        cma = replace(cma, max_evals=args.max_evals)
    return FitConfig(weights=getattr(args, "weights", None) or EnergyWeights(),
                     restarts=args.restarts, cma=cma,
                     polish_evals=args.polish_evals if args.polish_evals is not None
                     else cma.max_evals // 2,
                     threads=args.threads)


def _load_normalized(path, normalize=True):
    """Geometry from disk, optionally moved into the centered unit cube."""
    from .geometry import PointCloud, normalize_to_unit_cube
    from .io import Mesh, geometry_points, load_geometry
    geom = load_geometry(path)
    if not normalize:
        return geom, {"center": [0.0, 0.0, 0.0], "scale": 1.0}
    pts = geometry_points(geom) if isinstance(geom, Mesh) else geom.points
    _, center, scale = normalize_to_unit_cube(pts)
    norm = {"center": [float(v) for v in center], "scale": float(scale)}
    if isinstance(geom, Mesh):
        return Mesh((geom.vertices - center) * scale, geom.faces), norm
    return PointCloud((geom.points - center) * scale, geom.labels), norm


def _library(args):
    from .template import load_template_library
    return load_template_library(args.library)


def _manifest(args, inputs, outputs, t0):
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
           if k not in ("func",) and not callable(v)}
    cfg = json.loads(json.dumps(cfg, default=lambda o: asdict(o) if hasattr(o, "__dataclass_fields__") else str(o)))
    return RunManifest(" ".join(args.command_path), cfg, [str(p) for p in inputs],
                       [str(p) for p in outputs], int(getattr(args, "seed", 0)),
                       wall_time=round(time.time() - t0, 3))


def _sibling(path: Path, suffix: str) -> Path:
    return path.with_name(path.name + suffix)


# commands

def cmd_template_validate(args):
    from .template import parse_template_library
    path = Path(args.library)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    try:
        lib = parse_template_library(text)
    except ValidationError as exc:
        print(f"invalid template {exc.template_id}: {exc}", file=sys.stderr)
        for v in exc.violations:
            print(f"  - {v}", file=sys.stderr)
        raise
    for t in lib:
        print(f"ok  {t.template_id:3d} {t.name:<16} boxes={t.n_boxes} params={t.codec.dim} "
              f"families={','.join(t.families)}")
    return EXIT_OK


def cmd_fit(args):
    from .fitting import select_template
    from .io import atomic_write, boxes_to_obj, geometry_points
    from .template import templates_by_family
    t0 = time.time()
    lib = _library(args)
    fam = templates_by_family(lib)
    if args.family not in fam:
        raise UnknownFamily(f"no template in the library serves family {args.family!r} "
                            f"(known: {', '.join(sorted(fam))})")
    geom, norm = _load_normalized(args.cloud, not args.no_normalize)
    best, ranked = select_template(geometry_points(geom), fam[args.family], _fit_config(args))
    out = Path(args.out)
    obj = Path(args.obj) if args.obj else out.with_suffix(".obj")
    atomic_write(out, best.dumps())
    names = {t.template_id: t for t in lib}[best.template_id].node_names
    atomic_write(obj, boxes_to_obj(best.boxes, names))
    for r in ranked:
        print(f"template {r.template_id:3d}  e_total {r.e_total:.6g}")
    m = _manifest(args, [args.cloud], [out, obj], t0)
    m.config["normalization"] = norm
    m.write(_sibling(out, ".manifest.json"))
    return EXIT_OK


def cmd_synth(args):
    from .io import atomic_write, format_xyz
    from .synthetic import make_collection
    t0 = time.time()
    lib = _library(args)
    byname = {t.name: t for t in lib}
    names = args.templates.split(",") if args.templates else [t.name for t in lib]
    unknown = [n for n in names if n not in byname]
    if unknown:
        raise ValidationError(f"unknown template names: {', '.join(unknown)}")
    out = Path(args.out)
    shapes = make_collection([byname[n] for n in names], args.per_template,
                             np.random.default_rng(args.seed), args.styles, args.points)
    lines, truth, outputs = [], {}, []
    for s in shapes:
        p = out / "shapes" / f"{s.shape_id}.xyzl"
        atomic_write(p, format_xyz(s.cloud.points, s.cloud.labels))
        t = {x.template_id: x for x in lib}[s.template_id]
        lines.append(f"{s.shape_id} {t.families[0]} shapes/{p.name}\n")
        truth[s.shape_id] = {"template_id": s.template_id, "style": s.style,
                             "params": [float(v) for v in s.params]}
        outputs.append(p)
    atomic_write(out / "shapes.txt", "".join(lines))
    atomic_write(out / "truth.json", json.dumps(truth, indent=1, sort_keys=True) + "\n")
    print(f"wrote {len(shapes)} shapes to {out}")
    _manifest(args, [], [out / "shapes.txt", out / "truth.json"], t0).write(out / "run_manifest.json")
    return EXIT_OK


def _read_shape_list(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InputError(f"cannot read shape list {path}: {exc.strerror}") from None
    rows = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            from .errors import ParseError
            raise ParseError(f"expected 'shape_id family path' in {path}", line=n)
        p = Path(parts[2])
        rows.append((parts[0], parts[1], p if p.is_absolute() else path.parent / p))
    return rows


def cmd_index_build(args):
    from .collection import preprocess_collection, save_index
    t0 = time.time()
    lib = _library(args)
    rows = _read_shape_list(args.shapes)
    shapes = []
    for sid, fam, p in rows:
        geom, _ = _load_normalized(p, not args.no_normalize)
        shapes.append((sid, fam, geom))

    def progress(k, n, rec):
        if not args.quiet:
            status = f"template {rec.fit.template_id}" if rec.fit else f"FAILED {rec.error}"
            print(f"[{k}/{n}] {rec.shape_id}: {status}", flush=True)

    index = preprocess_collection(shapes, lib, _fit_config(args), args.clusters, args.seed,
                                  progress=progress)
    out = save_index(index, args.out)
    failed = sum(r.fit is None for r in index.records)
    print(f"indexed {len(index.records)} shapes ({failed} quarantined) into "
          f"{index.n_clusters} clusters at {out}")
    _manifest(args, [args.shapes] + [p for _, _, p in rows], [out / "manifest.json"], t0) \
        .write(out / "run_manifest.json")
    return EXIT_OK


def cmd_scan_simulate(args):
    from .io import atomic_write, format_xyz
    from .scansim import ScanConfig, occlude_half, simulate_partial_scan
    t0 = time.time()
    geom, norm = _load_normalized(args.cloud, not args.no_normalize)
    from .io import Mesh, geometry_points
    from .geometry import PointCloud
    cloud = PointCloud(geometry_points(geom)) if isinstance(geom, Mesh) else geom
    cfg = ScanConfig(args.viewpoint, args.depth_grid, args.noise, args.dropout, args.seed)
    if args.occlude_half:
        scan = occlude_half(cloud, np.random.default_rng(args.seed))
        if args.noise > 0:
            rng = np.random.default_rng([args.seed, 1])
            scan = PointCloud(scan.points + rng.normal(0, args.noise, scan.points.shape),
                              scan.labels)
    else:
        scan = simulate_partial_scan(cloud, cfg)
    out = Path(args.out)
    if scan.labels is not None and out.suffix == ".xyzl":
        atomic_write(out, format_xyz(scan.points, scan.labels))
    else:
        atomic_write(out, format_xyz(scan.points))
    print(f"kept {len(scan)} of {len(cloud)} points")
    m = _manifest(args, [args.cloud], [out], t0)
    m.config["normalization"] = norm
    m.write(_sibling(out, ".manifest.json"))
    return EXIT_OK


def cmd_classifier_train(args):
    from .classify import TrainConfig, cloud_features, predict, scan_augmenter, top_k, train
    from .collection import load_index
    from .io import atomic_write, geometry_points
    from .scansim import ScanConfig, simulate_partial_scan
    t0 = time.time()
    index = load_index(args.index)
    if index.n_clusters == 0:
        raise ValidationError("the index has no clusters to learn")
    recs = [r for r in index.records if r.cluster >= 0]
    rng = np.random.default_rng([args.seed, 5])
    order = rng.permutation(len(recs))
    n_test = int(round(args.holdout * len(recs)))
    test = [recs[i] for i in order[:n_test]]
    trainset = [recs[i] for i in order[n_test:]]
    sources = [(geometry_points(index.geometry(r.shape_id)), r.cluster) for r in trainset]
    scan_cfg = ScanConfig(depth_grid=args.depth_grid, noise_sigma=args.noise,
                          dropout_rate=args.dropout)
    augment = scan_augmenter(sources, scan_cfg, views_per_epoch=args.views,
                             pool_size=args.pool)
    base = augment(-1, np.random.default_rng([args.seed, 6]))
    cfg = TrainConfig(args.lr, args.batch_size, args.epochs, args.seed,
                      augmentation=not args.no_augmentation)
    model, hist = train(base, cfg, n_classes=index.n_clusters, augment=augment)
    out = Path(args.out)
    atomic_write(out, model.dumps())
    report = {"epochs": len(hist.loss),
              "final_loss": hist.loss[-1] if hist.loss else None,
              "final_train_accuracy": hist.accuracy[-1] if hist.accuracy else None}
    if test:
        hits1 = hits3 = 0
        for i, r in enumerate(test):
            scan = simulate_partial_scan(geometry_points(index.geometry(r.shape_id)),
                                         replace(scan_cfg, seed=args.seed + 10_000 + i))
            top = top_k(predict(model, cloud_features(scan)), min(3, index.n_clusters))
            hits1 += top[0] == r.cluster
            hits3 += r.cluster in top
        report.update(test_shapes=len(test), top1=hits1 / len(test), top3=hits3 / len(test))
    print(json.dumps(report, indent=1))
    m = _manifest(args, [args.index], [out], t0)
    m.config["report"] = report
    m.write(_sibling(out, ".manifest.json"))
    return EXIT_OK


def cmd_recover(args):
    from .classify import MlpModel
    from .collection import load_index
    from .geometry import PointCloud
    from .io import atomic_write, boxes_to_obj, format_obj, format_xyz, geometry_points
    from .transfer import recover_shape
    t0 = time.time()
    index = load_index(args.index)
    try:
        model = MlpModel.loads(Path(args.model).read_text())
    except OSError as exc:
        raise InputError(f"cannot read classifier {args.model}: {exc.strerror}; "
                         "train one with 'boxtemplates classifier train'") from None
    geom, norm = _load_normalized(args.scan, args.normalize)
    scan = PointCloud(geometry_points(geom))
    rec = recover_shape(scan, index, model, k=args.k, config=_fit_config(args))
    out = Path(args.out)
    outputs = [out / "recovered.xyzl", out / "recovery.json", out / "scan_fit.obj",
               out / "scan_fit.json"]
    atomic_write(outputs[0], format_xyz(rec.geometry.points, rec.geometry.labels))
    atomic_write(outputs[1], rec.dumps())
    t = index.templates[rec.identification.template_id]
    atomic_write(outputs[2], boxes_to_obj(rec.identification.fit.boxes, t.node_names))
    atomic_write(outputs[3], rec.identification.fit.dumps())
    if rec.mesh is not None:
        outputs.append(out / "recovered.obj")
        atomic_write(outputs[-1], format_obj(rec.mesh))
    print(f"template {t.template_id} ({t.name}); source {rec.source_id}; "
          f"residual {rec.residual:.5f}")
    print("ranked sources: " + " ".join(rec.ranked[:10]))
    m = _manifest(args, [args.scan, args.index, args.model], outputs, t0)
    m.config["normalization"] = norm
    m.write(out / "run_manifest.json")
    return EXIT_OK


def cmd_label(args):
    from .fitting import FitResult, select_template
    from .io import atomic_write, format_xyz, geometry_points
    from .template import templates_by_family
    from .transfer import label_points
    t0 = time.time()
    lib = _library(args)
    byid = {t.template_id: t for t in lib}
    geom, norm = _load_normalized(args.cloud, not args.no_normalize)
    pts = geometry_points(geom)
    if args.fit:
        try:
            fit = FitResult.loads(Path(args.fit).read_text())
        except OSError as exc:
            raise InputError(f"cannot read fit {args.fit}: {exc.strerror}") from None
    elif args.family:
        fam = templates_by_family(lib)
        if args.family not in fam:
            raise UnknownFamily(f"no template in the library serves family {args.family!r}")
        fit, _ = select_template(pts, fam[args.family], _fit_config(args))
    else:
        raise InputError("label needs --fit or --family")
    t = byid.get(fit.template_id)
    labeled = label_points(pts, fit.boxes, t)
    # write the input coordinates back out with the labels
    raw = np.asarray(pts) / norm["scale"] + np.asarray(norm["center"])
    out = Path(args.out)
    atomic_write(out, format_xyz(raw, labeled.labels))
    if t is not None:
        counts = np.bincount(labeled.labels, minlength=t.n_boxes)
        for name, c in zip(t.node_names, counts):
            print(f"{name:<20} {c}")
    m = _manifest(args, [args.cloud] + ([args.fit] if args.fit else []), [out], t0)
    m.config["normalization"] = norm
    m.write(_sibling(out, ".manifest.json"))
    return EXIT_OK


# parser

def _add_common(p, fitting=False, seed=True, library=False):
    if seed:
        p.add_argument("--seed", type=int, default=0, help="seed for all randomness (default 0)")
    if library:
        p.add_argument("--library", help="template library YAML (default: $BOXTEMPLATES_LIBRARY "
                                         "or the shipped library)")
    if fitting:
        p.add_argument("--weights", type=_weights, default=None,
                       help="energy weights proj,bbox,min,disent (default 0.3,1,0.8,0.4)")
        p.add_argument("--restarts", type=int, default=4, help="CMA-ES runs per template")
        p.add_argument("--max-evals", type=int, default=None, help="CMA-ES budget per run")
        p.add_argument("--polish-evals", type=int, default=None,
                       help="pattern-search budget per run (default half of --max-evals)")
        p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                       help="worker threads (default: all cores); results do not depend on it")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="boxtemplates",
                                 description="Fit box templates to shapes and transfer structure "
                                             "to partial scans.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    tp = sub.add_parser("template", help="template library tools")
    tsub = tp.add_subparsers(dest="template_command", required=True)
    p = tsub.add_parser("validate", help="parse and validate a template library")
    p.add_argument("library")
    p.set_defaults(func=cmd_template_validate, command_path=("template", "validate"))

    p = sub.add_parser("fit", help="fit the family's templates to a cloud, keep the best")
    p.add_argument("--cloud", required=True, help="XYZ / PLY / OBJ input")
    p.add_argument("--family", required=True)
    p.add_argument("--out", default="fit.json", help="fit document (default fit.json)")
    p.add_argument("--obj", default=None, help="box OBJ (default: --out with .obj)")
    p.add_argument("--no-normalize", action="store_true",
                   help="fit in input coordinates instead of the centered unit cube")
    _add_common(p, fitting=True, library=True)
    p.set_defaults(func=cmd_fit, command_path=("fit",))

    p = sub.add_parser("synth", help="generate a synthetic labeled collection")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--templates", default=None, help="comma-separated template names")
    p.add_argument("--per-template", type=int, default=10)
    p.add_argument("--styles", type=int, default=3, help="style clusters per template")
    p.add_argument("--points", type=int, default=2048)
    _add_common(p, library=True)
    p.set_defaults(func=cmd_synth, command_path=("synth",))

    ip = sub.add_parser("index", help="collection index tools")
    isub = ip.add_subparsers(dest="index_command", required=True)
    p = isub.add_parser("build", help="fit, group and cluster a collection")
    p.add_argument("--shapes", required=True,
                   help="text file of 'shape_id family path' lines (paths relative to it)")
    p.add_argument("--out", required=True, help="index directory")
    p.add_argument("--clusters", type=int, default=10, help="clusters per template")
    p.add_argument("--no-normalize", action="store_true")
    p.add_argument("--quiet", action="store_true")
    _add_common(p, fitting=True, library=True)
    p.set_defaults(func=cmd_index_build, command_path=("index", "build"))

    sp = sub.add_parser("scan", help="scan simulation")
    ssub = sp.add_subparsers(dest="scan_command", required=True)
    p = ssub.add_parser("simulate", help="simulate a partial scan of a complete shape")
    p.add_argument("--cloud", required=True)
    p.add_argument("--out", required=True, help="XYZ output (.xyzl keeps input labels)")
    p.add_argument("--viewpoint", type=_float_triple, default=None,
                   help="direction toward the camera x,y,z (default: random upper hemisphere)")
    p.add_argument("--depth-grid", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.005, help="Gaussian jitter sigma")
    p.add_argument("--dropout", type=float, default=0.1, help="random point dropout rate")
    p.add_argument("--occlude-half", action="store_true",
                   help="instead of a view, cut away one random half of the shape")
    p.add_argument("--no-normalize", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_scan_simulate, command_path=("scan", "simulate"))

    cp = sub.add_parser("classifier", help="cluster classifier")
    csub = cp.add_subparsers(dest="classifier_command", required=True)
    p = csub.add_parser("train", help="train on simulated partial scans of the indexed shapes")
    p.add_argument("--index", required=True)
    p.add_argument("--out", required=True, help="model JSON")
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--lr", type=float, default=0.002)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--views", type=int, default=1, help="fresh scans per shape per epoch")
    p.add_argument("--pool", type=int, default=8, help="scans kept per shape for training")
    p.add_argument("--holdout", type=float, default=0.0,
                   help="fraction of shapes held out for a test report")
    p.add_argument("--depth-grid", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.005)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--no-augmentation", action="store_true",
                   help="reuse one fixed set of scans every epoch")
    _add_common(p)
    p.set_defaults(func=cmd_classifier_train, command_path=("classifier", "train"))

    p = sub.add_parser("recover", help="identify, retrieve and deform a shape onto a scan")
    p.add_argument("--scan", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--k", type=int, default=3, help="clusters to consider")
    p.add_argument("--normalize", action="store_true",
                   help="move the scan into the unit cube first (default: use it as given)")
    _add_common(p, fitting=True)
    p.set_defaults(func=cmd_recover, command_path=("recover",))

    p = sub.add_parser("label", help="label points by their nearest fitted box")
    p.add_argument("--cloud", required=True)
    p.add_argument("--fit", default=None, help="fit document for this cloud")
    p.add_argument("--family", default=None, help="fit this family's templates first")
    p.add_argument("--out", required=True, help="XYZL output")
    p.add_argument("--no-normalize", action="store_true")
    _add_common(p, fitting=True, library=True)
    p.set_defaults(func=cmd_label, command_path=("label",))
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except BoxTemplateError as exc:
        if not isinstance(exc, ValidationError) or args.func is not cmd_template_validate:
            print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
