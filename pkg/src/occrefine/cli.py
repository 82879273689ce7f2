"""``occrefine`` command line: fuse, eval, citymap, synth and kernel-check.

Exit codes: 0 success, 1 metric or verification failure, 2 I/O or format error.
Settings resolve as command-line flag, then ``--config`` file (YAML mapping),
then built-in defaults. ``OCCREFINE_WORKERS`` sets the default worker count.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .citymap import CityMapBuilder, compute_world_bounds
from .errors import ChunkBudgetError, FormatError, MissingDataError
from ._validation import check_profile
from .fusion import FusionStats, default_workers, fuse_window
from .geometry import default_calib
from .kitti_io import (
    SequenceManifest,
    apply_invalid,
    read_invalid_mask,
    read_label_grid,
    read_poses,
    write_calib,
    write_invalid_mask,
    write_label_grid,
    write_poses,
)
from .metrics import ConfusionMatrix, band_slices, confusion_from_labels, iou, miou
from .synth import NoiseModel, SceneConfig, generate_world, render_frame, world_coverage
from .voxel import SEMANTIC_KITTI_CLASSES, GridSpec
from .weights import WeightProfile

log = logging.getLogger("occrefine")

EXIT_OK, EXIT_FAIL, EXIT_IO = 0, 1, 2

DEFAULTS = {
    "fuse": {"n": 25, "profile": "camera", "labels": "predictions", "workers": None, "targets": None},
    "eval": {"bands": [12.8, 25.6, 51.2], "absent": "zero", "csv": None, "min_miou": None},
    "citymap": {"profile": "camera", "uniform": False, "labels": "predictions", "static_only": True,
                "chunk_dims": [256, 256, 32], "max_active_chunks": None, "spill_dir": None, "scale": 100,
                "ply": False, "workers": None, "bounds_only": False},
    "synth": {"seed": 0, "frames": 11, "step": 1.0, "flip": 0.3, "deletion": 0.1, "hallucination": 0.0,
              "frustum": False, "sequence": "00"},
    "kernel-check": {"seed": 0, "instances": 25},
}
# never echoed: they must not change any output byte
_UNECHOED = {"workers", "config", "command", "func", "verbose"}


def _effective(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[args.command])
    if args.config:
        loaded = yaml.safe_load(Path(args.config).read_text()) or {}
        if not isinstance(loaded, dict):
            raise FormatError(f"{args.config}: expected a mapping of settings")
        section = loaded.get(args.command, loaded)
        unknown = set(section) - set(cfg)
        if unknown:
            raise FormatError(f"{args.config}: unknown settings for {args.command}: {sorted(unknown)}")
        cfg.update(section)
    cfg.update({k: v for k, v in vars(args).items() if v is not None and k in cfg})
    return cfg


def _echo(cfg: dict) -> dict:
    return {k: v for k, v in sorted(cfg.items()) if k not in _UNECHOED}


def _workers(cfg) -> int:
    return int(cfg["workers"]) if cfg.get("workers") else default_workers()


def cmd_fuse(args) -> int:
    cfg = _effective(args)
    manifest = SequenceManifest.load(args.sequence, cfg["labels"])
    profile = check_profile(cfg["profile"])
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    frames = [(manifest.read(f), manifest.pose(f)) for f in manifest.frame_ids]
    targets = range(len(frames)) if cfg["targets"] is None else [manifest.frame_ids.index(int(t)) for t in cfg["targets"]]
    clouds: dict = {}
    workers = _workers(cfg)
    for t in targets:
        st = FusionStats()
        start = time.perf_counter()
        fused = fuse_window(frames, t, int(cfg["n"]), profile, manifest.calib, workers, clouds=clouds, stats=st)
        name = manifest.files[manifest.frame_ids[t]].name
        write_label_grid(fused, out / name)
        print(f"{name}: {time.perf_counter() - start:.3f}s frames={st.frames_used} "
              f"points={st.points_in} dropped={st.points_dropped}")
        for k in [k for k in clouds if k < t + 1 - int(cfg["n"])]:
            del clouds[k]
    (out / "fuse_config.yaml").write_text(yaml.safe_dump(_echo(cfg)))
    return EXIT_OK


def _label_files(directory: Path) -> dict:
    if not directory.is_dir():
        raise MissingDataError(f"directory {directory} not found")
    return {p.name: p for p in sorted(directory.glob("*.label"))}


def evaluate_dirs(pred_dir, gt_dir, bands, spec: GridSpec | None = None):
    """Confusion matrices over every frame: ``{"full": cm, band: cm, ...}``."""
    preds, gts = _label_files(Path(pred_dir)), _label_files(Path(gt_dir))
    if not gts:
        raise MissingDataError(f"no .label files in {gt_dir}")
    if set(preds) != set(gts):
        missing = sorted(set(gts) ^ set(preds))
        raise MissingDataError(f"frame mismatch between {pred_dir} and {gt_dir}: {missing[:5]}")
    spec = spec or GridSpec.semantic_kitti()
    k = len(SEMANTIC_KITTI_CLASSES)
    cms = {"full": ConfusionMatrix.zeros(k)} | {b: ConfusionMatrix.zeros(k) for b in bands}
    windows = {b: band_slices(spec, b) for b in bands}
    for name, gt_path in gts.items():
        gt = read_label_grid(gt_path, spec)
        inv = gt_path.with_suffix(".invalid")
        if inv.is_file():
            gt = apply_invalid(gt, read_invalid_mask(inv, spec))
        pred = read_label_grid(preds[name], spec).labels
        cms["full"] = cms["full"] + confusion_from_labels(pred, gt.labels, k)
        for b, w in windows.items():
            cms[b] = cms[b] + confusion_from_labels(pred[w], gt.labels[w], k)
    return cms


def metrics_table(cms: dict, absent: str = "zero") -> tuple[list[str], list[list]]:
    header = ["metric", "full"] + [f"{b:g}m" for b in cms if b != "full"]
    per = {key: miou(cm, absent) for key, cm in cms.items()}
    rows = [["IoU"] + [iou(cm) for cm in cms.values()], ["mIoU"] + [per[key][0] for key in cms]]
    for c, name in enumerate(SEMANTIC_KITTI_CLASSES):
        rows.append([name] + [per[key][1][c] for key in cms])
    return header, rows


def cmd_eval(args) -> int:
    cfg = _effective(args)
    bands = [float(b) for b in cfg["bands"]]
    cms = evaluate_dirs(args.pred, args.gt, bands)
    header, rows = metrics_table(cms, cfg["absent"])
    width = max(len(r[0]) for r in rows) + 2
    print(header[0].ljust(width) + "".join(h.rjust(9) for h in header[1:]))
    for r in rows:
        print(r[0].ljust(width) + "".join(f"{v:9.2f}" for v in r[1:]))
    if cfg["csv"]:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows([[r[0]] + [f"{v:.4f}" for v in r[1:]] for r in rows])
        Path(cfg["csv"]).write_text(buf.getvalue())
    if cfg["min_miou"] is not None and not rows[1][1] >= float(cfg["min_miou"]):
        print(f"mIoU {rows[1][1]:.2f} below required {float(cfg['min_miou']):.2f}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_citymap(args) -> int:
    cfg = _effective(args)
    seq = Path(args.sequence)
    poses_path, calib_path = seq / "poses.txt", seq / "calib.txt"
    for p in (poses_path, calib_path):
        if not p.is_file():
            raise MissingDataError(f"{p} not found")
    chunk_dims = tuple(int(c) for c in cfg["chunk_dims"])
    if cfg["bounds_only"]:
        spec = compute_world_bounds(read_poses(poses_path, calib_path), GridSpec.semantic_kitti(), chunk_dims)
        print("world_dims = " + " ".join(map(str, spec.world_spec.dims)))
        print("world_origin = " + " ".join(repr(float(v)) for v in spec.world_spec.origin))
        print("chunk_grid = " + " ".join(map(str, spec.chunk_grid)))
        return EXIT_OK
    manifest = SequenceManifest.load(seq, cfg["labels"])
    profile = "uniform" if cfg["uniform"] else check_profile(cfg["profile"])
    builder = CityMapBuilder(chunk_dims, int(cfg["scale"]), bool(cfg["static_only"]), profile, manifest.calib,
                             cfg["max_active_chunks"], cfg["spill_dir"], _workers(cfg))
    start = time.perf_counter()
    grids = (manifest.read(f) for f in manifest.frame_ids)
    builder.fit(grids, poses=[manifest.pose(f) for f in manifest.frame_ids])
    echo = _echo(cfg)
    echo["profile"] = profile if isinstance(profile, str) else cfg["profile"]
    acc = builder.accumulator_
    n_chunks = len(acc.chunk_ids)
    try:
        builder.export(args.output, ply=bool(cfg["ply"]), config=echo)
    finally:
        acc.cleanup()
    print(f"citymap: {len(manifest.frame_ids)} frames in {time.perf_counter() - start:.1f}s, "
          f"dims={builder.spec_.world_spec.dims} chunks={n_chunks} peak_active={acc.peak_active} "
          f"dropped={acc.dropped_points} filtered={acc.filtered_points}")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = _effective(args)
    frames, step = int(cfg["frames"]), float(cfg["step"])
    if frames < 1:
        raise ValueError("frames must be >= 1")
    # voxel frames every 5th scan; scans are evenly spaced along the street
    n_scans = 5 * (frames - 1) + 1
    scene = SceneConfig.street(int(cfg["seed"]), n_frames=n_scans, step=step / 5)
    world = generate_world(scene)
    spec = GridSpec.semantic_kitti()
    profile = WeightProfile.camera() if cfg["frustum"] else None
    noise = NoiseModel(float(cfg["flip"]), float(cfg["deletion"]), float(cfg["hallucination"]))
    root = Path(args.output) / "sequences" / str(cfg["sequence"])
    (root / "voxels").mkdir(parents=True, exist_ok=True)
    (root / "predictions").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(int(cfg["seed"]))
    calib = default_calib()
    write_calib(calib, root / "calib.txt")
    write_poses(scene.trajectory, root / "poses.txt", calib.T_li_cam)
    for scan in range(0, n_scans, 5):
        pose = scene.trajectory[scan]
        gt = render_frame(world, pose, (0.0, 0.0), spec=spec, frame_id=scan)
        invalid = ~world_coverage(world.spec, pose, spec)
        pred = render_frame(world, pose, noise, profile, rng, spec, frame_id=scan)
        name = f"{scan:06d}"
        write_label_grid(gt.with_labels(np.where(invalid, 0, gt.labels)), root / "voxels" / f"{name}.label")
        write_invalid_mask(invalid, root / "voxels" / f"{name}.invalid")
        write_label_grid(pred, root / "predictions" / f"{name}.label")
    (root / "synth_config.yaml").write_text(yaml.safe_dump(_echo(cfg)))
    print(f"wrote {frames} frames ({n_scans} poses) to {root}")
    return EXIT_OK


def cmd_kernel_check(args) -> int:
    from .selfcheck import run_checks

    cfg = _effective(args)
    ok = True
    for name, passed, detail in run_checks(int(cfg["seed"]), int(cfg["instances"])):
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
    return EXIT_OK if ok else EXIT_FAIL


def _floats(n):
    return {"nargs": n, "type": float}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="occrefine", description=__doc__.splitlines()[0].replace("``", ""))
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="YAML file of settings (flags override it)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        p = sub.add_parser(name, help=help, argument_default=None)
        p.set_defaults(func=func)
        return p

    p = add("fuse", cmd_fuse, "multi-frame voting of per-frame predictions")
    p.add_argument("sequence", help="sequence directory with poses.txt, calib.txt and label frames")
    p.add_argument("output", help="directory for refined label files")
    p.add_argument("-n", type=int, help="temporal radius in label frames (default 25)")
    p.add_argument("--profile", help="camera, lidar, uniform or a weight profile file (default camera)")
    p.add_argument("--labels", help="label subdirectory to fuse (default predictions)")
    p.add_argument("--targets", nargs="+", type=int, help="frame numbers to refine (default all)")
    p.add_argument("--workers", type=int, help="worker threads (default $OCCREFINE_WORKERS or 1)")

    p = add("eval", cmd_eval, "IoU / mIoU of predictions against ground truth")
    p.add_argument("pred", help="directory of predicted .label files")
    p.add_argument("gt", help="directory of ground-truth .label (and .invalid) files")
    p.add_argument("--bands", **_floats("*"), help="forward ranges in meters (default 12.8 25.6 51.2)")
    p.add_argument("--absent", choices=("zero", "skip"), help="score for classes absent from both (default zero)")
    p.add_argument("--csv", help="also write the table as CSV")
    p.add_argument("--min-miou", type=float, help="exit 1 when full-volume mIoU falls below this")

    p = add("citymap", cmd_citymap, "chunked city-scale map of static classes")
    p.add_argument("sequence")
    p.add_argument("output", nargs="?", help="map directory (chunk files, manifest.txt, citymap.ply)")
    p.add_argument("--profile", help="weight profile (default camera)")
    p.add_argument("--uniform", action="store_const", const=True, help="uniform votes instead of sensor weights")
    p.add_argument("--labels", help="label subdirectory (default predictions)")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--static-only", dest="static_only", action="store_const", const=True,
                   help="vote static classes only (default)")
    g.add_argument("--all-classes", dest="static_only", action="store_const", const=False)
    p.add_argument("--chunk-dims", nargs=3, type=int, help="voxels per chunk (default 256 256 32)")
    p.add_argument("--max-active-chunks", type=int, help="resident chunk ceiling")
    p.add_argument("--spill-dir", help="where chunks beyond the ceiling are parked")
    p.add_argument("--scale", type=int, help="weight to uint8 counter multiplier (default 100)")
    p.add_argument("--ply", action="store_const", const=True, help="also export a colored point cloud")
    p.add_argument("--bounds-only", action="store_const", const=True, help="print the map extent and stop")
    p.add_argument("--workers", type=int)

    p = add("synth", cmd_synth, "write a synthetic noisy sequence in KITTI layout")
    p.add_argument("output", help="dataset root; data goes to sequences/<id>/")
    p.add_argument("--seed", type=int)
    p.add_argument("--frames", type=int, help="number of voxel frames (default 11)")
    p.add_argument("--step", type=float, help="meters between voxel frames, a multiple of 1.0 (default 1.0)")
    p.add_argument("--flip", type=float, help="class flip rate (default 0.3)")
    p.add_argument("--deletion", type=float, help="deletion rate (default 0.1)")
    p.add_argument("--hallucination", type=float, help="free->occupied rate (default 0)")
    p.add_argument("--frustum", action="store_const", const=True, help="mask predictions to the camera view")
    p.add_argument("--sequence", help="sequence id (default 00)")

    p = add("kernel-check", cmd_kernel_check, "run kernel invariant and gradient checks")
    p.add_argument("--seed", type=int)
    p.add_argument("--instances", type=int, help="random gradient-check instances (default 25)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "citymap" and not args.output and not args.bounds_only:
        parser.error("citymap needs an output directory unless --bounds-only is given")
    try:
        return args.func(args)
    except (MissingDataError, FormatError, OSError) as exc:
        print(f"occrefine {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_IO
    except ChunkBudgetError as exc:
        print(f"occrefine {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"occrefine {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
