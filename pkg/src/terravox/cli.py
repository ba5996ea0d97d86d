"""Command-line entry point tying the pipeline together.

One executable, subcommand per job: simulate a scenario into a timeline
directory, evaluate a timeline against its scene, compare fusion
strategies on one scenario, and the dataset utilities (stats, remap,
mIoU, PLY export). Every run is seeded explicitly and every output is
byte-deterministic: identical inputs and seed give identical bytes, so
CI can diff whole directories.

Timeline directory layout (written by `simulate`, read by `eval`):

    manifest.yaml        run parameters, counts, snapshot frame list
    frames.csv           one row per fused frame (pose, tag, counters)
    keys.npy             per-point voxel key, all frames concatenated
    obs_range.npy        per-point capture range        (same order)
    obs_class.npy        per-point observed class       (same order)
    true_class.npy       per-point scene-truth class    (same order)
    frame_offsets.npy    prefix offsets of each frame's span in the above
    map_argmax.npy       per-frame winning class per map row, concatenated
    map_offsets.npy      prefix offsets into map_argmax
    rowkeys.npy          packed voxel key per map row (creation order)
    final_map.csv        full final map dump
    snapshots/           compact map state at every map-rate tick
"""

import argparse
import csv
import shutil
import sys
from pathlib import Path

import numpy as np
import yaml

from . import _kernels as K
from .errors import ConfigurationError, TerravoxError
from .evaluation import FusionReport, evaluate_timeline
from .semantics import (
    BUILTIN_ONTOLOGIES,
    accumulate_confusion,
    dataset_stats,
    iou_per_class,
    load_mask,
    load_remap_table,
    miou,
    remap_mask,
    save_mask,
    threshold_prediction,
)
from .simulator import (
    FrameRecord,
    ScenarioTimeline,
    load_rig,
    load_scene,
    load_trajectory,
    run_scenario,
)
from .voxelmap import (
    STRATEGIES,
    FusionStats,
    MapSnapshot,
    load_dump_csv,
    write_dump_csv,
    write_ply,
)

_FRAME_COLS = ["idx", "t", "x", "y", "yaw", "tag", "n_points", "created",
               "updated", "replaced", "water_offset", "water_injected",
               "snapshot_due"]


def _resolve_ontology(name: str):
    if name not in BUILTIN_ONTOLOGIES:
        raise ConfigurationError(
            f"--ontology must be one of {sorted(BUILTIN_ONTOLOGIES)}, got {name!r}")
    return BUILTIN_ONTOLOGIES[name]


def _existing_file(path, flag: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigurationError(f"{flag}: no such file: {p}")
    return p


def _fresh_dir(path, flag: str = "--out") -> Path:
    p = Path(path)
    if p.exists() and any(p.iterdir()):
        raise ConfigurationError(f"{flag}: {p} already exists and is not empty")
    p.mkdir(parents=True, exist_ok=True)
    return p


class RunConfig:
    """Validated inputs for one scenario run."""

    __slots__ = ("scene", "trajectory", "rig", "strategy", "seed",
                 "resolution", "out", "map_rate", "ontology")

    def __init__(self, scene, trajectory, rig, strategy, seed, resolution,
                 out, map_rate, ontology="ours10"):
        self.scene = _existing_file(scene, "--scene")
        self.trajectory = _existing_file(trajectory, "--trajectory")
        self.rig = _existing_file(rig, "--rig")
        if strategy not in STRATEGIES:
            raise ConfigurationError(
                f"--strategy must be one of {STRATEGIES}, got {strategy!r}")
        self.strategy = strategy
        if seed is None:
            raise ConfigurationError("--seed is required")
        self.seed = int(seed)
        self.resolution = float(resolution)
        if self.resolution <= 0:
            raise ConfigurationError("--resolution must be positive")
        self.out = Path(out)
        self.map_rate = float(map_rate)
        if self.map_rate <= 0:
            raise ConfigurationError("--map-rate must be positive")
        self.ontology = _resolve_ontology(ontology)


def _fnum(v) -> str:
    return repr(float(v))


def save_timeline(timeline: ScenarioTimeline, out_dir) -> Path:
    """Write a timeline directory (see the module docstring for layout)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frames = timeline.frames

    with open(out / "frames.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(_FRAME_COLS)
        for fr in frames:
            st = fr.stats or FusionStats(0, 0, 0)
            w.writerow([
                fr.idx, _fnum(fr.t), _fnum(fr.pose[0]), _fnum(fr.pose[1]),
                _fnum(fr.pose[2]), fr.tag, fr.keys.shape[0], st.created,
                st.updated, st.semantic_replacements,
                "" if fr.water_offset is None else _fnum(fr.water_offset),
                fr.water_injected, int(fr.snapshot_due)])

    def concat(field, dtype):
        parts = [np.asarray(getattr(fr, field)) for fr in frames]
        return (np.concatenate(parts).astype(dtype) if parts
                else np.zeros(0, dtype))

    offsets = np.zeros(len(frames) + 1, np.int64)
    offsets[1:] = np.cumsum([fr.keys.shape[0] for fr in frames])
    np.save(out / "frame_offsets.npy", offsets)
    np.save(out / "keys.npy", concat("keys", np.int64))
    np.save(out / "obs_range.npy", concat("obs_range", np.float32))
    np.save(out / "obs_class.npy", concat("obs_class", np.int8))
    np.save(out / "true_class.npy", concat("true_class", np.int8))

    moff = np.zeros(len(frames) + 1, np.int64)
    moff[1:] = np.cumsum([fr.map_argmax.shape[0] for fr in frames])
    np.save(out / "map_offsets.npy", moff)
    np.save(out / "map_argmax.npy", concat("map_argmax", np.int8))
    np.save(out / "rowkeys.npy", timeline.rowkeys.astype(np.int64))
    write_dump_csv(timeline.final_snapshot, out / "final_map.csv")

    manifest = {
        "format": 1,
        "scene": timeline.scene_name,
        "trajectory": timeline.trajectory_name,
        "rig": timeline.rig_name,
        "strategy": timeline.strategy,
        "seed": timeline.seed,
        "resolution": timeline.resolution,
        "map_rate": timeline.map_rate,
        "ontology": list(timeline.ontology.classes),
        "n_frames": timeline.n_frames,
        "n_voxels": int(timeline.rowkeys.shape[0]),
        "n_points": int(offsets[-1]),
        "snapshot_frames": [fr.idx for fr in frames if fr.snapshot_due],
    }
    with open(out / "manifest.yaml", "w") as f:
        yaml.safe_dump(manifest, f, sort_keys=True)
    return out


def load_timeline(timeline_dir) -> ScenarioTimeline:
    """Read a timeline directory back into memory."""
    d = Path(timeline_dir)
    mf = d / "manifest.yaml"
    if not mf.is_file():
        raise ConfigurationError(f"{d} holds no manifest.yaml; not a timeline directory")
    with open(mf) as f:
        manifest = yaml.safe_load(f)
    from .semantics import Ontology
    ontology = Ontology(manifest["ontology"])
    for builtin in BUILTIN_ONTOLOGIES.values():
        if builtin == ontology:
            ontology = builtin

    keys = np.load(d / "keys.npy")
    obs_range = np.load(d / "obs_range.npy")
    obs_class = np.load(d / "obs_class.npy")
    true_class = np.load(d / "true_class.npy")
    offsets = np.load(d / "frame_offsets.npy")
    map_argmax = np.load(d / "map_argmax.npy")
    moff = np.load(d / "map_offsets.npy")
    rowkeys = np.load(d / "rowkeys.npy")

    frames = []
    with open(d / "frames.csv", newline="") as f:
        r = csv.reader(f)
        header = next(r)
        if header != _FRAME_COLS:
            raise ConfigurationError(f"frames.csv header mismatch in {d}")
        for row in r:
            rec = dict(zip(_FRAME_COLS, row))
            i = int(rec["idx"])
            a, b = offsets[i], offsets[i + 1]
            ma, mb = moff[i], moff[i + 1]
            frames.append(FrameRecord(
                idx=i, t=float(rec["t"]),
                pose=(float(rec["x"]), float(rec["y"]), float(rec["yaw"])),
                tag=rec["tag"], keys=keys[a:b], obs_range=obs_range[a:b],
                obs_class=obs_class[a:b], true_class=true_class[a:b],
                stats=FusionStats(int(rec["created"]), int(rec["updated"]),
                                  int(rec["replaced"])),
                map_argmax=map_argmax[ma:mb],
                water_offset=(None if rec["water_offset"] == ""
                              else float(rec["water_offset"])),
                water_injected=int(rec["water_injected"]),
                snapshot_due=bool(int(rec["snapshot_due"]))))

    ijk, conf, rng, hits = load_dump_csv(d / "final_map.csv", ontology)
    final = MapSnapshot(
        resolution=float(manifest["resolution"]), ontology=ontology,
        strategy=manifest["strategy"], frame=manifest["n_frames"],
        keys=K.pack_keys(ijk), confidence=conf, class_ranges=None,
        ranges=rng, hits=hits, last_update=np.zeros(ijk.shape[0], np.int64))

    return ScenarioTimeline(
        scene_name=manifest["scene"], trajectory_name=manifest["trajectory"],
        rig_name=manifest["rig"], strategy=manifest["strategy"],
        seed=int(manifest["seed"]), resolution=float(manifest["resolution"]),
        map_rate=float(manifest["map_rate"]), ontology=ontology,
        frames=frames, rowkeys=rowkeys, final_snapshot=final)


def _run_one(config: RunConfig, strategy: str, out_dir=None) -> ScenarioTimeline:
    scene = load_scene(config.scene, config.ontology)
    trajectory = load_trajectory(config.trajectory)
    rig = load_rig(config.rig)
    snap_dir = None
    if out_dir is not None:
        snap_dir = Path(out_dir) / "snapshots"
        snap_dir.mkdir(parents=True, exist_ok=True)

    def on_snapshot(tick, snap):
        if snap_dir is None:
            return
        # compact state per map-rate tick: enough to replay map quality
        # over time without the cost of full dumps
        order = np.argsort(snap.keys, kind="stable")
        np.save(snap_dir / f"f{tick:06d}_keys.npy", snap.keys[order])
        np.save(snap_dir / f"f{tick:06d}_class.npy",
                snap.argmax_classes().astype(np.int8)[order])
        best = np.nan_to_num(snap.confidence[order], nan=0.0).max(axis=1)
        np.save(snap_dir / f"f{tick:06d}_conf.npy", best.astype(np.float32))

    return run_scenario(scene, trajectory, rig, strategy, config.seed,
                        resolution=config.resolution, map_rate=config.map_rate,
                        on_snapshot=on_snapshot)


def cmd_simulate(config: RunConfig) -> Path:
    """Run one scenario and write its timeline directory."""
    out = _fresh_dir(config.out)
    try:
        timeline = _run_one(config, config.strategy, out_dir=out)
        save_timeline(timeline, out)
    except BaseException:
        shutil.rmtree(out, ignore_errors=True)
        raise
    return out


def cmd_eval(timeline_dir, scene_path, threshold: float = 0.5,
             ontology_name: str = "ours10", out=None) -> FusionReport:
    """Score a stored timeline against its scene."""
    ontology = _resolve_ontology(ontology_name)
    timeline = load_timeline(timeline_dir)
    scene = load_scene(_existing_file(scene_path, "--scene"), ontology)
    report = evaluate_timeline(timeline, scene, iou_threshold=threshold)
    if out is not None:
        out = _fresh_dir(out)
        try:
            (out / "report.txt").write_text(report.to_text())
            (out / "report.csv").write_text(
                report.header() + "\n" + report.to_row() + "\n")
        except BaseException:
            shutil.rmtree(out, ignore_errors=True)
            raise
    return report


def cmd_compare(config: RunConfig, strategies) -> list:
    """Run one scenario under several strategies and tabulate the reports."""
    strategies = list(strategies)
    if len(strategies) < 2:
        raise ConfigurationError("--strategy must be given at least twice to compare")
    for s in strategies:
        if s not in STRATEGIES:
            raise ConfigurationError(
                f"--strategy must be one of {STRATEGIES}, got {s!r}")
    out = _fresh_dir(config.out)
    try:
        scene = load_scene(config.scene, config.ontology)
        reports = []
        for s in strategies:
            timeline = _run_one(config, s)
            reports.append(evaluate_timeline(timeline, scene))
        lines = [reports[0].header()]
        lines += [r.to_row() for r in reports]
        (out / "compare.csv").write_text("\n".join(lines) + "\n")
        (out / "compare.txt").write_text(_side_by_side(reports))
    except BaseException:
        shutil.rmtree(out, ignore_errors=True)
        raise
    return reports


def _side_by_side(reports) -> str:
    names = [r.strategy for r in reports]
    rows = [("metric", *names)]
    fmt = FusionReport._fmt

    def metric(label, values):
        rows.append((label, *[fmt(v) for v in values]))

    metric("mean voxel IoU", [r.iou.mean for r in reports])
    ont = reports[0].ontology
    for i, cname in enumerate(ont.classes):
        vals = [None if np.isnan(r.iou.per_class[i]) else float(r.iou.per_class[i])
                for r in reports]
        if any(v is not None for v in vals):
            metric(f"IoU {cname}", vals)
    metric("popup latency", [r.popup_latency_frames for r in reports])
    metric("reverse violations", [r.reverse_violations for r in reports])
    metric("bleed correction", [r.bleed_correction for r in reports])

    widths = [max(len(row[c]) for row in rows) for c in range(len(rows[0]))]
    out = []
    for row in rows:
        out.append("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip())
    return "\n".join(out) + "\n"


def _mask_files(mask_dir, flag: str):
    d = Path(mask_dir)
    if not d.is_dir():
        raise ConfigurationError(f"{flag}: no such directory: {d}")
    files = sorted(d.glob("*.png"))
    if not files:
        raise ConfigurationError(f"{flag}: {d} holds no .png masks")
    return files


def cmd_dataset_stats(mask_dir, ontology_name: str = "ours10") -> str:
    """Label-share table over a directory of sparse masks."""
    ontology = _resolve_ontology(ontology_name)
    files = _mask_files(mask_dir, "mask dir")
    stats = dataset_stats(load_mask(p, ontology) for p in files)
    share = stats.class_share_pct
    lines = [f"images: {stats.n_images}",
             f"labeled: {stats.labeled_pct:.4f}%",
             "class,share_pct"]
    for i, name in enumerate(ontology.classes):
        lines.append(f"{name},{share[i]:.4f}")
    return "\n".join(lines) + "\n"


def cmd_remap(mask_dir, table_path, out) -> Path:
    """Rewrite every mask in a directory through a class remap table."""
    table = load_remap_table(_existing_file(table_path, "--remap-table"))
    files = _mask_files(mask_dir, "mask dir")
    out = _fresh_dir(out)
    try:
        for p in files:
            save_mask(remap_mask(load_mask(p, table.source), table), out / p.name)
    except BaseException:
        shutil.rmtree(out, ignore_errors=True)
        raise
    return out


def cmd_miou(gt_dir, pred_dir, threshold: float = 0.5,
             ontology_name: str = "ours10") -> str:
    """IoU table for predicted confidence rasters against GT masks.

    Predictions are .npy float arrays (height, width, n_classes) named
    after the GT mask stems; files without a partner on either side
    abort the run.
    """
    ontology = _resolve_ontology(ontology_name)
    gts = _mask_files(gt_dir, "gt dir")
    pd = Path(pred_dir)
    if not pd.is_dir():
        raise ConfigurationError(f"pred dir: no such directory: {pd}")
    preds = {p.stem: p for p in sorted(pd.glob("*.npy"))}
    if not preds:
        raise ConfigurationError(f"pred dir: {pd} holds no .npy predictions")
    missing = [p.name for p in gts if p.stem not in preds]
    extra = sorted(set(preds) - {p.stem for p in gts})
    if missing or extra:
        raise ConfigurationError(
            "unpaired files; gt without prediction: "
            f"{missing or 'none'}, prediction without gt: {extra or 'none'}")
    cm = None
    for p in gts:
        gt = load_mask(p, ontology)
        conf = np.load(preds[p.stem])
        pred = threshold_prediction(conf, threshold)
        cm = accumulate_confusion(gt, pred, cm)
    iou = iou_per_class(cm)
    lines = ["class,iou"]
    for i, name in enumerate(ontology.classes):
        lines.append(f"{name}," + ("" if np.isnan(iou[i]) else f"{iou[i]:.4f}"))
    m = miou(cm)
    lines.append("miou," + ("" if m is None else f"{m:.4f}"))
    return "\n".join(lines) + "\n"


def cmd_export_ply(dump_path, out, threshold: float = 0.5,
                   ontology_name: str = "ours10") -> Path:
    """Convert a map dump CSV into an ASCII PLY point cloud."""
    ontology = _resolve_ontology(ontology_name)
    ijk, conf, rng, hits = load_dump_csv(
        _existing_file(dump_path, "map dump"), ontology)
    snap = MapSnapshot(
        resolution=1.0, ontology=ontology, strategy="range_based", frame=0,
        keys=K.pack_keys(ijk), confidence=conf, class_ranges=None,
        ranges=rng, hits=hits, last_update=np.zeros(ijk.shape[0], np.int64))
    out = Path(out)
    try:
        write_ply(snap, out, threshold=threshold)
    except BaseException:
        out.unlink(missing_ok=True)
        raise
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="terravox",
        description="semantic voxel mapping: simulate, evaluate, compare, dataset tools")
    sub = ap.add_subparsers(dest="command", required=True)

    def add_run_flags(p):
        p.add_argument("--scene", required=True)
        p.add_argument("--trajectory", required=True)
        p.add_argument("--rig", required=True)
        p.add_argument("--seed", required=True, type=int)
        p.add_argument("--resolution", type=float, default=0.2)
        p.add_argument("--map-rate", type=float, default=5.0)
        p.add_argument("--ontology", default="ours10")
        p.add_argument("--out", required=True)

    p = sub.add_parser("simulate", help="run one scenario into a timeline directory")
    add_run_flags(p)
    p.add_argument("--strategy", default="range_based")

    p = sub.add_parser("eval", help="score a timeline directory against its scene")
    p.add_argument("timeline", help="timeline directory from `simulate`")
    p.add_argument("--scene", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--ontology", default="ours10")
    p.add_argument("--out", default=None)

    p = sub.add_parser("compare", help="run one scenario under several strategies")
    add_run_flags(p)
    p.add_argument("--strategy", action="append", required=True,
                   help="repeat once per strategy")

    p = sub.add_parser("dataset-stats", help="label-share table over masks")
    p.add_argument("masks", help="directory of .png masks")
    p.add_argument("--ontology", default="ours10")

    p = sub.add_parser("remap", help="rewrite masks through a class remap table")
    p.add_argument("masks", help="directory of .png masks")
    p.add_argument("--remap-table", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("miou", help="IoU of predicted rasters against GT masks")
    p.add_argument("gt", help="directory of GT .png masks")
    p.add_argument("pred", help="directory of predicted .npy confidence rasters")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--ontology", default="ours10")

    p = sub.add_parser("export-ply", help="convert a map dump CSV to ASCII PLY")
    p.add_argument("dump", help="map dump .csv from `simulate`")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--ontology", default="ours10")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            config = RunConfig(args.scene, args.trajectory, args.rig,
                               args.strategy, args.seed, args.resolution,
                               args.out, args.map_rate, args.ontology)
            out = cmd_simulate(config)
            print(out)
        elif args.command == "eval":
            report = cmd_eval(args.timeline, args.scene, args.threshold,
                              args.ontology, args.out)
            print(report.to_text(), end="")
        elif args.command == "compare":
            config = RunConfig(args.scene, args.trajectory, args.rig,
                               args.strategy[0], args.seed, args.resolution,
                               args.out, args.map_rate, args.ontology)
            reports = cmd_compare(config, args.strategy)
            print(_side_by_side(reports), end="")
        elif args.command == "dataset-stats":
            print(cmd_dataset_stats(args.masks, args.ontology), end="")
        elif args.command == "remap":
            print(cmd_remap(args.masks, args.remap_table, args.out))
        elif args.command == "miou":
            print(cmd_miou(args.gt, args.pred, args.threshold, args.ontology),
                  end="")
        elif args.command == "export-ply":
            print(cmd_export_ply(args.dump, args.out, args.threshold,
                                 args.ontology))
    except ConfigurationError as e:
        print(f"terravox {args.command}: {e}", file=sys.stderr)
        return 2
    except TerravoxError as e:
        print(f"terravox {args.command}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
