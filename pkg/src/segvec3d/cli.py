"""Command-line surface wiring the pipeline end to end.

Exit codes: 0 success, 2 usage error, 3 data/parse error, 4 numeric or
training failure. Every command is reproducible from its flags and seed,
and output files are written atomically (temp file + rename).
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import clustering, data, multimodal, trainer
from .errors import (
    DataError,
    DegenerateEmbeddingError,
    DegenerateInstanceError,
    DegenerateSupervisionError,
    DimensionalityTooSmallError,
    InsufficientPairingError,
    InvalidArgumentError,
    PlacementFailureError,
    TrainingDivergedError,
    UnsupportedVersionError,
)
from .segnet import forward_full
from .trainer import TrainConfig

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_USAGE_ERRORS = (InvalidArgumentError,)
_DATA_ERRORS = (DataError, UnsupportedVersionError, FileNotFoundError, IsADirectoryError)
_NUMERIC_ERRORS = (
    TrainingDivergedError,
    DegenerateSupervisionError,
    DegenerateInstanceError,
    DegenerateEmbeddingError,
    PlacementFailureError,
    DimensionalityTooSmallError,
    InsufficientPairingError,
)


def _atomic_write(path, writer):
    """Write through a temp file in the same directory, then rename."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        writer(tmp)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def _save_cloud(cloud, path, extra_int_columns=None):
    path = Path(path)
    if path.suffix == ".csv":
        _atomic_write(path, lambda p: data.write_csv(cloud, p, extra_int_columns))
    else:
        _atomic_write(path, lambda p: data.write_ply(cloud, p, extra_int_columns))


def _add_config_flags(parser):
    """One --kebab-case flag per TrainConfig field, default from the file
    or the built-in defaults."""
    group = parser.add_argument_group("training configuration overrides")
    for f in fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool" or isinstance(f.default, bool):
            group.add_argument(flag, dest=f.name, default=None,
                               action=argparse.BooleanOptionalAction)
        elif isinstance(f.default, int):
            group.add_argument(flag, dest=f.name, type=int, default=None)
        else:
            group.add_argument(flag, dest=f.name, type=float, default=None)


def _resolve_config(args):
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as fh:
            config = TrainConfig.from_text(fh.read())
    else:
        config = TrainConfig()
    overrides = {}
    for f in fields(TrainConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            overrides[f.name] = value
    if overrides:
        merged = {f.name: getattr(config, f.name) for f in fields(TrainConfig)}
        merged.update(overrides)
        config = TrainConfig(**merged)
    return config


def _load_scene_dir(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory} is not a directory")
    paths = sorted(directory.glob("*.ply")) + sorted(directory.glob("*.csv"))
    if not paths:
        raise DataError(f"no .ply or .csv scenes in {directory}")
    return [data.load_scene(p) for p in paths], paths


def _write_metrics_csv(history, path):
    def writer(p):
        with open(p, "w", encoding="utf-8") as fh:
            fh.write("step,loss\n")
            for step, loss in history:
                fh.write(f"{step},{repr(float(loss))}\n")

    _atomic_write(path, writer)


def _cluster(embeddings, args, margin):
    method = args.clusterer
    if method == "radius":
        radius = args.radius if args.radius is not None else margin / 2.0
        return clustering.radius_linkage(embeddings, radius)
    if method == "dbscan":
        eps = args.eps if args.eps is not None else margin / 2.0
        return clustering.dbscan(embeddings, eps, args.min_pts)
    bandwidth = args.bandwidth if args.bandwidth is not None else margin / 2.0
    return clustering.mean_shift(embeddings, bandwidth)


def _add_cluster_flags(parser):
    group = parser.add_argument_group("clustering")
    group.add_argument("--clusterer", choices=("radius", "dbscan", "mean-shift"),
                       default="radius", help="instance extraction method")
    group.add_argument("--radius", type=float, default=None,
                       help="linkage radius (default: margin/2 from the checkpoint)")
    group.add_argument("--eps", type=float, default=None,
                       help="DBSCAN radius (default: margin/2 from the checkpoint)")
    group.add_argument("--min-pts", type=int, default=4, help="DBSCAN core threshold")
    group.add_argument("--bandwidth", type=float, default=None,
                       help="mean-shift bandwidth (default: margin/2)")


def _segment_cloud(ckpt, cloud, args):
    _, embeddings, _ = forward_full(cloud, ckpt.segnet)
    return embeddings, _cluster(embeddings, args, ckpt.config.margin)


def _pool_predicted_instances(ckpt, cloud, args):
    """Segment a cloud and pool a descriptor per non-noise instance."""
    point_field, embeddings, _ = forward_full(cloud, ckpt.segnet)
    seg = _cluster(embeddings, args, ckpt.config.margin)
    descs, ids = [], []
    for inst in range(seg.num_instances):
        members = np.flatnonzero(seg.labels == inst)
        descs.append(multimodal.pool_instance(point_field, members))
        ids.append(inst)
    return seg, descs, ids


def _require_joint(ckpt):
    if ckpt.joint is None:
        raise InvalidArgumentError(
            "checkpoint has no joint 3D-text model; run train-align first"
        )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args):
    types = tuple(t.strip() for t in args.types.split(",") if t.strip())
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        spec = data.SceneSpec(
            num_objects=(args.min_objects, args.max_objects),
            object_types=types,
            points_per_object=(args.min_points, args.max_points),
            pose_jitter=args.pose_jitter,
            noise_sigma=args.noise_sigma,
            seed=args.seed + i,
        )
        cloud = data.generate_scene(spec)
        path = out_dir / f"scene_{i:03d}.{args.format}"
        _save_cloud(cloud, path)
        if cloud.category_names:
            _atomic_write(
                data.sidecar_path(path),
                lambda p, c=cloud: data.write_category_sidecar(c.category_names, p),
            )
        n_inst = len(np.unique(cloud.instance_labels))
        print(f"{path}: {cloud.n} points, {n_inst} instances")
    print(f"wrote {args.count} scenes to {out_dir}")
    return EXIT_OK


def cmd_train_seg(args):
    config = _resolve_config(args)
    scenes, _ = _load_scene_dir(args.data)
    try:
        ckpt = trainer.train_segnet(config, scenes)
    except TrainingDivergedError as err:
        if err.checkpoint is not None:
            _atomic_write(args.out, lambda p: trainer.save_checkpoint(err.checkpoint, p))
            print(f"training diverged; last good checkpoint kept at {args.out}", file=sys.stderr)
        raise
    _atomic_write(args.out, lambda p: trainer.save_checkpoint(ckpt, p))
    _write_metrics_csv(ckpt.seg_history, str(args.out) + ".metrics.csv")
    first = ckpt.seg_history[0][1]
    last = ckpt.seg_history[-1][1]
    print(f"trained {config.epochs} epochs on {len(scenes)} scenes")
    print(f"loss: first {first:.6f} last {last:.6f}")
    print(f"checkpoint: {args.out}")
    return EXIT_OK


def cmd_segment(args):
    ckpt = trainer.load_checkpoint(args.checkpoint)
    cloud = data.load_scene(args.input)
    _, seg = _segment_cloud(ckpt, cloud, args)
    out_cloud = data.PointCloud(
        positions=cloud.positions, colors=cloud.colors, instance_labels=seg.labels
    )
    _save_cloud(out_cloud, args.output)
    noise = int(np.sum(seg.labels < 0))
    print(f"instances: {seg.num_instances}")
    if noise:
        print(f"noise points: {noise}")
    print(f"wrote {args.output}")
    return EXIT_OK


def cmd_train_align(args):
    config = _resolve_config(args)
    ckpt = trainer.load_checkpoint(args.checkpoint)
    scenes, _ = _load_scene_dir(args.data)
    table = multimodal.TextEmbeddingTable.load(args.table)
    aligned = trainer.train_alignment(config, ckpt, scenes, table)
    _atomic_write(args.out, lambda p: trainer.save_checkpoint(aligned, p))
    _write_metrics_csv(aligned.align_history, str(args.out) + ".metrics.csv")
    print(f"aligned on {len(scenes)} scenes, {config.align_epochs} epochs")
    print(f"loss: first {aligned.align_history[0][1]:.6f} last {aligned.align_history[-1][1]:.6f}")
    print(f"checkpoint: {args.out}")
    return EXIT_OK


def cmd_label(args):
    ckpt = trainer.load_checkpoint(args.checkpoint)
    _require_joint(ckpt)
    if args.candidates:
        candidates = [c.strip() for c in args.candidates.split(",") if c.strip()]
        table = (
            multimodal.TextEmbeddingTable.load(args.table)
            if args.table
            else multimodal.TextEmbeddingTable(dim=64)
        )
    elif args.table:
        table = multimodal.TextEmbeddingTable.load(args.table)
        candidates = sorted(table.entries)
    else:
        raise InvalidArgumentError("provide --candidates and/or --table")
    if not candidates:
        raise InvalidArgumentError("candidate list is empty")
    cloud = data.load_scene(args.input)
    _, descs, ids = _pool_predicted_instances(ckpt, cloud, args)
    for inst, desc in zip(ids, descs):
        phrase, scores = multimodal.zero_shot_label(desc, candidates, ckpt.joint, table)
        print(f"{inst}\t{phrase}\t{scores.max():.4f}")
    return EXIT_OK


def cmd_query(args):
    ckpt = trainer.load_checkpoint(args.checkpoint)
    _require_joint(ckpt)
    table = (
        multimodal.TextEmbeddingTable.load(args.table)
        if args.table
        else multimodal.TextEmbeddingTable(dim=ckpt.joint.w_txt.shape[1])
    )
    cloud = data.load_scene(args.input)
    seg, descs, ids = _pool_predicted_instances(ckpt, cloud, args)
    ranked = multimodal.retrieve(args.query, descs, ckpt.joint, table)
    top_n = min(args.top_n, len(ranked))
    for rank, (idx, score) in enumerate(ranked[:top_n]):
        print(f"{rank + 1}\t{ids[idx]}\t{score:.4f}")
    best_instance = ids[ranked[0][0]]
    if args.output:
        selected = (seg.labels == best_instance).astype(int)
        out_cloud = data.PointCloud(
            positions=cloud.positions, colors=cloud.colors, instance_labels=seg.labels
        )
        _save_cloud(out_cloud, args.output, extra_int_columns={"selected": selected})
        print(f"wrote highlight {args.output}")
    return EXIT_OK


def _majority_category(members, cloud):
    gt = cloud.instance_labels[members]
    ids, counts = np.unique(gt, return_counts=True)
    best = ids[np.argmax(counts)]
    return (cloud.category_names or {}).get(int(best))


def cmd_eval(args):
    ckpt = trainer.load_checkpoint(args.checkpoint)
    scenes, paths = _load_scene_dir(args.data)
    table = multimodal.TextEmbeddingTable.load(args.table) if args.table else None
    do_multimodal = ckpt.joint is not None and table is not None
    candidates = sorted(table.entries) if do_multimodal else []
    rows = []
    aris, zs_hits, zs_total, rt_hits, rt_total = [], 0, 0, 0, 0
    rng = np.random.default_rng(args.seed)
    trials_per_scene = max(1, args.trials // len(scenes))
    for path, cloud in zip(paths, scenes):
        if cloud.instance_labels is None:
            raise DataError(f"{path} has no ground-truth instances")
        point_field, embeddings, _ = forward_full(cloud, ckpt.segnet)
        seg = _cluster(embeddings, args, ckpt.config.margin)
        ari = clustering.adjusted_rand_index(seg, cloud.instance_labels)
        aris.append(ari)
        row = {
            "scene": path.name,
            "ari": ari,
            "pred_instances": seg.num_instances,
            "true_instances": len(np.unique(cloud.instance_labels)),
            "zeroshot_correct": "",
            "zeroshot_total": "",
            "retrieval_correct": "",
            "retrieval_total": "",
        }
        if do_multimodal and cloud.category_names:
            sc_zs_hit = sc_zs_tot = 0
            for inst in range(seg.num_instances):
                members = np.flatnonzero(seg.labels == inst)
                truth = _majority_category(members, cloud)
                if truth is None:
                    continue
                desc = multimodal.pool_instance(point_field, members)
                phrase, _ = multimodal.zero_shot_label(desc, candidates, ckpt.joint, table)
                sc_zs_tot += 1
                sc_zs_hit += int(phrase == truth)
            descs = []
            truths = []
            for inst in range(seg.num_instances):
                members = np.flatnonzero(seg.labels == inst)
                descs.append(multimodal.pool_instance(point_field, members))
                truths.append(_majority_category(members, cloud))
            present = sorted({t for t in truths if t})
            sc_rt_hit = sc_rt_tot = 0
            for t in range(trials_per_scene):
                query = present[int(rng.integers(len(present)))]
                ranked = multimodal.retrieve(query, descs, ckpt.joint, table)
                sc_rt_tot += 1
                sc_rt_hit += int(truths[ranked[0][0]] == query)
            zs_hits += sc_zs_hit
            zs_total += sc_zs_tot
            rt_hits += sc_rt_hit
            rt_total += sc_rt_tot
            row.update(
                zeroshot_correct=sc_zs_hit,
                zeroshot_total=sc_zs_tot,
                retrieval_correct=sc_rt_hit,
                retrieval_total=sc_rt_tot,
            )
        rows.append(row)

    def writer(p):
        with open(p, "w", encoding="utf-8") as fh:
            keys = list(rows[0])
            fh.write(",".join(keys) + "\n")
            for row in rows:
                fh.write(",".join(str(row[k]) for k in keys) + "\n")

    if args.out:
        _atomic_write(args.out, writer)
        print(f"wrote report {args.out}")
    mean_ari = float(np.mean(aris))
    print(f"scenes: {len(scenes)}  mean ARI: {mean_ari:.4f}")
    if do_multimodal:
        if zs_total:
            print(f"zero-shot accuracy: {zs_hits}/{zs_total} = {zs_hits / zs_total:.4f}")
        if rt_total:
            print(f"retrieval top-1: {rt_hits}/{rt_total} = {rt_hits / rt_total:.4f}")
    return EXIT_OK


def cmd_gradcheck(args):
    results = trainer.gradient_check_suite(seed=args.seed)
    failed = False
    for name, err, ok in results:
        print(f"{name}: max rel err {err:.3e} {'PASS' if ok else 'FAIL'}")
        failed = failed or not ok
    return EXIT_NUMERIC if failed else EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="segvec3d",
        description="Point-cloud instance segmentation with a shared 3D-text embedding space.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("synth", help="generate labeled synthetic scenes", formatter_class=fmt)
    p.add_argument("--count", type=int, default=10, help="number of scenes")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-objects", type=int, default=4)
    p.add_argument("--max-objects", type=int, default=6)
    p.add_argument("--types", default=",".join(data.SHAPE_TYPES + data.PLANE_TYPES),
                   help="comma-separated object types")
    p.add_argument("--min-points", type=int, default=250, help="points per object, lower bound")
    p.add_argument("--max-points", type=int, default=400, help="points per object, upper bound")
    p.add_argument("--noise-sigma", type=float, default=0.005)
    p.add_argument("--pose-jitter", type=float, default=1.0)
    p.add_argument("--format", choices=("ply", "csv"), default="ply")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-seg", help="phase 1: train the instance embedding network",
                       formatter_class=fmt)
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--data", required=True, help="directory of training scenes")
    p.add_argument("--out", required=True, help="output checkpoint path")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train_seg)

    p = sub.add_parser("segment", help="segment a cloud with a trained checkpoint",
                       formatter_class=fmt)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    _add_cluster_flags(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("train-align", help="phase 2: align instances with text",
                       formatter_class=fmt)
    p.add_argument("--config", default=None)
    p.add_argument("--checkpoint", required=True, help="phase-1 checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--table", required=True, help="text embedding table file")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train_align)

    p = sub.add_parser("label", help="zero-shot label every segmented instance",
                       formatter_class=fmt)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--candidates", default=None, help="comma-separated phrases")
    p.add_argument("--table", default=None, help="text embedding table file")
    _add_cluster_flags(p)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("query", help="retrieve instances matching a text query",
                       formatter_class=fmt)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--top-n", type=int, default=5)
    p.add_argument("--table", default=None)
    p.add_argument("--output", default=None, help="highlight cloud (selected column)")
    _add_cluster_flags(p)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="ARI / zero-shot / retrieval report", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="held-out scene directory")
    p.add_argument("--table", default=None)
    p.add_argument("--out", default=None, help="CSV report path")
    p.add_argument("--trials", type=int, default=30, help="retrieval trials")
    p.add_argument("--seed", type=int, default=0)
    _add_cluster_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite", formatter_class=fmt)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _USAGE_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except _DATA_ERRORS as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except _NUMERIC_ERRORS as err:
        print(f"failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
