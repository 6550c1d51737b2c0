"""Command-line front end wiring the library into reproducible experiments.

Subcommands cover the full loop: ``synth`` (generate a synthetic
dataset), ``prep`` (label maps -> aligned silhouettes, or torso
subtraction on existing silhouettes), ``train``, ``embed``, ``eval``,
``casia-eval``, ``fuse`` and ``aggregate``.  Exit codes: 0 success,
2 usage, 3 data problem, 4 internal error.  Errors print a single
machine-parsable line ``error: <Kind>: <message>`` on stderr.

Experiment parameters can come from a key=value config file
(``--config``); explicit flags override file values.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import dataio, retrieval, silhouette, synth, trainer
from .embedder import GaitModel, ModelConfig, embed, init_model, load_model, save_model
from .errors import GaitError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_INTERNAL = 4


def parse_config_file(path):
    """Parse ``key = value`` lines; '#' starts a comment."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise GaitError(f"{path}:{lineno}: expected key = value")
            key, val = (part.strip() for part in line.split("=", 1))
            values[key] = val
    return values


def _int_list(text):
    return tuple(int(x) for x in text.replace(" ", "").split(",") if x)


def _parts_from_mode(mode):
    if mode == "full":
        return silhouette.FULL_BODY
    if mode == "partial":
        return silhouette.PARTIAL
    return silhouette.validate_parts(_int_list(mode))


def _model_config(args, file_cfg):
    def pick(flag_value, key, convert, default):
        if flag_value is not None:
            return flag_value
        if key in file_cfg:
            return convert(file_cfg[key])
        return default

    if getattr(args, "paper_scale", False):
        base = ModelConfig.paper_scale(seed=args.seed)
        return base
    return ModelConfig(
        conv_channels=pick(
            _int_list(args.channels) if args.channels else None, "model.channels", _int_list, (8, 16, 32)
        ),
        pyramid_scales=pick(
            _int_list(args.scales) if args.scales else None, "model.scales", _int_list, (1, 2, 4)
        ),
        strip_dim=pick(args.strip_dim, "model.strip_dim", int, 32),
        branches=pick(args.branches, "model.branches", int, 1),
        seed=args.seed,
        dtype=pick(args.dtype, "model.dtype", str, "float64"),
    )


# --- subcommands -----------------------------------------------------------------


def cmd_synth(args):
    cameras = None
    if args.views:
        views = args.views.split(",")
        cameras = tuple(
            synth.CameraSpec(view=v, scale=1.0 - 0.08 * i, noise=args.noise, seed=101 + 101 * i)
            for i, v in enumerate(views)
        )
    records = synth.gen_dataset(
        args.out,
        n_identities=args.ids,
        cameras=cameras,
        tracklets_per_camera=args.tracklets_per_camera,
        frames=args.frames,
        seed=args.seed,
        split_fractions=tuple(float(x) for x in args.split.split(",")),
    )
    print(f"wrote {len(records)} tracklets under {args.out}")
    return EXIT_OK


def _load_instance_masks(instances_root, rel_frame):
    stem = os.path.splitext(rel_frame)[0]
    inst_dir = os.path.join(instances_root, stem)
    if not os.path.isdir(inst_dir):
        return ()
    masks = []
    for name in sorted(os.listdir(inst_dir)):
        if name.lower().endswith((".png", ".pgm")):
            masks.append(dataio.read_image(os.path.join(inst_dir, name)) > 0)
    return tuple(masks)


def cmd_prep(args):
    root = args.root or os.path.dirname(os.path.abspath(args.manifest))
    records = dataio.parse_manifest(args.manifest)
    parts = _parts_from_mode(args.parts)
    out_records = []
    dropped = 0
    skipped_tracklets = 0
    for rec in records:
        rel_out = []
        if args.subtract_torso:
            # existing binary silhouettes + torso masks -> realigned partial
            sils = []
            for rel in rec.frames:
                orig = dataio.read_silhouette(os.path.join(root, rel))
                torso = dataio.read_image(os.path.join(args.torso_root, rel)) > 0
                reduced = silhouette.subtract_torso(orig, torso)
                try:
                    frame = silhouette.compute_alignment(orig)
                    sils.append(silhouette.apply_alignment(reduced, frame))
                except GaitError:
                    dropped += 1
            if not sils:
                skipped_tracklets += 1
                continue
        else:
            label_maps = [dataio.read_image(os.path.join(root, rel)) for rel in rec.frames]
            instance_masks = None
            if args.instances_root:
                instance_masks = [_load_instance_masks(args.instances_root, rel) for rel in rec.frames]
            try:
                sils, drops = silhouette.process_tracklet(
                    label_maps,
                    parts,
                    instance_masks,
                    min_foreground=args.min_foreground,
                    component_fallback=args.largest_component,
                )
            except GaitError:
                skipped_tracklets += 1
                continue
            dropped += len(drops)
        for t, s in enumerate(sils):
            rel = os.path.join("sils", rec.tracklet_id, f"f{t:04d}.pgm")
            dataio.write_pgm(os.path.join(args.out, rel), dataio.silhouette_to_u8(s))
            rel_out.append(rel)
        out_records.append(
            dataio.TrackletRecord(
                tracklet_id=rec.tracklet_id,
                person_id=rec.person_id,
                camera_id=rec.camera_id,
                split=rec.split,
                frames=rel_out,
                view=rec.view,
                condition=rec.condition,
                seq=rec.seq,
            )
        )
    dataio.write_manifest(os.path.join(args.out, "manifest.jsonl"), out_records)
    print(
        f"prepared {len(out_records)} tracklets ({dropped} frames dropped,"
        f" {skipped_tracklets} tracklets skipped) -> {args.out}"
    )
    return EXIT_OK


def cmd_train(args):
    file_cfg = parse_config_file(args.config) if args.config else {}

    def cfgval(key, convert, default):
        return convert(file_cfg[key]) if key in file_cfg else default

    model_cfg = _model_config(args, file_cfg)
    spec = trainer.BatchSpec(
        p=args.p if args.p is not None else cfgval("batch.p", int, 4),
        k=args.k if args.k is not None else cfgval("batch.k", int, 2),
        c=args.c if args.c is not None else cfgval("batch.c", int, 8),
        flip_prob=cfgval("batch.flip_prob", float, 0.5),
        seed=args.seed + 1,
    )
    loss_cfg = trainer.LossConfig(
        margin=args.margin if args.margin is not None else cfgval("loss.margin", float, 0.2),
        averaging=cfgval("loss.averaging", str, "all-triplets"),
    )
    train_cfg = trainer.TrainConfig(
        learning_rate=args.lr if args.lr is not None else cfgval("train.lr", float, 1e-4),
        iterations=args.iterations
        if args.iterations is not None
        else cfgval("train.iterations", int, 100),
        checkpoint_every=args.checkpoint_every
        if args.checkpoint_every is not None
        else cfgval("train.checkpoint_every", int, 100),
        seed=args.seed,
    )
    train_ds = dataio.load_silhouette_dataset(args.manifest, args.root, split="train")
    val_ds = dataio.load_silhouette_dataset(args.manifest, args.root, split="val")
    if len(val_ds) == 0:
        val_ds = None
    model = init_model(model_cfg)
    result = trainer.train(model, train_ds, spec, loss_cfg, train_cfg, val_ds)
    save_model(args.out, result.model)
    if args.history:
        trainer.save_history_csv(args.history, result.history)
    last = result.history[-1]
    print(
        f"trained {train_cfg.iterations} iterations; final loss {last[1]:.4f};"
        f" best val mAP {result.best_map:.4f} at iteration {result.best_iteration};"
        f" checkpoint -> {args.out}"
    )
    return EXIT_OK


def cmd_embed(args):
    model = load_model(args.model)
    ds = dataio.load_silhouette_dataset(args.manifest, args.root, split=args.split)
    if len(ds) == 0:
        raise GaitError(f"no tracklets in split {args.split!r}")
    entries = []
    for tk in ds:
        vec = np.asarray(embed(model, tk.frames), dtype=np.float32).ravel()
        entries.append((tk.tracklet_id, vec))
    dataio.write_embeddings(args.out, entries)
    print(f"embedded {len(entries)} tracklets (dim {entries[0][1].size}) -> {args.out}")
    return EXIT_OK


def _metadata_by_id(manifest_path):
    return {rec.tracklet_id: rec for rec in dataio.parse_manifest(manifest_path)}


def cmd_eval(args):
    entries = dataio.read_embeddings(args.embeddings)
    meta = _metadata_by_id(args.manifest)
    missing = [tid for tid, _ in entries if tid not in meta]
    if missing:
        raise GaitError(f"{len(missing)} embedded tracklets missing from manifest: {missing[:3]}")
    feats = np.stack([vec for _, vec in entries]).astype(np.float64)
    pids = [meta[tid].person_id for tid, _ in entries]
    cams = [meta[tid].camera_id for tid, _ in entries]
    report = retrieval.cross_camera_eval(feats, pids, cams)
    print(f"queries: {report.num_queries}  excluded: {report.excluded}")
    print(f"mAP: {report.map:.4f}")
    for k in sorted(report.rank):
        print(f"rank-{k}: {report.rank[k]:.4f}")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        print(f"report -> {args.json}")
    return EXIT_OK


def cmd_casia_eval(args):
    entries = dataio.read_embeddings(args.embeddings)
    meta = _metadata_by_id(args.manifest)
    feats, pids, views, conds, seqs = [], [], [], [], []
    for tid, vec in entries:
        if tid not in meta:
            raise GaitError(f"tracklet {tid!r} missing from manifest")
        rec = meta[tid]
        if rec.view is None or rec.condition is None or rec.seq is None:
            raise GaitError(f"tracklet {tid!r} lacks view/condition/seq metadata")
        feats.append(vec)
        pids.append(rec.person_id)
        views.append(rec.view)
        conds.append(rec.condition)
        seqs.append(rec.seq)
    report = retrieval.casia_b_eval(
        np.stack(feats).astype(np.float64), pids, views, conds, seqs, args.probe_condition
    )
    print(report.to_text())
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        print(f"report -> {args.json}")
    return EXIT_OK


def cmd_fuse(args):
    a = dataio.read_embeddings(args.a)
    b = dict(dataio.read_embeddings(args.b))
    missing = [tid for tid, _ in a if tid not in b]
    if missing:
        raise GaitError(f"ids missing from second store: {missing[:3]}")
    fused = [(tid, retrieval.fuse(vec, b[tid]).astype(np.float32)) for tid, vec in a]
    dataio.write_embeddings(args.out, fused)
    print(f"fused {len(fused)} vectors -> {args.out}")
    return EXIT_OK


def cmd_aggregate(args):
    files = sorted(f for f in os.listdir(args.features_dir) if f.endswith(".npy"))
    if not files:
        raise GaitError(f"no .npy per-frame feature files in {args.features_dir}")
    entries = []
    for name in files:
        frames = np.load(os.path.join(args.features_dir, name))
        vec = retrieval.aggregate_external_features(frames, args.mode, args.chunk_size)
        entries.append((os.path.splitext(name)[0], vec.astype(np.float32)))
    dataio.write_embeddings(args.out, entries)
    print(f"aggregated {len(entries)} tracklets ({args.mode}) -> {args.out}")
    return EXIT_OK


# --- parser ------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="gaitreid",
        description="Gait-based person re-identification experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0, help="seed for all randomness")
        p.add_argument(
            "--deterministic",
            action="store_true",
            help="bit-reproducible mode (reductions are always fixed-order; flag kept for scripts)",
        )

    p = sub.add_parser("synth", help="generate a synthetic label-map dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--ids", type=int, default=16)
    p.add_argument("--tracklets-per-camera", type=int, default=2)
    p.add_argument("--frames", type=int, default=24)
    p.add_argument("--views", default="", help="comma list of frontal/oblique/lateral cameras")
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--split", default="0.5,0.2,0.3", help="train,val,test identity fractions")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prep", help="label maps -> aligned binary silhouettes")
    p.add_argument("--manifest", required=True)
    p.add_argument("--root", default=None, help="dataset root (default: manifest directory)")
    p.add_argument("--out", required=True)
    p.add_argument("--parts", default="full", help="full, partial, or comma list of part ids")
    p.add_argument("--min-foreground", type=int, default=16)
    p.add_argument("--largest-component", action="store_true",
                   help="gate by largest 4-connected component when no instance masks exist")
    p.add_argument("--instances-root", default=None,
                   help="directory of per-frame instance mask folders")
    p.add_argument("--subtract-torso", action="store_true",
                   help="treat manifest frames as existing silhouettes; subtract torso masks")
    p.add_argument("--torso-root", default=None, help="torso masks root (with --subtract-torso)")
    common(p)
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("train", help="train the set-pooled embedder")
    p.add_argument("--manifest", required=True)
    p.add_argument("--root", default=None)
    p.add_argument("--out", required=True, help="checkpoint path (.gbm)")
    p.add_argument("--history", default=None, help="loss history CSV path")
    p.add_argument("--config", default=None, help="key=value experiment config file")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--margin", type=float, default=None)
    p.add_argument("--p", type=int, default=None, help="identities per batch")
    p.add_argument("--k", type=int, default=None, help="tracklets per identity")
    p.add_argument("--c", type=int, default=None, help="frames per tracklet")
    p.add_argument("--channels", default=None, help="e.g. 8,16,32")
    p.add_argument("--scales", default=None, help="e.g. 1,2,4")
    p.add_argument("--strip-dim", type=int, default=None)
    p.add_argument("--branches", type=int, default=None)
    p.add_argument("--dtype", default=None, choices=("float32", "float64"))
    p.add_argument("--paper-scale", action="store_true", help="use the full-size architecture")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="embed every tracklet of a split (all frames)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--root", default=None)
    p.add_argument("--model", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", required=True, help="embedding store path (.gbe)")
    common(p)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("eval", help="cross-camera retrieval report")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--json", default=None, help="also write the report as JSON")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("casia-eval", help="cross-view rank-1 report (view-matrix protocol)")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--probe-condition", default="NM", choices=("NM", "BG", "CL"))
    p.add_argument("--json", default=None)
    common(p)
    p.set_defaults(func=cmd_casia_eval)

    p = sub.add_parser("fuse", help="concatenate two l2-normalized embedding stores")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("aggregate", help="pool external per-frame features (.npy per tracklet)")
    p.add_argument("--features-dir", required=True)
    p.add_argument("--mode", default="frame-mean", choices=("frame-mean", "chunk-mean"))
    p.add_argument("--chunk-size", type=int, default=None)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_aggregate)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_USAGE
    try:
        return args.func(args)
    except (GaitError, FileNotFoundError, NotADirectoryError, PermissionError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # pragma: no cover - defensive
        print(f"error: Internal: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
