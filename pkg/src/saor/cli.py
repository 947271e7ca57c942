"""Command-line entry point wiring all stages together.

Subcommands: preprocess, cluster, train, finetune, infer, eval, export,
render-views, synth, smoke.  Config files are flat key=value text; flags
override file values.  SAOR_THREADS caps data-decode worker lanes.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import TrainConfig, desk_config, load_config, save_config, \
    apply_overrides
from . import data as D
from .evaluation import (SyntheticSpec, generate_synthetic, mask_bbox_size,
                         pck, transfer_keypoints)
from .losses import PerceptualPyramid
from .mesh import export_obj, export_ply_colors
from .networks import SaorModel
from .optim import load_checkpoint
from .render import CameraPose, render
from .skinning import hard_parts, lbs_apply
from .training import Trainer, forward_sample

log = logging.getLogger("saor")

PART_PALETTE = np.array([
    [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200],
    [245, 130, 48], [145, 30, 180], [70, 240, 240], [240, 50, 230],
    [210, 245, 60], [250, 190, 212], [0, 128, 128], [220, 190, 255],
    [170, 110, 40], [255, 250, 200], [128, 0, 0], [170, 255, 195],
], dtype=np.uint8)


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--manifest", help="JSON-lines sample manifest")
    p.add_argument("--out", help="output directory or file")
    p.add_argument("--checkpoint", help="model checkpoint path")
    p.add_argument("--seed", type=int, help="override random seed")
    p.add_argument("--image-size", type=int, help="override image size")
    p.add_argument("--parts", type=int, help="override part count")
    p.add_argument("--cameras", type=int, help="override camera count")
    p.add_argument("--epochs", type=int, help="override epoch count")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="saor",
        description="Single-view articulated mesh reconstruction toolkit")
    sub = ap.add_subparsers(dest="command", required=True)
    specs = {
        "preprocess": "apply detection filters and write a filtered manifest",
        "cluster": "fit the silhouette mixture model and annotate cluster ids",
        "train": "train a model from scratch on a clustered manifest",
        "finetune": "continue training from a base checkpoint",
        "infer": "predict mesh, parts, pose, and turntable views for an image",
        "eval": "keypoint-transfer PCK over sample pairs",
        "export": "write the checkpoint's canonical shape as OBJ + part PLY",
        "render-views": "render prediction views as PNG plus PFM depth",
        "synth": "generate the procedural quadruped dataset",
        "smoke": "tiny seeded end-to-end pipeline run",
    }
    parsers = {}
    for name, desc in specs.items():
        p = sub.add_parser(name, help=desc)
        _add_common(p)
        parsers[name] = p
    parsers["train"].add_argument("--resume", help="checkpoint to resume from")
    parsers["infer"].add_argument("--image", help="input image path")
    parsers["render-views"].add_argument("--image", help="input image path")
    parsers["eval"].add_argument("--pairs",
                                 help="JSON-lines file of {source, target} indices")
    parsers["synth"].add_argument("--spec", help="synthetic spec JSON")
    parsers["synth"].add_argument("--count", type=int, default=200)
    return ap


def _load_cfg(args, default: TrainConfig = None) -> TrainConfig:
    cfg = load_config(args.config) if args.config else \
        (default if default is not None else TrainConfig())
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.image_size is not None:
        overrides["image_size"] = args.image_size
    if args.parts is not None:
        overrides["num_parts"] = args.parts
    if args.cameras is not None:
        overrides["num_cameras"] = args.cameras
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    apply_overrides(cfg, overrides)
    cfg.validate()
    return cfg


def _require(args, *names):
    for n in names:
        if getattr(args, n.replace("-", "_"), None) is None:
            raise SystemExit(f"saor: --{n} is required for this command")


# ------------------------------------------------------------------ commands

def cmd_preprocess(args) -> int:
    _require(args, "manifest", "out")
    records = D.read_manifest(args.manifest)
    base = Path(args.manifest).parent
    kept, reasons = [], {}
    for rec in records:
        from PIL import Image
        with Image.open(base / rec["image"]) as img:
            size = img.size
        meta = D.DetectionMeta(bbox=tuple(rec["bbox"]),
                               confidence=float(rec.get("confidence", 1.0)),
                               image_size=size)
        keep, reason = D.filter_detection(meta)
        if keep:
            kept.append(rec)
        else:
            reasons[reason] = reasons.get(reason, 0) + 1
    D.write_manifest(args.out, kept)
    log.info("kept %d/%d records (rejections: %s)", len(kept), len(records),
             reasons or "none")
    return 0


def cmd_cluster(args) -> int:
    _require(args, "manifest", "out")
    seed = args.seed if args.seed is not None else 0
    records = D.read_manifest(args.manifest)
    base = Path(args.manifest).parent
    masks = [D.read_mask(base / rec["mask"]) for rec in records]
    model = D.fit_gmm(masks, k=D.NUM_CLUSTERS, seed=seed)
    ids = D.assign_clusters(model, masks)
    for rec, cid in zip(records, ids):
        rec["cluster_id"] = int(cid)
    D.write_manifest(args.out, records)
    np.savez(str(args.out) + ".gmm.npz", means=model.means,
             variances=model.variances, weights=model.weights,
             log_likelihoods=model.log_likelihoods)
    log.info("clustered %d records into %d components (final ll %.2f)",
             len(records), model.n_components, model.log_likelihoods[-1])
    return 0


def _train_common(args, finetune: bool) -> int:
    _require(args, "manifest", "out")
    cfg = _load_cfg(args)
    if finetune:
        _require(args, "checkpoint")
        cfg.finetune_from = args.checkpoint
    records = D.load_records(args.manifest, cfg.model.image_size)
    trainer = Trainer(cfg, records, args.out, finetune=finetune)
    if not finetune and getattr(args, "resume", None):
        trainer.resume(args.resume)
    save_config(cfg, Path(args.out) / "config.txt")
    trainer.run()
    return 0


def cmd_train(args) -> int:
    return _train_common(args, finetune=False)


def cmd_finetune(args) -> int:
    return _train_common(args, finetune=True)


def _load_model(args) -> tuple[SaorModel, TrainConfig]:
    _require(args, "checkpoint")
    cfg = _load_cfg(args)
    model = SaorModel(cfg.model, seed=cfg.seed)
    PerceptualPyramid(model.store, seed=cfg.seed + 1)
    load_checkpoint(model.store, args.checkpoint)
    return model, cfg


def _predict(model: SaorModel, cfg: TrainConfig, image_path):
    rec = D.read_image(image_path)
    s = cfg.model.image_size
    if rec.shape[1:] != (s, s):
        rec = D.bilinear_resize_np(rec, s, s)
    with ad.no_grad():
        fwd = forward_sample(model, rec, cfg.render, s)
    return fwd


def cmd_infer(args) -> int:
    _require(args, "image", "out")
    model, cfg = _load_model(args)
    fwd = _predict(model, cfg, args.image)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem

    export_obj(model.mesh, fwd.shape, out / f"{stem}.obj")
    labels = hard_parts(fwd.articulation.weights)
    colors = PART_PALETTE[labels % len(PART_PALETTE)]
    export_ply_colors(model.mesh, fwd.shape, colors, out / f"{stem}_parts.ply")

    pose = fwd.pose.as_floats()
    hyp = fwd.hypotheses.data
    pose_json = {
        "azimuth": float(pose[0]), "elevation": float(pose[1]),
        "roll": float(pose[2]), "translation": [float(v) for v in pose[3:6]],
        "scores": [float(v) for v in fwd.alpha.data],
        "hypotheses": [[float(v) for v in row] for row in hyp],
    }
    (out / f"{stem}_pose.json").write_text(json.dumps(pose_json, indent=2))
    _write_turntable(model, cfg, fwd, out, stem, with_pfm=False)
    log.info("wrote %s.{obj,_parts.ply,_pose.json} and 4 views", out / stem)
    return 0


def _write_turntable(model, cfg, fwd, out: Path, stem: str, with_pfm: bool):
    s = cfg.model.image_size
    base = fwd.pose.as_floats()
    for off in (0, 90, 180, 270):
        azim = float(base[0]) + off
        azim = (azim + 180.0) % 360.0 - 180.0
        pose = CameraPose(azimuth=azim, elevation=float(base[1]),
                          roll=float(base[2]), translation=base[3:6])
        with ad.no_grad():
            view = render(Tensor(fwd.shape.data), Tensor(fwd.texture.data),
                          pose, model.mesh, cfg.render, s, s)
        D.write_image(out / f"{stem}_view{off:03d}.png", view.rgb.data)
        if with_pfm:
            D.write_pfm(out / f"{stem}_view{off:03d}.pfm", view.depth.data)


def cmd_render_views(args) -> int:
    _require(args, "image", "out")
    model, cfg = _load_model(args)
    fwd = _predict(model, cfg, args.image)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_turntable(model, cfg, fwd, out, Path(args.image).stem, with_pfm=True)
    return 0


def cmd_export(args) -> int:
    _require(args, "out")
    model, cfg = _load_model(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    phi = Tensor(np.zeros((1, cfg.model.feature_dim), dtype=np.float32))
    with ad.no_grad():
        deformed = model.deform(phi)
        art = model.articulation_params(phi)
        shape = lbs_apply(deformed, art)
    export_obj(model.mesh, shape, out / "canonical.obj")
    labels = hard_parts(art.weights)
    colors = PART_PALETTE[labels % len(PART_PALETTE)]
    export_ply_colors(model.mesh, shape, colors, out / "canonical_parts.ply")
    return 0


def cmd_eval(args) -> int:
    _require(args, "pairs", "manifest", "out")
    model, cfg = _load_model(args)
    s = cfg.model.image_size
    records = D.load_records(args.manifest, s)
    pairs = [(int(p["source"]), int(p["target"]))
             for p in D.read_manifest(args.pairs)]
    preds = {}

    def predict(i):
        if i not in preds:
            with ad.no_grad():
                fwd = forward_sample(model, records[i].image, cfg.render, s)
            pose = fwd.pose.as_floats()
            preds[i] = (fwd.shape.data.copy(),
                        CameraPose(azimuth=float(pose[0]),
                                   elevation=float(pose[1]),
                                   roll=float(pose[2]),
                                   translation=pose[3:6]))
            ad.clear_tape()
        return preds[i]

    total, hits, details = 0, 0, []
    for si, ti in pairs:
        s_verts, s_pose = predict(si)
        t_verts, t_pose = predict(ti)
        src_kp = {k.name: k for k in records[si].keypoints}
        tgt_kp = {k.name: k for k in records[ti].keypoints}
        names = [n for n, k in src_kp.items()
                 if k.visible and n in tgt_kp and tgt_kp[n].visible]
        if not names:
            details.append({"source": si, "target": ti, "n_points": 0})
            continue
        pts = [(src_kp[n].x, src_kp[n].y) for n in names]
        pred = transfer_keypoints(pts, s_verts, s_pose, t_verts, t_pose,
                                  model.mesh.faces, s, cfg.render)
        gts = [(tgt_kp[n].x, tgt_kp[n].y) for n in names]
        bbox = mask_bbox_size(records[ti].mask)
        frac = pck(pred, gts, bbox, threshold=0.1)
        hits += round(frac * len(pred))
        total += len(pred)
        details.append({"source": si, "target": ti, "n_points": len(names),
                        "pck": frac})
    metrics = {"pck@0.1": hits / total if total else 0.0,
               "n_pairs": len(pairs), "pairs": details}
    Path(args.out).write_text(json.dumps(metrics, indent=2) + "\n")
    log.info("pck@0.1 = %.4f over %d pairs", metrics["pck@0.1"], len(pairs))
    return 0


def cmd_synth(args) -> int:
    _require(args, "out")
    seed = args.seed if args.seed is not None else 0
    spec = SyntheticSpec.load(args.spec) if args.spec else SyntheticSpec()
    if args.image_size is not None:
        spec.image_size = args.image_size
    manifest = generate_synthetic(spec, args.count, seed, args.out)
    log.info("wrote %d samples to %s", args.count, manifest)
    return 0


def cmd_smoke(args) -> int:
    """Seeded tiny pipeline: synth -> cluster -> 3-epoch train -> eval."""
    _require(args, "out")
    seed = args.seed if args.seed is not None else 0
    out = Path(args.out)
    t0 = time.time()
    stage = "synth"
    try:
        spec = SyntheticSpec(image_size=64)
        data_dir = out / "data"
        generate_synthetic(spec, 20, seed, data_dir)

        stage = "cluster"
        records = D.read_manifest(data_dir / "manifest.jsonl")
        masks = [D.read_mask(data_dir / r["mask"]) for r in records]
        gmm = D.fit_gmm(masks, k=min(D.NUM_CLUSTERS, len(masks) // 2),
                        seed=seed)
        ids = D.assign_clusters(gmm, masks)
        for rec, cid in zip(records, ids):
            rec["cluster_id"] = int(cid)
        manifest = data_dir / "manifest_clustered.jsonl"
        D.write_manifest(manifest, records)

        stage = "train"
        cfg = desk_config(image_size=64, seed=seed)
        cfg.epochs = 3
        cfg.batch = 8
        cfg.articulation_start_epoch = 2
        cfg.checkpoint_every = 3
        cfg.model.feature_dim = 32
        cfg.model.subdivisions = 1
        cfg.model.texture_res = 16
        cfg.model.uv_height = 16
        cfg.model.uv_width = 32
        cfg.validate()
        samples = D.load_records(manifest, cfg.model.image_size)
        run_dir = out / "run"
        trainer = Trainer(cfg, samples, run_dir)
        save_config(cfg, run_dir / "config.txt")
        means = trainer.run()
        if not all(np.isfinite(means)):
            raise RuntimeError(f"non-finite epoch losses: {means}")

        stage = "eval"
        pairs_path = out / "pairs.jsonl"
        D.write_manifest(pairs_path, [{"source": i, "target": (i + 1) % 20}
                                      for i in range(4)])
        eval_args = argparse.Namespace(
            config=str(run_dir / "config.txt"), manifest=str(manifest),
            out=str(out / "metrics.json"),
            checkpoint=str(run_dir / "checkpoint_last.saor"),
            pairs=str(pairs_path), seed=seed, image_size=None, parts=None,
            cameras=None, epochs=None)
        cmd_eval(eval_args)
        metrics = json.loads((out / "metrics.json").read_text())
        if not np.isfinite(metrics["pck@0.1"]):
            raise RuntimeError("non-finite eval metrics")
    except Exception as err:
        log.error("smoke failed at stage %r: %s", stage, err)
        print(f"smoke: FAILED at stage {stage}: {err}", file=sys.stderr)
        return 1
    log.info("smoke passed in %.1fs", time.time() - t0)
    return 0


COMMANDS = {
    "preprocess": cmd_preprocess,
    "cluster": cmd_cluster,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "export": cmd_export,
    "render-views": cmd_render_views,
    "synth": cmd_synth,
    "smoke": cmd_smoke,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    from ._fpu import flush_subnormals
    flush_subnormals()
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except SystemExit:
        raise
    except Exception as err:
        log.error("%s failed: %s", args.command, err)
        print(f"saor {args.command}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
