"""Command-line interface.

Subcommands: gen-data, ingest, train-ae, train-fm, infer, eval, ablate.
Settings come from a flat ``key = value`` config file (see
``TrainConfig.to_text``); individual flags override file values.  Compute
device is selected with the OCCFLOW_DEVICE environment variable.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import evalkit, pipeline, synthbuild
from .pipeline import Checkpoint, JsonlLogger, TrainConfig


def _load_config(args) -> TrainConfig:
    if getattr(args, "config", None):
        cfg = TrainConfig.from_text(Path(args.config).read_text())
    elif getattr(args, "profile", "desk") == "paper":
        cfg = TrainConfig.paper()
    else:
        cfg = TrainConfig()
    overrides = {}
    for key in ("seed", "steps", "resolution"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "no_cd_loss", False):
        overrides["cd_loss"] = False
    if getattr(args, "no_encoder_cond", False):
        overrides["encoder_cond"] = False
    if getattr(args, "no_decoder_cond", False):
        overrides["decoder_cond"] = False
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--profile", choices=("desk", "paper"), default="desk")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--no-cd-loss", action="store_true")
    p.add_argument("--no-encoder-cond", action="store_true")
    p.add_argument("--no-decoder-cond", action="store_true")


def cmd_gen_data(args) -> int:
    sensor = synthbuild.SensorMeta(
        facade_dropout=args.dropout, noise_sigma=args.noise
    )
    mix = args.roof_mix
    records = synthbuild.build_dataset(
        args.count, args.out, seed=args.seed, sensor=sensor,
        roof_mix=(mix[0], mix[1], mix[2]),
    )
    print(f"wrote {len(records)} records to {args.out}")
    return 0


def cmd_ingest(args) -> int:
    records, summary = synthbuild.ingest_external(args.meshes, args.clouds, args.out)
    print(
        f"ingested {len(records)} pairs "
        f"(skipped non-watertight: {summary['skipped_non_watertight']}, "
        f"unmatched meshes: {len(summary['mesh_only'])}, "
        f"unmatched clouds: {len(summary['cloud_only'])})"
    )
    return 0


def cmd_train_ae(args) -> int:
    cfg = _load_config(args)
    records = pipeline.split_records(synthbuild.load_manifest(args.data), "train")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    logger = JsonlLogger(out / "train_a.jsonl", echo=True)
    result = pipeline.train_stage_a(records, cfg, logger=logger)
    result.checkpoint.save(out / "stage_a.ckpt")
    print(f"saved {out / 'stage_a.ckpt'}")
    return 0


def cmd_train_fm(args) -> int:
    cfg = _load_config(args)
    records = pipeline.split_records(synthbuild.load_manifest(args.data), "train")
    stage_a = Checkpoint.load(args.stage_a)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    logger = JsonlLogger(out / "train_b.jsonl", echo=True)
    result = pipeline.train_stage_b(records, stage_a, cfg, logger=logger)
    result.checkpoint.save(out / "stage_b.ckpt")
    print(f"saved {out / 'stage_b.ckpt'}")
    return 0


def cmd_infer(args) -> int:
    stage_a = Checkpoint.load(args.stage_a)
    stage_b = Checkpoint.load(args.stage_b)
    cfg = _load_config(args) if args.config else stage_b.config
    if args.resolution is not None:
        cfg = dataclasses.replace(cfg, resolution=args.resolution)
    if args.cloud.endswith(".bin"):
        cloud = synthbuild.read_array(args.cloud).astype(np.float64)
    else:
        cloud = np.loadtxt(args.cloud, usecols=(0, 1, 2), ndmin=2)
    mesh = pipeline.infer(cloud, stage_a, stage_b, cfg, z0_seed=args.z0_seed)
    from . import geometry

    geometry.save_obj(mesh, args.out)
    status = "empty surface" if mesh.is_empty else f"{len(mesh.vertices)} vertices"
    print(f"wrote {args.out} ({status})")
    return 0


def cmd_eval(args) -> int:
    records = synthbuild.load_manifest(args.data)
    if args.split:
        records = pipeline.split_records(records, args.split)
    rows, summary = evalkit.evaluate_run(
        args.predictions, records, evalkit.EvalConfig(), report_path=args.out
    )
    print(
        f"evaluated {summary['count']} records ({summary['failures']} failures): "
        f"cd_l1_x1e3 {summary['mean_cd_l1_x1e3']:.3f}  "
        f"cd_l2_x1e3 {summary['mean_cd_l2_x1e3']:.3f}  "
        f"f_score {summary['mean_f_score']:.4f}  iou {summary['mean_iou']:.4f}"
    )
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    records = synthbuild.load_manifest(args.data)
    train = pipeline.split_records(records, "train")
    rows = pipeline.run_ablation_matrix(train, cfg, out_dir=args.out)
    for row in rows:
        flags = f"cd={row['cd_loss']} enc={row['encoder_cond']}"
        if "error" in row:
            print(f"{flags}: FAILED ({row['error']})")
        else:
            print(
                f"{flags}: latent iou {row['latent']['mean_iou']:.3f} "
                f"f {row['latent']['mean_f_score']:.3f} | diffusion iou "
                f"{row['diffusion']['mean_iou']:.3f} f {row['diffusion']['mean_f_score']:.3f}"
            )
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="occflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a procedural building dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--roof-mix", type=float, nargs=3, default=(0.25, 0.5, 0.25),
                   metavar=("FLAT", "GABLED", "HIPPED"))
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--noise", type=float, default=0.005)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("ingest", help="ingest external mesh/cloud pairs")
    p.add_argument("--meshes", required=True)
    p.add_argument("--clouds", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("train-ae", help="stage (a): train the function autoencoder")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_train_ae)

    p = sub.add_parser("train-fm", help="stage (b): train the flow-matching model")
    p.add_argument("--data", required=True)
    p.add_argument("--stage-a", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_train_fm)

    p = sub.add_parser("infer", help="complete one partial cloud to a mesh")
    p.add_argument("--cloud", required=True, help=".xyz text or .bin array file")
    p.add_argument("--stage-a", required=True)
    p.add_argument("--stage-b", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--z0-seed", type=int, default=0)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="evaluate predicted meshes against a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run the conditioning/CD-loss ablation grid")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_ablate)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
