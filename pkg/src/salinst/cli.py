"""Command-line entry point: synth, train, infer, eval, gradmap, ablate.

Every command writes its resolved configuration beside its outputs so a
run can be reproduced from the output directory alone.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import ablation
from .config import RunConfig, config_dump, config_from_dict, config_load
from .data import (Sample, dataset_read, dataset_write, split_dataset,
                   synth_generate, tight_box)
from .detector import Proposal, proposals_to_csv
from .evaluate import (Detection, evaluate_detections, gradient_map,
                       gradient_map_write, report_write)
from .model import SalientSegModel
from .roimask import BoxXYXY
from .training import run_inference, train_model

log = logging.getLogger(__name__)


class CommandError(Exception):
    pass


def _load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        cfg = config_load(args.config)
    else:
        cfg = RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=args.seed),
                                  synth=dataclasses.replace(cfg.synth, seed=args.seed))
    if getattr(args, "extractor", None):
        cfg = dataclasses.replace(cfg, seg=dataclasses.replace(cfg.seg,
                                                               extractor=args.extractor))
    if getattr(args, "alpha", None) is not None:
        cfg = dataclasses.replace(cfg, mask=dataclasses.replace(cfg.mask, alpha=args.alpha))
    if getattr(args, "proposals", None) is not None:
        cfg = dataclasses.replace(cfg, infer=dataclasses.replace(cfg.infer,
                                                                 proposals=args.proposals))
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_dataset(path, split: str):
    samples = dataset_read(path)
    if split == "all":
        return samples
    train, val, test = split_dataset(samples)
    return {"train": train, "val": val, "test": test}[split]


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    samples = synth_generate(cfg.synth, args.count)
    dataset_write(samples, out)
    config_dump(cfg, out / "config.json")
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    train_set = _read_dataset(args.data, args.split)
    if not train_set:
        raise CommandError(f"no training samples in {args.data} (split={args.split})")
    model = train_model(train_set, cfg, log_path=out / "train_log.csv")
    model.save(out / "checkpoint.bin")
    config_dump(cfg, out / "config.json")
    print(f"trained {cfg.train.steps} steps; checkpoint at {out / 'checkpoint.bin'}")
    return 0


def _load_model(checkpoint, cfg: RunConfig) -> SalientSegModel:
    if not Path(checkpoint).exists():
        raise CommandError(f"checkpoint not found: {checkpoint}")
    return SalientSegModel.load(checkpoint, cfg.backbone, cfg.seg, cfg.mask)


def cmd_infer(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    model = _load_model(args.checkpoint, cfg)
    samples = _read_dataset(args.data, args.split)
    # detection-only view: inference must never see the annotations
    images = [(s.id, s.image) for s in samples]
    masks_dir = out / "det_masks"
    masks_dir.mkdir(exist_ok=True)
    from PIL import Image
    rows = []
    with open(out / "detections.jsonl", "w") as f:
        for image_id, image in images:
            dets = model.infer(image, image_id, cfg.infer)
            for k, det in enumerate(dets):
                rel = f"det_masks/{image_id}_{k:03d}.png"
                Image.fromarray(det.mask.astype(np.uint8) * 255).save(out / rel)
                box = tight_box(det.mask)
                f.write(json.dumps({"image_id": image_id, "instance_id": k,
                                    "box": list(box.as_tuple()), "score": det.score,
                                    "mask": rel}) + "\n")
                rows.append((image_id, Proposal(box=box, score=det.score)))
    proposals_to_csv(rows, out / "proposals.csv")
    config_dump(cfg, out / "config.json")
    print(f"wrote detections for {len(images)} images to {out}")
    return 0


def detections_read(path) -> list:
    path = Path(path)
    index = path / "detections.jsonl"
    if not index.exists():
        raise CommandError(f"detections index not found: {index}")
    from PIL import Image
    out = []
    with open(index) as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            with Image.open(path / rec["mask"]) as im:
                mask = np.asarray(im) > 127
            out.append(Detection(image_id=rec["image_id"], mask=mask,
                                 score=rec["score"]))
    return out


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    samples = _read_dataset(args.data, args.split)
    detections = detections_read(args.detections)
    report = evaluate_detections(detections, samples)
    report_write(report, out)
    config_dump(cfg, out / "config.json")
    print(report.table())
    return 0


def cmd_gradmap(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    model = _load_model(args.checkpoint, cfg)
    samples = dataset_read(args.data)
    matches = [s for s in samples if s.id == args.sample_id] if args.sample_id else samples[:1]
    if not matches:
        raise CommandError(f"sample id {args.sample_id!r} not found in {args.data}")
    sample = matches[0]
    if args.box:
        box = BoxXYXY(*(float(v) for v in args.box.split(",")))
    else:
        box = sample.instances[0].box
    gmap = gradient_map(model, sample, box)
    gradient_map_write(gmap, out)
    config_dump(cfg, out / "config.json")
    print(f"gradient map for {sample.id} written to {out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    if args.data:
        samples = dataset_read(args.data)
    else:
        samples = synth_generate(cfg.synth, args.count)
    train_set, _, test_set = split_dataset(samples)
    if not train_set or not test_set:
        raise CommandError("ablate: dataset too small to split into train/test")
    if args.sweep == "alpha":
        rows = ablation.ablate_alpha(cfg, train_set, test_set, seed=cfg.train.seed)
        stem = "alpha_sweep"
    else:
        rows = ablation.ablate_extractors(cfg, train_set, test_set, seed=cfg.train.seed)
        stem = "extractor_sweep"
    ablation.rows_write(rows, out, stem)
    config_dump(cfg, out / "config.json")
    print(ablation.rows_table(rows))
    if not ablation.rows_monotone_ok(rows):
        raise CommandError("ablate: report failed the threshold-monotonicity check")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="salinst", description="salient instance segmentation workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False):
        p.add_argument("--config", help="JSON run-config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--extractor", choices=list(ablation.EXTRACTOR_GRID))
        p.add_argument("--alpha", type=float)
        p.add_argument("--proposals", type=int)
        if data:
            p.add_argument("--data", required=True, help="dataset directory")
            p.add_argument("--split", choices=["train", "val", "test", "all"],
                           default="all")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--count", type=int, default=100)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    common(p, data=True)
    p.set_defaults(func=cmd_train, split="train")

    p = sub.add_parser("infer", help="run detection + segmentation")
    common(p, data=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score detections against a dataset")
    common(p, data=True)
    p.add_argument("--detections", required=True, help="directory written by infer")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradmap", help="gradient attribution map for one box")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample-id")
    p.add_argument("--box", help="x0,y0,x1,y1 in image pixels")
    p.set_defaults(func=cmd_gradmap)

    p = sub.add_parser("ablate", help="extractor or alpha sweep")
    common(p)
    p.add_argument("--data", help="existing dataset; generated if omitted")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--sweep", choices=["extractors", "alpha"], default="extractors")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CommandError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
