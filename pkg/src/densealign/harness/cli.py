"""Command line: ``densealign <command> [--config PATH] [--seed N] [--out-dir DIR] [--key=value ...]``.

Any config field can be overridden as ``--key=value`` (every section that
declares it) or ``--section.key=value``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from ..segmentor import save_label_png, upsample_cams
from ..synthdata import Corpus, generate, load_corpus, save_corpus
from .ablate import ablate, write_table
from .checkpoint import load_checkpoint
from .config import RunConfig
from .evaluate import SOURCES, evaluate, predict
from .plots import plot_losses, plot_similarity
from .train import train

log = logging.getLogger("densealign")


OVERRIDE_HELP = ("Any config field can be overridden with --key=value (applies to every section that has it) "
                 "or --section.key=value, e.g. --iters=500 --train.ccl_enabled=false.")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="JSON file with corpus/encoder/seghead/train sections")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", type=Path, default=Path("runs"))
    p.add_argument("--data-dir", type=Path, help="corpus directory from make-data")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="densealign", allow_abbrev=False,
                                     description="Weakly supervised segmentation on a synthetic shapes corpus.",
                                     epilog=OVERRIDE_HELP)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("make-data", "render the synthetic corpus to --out-dir"),
        ("train", "train one model; writes metrics.csv, checkpoint/, eval.json"),
        ("eval", "evaluate a checkpoint on the validation split"),
        ("ablate", "run the GIA/LEA x CCL grid over seeds; writes ablation.csv"),
        ("export-cams", "write per-class CAM PNGs and label maps"),
        ("plot", "patch/prompt similarity heatmaps or loss curves"),
    ]:
        p = sub.add_parser(name, help=help_, description=help_, epilog=OVERRIDE_HELP, allow_abbrev=False)
        _common(p)
        if name in ("eval", "export-cams", "plot"):
            p.add_argument("--checkpoint", type=Path, required=name != "plot")
        if name == "eval":
            p.add_argument("--source", choices=SOURCES, default="cam_pseudo")
        if name == "export-cams":
            p.add_argument("--split", choices=("train", "val"), default="val")
            p.add_argument("--limit", type=int, default=20)
        if name == "ablate":
            p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
        if name == "plot":
            p.add_argument("--kind", choices=("similarity", "losses"), default="similarity")
            p.add_argument("--metrics", type=Path, help="metrics.csv for --kind losses")
            p.add_argument("--index", type=int, default=0, help="validation sample to visualise")
    return parser


def parse_overrides(extra) -> dict:
    out = {}
    for arg in extra:
        if not arg.startswith("--") or "=" not in arg:
            raise SystemExit(f"unrecognised argument {arg!r}; overrides look like --key=value")
        key, value = arg[2:].split("=", 1)
        out[key.replace("-", "_")] = value
    return out


def resolve_config(args, extra) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig.default()
    overrides = parse_overrides(extra)
    if args.seed is not None:
        overrides["corpus.seed" if args.command == "make-data" else "train.seed"] = args.seed
    return cfg.with_overrides(overrides) if overrides else cfg


def get_corpus(args, cfg: RunConfig) -> Corpus:
    if args.data_dir:
        return load_corpus(args.data_dir)
    return generate(cfg.corpus)


def cmd_make_data(args, cfg):
    out = save_corpus(generate(cfg.corpus), args.out_dir)
    print(f"corpus written to {out}")


def cmd_train(args, cfg):
    corpus = get_corpus(args, cfg)
    result = train(corpus, cfg, args.out_dir, log_every=100)
    report = evaluate(result.model, corpus.val, "cam_pseudo", cfg.train.beta)
    report.save(args.out_dir / "eval.json")
    print(json.dumps({"checkpoint": str(result.checkpoint), "seconds": round(result.seconds, 1),
                      **report.to_json()}, indent=2))


def cmd_eval(args, cfg):
    model, ckpt_cfg, _ = load_checkpoint(args.checkpoint)
    corpus = get_corpus(args, ckpt_cfg)
    report = evaluate(model, corpus.val, args.source, ckpt_cfg.train.beta)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    report.save(args.out_dir / "eval.json")
    print(json.dumps(report.to_json(), indent=2))


def cmd_ablate(args, cfg):
    corpus = get_corpus(args, cfg)
    cells = ablate(corpus, cfg, seeds=tuple(args.seeds))
    args.out_dir.mkdir(parents=True, exist_ok=True)
    path = write_table(cells, args.out_dir / "ablation.csv")
    print(path.read_text())


@torch.no_grad()
def export_cams(model, samples, out_dir: Path, beta: float):
    cam_dir, lab_dir = out_dir / "cams", out_dir / "labels"
    cam_dir.mkdir(parents=True, exist_ok=True)
    lab_dir.mkdir(parents=True, exist_ok=True)
    from PIL import Image

    for s in samples:
        image = torch.from_numpy(s.image)[None]
        labels = torch.from_numpy(s.labels)[None]
        cams = upsample_cams(model.final_cams(model.encoder(image)), s.image.shape[:2])[0].clamp(0, 1)
        for name, cam in zip(model.class_names, cams.numpy()):
            Image.fromarray(np.round(255 * cam).astype(np.uint8)).save(cam_dir / f"{s.id}_{name}.png")
        save_label_png(predict(model, image, labels, "cam_pseudo", beta)[0].numpy(), lab_dir / f"{s.id}_pseudo.png")
        save_label_png(predict(model, image, labels, "segmentation", beta)[0].numpy(), lab_dir / f"{s.id}_pred.png")


def cmd_export_cams(args, cfg):
    model, ckpt_cfg, _ = load_checkpoint(args.checkpoint)
    corpus = get_corpus(args, ckpt_cfg)
    samples = getattr(corpus, args.split)[:args.limit]
    export_cams(model, samples, args.out_dir, ckpt_cfg.train.beta)
    print(f"exported {len(samples)} samples to {args.out_dir}")


def cmd_plot(args, cfg):
    args.out_dir.mkdir(parents=True, exist_ok=True)
    if args.kind == "losses":
        metrics = args.metrics or (args.checkpoint.parent / "metrics.csv" if args.checkpoint else None)
        if metrics is None:
            raise SystemExit("--kind losses needs --metrics or --checkpoint")
        print(plot_losses(metrics, args.out_dir / "losses.png"))
        return
    if args.checkpoint is None:
        raise SystemExit("--kind similarity needs --checkpoint")
    model, ckpt_cfg, _ = load_checkpoint(args.checkpoint)
    corpus = get_corpus(args, ckpt_cfg)
    s = corpus.val[args.index]
    print(plot_similarity(model, s.image, args.out_dir / f"similarity_{s.id}.png", s.id))


COMMANDS = {
    "make-data": cmd_make_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "export-cams": cmd_export_cams,
    "plot": cmd_plot,
}


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    args, extra = build_parser().parse_known_args(argv)
    cfg = resolve_config(args, extra)
    COMMANDS[args.command](args, cfg)


if __name__ == "__main__":
    sys.exit(main())
