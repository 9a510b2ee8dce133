"""``apl-seg`` entry point: train, eval, infer, synthesize, compare.

Exit codes: 0 success, 2 configuration error, 3 training aborted.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .data import (
    IMAGE_SUFFIXES, ConfigError, SplitConfig, SyntheticConfig, generate_synthetic, load_dataset, make_split,
    read_image, save_dataset,
)
from .evaluation import evaluate, format_table, reports_to_json
from .pace import PaceGenerator, load_pace
from .predictor import images_to_tensor, load_predictor, to_uint8
from .trainer import (
    TrainConfig, TrainingAborted, desk_config, mode_from_pace, run_ablation, select_device, train,
)

log = logging.getLogger("apl_seg")

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 2, 3
TEST_SEED_OFFSET = 1000


# -- argument groups ----------------------------------------------------------

def _add_data_args(p, split=True):
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", type=Path, help="dataset root with images/ and masks/")
    src.add_argument("--synthetic", action="store_true", help="use generated shapes instead")
    p.add_argument("--num-images", type=int, default=500, help="synthetic training set size")
    p.add_argument("--noise", type=float, default=None, help="synthetic noise level")
    p.add_argument("--data-seed", type=int, default=0, help="synthetic generator seed")
    p.add_argument("--image-size", type=int, default=None)
    if split:
        n = p.add_mutually_exclusive_group()
        n.add_argument("--labeled", type=int, help="number of labeled images")
        n.add_argument("--labeled-ratio", type=float, help="fraction of labeled images")
        p.add_argument("--val-data", type=Path, help="annotated evaluation set (real data)")


def _add_train_args(p):
    p.add_argument("--config", type=Path, help="JSON file with TrainConfig fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--iters", type=int, help="total iterations")
    p.add_argument("--warmup", type=int, help="warmup iterations")
    p.add_argument("--beta", type=float)
    p.add_argument("--eta", type=float)
    p.add_argument("--lr", type=float, help="base predictor learning rate")
    p.add_argument("--deterministic", action="store_true", help="single thread, deterministic kernels")


def _add_out_args(p, required=True):
    p.add_argument("--out", type=Path, required=required, help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite an existing output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="apl-seg", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a predictor")
    _add_data_args(p)
    _add_train_args(p)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--pace", help="apl | spl:<kind> | pixelgan | none")
    g.add_argument("--mode", help="trainer mode, e.g. full, only_labeled, no_vstar")
    _add_out_args(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", type=Path, required=True)
    _add_data_args(p, split=False)
    p.add_argument("--format", choices=("table", "json"), default="table")
    p.add_argument("--output", type=Path, help="also write the report here")

    p = sub.add_parser("infer", help="write saliency maps for a folder of images")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--images", type=Path, required=True)
    p.add_argument("--dump-weights", action="store_true", help="also write reliability maps")
    _add_out_args(p)

    p = sub.add_parser("synthesize", help="write a synthetic dataset to disk")
    p.add_argument("--num-images", type=int, default=500)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--noise", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    _add_out_args(p)

    p = sub.add_parser("compare", help="train several modes on one split and tabulate")
    _add_data_args(p)
    _add_train_args(p)
    p.add_argument("--modes", required=True, help="comma-separated modes, e.g. full,no_pace_loss,only_labeled")
    p.add_argument("--format", choices=("table", "json"), default="table")
    _add_out_args(p, required=False)
    return ap


# -- helpers ------------------------------------------------------------------

def _prepare_out(path: Path, force: bool) -> Path:
    occupied = any(path.iterdir()) if path.is_dir() else path.exists()
    if occupied:
        if not force:
            raise ConfigError(f"{path} exists; pass --force to overwrite")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()
    path.mkdir(parents=True, exist_ok=True)
    return path


def _synthetic_cfg(args, size, num_images, seed) -> SyntheticConfig:
    kw = {} if args.noise is None else {"noise_level": args.noise}
    return SyntheticConfig(image_size=size, num_images=num_images, seed=seed, **kw)


def _train_config(args) -> TrainConfig:
    base = desk_config() if args.synthetic else TrainConfig()
    d = asdict(base)
    if args.config is not None:
        if not args.config.is_file():
            raise ConfigError(f"config file not found: {args.config}")
        try:
            loaded = json.loads(args.config.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{args.config}: {e}") from e
        unknown = set(loaded) - {f.name for f in fields(TrainConfig)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d.update(loaded)
    flags = {"seed": args.seed, "total_iterations": args.iters, "warmup_iterations": args.warmup,
             "beta": args.beta, "eta": args.eta, "lr_predictor": args.lr, "image_size": args.image_size}
    d.update({k: v for k, v in flags.items() if v is not None})
    if args.iters is not None and args.warmup is None and d["warmup_iterations"] >= d["total_iterations"]:
        d["warmup_iterations"] = d["total_iterations"] // 4
    if args.deterministic:
        d["deterministic"] = True
    mode = getattr(args, "mode", None)
    pace = getattr(args, "pace", None)
    if pace is not None:
        d["mode"] = mode_from_pace(pace)
    elif mode is not None:
        d["mode"] = mode
    return TrainConfig(**d)


def _split_cfg(args, seed) -> SplitConfig:
    if args.labeled is not None:
        return SplitConfig(labeled_count=args.labeled, seed=seed)
    if args.labeled_ratio is not None:
        return SplitConfig(labeled_ratio=args.labeled_ratio, seed=seed)
    return SplitConfig(labeled_count=50 if args.synthetic else 1000, seed=seed)


def _training_data(args, cfg: TrainConfig):
    """(labeled, unlabeled, test) for the train/compare commands."""
    split = _split_cfg(args, cfg.seed)
    if args.synthetic:
        samples = generate_synthetic(_synthetic_cfg(args, cfg.image_size, args.num_images, args.data_seed))
        test = generate_synthetic(_synthetic_cfg(args, cfg.image_size, 200, args.data_seed + TEST_SEED_OFFSET))
        labeled, unlabeled = make_split(samples, split)
        return labeled, unlabeled, test
    if not args.data.is_dir():
        raise ConfigError(f"data root not found: {args.data}")
    samples = load_dataset(args.data, size=cfg.image_size)
    annotated = [s for s in samples if s.mask is not None]
    if not annotated:
        raise ConfigError(f"no annotated images under {args.data}")
    labeled, unlabeled = make_split(annotated, split)
    unlabeled += [s for s in samples if s.mask is None]
    test = []
    if args.val_data is not None:
        test = [s for s in load_dataset(args.val_data, size=cfg.image_size) if s.mask is not None]
    return labeled, unlabeled, test


def _eval_data(args, size):
    if args.synthetic:
        return generate_synthetic(_synthetic_cfg(args, size, args.num_images, args.data_seed))
    if not args.data.is_dir():
        raise ConfigError(f"data root not found: {args.data}")
    samples = [s for s in load_dataset(args.data, size=size) if s.mask is not None]
    if not samples:
        raise ConfigError(f"no annotated images under {args.data}")
    return samples


def _manifest(out: Path, cfg: TrainConfig, extra: dict) -> dict:
    blob = json.dumps(asdict(cfg), sort_keys=True).encode()
    m = {"config": asdict(cfg), "config_sha256": hashlib.sha256(blob).hexdigest(), "seed": cfg.seed,
         "out": str(out), "mode": cfg.mode, **extra}
    (out / "manifest.json").write_text(json.dumps(m, indent=2, sort_keys=True))
    (out / "config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True))
    return m


def _data_desc(args, n_lab, n_unl):
    d = {"n_labeled": n_lab, "n_unlabeled": n_unl}
    if args.synthetic:
        d["synthetic"] = {"num_images": args.num_images, "data_seed": args.data_seed, "noise": args.noise}
    else:
        d["data"] = str(args.data)
    return d


def _load_ckpt(path: Path):
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    return torch.load(path, map_location="cpu", weights_only=False)


# -- commands -------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _train_config(args)
    labeled, unlabeled, test = _training_data(args, cfg)
    out = _prepare_out(args.out, args.force)
    _manifest(out, cfg, _data_desc(args, len(labeled), len(unlabeled)))
    _, result = train(cfg, labeled, unlabeled, val=test or None, run_dir=out)
    if result.report is not None:
        print(format_table({cfg.mode: result.report}, title=str(out)))
    print(f"checkpoint: {result.checkpoints[-1]}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = _load_ckpt(args.ckpt)
    model = load_predictor(args.ckpt).to(select_device())
    samples = _eval_data(args, model.cfg.image_size)
    report = evaluate(model, samples)
    report.checkpoint = str(args.ckpt)
    report.dataset = "synthetic" if args.synthetic else str(args.data)
    name = ckpt.get("train_config", {}).get("mode", "model")
    text = reports_to_json({name: report}) if args.format == "json" else format_table({name: report})
    print(text)
    if args.output is not None:
        args.output.parent.mkdir(parents=True, exist_ok=True)
        args.output.write_text(text + "\n")
    return EXIT_OK


def cmd_infer(args) -> int:
    ckpt = _load_ckpt(args.ckpt)
    if not args.images.is_dir():
        raise ConfigError(f"image directory not found: {args.images}")
    pace = None
    if args.dump_weights:
        if "pace" not in ckpt:
            raise ConfigError("--dump-weights needs a checkpoint with a pace-generator")
        pace = load_pace(ckpt)
        if not isinstance(pace, PaceGenerator):
            raise ConfigError("--dump-weights needs a pace-generator checkpoint (not pixel_gan)")
    device = select_device()
    model = load_predictor(args.ckpt).to(device).eval()
    if pace is not None:
        pace = pace.to(device).eval()
    paths = sorted(p for p in args.images.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    out = _prepare_out(args.out, args.force)
    written = 0
    for path in paths:
        try:
            image = read_image(path, model.cfg.image_size)
        except OSError as e:
            log.warning("skipping %s: %s", path.name, e)
            continue
        with torch.no_grad():
            sal = model(images_to_tensor([image], device))
            Image.fromarray(to_uint8(sal[0].cpu().numpy())).save(out / f"{path.stem}.png")
            if pace is not None:
                w = pace.weigh(sal)[0].cpu().numpy()
                Image.fromarray(to_uint8(w)).save(out / f"{path.stem}_weight.png")
        written += 1
    print(f"wrote {written} of {len(paths)} maps to {out}")
    if written == 0:
        raise ConfigError(f"no readable images in {args.images}")
    return EXIT_OK


def cmd_synthesize(args) -> int:
    cfg = _synthetic_cfg(args, args.image_size, args.num_images, args.seed)
    samples = generate_synthetic(cfg)
    out = _prepare_out(args.out, args.force)
    save_dataset(samples, out)
    (out / "synthetic.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True))
    print(f"wrote {len(samples)} samples to {out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    if not modes:
        raise ConfigError("--modes is empty")
    cfg = _train_config(args)
    for m in modes:
        replace(cfg, mode=m).validate()
    labeled, unlabeled, test = _training_data(args, cfg)
    if not test:
        raise ConfigError("compare needs an evaluation set (--synthetic or --val-data)")
    out = _prepare_out(args.out, args.force) if args.out is not None else None
    if out is not None:
        _manifest(out, cfg, {"modes": modes, **_data_desc(args, len(labeled), len(unlabeled))})
    reports = {}
    for m in modes:
        run_dir = out / m.replace(":", "_") if out is not None else None
        reports[m] = run_ablation(m, cfg, labeled, unlabeled, test, run_dir=run_dir)
    text = reports_to_json(reports) if args.format == "json" else format_table(
        reports, title=f"{len(labeled)} labeled / {len(unlabeled)} unlabeled, seed {cfg.seed}")
    print(text)
    if out is not None:
        (out / ("compare.json" if args.format == "json" else "compare.txt")).write_text(text + "\n")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "infer": cmd_infer, "synthesize": cmd_synthesize,
            "compare": cmd_compare}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as e:
        print(f"aborted: {e}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
