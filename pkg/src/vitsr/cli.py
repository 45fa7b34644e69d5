"""Batch command line: ``vitsr <subcommand> ...``.

Subcommands: make-synthetic, pretrain, finetune, infer, eval, gradcheck.

Training options come from three layers: built-in defaults, an optional
``--config`` file of ``key = value`` lines, and command-line flags (the
flag wins). The resolved configuration is written to the run directory as
``config.txt`` before training starts; passing it back via ``--config``
reproduces the run.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
failure (non-finite loss, failed gradient check).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import imageops
from .errors import ConfigError, DataError, NumericalError, VitSRError
from .model import ModelConfig, ViTSR, load_external_encoder
from .training import (TrainConfig, load_model_checkpoint, run_stage, save_model_checkpoint,
                       transfer_stage1_to_stage2)

log = logging.getLogger("vitsr")

TILE_OVERLAP = 32


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# key = value configuration

def _model_keys():
    return [f for f in dataclasses.fields(ModelConfig) if f.name != "residual_mode"]


def _train_keys():
    return [f for f in dataclasses.fields(TrainConfig) if f.name not in ("stage", "seed")]


def _parse_bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _field_type(field):
    t = str(field.type)
    if "tuple" in t:
        return lambda s: tuple(int(c) for c in str(s).replace(",", " ").split())
    if "bool" in t:
        return _parse_bool
    if "float" in t:
        return float
    if "int" in t:
        return int
    return str


RUN_KEYS = {f.name: _field_type(f) for f in _model_keys() + _train_keys()}
RUN_KEYS.update(seed=int, scale=int, dataset=str)


def read_config_file(path):
    values = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in RUN_KEYS:
            raise ConfigError(f"{path}:{n}: unknown key {key!r}")
        values[key] = value
    return values


def _coerce(key, value):
    if value is None or value == "None":
        return None
    try:
        return RUN_KEYS[key](value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc


def resolve_config(args, stage):
    """Merge defaults, config file and flags into (ModelConfig, TrainConfig, dataset, scale)."""
    raw = read_config_file(args.config) if args.config else {}
    for key in RUN_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            raw[key] = flag
    values = {k: _coerce(k, v) for k, v in raw.items()}
    residual = "off" if stage == D.COLORIZATION else "on"
    model_cfg = ModelConfig(**{f.name: values[f.name] for f in _model_keys()
                               if values.get(f.name) is not None}, residual_mode=residual)
    train_cfg = TrainConfig(stage=stage, seed=values.get("seed") or 0,
                            **{f.name: values[f.name] for f in _train_keys()
                               if values.get(f.name) is not None})
    dataset = values.get("dataset")
    if not dataset:
        raise ConfigError("no dataset given (--dataset or 'dataset = ...' in --config)")
    scale = values.get("scale") or 4
    return model_cfg, train_cfg, dataset, scale


def format_config(model_cfg, train_cfg, dataset, scale):
    lines = [f"dataset = {dataset}", f"scale = {scale}", f"seed = {train_cfg.seed}"]
    for f in _model_keys():
        value = getattr(model_cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    for f in _train_keys():
        lines.append(f"{f.name} = {getattr(train_cfg, f.name)}")
    return "\n".join(lines) + "\n"


# commands

def cmd_make_synthetic(args):
    val_count = args.val_count if args.val_count is not None else max(1, args.count // 4)
    train, val = D.make_synthetic_dataset(args.out, args.count, val_count, args.size, args.seed)
    log.info("wrote %d train and %d val images to %s", len(train), len(val), args.out)
    return 0


def _train(args, stage):
    model_cfg, train_cfg, dataset, scale = resolve_config(args, stage)
    run_dir = Path(args.run_dir or f"runs/{stage}")
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(format_config(model_cfg, train_cfg, dataset, scale),
                                        encoding="utf-8")
    model = ViTSR(model_cfg, seed=train_cfg.seed)
    if getattr(args, "init_encoder", None):
        load_external_encoder(model, args.init_encoder)
    if stage == D.SUPER_RESOLUTION:
        if args.init_from:
            transfer_stage1_to_stage2(args.init_from, model)  # logs the copy count
        else:
            log.info("random initialization (ablation mode)")
    specs = [D.DatasetSpec(dataset, split, model_cfg.image_size, scale, train_cfg.seed)
             for split in ("train", "val")]
    result = run_stage(model, specs[0], specs[1], train_cfg, run_dir=run_dir)
    log.info("best epoch %d, val PSNR %.3f dB; outputs in %s",
             result.best_epoch, result.best_psnr, run_dir)
    return 0


def cmd_pretrain(args):
    return _train(args, D.COLORIZATION)


def cmd_finetune(args):
    return _train(args, D.SUPER_RESOLUTION)


def _load_sr_model(path):
    model, meta = load_model_checkpoint(path)
    if meta.get("stage") != D.SUPER_RESOLUTION:
        raise ConfigError(f"{path} is a {meta.get('stage')!r} checkpoint; "
                          f"a {D.SUPER_RESOLUTION!r} checkpoint is required")
    return model


def _tile_starts(length, tile, overlap):
    if length <= tile:
        return [0]
    starts = list(range(0, length - tile + 1, tile - overlap))
    if starts[-1] != length - tile:
        starts.append(length - tile)
    return starts


def tiled_predict(model, img, overlap=TILE_OVERLAP, batch_size=4):
    """Run the model over an (H, W, 3) image in overlapping tiles, averaging overlaps.

    Tiles are model-sized; the overlap is capped at half a tile so small
    models still advance.
    """
    s = model.cfg.image_size
    overlap = min(overlap, s // 2)
    h, w = img.shape[:2]
    padded = np.pad(img, ((0, max(0, s - h)), (0, max(0, s - w)), (0, 0)), mode="edge")
    ph, pw = padded.shape[:2]
    acc = np.zeros((ph, pw, 3))
    count = np.zeros((ph, pw, 1))
    boxes = [(t, l) for t in _tile_starts(ph, s, overlap) for l in _tile_starts(pw, s, overlap)]
    for i in range(0, len(boxes), batch_size):
        chunk = boxes[i:i + batch_size]
        batch = np.stack([padded[t:t + s, l:l + s].transpose(2, 0, 1) for t, l in chunk])
        for (t, l), out in zip(chunk, model.predict(batch)):
            acc[t:t + s, l:l + s] += out.transpose(1, 2, 0)
            count[t:t + s, l:l + s] += 1
    return (acc / count)[:h, :w]


def _input_images(path):
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in D.IMAGE_SUFFIXES)
    elif path.is_file():
        files = [path]
    else:
        raise DataError(f"input not found: {path}")
    if not files:
        raise DataError(f"no PNG images in {path}")
    return files


def cmd_infer(args):
    model = _load_sr_model(args.ckpt)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for f in _input_images(args.input):
        try:
            lr = imageops.read_png(f)
        except OSError as exc:
            raise DataError(f"cannot read {f}: {exc}") from exc
        h, w = lr.shape[:2]
        upsampled = imageops.bicubic_resize(lr, h * args.scale, w * args.scale)
        sr = tiled_predict(model, upsampled)
        imageops.write_png(out_dir / f"{f.stem}.png", sr)
        imageops.write_png(out_dir / f"{f.stem}_bicubic.png", upsampled)
        log.info("%s: %dx%d -> %dx%d", f.name, w, h, sr.shape[1], sr.shape[0])
    return 0


def evaluate_checkpoint(model, dataset, split="val", scale=4, luma=False):
    spec = D.DatasetSpec(dataset, split, model.cfg.image_size, scale)
    pairs = D.validation_pairs(D.scan_dataset(spec), spec, D.SUPER_RESOLUTION)
    psnr = imageops.luma_psnr if luma else imageops.psnr
    ssim = imageops.luma_ssim if luma else imageops.ssim
    rows = []
    for start in range(0, len(pairs), 8):
        chunk = pairs[start:start + 8]
        outs = model.predict(np.stack([p.input for p in chunk]))
        for out, p in zip(outs, chunk):
            o, x, y = (a.transpose(1, 2, 0) for a in (out, p.input, p.target))
            rows.append((psnr(o, y), ssim(o, y), psnr(x, y), ssim(x, y)))
    rows = np.array(rows)
    keys = ("psnr_model", "ssim_model", "psnr_bicubic", "ssim_bicubic")
    report = {k: float(v) for k, v in zip(keys, rows.mean(axis=0))}
    report["n_images"] = len(pairs)
    return report


def cmd_eval(args):
    model = _load_sr_model(args.ckpt)
    report = evaluate_checkpoint(model, args.dataset, args.split, args.scale, args.luma)
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    Path(args.out).write_text(text + "\n", encoding="utf-8")
    return 0


def cmd_gradcheck(args):
    from . import gradcheck

    results = gradcheck.run_suite(instances=args.instances, n_params=args.params, seed=args.seed)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name:<24} max rel err {r.max_rel_error:.2e} "
              f"(tol {r.tolerance:.0e}, {r.checked} elements)")
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise NumericalError(f"gradient check failed for: {', '.join(failed)}")
    print(f"all {len(results)} gradient checks passed")
    return 0


# parser

def _add_training_flags(p):
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--dataset", help="root holding train/ and val/ PNG folders")
    p.add_argument("--run-dir", help="output directory (default runs/<stage>)")
    p.add_argument("--seed", type=int)
    p.add_argument("--scale", type=int, help="super-resolution factor (default 4)")
    p.add_argument("--init-encoder", help="checkpoint with encoder.* tensors to load")
    group = p.add_argument_group("model and optimization keys (also valid in --config)")
    for f in _model_keys() + _train_keys():
        flag = "--" + f.name.replace("_", "-")
        default = f.default
        if isinstance(default, tuple):
            default = ",".join(map(str, default))
        group.add_argument(flag, dest=f.name, type=str, metavar="V",
                           help=f"default: {default if default is not None else 'per stage'}")


def build_parser():
    parser = _Parser(prog="vitsr", description="ViT super-resolution with colorization "
                     "pretraining.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("make-synthetic", help="write a synthetic train/val dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=32)
    p.add_argument("--val-count", type=int)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("pretrain", help="stage 1: colorization pretraining")
    _add_training_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="stage 2: residual super-resolution")
    _add_training_flags(p)
    p.add_argument("--init-from", help="stage-1 checkpoint to start from")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("infer", help="super-resolve images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True, help="PNG file or directory")
    p.add_argument("--out", required=True)
    p.add_argument("--scale", type=int, default=4)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="PSNR/SSIM of model vs bicubic on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--luma", action="store_true", help="score the Rec.601 luma channel only")
    p.add_argument("--out", default="metrics.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every autodiff op")
    p.add_argument("--instances", type=int, default=5)
    p.add_argument("--params", type=int, default=120)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    if not log.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(message)s"))
        log.addHandler(handler)
        log.setLevel(logging.INFO)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except VitSRError as exc:
        log.error("error: %s", exc)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
