"""``hinet`` command-line interface.

Machine-readable results go to stdout as JSON; progress logs go to stderr.
Exit status is 0 on success, 2 on usage errors (bad flags, unreadable inputs)
and 1 on runtime failures.
"""

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("hinet")

IMAGE_SUFFIXES = (".png",)


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def _emit(obj):
    json.dump(obj, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")
    sys.stdout.flush()


def _readable(path, what):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def _directory(path, what):
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"{what} is not a directory: {path}")
    return p


def _writable_parent(path):
    parent = Path(path).resolve().parent
    if not parent.is_dir():
        raise UsageError(f"output directory does not exist: {parent}")
    return Path(path)


def _parse_size(text):
    try:
        w, h = text.lower().split("x")
        w, h = int(w), int(h)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from None
    if w < 1 or h < 1:
        raise argparse.ArgumentTypeError("target dimensions must be positive")
    return w, h


def _parse_counts(text):
    try:
        counts = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if any(c < 1 for c in counts):
        raise argparse.ArgumentTypeError("tile counts must be >= 1")
    return counts


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _image_files(directory):
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _load_pair(image_path, mask_path):
    from .imaging import load_mask, load_png

    img, alpha = load_png(image_path)
    if mask_path is not None:
        mask = load_mask(mask_path)
    elif alpha is not None:
        mask = alpha
    else:
        raise UsageError(f"{image_path}: no --mask given and the image has no alpha channel")
    if mask.shape != img.shape[:2]:
        raise UsageError(f"mask {mask.shape} does not match image {img.shape[:2]}")
    return img, mask


def _load_model(path):
    from .model import load_weights

    return load_weights(_readable(path, "weights"))


# ------------------------------------------------------------ subcommands

def cmd_harmonize(args):
    from .imaging import save_png
    from .pipeline import HarmonizeOptions, harmonize

    _readable(args.image, "image")
    if args.mask:
        _readable(args.mask, "mask")
    _writable_parent(args.out)
    if args.max_batch is not None and args.mode != "tiled":
        raise UsageError("--max-batch only applies to --mode tiled")
    if args.target is not None and args.mode in ("region", "lut-only"):
        raise UsageError(f"--target is not supported with --mode {args.mode}")
    img, mask = _load_pair(args.image, args.mask)
    model = _load_model(args.weights)
    opts = HarmonizeOptions(mode=args.mode, max_batch=args.max_batch,
                            target_w=args.target[0] if args.target else None,
                            target_h=args.target[1] if args.target else None,
                            blend_with_mask=not args.no_blend)
    out = harmonize(img, mask, model, opts)
    save_png(out, args.out)
    log.info("wrote %s", args.out)
    _emit({"out": str(args.out), "mode": args.mode, "height": out.shape[0], "width": out.shape[1]})


def cmd_video(args):
    from .imaging import load_mask, load_png, metric_report, save_png
    from .pipeline import harmonize_video_lut

    frames_dir = _directory(args.frames, "--frames")
    masks_dir = _directory(args.masks, "--masks")
    frame_files = _image_files(frames_dir)
    mask_files = _image_files(masks_dir)
    if not frame_files:
        raise UsageError(f"no PNG frames in {frames_dir}")
    if len(frame_files) != len(mask_files):
        raise UsageError(f"{len(frame_files)} frames but {len(mask_files)} masks")
    target_files = None
    if args.targets:
        target_files = _image_files(_directory(args.targets, "--targets"))
        if len(target_files) != len(frame_files):
            raise UsageError(f"{len(frame_files)} frames but {len(target_files)} targets")
    out_dir = Path(args.out)
    model = _load_model(args.weights)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames = [load_png(p)[0] for p in frame_files]
    masks = [load_mask(p) for p in mask_files]
    report = []
    outputs = harmonize_video_lut(frames, masks, model, args.keyframe_interval, report)
    for f, (src, out) in enumerate(zip(frame_files, outputs)):
        save_png(out, out_dir / src.name)
        if target_files is not None:
            report[f].update(metric_report(out, load_png(target_files[f])[0], masks[f]))
    log.info("wrote %d frames to %s", len(outputs), out_dir)
    _emit({"out": str(out_dir), "keyframe_interval": args.keyframe_interval, "frames": report})


TRAIN_DEFAULTS = {
    "model": "toy",
    "seed": 0,
    "mode": "overfit",
    "steps": 1000,
    "lr": 3e-3,
    "lr_min": 1e-4,
    "optimizer": "adamw",
    "weight_decay": 0.0,
    "phase1_epochs": 0,
    "phase2_epochs": 1,
    "lr_size": 256,
    "batch_size": 1,
    "crop_size": 256,
    "stride_multiple": 4,
    "lambda_lut": 0.01,
    "lut_l2_weight": 1.0,
    "eval_every": 250,
}


def _train_config(path):
    with open(_readable(path, "config")) as fh:
        try:
            user = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from None
    unknown = sorted(set(user) - set(TRAIN_DEFAULTS))
    if unknown:
        raise UsageError(f"{path}: unknown training keys {unknown}")
    cfg = dict(TRAIN_DEFAULTS, **user)
    if cfg["mode"] not in ("overfit", "progressive"):
        raise UsageError(f"{path}: mode must be 'overfit' or 'progressive'")
    return cfg


def _load_training_data(data_dir):
    from .imaging import load_mask, load_png
    from .training import TrainSample

    subdirs = {name: _directory(data_dir / name, f"{data_dir}/{name}") for name in ("composites", "masks", "targets")}
    names = [p.name for p in _image_files(subdirs["composites"])]
    if not names:
        raise UsageError(f"no PNG composites in {subdirs['composites']}")
    samples = []
    for name in names:
        for sub in ("masks", "targets"):
            _readable(subdirs[sub] / name, f"{sub[:-1]} for {name}")
        samples.append(TrainSample(load_png(subdirs["composites"] / name)[0],
                                   load_mask(subdirs["masks"] / name),
                                   load_png(subdirs["targets"] / name)[0]))
    return samples


def cmd_train(args):
    from .encoder import ModelConfig
    from .model import Model, save_weights
    from .training import LossConfig, RscConfig, TrainSchedule, fit, fit_overfit

    cfg = _train_config(args.config)
    samples = _load_training_data(_directory(args.data, "--data"))
    _writable_parent(args.out)
    if args.trace:
        _writable_parent(args.trace)
    if cfg["model"] == "toy":
        mcfg = ModelConfig.toy()
    elif cfg["model"] == "default":
        mcfg = ModelConfig()
    elif isinstance(cfg["model"], dict):
        mcfg = ModelConfig.from_dict(cfg["model"])
    else:
        raise UsageError("model must be 'toy', 'default' or a config object")
    model = Model.create(mcfg, cfg["seed"])
    loss_cfg = LossConfig(lambda_lut=cfg["lambda_lut"], lut_head_enabled=mcfg.encoder.lut_head,
                          lut_l2_weight=cfg["lut_l2_weight"])
    rows = []
    summary = {"mode": cfg["mode"], "samples": len(samples)}
    if cfg["mode"] == "overfit":
        if len(samples) != 1:
            raise UsageError(f"overfit mode needs exactly one training pair, found {len(samples)}")
        res = fit_overfit(samples[0], cfg["steps"], model=model, lr=cfg["lr"], lr_min=cfg["lr_min"],
                          eval_every=cfg["eval_every"], loss_cfg=loss_cfg, optimizer=cfg["optimizer"],
                          log=log.info)
        psnrs = {s: (p, q) for s, p, q in res.psnr_trace}
        for step, value in enumerate(res.trace):
            p, q = psnrs.get(step + 1, (None, None))
            rows.append({"step": step, "phase": 1, "loss": value, "lr": "", "psnr": p if p is not None else "",
                         "lut_psnr": q if q is not None else ""})
        summary.update(final_psnr=res.psnr_trace[-1][1], final_lut_psnr=res.psnr_trace[-1][2],
                       steps=len(res.trace), seconds=res.seconds)
    else:
        schedule = TrainSchedule(phase1_epochs=cfg["phase1_epochs"], phase2_epochs=cfg["phase2_epochs"],
                                 lr_size=cfg["lr_size"], lr=cfg["lr"], lr_min=cfg["lr_min"],
                                 batch_size=cfg["batch_size"], optimizer=cfg["optimizer"],
                                 weight_decay=cfg["weight_decay"])
        rsc = RscConfig(crop_size=cfg["crop_size"], stride_multiple=cfg["stride_multiple"], rng_seed=cfg["seed"])
        trace = fit(model, samples, schedule, rsc, loss_cfg,
                    log=lambda s, ph, v, lr: log.info("step %d phase %d loss %.6g lr %.3g", s, ph, v, lr))
        rows = [{"step": s, "phase": ph, "loss": v, "lr": lr, "psnr": "", "lut_psnr": ""} for s, ph, v, lr in trace]
        summary.update(steps=len(trace), final_loss=trace[-1][2] if trace else None)
    model.meta.update(seed=cfg["seed"], training=cfg)
    save_weights(model, args.out)
    if args.trace:
        with open(args.trace, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["step", "phase", "loss", "lr", "psnr", "lut_psnr"],
                                    lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
    summary["out"] = str(args.out)
    _emit(summary)


def cmd_gradcheck(args):
    from .training import gradcheck

    report = gradcheck(seed=args.seed, eps=args.eps)
    ok = report.passed(args.tol)
    log.info("max relative error %.3e over %d probes", report.max_rel_error, report.checks)
    _emit({"max_rel_error": report.max_rel_error, "passed": ok, "tolerance": args.tol,
           "checks": report.checks, "skipped_kinks": report.skipped_kinks, "eps": report.eps,
           "per_tensor": report.per_tensor})
    return 0 if ok else 1


def cmd_bench(args):
    from .bench import CSV_FIELDS, measure_tiled

    _readable(args.image, "image")
    if args.mask:
        _readable(args.mask, "mask")
    if args.csv:
        _writable_parent(args.csv)
    img, mask = _load_pair(args.image, args.mask) if args.mask else _bench_pair(args.image)
    model = _load_model(args.weights)
    params = model.decoder_params(img, mask)
    rows = []
    for t in sorted(args.tiles):
        m = measure_tiled(img, mask, model, t, params)
        rows.append({"height": img.shape[0], "width": img.shape[1], "tiles": t,
                     "peak_transient_floats": m.peak_transient_floats,
                     "peak_live_floats": m.probe.peak_live_floats, "seconds": m.seconds})
        log.info("tiles %d: peak %d floats, %.3fs", t, m.peak_transient_floats, m.seconds)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
    _emit({"rows": rows})


def _bench_pair(image_path):
    from .imaging import load_png

    img, alpha = load_png(image_path)
    return img, (alpha if alpha is not None else np.ones(img.shape[:2]))


def cmd_lut_export(args):
    from .lut import export_cube
    from .pipeline import predict_lut

    _readable(args.image, "image")
    if args.mask:
        _readable(args.mask, "mask")
    _writable_parent(args.cube)
    img, mask = _load_pair(args.image, args.mask)
    model = _load_model(args.weights)
    lut = predict_lut(img, mask, model)
    export_cube(lut, args.cube)
    _emit({"cube": str(args.cube), "size": lut.dim})


def cmd_lut_import(args):
    from .lut import identity_lattice, import_cube
    from .model import save_weights

    _readable(args.cube, "cube file")
    _writable_parent(args.out)
    model = _load_model(args.weights)
    if not model.config.encoder.lut_head:
        raise UsageError("the model has no LUT head to replace")
    lut = import_cube(args.cube)
    d = model.config.encoder.lut_dim
    if lut.dim != d:
        raise UsageError(f"cube size {lut.dim} does not match the model's LUT size {d}")
    # a constant LUT: zero the head weights and put the residual in the bias
    model.weights["head.lut.w"][:] = 0.0
    model.weights["head.lut.b"][:] = (lut.lattice - identity_lattice(d)).reshape(1, -1)
    model.meta["lut_source"] = os.path.basename(str(args.cube))
    save_weights(model, args.out)
    _emit({"out": str(args.out), "size": d})


def cmd_metrics(args):
    from .imaging import load_mask, load_png, metric_report

    _readable(args.a, "--a")
    _readable(args.b, "--b")
    a, _ = load_png(args.a)
    b, _ = load_png(args.b)
    if a.shape != b.shape:
        raise UsageError(f"image sizes differ: {a.shape[:2]} vs {b.shape[:2]}")
    mask = None
    if args.mask:
        mask = load_mask(_readable(args.mask, "mask"))
        if mask.shape != a.shape[:2]:
            raise UsageError("mask size does not match the images")
    _emit(metric_report(a, b, mask))


def cmd_init(args):
    from .encoder import ModelConfig
    from .model import Model, save_weights

    _writable_parent(args.out)
    cfg = ModelConfig.toy() if args.preset == "toy" else ModelConfig()
    model = Model.create(cfg, args.seed)
    if args.identity_lut and cfg.encoder.lut_head:
        model.weights["head.lut.w"][:] = 0.0
        model.weights["head.lut.b"][:] = 0.0
    save_weights(model, args.out)
    _emit({"out": str(args.out), "preset": args.preset, "parameters": model.num_parameters()})


def cmd_synth(args):
    from .imaging import save_png
    from .training import make_synthetic_pair

    out = Path(args.out)
    for sub in ("composites", "masks", "targets"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for k in range(args.count):
        s = make_synthetic_pair(args.size, args.seed + k)
        name = f"pair{k:03d}.png"
        save_png(s.composite, out / "composites" / name)
        save_png(s.mask, out / "masks" / name)
        save_png(s.target, out / "targets" / name)
    _emit({"out": str(out), "count": args.count, "size": args.size})


# ------------------------------------------------------------------ parser

def build_parser():
    p = argparse.ArgumentParser(prog="hinet", description="High-resolution image harmonization with implicit decoders.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    h = sub.add_parser("harmonize", help="harmonize one composite image")
    h.add_argument("--image", required=True, help="composite PNG")
    h.add_argument("--mask", help="foreground mask PNG (default: the image's alpha channel)")
    h.add_argument("--weights", required=True, help="weight file")
    h.add_argument("--out", required=True, help="output PNG")
    h.add_argument("--mode", choices=("full", "tiled", "region", "lut-only"), default="full")
    h.add_argument("--max-batch", type=_positive, help="pixels per tile in tiled mode")
    h.add_argument("--target", type=_parse_size, metavar="WxH", help="decode directly at this resolution")
    h.add_argument("--no-blend", action="store_true", help="do not blend the output with the mask")
    h.set_defaults(func=cmd_harmonize)

    v = sub.add_parser("video", help="LUT-based video harmonization with keyframe interpolation")
    v.add_argument("--frames", required=True, help="directory of frame PNGs (sorted by name)")
    v.add_argument("--masks", required=True, help="directory of mask PNGs (same order as frames)")
    v.add_argument("--weights", required=True, help="weight file")
    v.add_argument("--out", required=True, help="output directory")
    v.add_argument("--keyframe-interval", type=_positive, default=1, metavar="K")
    v.add_argument("--targets", help="directory of ground-truth frames; adds per-frame metrics")
    v.set_defaults(func=cmd_video)

    t = sub.add_parser("train", help="desk-scale training (overfit or progressive)")
    t.add_argument("--config", required=True, help="training JSON")
    t.add_argument("--data", required=True, help="directory with composites/, masks/, targets/")
    t.add_argument("--out", required=True, help="output weight file")
    t.add_argument("--trace", help="write the loss/PSNR trace as CSV")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("gradcheck", help="finite-difference check of every trainable tensor")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--eps", type=float, default=1e-4)
    g.add_argument("--tol", type=float, default=1e-4)
    g.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", help="tiled-inference memory and runtime sweep")
    b.add_argument("--image", required=True, help="composite PNG")
    b.add_argument("--mask", help="mask PNG (default: alpha channel, else all foreground)")
    b.add_argument("--weights", required=True, help="weight file")
    b.add_argument("--tiles", type=_parse_counts, default=[1, 4, 16], help="comma-separated tile counts")
    b.add_argument("--csv", help="also write the table as CSV")
    b.set_defaults(func=cmd_bench)

    lut = sub.add_parser("lut", help="export or import 3D LUTs as .cube files")
    lsub = lut.add_subparsers(dest="lut_command", required=True, metavar="ACTION")
    le = lsub.add_parser("export", help="write the LUT predicted for a composite")
    le.add_argument("--weights", required=True)
    le.add_argument("--cube", required=True, help="output .cube file")
    le.add_argument("--image", required=True, help="composite whose LUT is exported")
    le.add_argument("--mask", help="mask PNG (default: alpha channel)")
    le.set_defaults(func=cmd_lut_export)
    li = lsub.add_parser("import", help="replace the LUT head with a constant LUT")
    li.add_argument("--weights", required=True)
    li.add_argument("--cube", required=True, help="input .cube file")
    li.add_argument("--out", required=True, help="output weight file")
    li.set_defaults(func=cmd_lut_import)

    m = sub.add_parser("metrics", help="MSE, PSNR, SSIM and fMSE between two images")
    m.add_argument("--a", required=True)
    m.add_argument("--b", required=True)
    m.add_argument("--mask", help="foreground mask for fMSE")
    m.set_defaults(func=cmd_metrics)

    i = sub.add_parser("init", help="write freshly initialised weights")
    i.add_argument("--out", required=True)
    i.add_argument("--preset", choices=("toy", "default"), default="toy")
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--identity-lut", action="store_true", help="zero the LUT head so it predicts the identity")
    i.set_defaults(func=cmd_init)

    s = sub.add_parser("synth", help="write synthetic composite/mask/target pairs")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=_positive, default=1)
    s.add_argument("--size", type=_positive, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        code = args.func(args)
    except UsageError as exc:
        print(f"hinet: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, FloatingPointError, RuntimeError) as exc:
        print(f"hinet: {exc}", file=sys.stderr)
        return 1
    return 0 if code is None else code


if __name__ == "__main__":
    sys.exit(main())
