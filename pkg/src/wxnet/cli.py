"""Command-line entry point: ``wxnet {synth,analyze,train,eval,gradcheck,predict}``."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import gradcheck
from .backbone import BackboneConfig, BackboneParams
from .cooccurrence import analyze
from .dataio import (
    SYNTH_NAMES, Dataset, config_hash, decode_image, load_checkpoint, load_dataset, load_manifest,
    parse_synth_spec, save_checkpoint, synth_dataset,
)
from .metrics import evaluate
from .model import LabelOrder, ModelConfig, WeatherModel, predict_labels
from .tensor import Tensor
from .train import CsvLog, TrainConfig, center_crop, predict_probs, stage1_predict, train_stage1, train_stage2

log = logging.getLogger("wxnet")

DESK_INPUT = 64
DESK_DECODE = 73      # keeps the full-scale 224/256 crop ratio
FULL_DECODE = 256

# run-config keys beyond the TrainConfig fields, with their defaults
RUN_DEFAULTS = {
    "desk": False,
    "decode_size": None,
    "stage1_epochs": None,
    "stage2_epochs": None,
    "head_mode": "per-step",
    "attention_mode": "channel",
    "kernel_size": 3,
    "attention_reduction": 1,
    "forget_bias": 1.0,
    "add_other": False,
}


class UsageError(Exception):
    pass


# -- run config ------------------------------------------------------------------


def _defaults() -> dict:
    d = TrainConfig().to_dict()
    d.update(RUN_DEFAULTS)
    return d


def _coerce(key: str, text: str, default):
    if isinstance(default, bool):
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"config key {key!r}: expected a boolean, got {text!r}")
    kind = type(default) if default is not None else int
    try:
        return kind(text.strip()) if kind is not str else text.strip()
    except ValueError:
        raise UsageError(f"config key {key!r}: cannot parse {text!r} as {kind.__name__}") from None


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment; unknown keys are rejected."""
    defaults = _defaults()
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {n}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in defaults:
            raise UsageError(f"config line {n}: unknown key {key!r}")
        out[key] = _coerce(key, value, defaults[key])
    return out


def resolve_run_config(args) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cfg = _defaults()
    if args.config:
        cfg.update(read_config_file(args.config))
    flag_map = {
        "seed": args.seed, "lr": args.lr, "max_epochs": args.epochs, "batch_size": args.batch_size,
        "dropout": args.dropout, "l2": args.l2, "lr_patience": args.lr_patience,
        "head_mode": args.head_mode, "attention_mode": args.attention_mode,
    }
    cfg.update({k: v for k, v in flag_map.items() if v is not None})
    for flag in ("desk", "finetune_all", "add_other"):
        if getattr(args, flag):
            cfg[flag] = True
    if args.no_augment:
        cfg["augment"] = False
    if cfg["decode_size"] is None:
        cfg["decode_size"] = DESK_DECODE if cfg["desk"] else FULL_DECODE
    return cfg


def _train_config(cfg: dict, epochs_key: str) -> TrainConfig:
    kw = {f.name: cfg[f.name] for f in fields(TrainConfig)}
    if cfg[epochs_key] is not None:
        kw["max_epochs"] = cfg[epochs_key]
    return TrainConfig(**kw)


def _backbone_config(cfg: dict) -> BackboneConfig:
    return BackboneConfig.desk(DESK_INPUT) if cfg["desk"] else BackboneConfig()


# -- checkpoints -------------------------------------------------------------------


def _as_params(arrays: dict) -> dict[str, Tensor]:
    return {k: Tensor(np.array(v), requires_grad=True) for k, v in arrays.items()}


def load_model(path):
    """Return ``(kind, params, meta)`` where params is a WeatherModel or BackboneParams."""
    arrays, meta = load_checkpoint(path)
    kind = meta.get("kind")
    if kind == "model":
        config = ModelConfig.from_dict(meta["model_config"])
        return kind, WeatherModel.from_tensors(_as_params(arrays), config), meta
    if kind == "backbone":
        config = BackboneConfig.from_dict(meta["backbone_config"])
        return kind, BackboneParams.from_tensors(_as_params(arrays), config), meta
    raise ValueError(f"{path}: unrecognized checkpoint kind {kind!r}")


def _meta(kind: str, cfg: dict, class_names, extra: dict) -> dict:
    meta = {"kind": kind, "class_names": list(class_names), "decode_size": cfg["decode_size"],
            "add_other": cfg["add_other"], "run_config": cfg}
    meta.update(extra)
    meta["config_hash"] = config_hash(meta)
    return meta


# -- subcommands -------------------------------------------------------------------


def cmd_synth(args) -> int:
    names = list(SYNTH_NAMES[:args.classes])
    spec = None
    if args.spec:
        spec = parse_synth_spec(Path(args.spec).read_text(), names)
    _, manifest = synth_dataset(args.classes, args.samples, args.seed, spec, args.out, args.size)
    print(f"wrote {len(manifest)} images and {Path(args.out) / 'manifest.csv'}")
    return 0


def cmd_analyze(args) -> int:
    m = load_manifest(args.manifest)
    strengths, names = m.strengths, list(m.class_names)
    if args.add_other:
        other = (strengths < 0.5).all(axis=1, keepdims=True).astype(float)
        strengths, names = np.hstack([strengths, other]), names + ["other"]
    report = analyze(strengths, names)
    print(report.summary())
    if args.out:
        report.write(args.out)
    return 0


def _choose_order(arg: str, train: Dataset) -> LabelOrder:
    if arg == "auto":
        return LabelOrder(analyze(train.labels.astype(float), train.class_names).order)
    names = [s.strip() for s in arg.split(",") if s.strip()]
    if len(names) != len(train.class_names):
        raise ValueError(f"--order lists {len(names)} classes, the dataset has {len(train.class_names)}")
    return LabelOrder.from_names(names, train.class_names)


def cmd_train(args) -> int:
    cfg = resolve_run_config(args)
    train = load_dataset(args.manifest, cfg["decode_size"], cfg["add_other"])
    val = load_dataset(args.val, cfg["decode_size"], cfg["add_other"]) if args.val else None
    if val is not None and val.class_names != train.class_names:
        raise ValueError("training and validation manifests have different classes")
    bb_cfg = _backbone_config(cfg)
    log_sink = CsvLog(args.log) if args.log else None
    try:
        backbone = None
        if args.stage in ("2",):
            if not args.init:
                raise UsageError("--stage 2 needs --init with a stage-1 checkpoint")
            kind, backbone, meta = load_model(args.init)
            if kind != "backbone":
                raise ValueError(f"{args.init} is not a stage-1 checkpoint")
            if meta["class_names"] != train.class_names:
                raise ValueError("stage-1 checkpoint classes differ from the training manifest")
            bb_cfg = backbone.config
        if args.stage in ("2", "both"):
            order = _choose_order(args.order, train)
            log.info("label order: %s", " -> ".join(order.names(train.class_names)))
        if args.stage in ("1", "both"):
            backbone, _ = train_stage1(train, _train_config(cfg, "stage1_epochs"), bb_cfg, val, on_epoch=log_sink)
            if args.stage == "1":
                meta = _meta("backbone", cfg, train.class_names, {"backbone_config": bb_cfg.to_dict()})
                save_checkpoint({k: v.data for k, v in backbone.tensors().items()}, meta, args.out)
                print(f"saved stage-1 checkpoint to {args.out}")
                return 0
        model_cfg = ModelConfig(backbone=bb_cfg, num_classes=len(train.class_names), kernel_size=cfg["kernel_size"],
                                attention_reduction=cfg["attention_reduction"], head_mode=cfg["head_mode"],
                                attention_mode=cfg["attention_mode"], forget_bias=cfg["forget_bias"])
        model, _ = train_stage2(train, backbone, _train_config(cfg, "stage2_epochs"), model_cfg, order, val,
                                on_epoch=log_sink)
    finally:
        if log_sink is not None:
            log_sink.close()
    meta = _meta("model", cfg, train.class_names, {"model_config": model_cfg.to_dict(), "order": list(order)})
    save_checkpoint({k: v.data for k, v in model.tensors().items()}, meta, args.out)
    print(f"saved model checkpoint to {args.out}")
    return 0


def _probabilities(kind, params, meta, images: np.ndarray) -> np.ndarray:
    if kind == "model":
        return predict_probs(params, images, LabelOrder(meta["order"]))
    return stage1_predict(params, images)


def cmd_eval(args) -> int:
    kind, params, meta = load_model(args.ckpt)
    data = load_dataset(args.manifest, meta["decode_size"], meta["add_other"])
    if data.class_names != meta["class_names"]:
        raise ValueError(f"manifest classes {data.class_names} differ from checkpoint {meta['class_names']}")
    pred = (_probabilities(kind, params, meta, data.images) >= 0.5).astype(np.int64)
    report = evaluate(data.labels, pred, data.class_names, args.or_mode)
    text = report.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_predict(args) -> int:
    kind, params, meta = load_model(args.ckpt)
    names = meta["class_names"]
    image = decode_image(args.image, meta["decode_size"]).astype(np.float32)
    att = None
    if kind == "model":
        crop = params.config.backbone.input_size[0]
        probs, labels, att = predict_labels(Tensor(center_crop(image, crop)), params, LabelOrder(meta["order"]),
                                            return_attention=True)
    else:
        if args.dump_attention:
            raise ValueError("a stage-1 checkpoint has no attention to dump")
        probs = stage1_predict(params, image[None])[0]
        labels = (probs >= 0.5).astype(np.int64)
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["class", "probability", "label"])
    for name, p, lab in zip(names, probs, labels):
        writer.writerow([name, f"{p:.6f}", int(lab)])
    if args.dump_attention:
        order = LabelOrder(meta["order"])
        with open(args.dump_attention, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "class"] + [f"c{i}" for i in range(att.shape[-1])])
            for t, cls in enumerate(order):
                w.writerow([t + 1, names[cls]] + [f"{v:.6f}" for v in att[t]])
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run(args.module or gradcheck.MODULES, seed=args.seed)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print(f"{sum(r.passed for r in results)}/{len(results)} checks passed")
    return 0 if ok else 1


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wxnet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--seed", type=int, default=None if name == "train" else 0,
                       help="random seed (default 0)")
        return p

    p = add("synth", "generate a synthetic labelled image set")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--classes", type=int, default=4, help="number of classes K (default 4)")
    p.add_argument("--samples", type=int, default=200, help="number of images N (default 200)")
    p.add_argument("--spec", help="label-set distribution file (default: independent classes, p=0.4)")
    p.add_argument("--size", type=int, default=96, help="image side in pixels (default 96)")
    p.set_defaults(func=cmd_synth)

    p = add("analyze", "co-occurrence matrix, influence ratios, label order and counts")
    p.add_argument("--manifest", required=True)
    p.add_argument("--add-other", action="store_true", help="append the 'other' class")
    p.add_argument("--out", help="directory for cooccurrence.csv, influence.csv and stats.csv")
    p.set_defaults(func=cmd_analyze)

    p = add("train", "two-stage training")
    p.add_argument("--manifest", required=True, help="training manifest")
    p.add_argument("--val", help="validation manifest (default: select on training loss)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--stage", choices=("1", "2", "both"), default="both")
    p.add_argument("--init", help="stage-1 checkpoint (required for --stage 2)")
    p.add_argument("--order", default="auto", help="'auto' or comma-separated class names (default auto)")
    p.add_argument("--config", help="key=value run-config file")
    p.add_argument("--desk", action="store_true", help="small backbone on 64x64 inputs")
    p.add_argument("--log", help="per-epoch CSV log")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int, help="maximum epochs per stage")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--l2", type=float)
    p.add_argument("--lr-patience", type=int)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--finetune-all", action="store_true", help="also train the backbone in stage 2")
    p.add_argument("--head-mode", choices=("per-step", "shared"))
    p.add_argument("--attention-mode", choices=("channel", "literal"))
    p.add_argument("--add-other", action="store_true")
    p.set_defaults(func=cmd_train)

    p = add("eval", "metric report for a labelled manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--or-mode", choices=("tp", "literal"), default="tp")
    p.add_argument("--out", help="also write the CSV here")
    p.set_defaults(func=cmd_eval)

    p = add("gradcheck", "finite-difference gradient suites")
    p.add_argument("--module", action="append", choices=gradcheck.MODULES,
                   help="suite to run; repeatable (default all)")
    p.set_defaults(func=cmd_gradcheck)

    p = add("predict", "per-class probabilities and labels for one image")
    p.add_argument("--image", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dump-attention", help="CSV of per-step attention weights")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s",
                        stream=sys.stderr, force=True)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (ValueError, OSError, KeyError) as exc:
        print(f"wxnet: error: {exc}", file=sys.stderr)
        return 1
