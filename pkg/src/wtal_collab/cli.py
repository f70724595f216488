"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric or training error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import pipeline
from .cbp import CbpModel, warmup
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, config_hash, load_config, model_hash
from .data import load_dataset
from .errors import (DimensionError, FormatError, GenerationError, LoadError, MetricError,
                     NumericError, ParameterError, TrainingError)
from .synth import SynthSpec, generate

log = logging.getLogger("wtal")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _config(args):
    cfg = load_config(args.config, args.set or ())
    if getattr(args, "data", None):
        cfg.data = str(args.data)
    if not cfg.data:
        raise UsageError("no dataset given (use --data or set 'data' in the config)")
    return cfg


def _split(dataset_path, split):
    ds = load_dataset(dataset_path, split)
    if not len(ds):
        raise LoadError(f"split {split!r} of {dataset_path} is empty")
    return ds


def _log_phase(entry):
    vals = " ".join(f"{k}={v:.4f}" for k, v in entry.items() if isinstance(v, float))
    log.info("%s [%s] %s", entry["phase"], entry["branch"], vals)


def cmd_gen_data(args):
    values = {}
    if args.spec:
        try:
            values = yaml.safe_load(Path(args.spec).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ParameterError(f"cannot read generator spec {args.spec}: {exc}") from exc
    for item in args.set or ():
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"override {item!r} is not key=value")
        values[key.strip()] = yaml.safe_load(raw)
    spec = SynthSpec.from_dict(values)
    path = generate(spec, args.out)
    log.info("wrote %s", path)


def cmd_warmup(args):
    cfg = _config(args)
    ds = _split(cfg.data, args.split)
    model = CbpModel.from_config(cfg, ds.dim("cbp"), ds.num_classes)
    logs = warmup(model, ds, cfg)
    if logs:
        log.info("warm-up loss %.4f -> %.4f", logs[0]["loss_cls"], logs[-1]["loss_cls"])
    meta = {"config_hash": config_hash(cfg), "model_hash": model_hash(cfg), "data_hash": ds.digest,
            "branch": "cbp", "phase": "warmup"}
    save_checkpoint(args.out, model.state_dict(), meta)
    log.info("wrote %s", args.out)


def cmd_train(args):
    cfg = _config(args)
    out = args.out or cfg.out
    ds = _split(cfg.data, args.split)
    warm_state = None
    if args.warm:
        warm_state, meta = load_checkpoint(args.warm)
        if not args.force and (meta.get("data_hash") != ds.digest or meta.get("model_hash") != model_hash(cfg)):
            raise LoadError(f"{args.warm} was produced from other data or another model config"
                            " (use --force to override)")
    pipeline.run_training(cfg, ds, out, log=_log_phase, warm_state=warm_state)
    log.info("wrote checkpoints to %s", out)


def _load_for_inference(args):
    cfg = _config(args)
    ds = _split(cfg.data, args.split)
    cbp, vlp = pipeline.load_models(args.ckpt, cfg, ds, force=args.force)
    return cfg, ds, cbp, vlp


def cmd_infer(args):
    cfg, ds, cbp, vlp = _load_for_inference(args)
    proposals, _ = pipeline.infer(cfg, cbp, vlp, ds)
    payload = {"config_hash": config_hash(cfg),
               "videos": [{"video_id": rec.video_id,
                           "proposals": [[p.start, p.end, p.category, p.score] for p in proposals[rec.video_id]]}
                          for rec in ds]}
    pipeline.write_json(args.out, payload)
    log.info("wrote %s", args.out)


def cmd_eval(args):
    cfg, ds, cbp, vlp = _load_for_inference(args)
    report = pipeline.evaluate(cfg, cbp, vlp, ds)
    pipeline.write_json(args.out, report.to_json())
    log.info("avg mAP 0.1-0.5 %.4f | 0.3-0.7 %.4f | fore/back mIoU %.4f / %.4f",
             report.avg_01_05, report.avg_03_07, report.fore_miou, report.back_miou)


def cmd_report(args):
    reports = {}
    for item in args.runs:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = Path(item).stem, item
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise LoadError(f"cannot read report {path}: {exc}") from exc
        if not {"per_iou", "avg_0.1_0.5", "avg_0.3_0.7"} <= set(doc):
            raise LoadError(f"{path} is not an evaluation report")
        reports[name] = doc
    table = pipeline.report_table(reports)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(table)
    sys.stdout.write(table)


def build_parser():
    parser = _Parser(prog="wtal", description="Dual-branch weakly-supervised temporal action localization.")
    parser.add_argument("-q", "--quiet", action="store_true", help="only print errors")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, data=True):
        p.add_argument("--config", help="YAML or JSON experiment config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
        if data:
            p.add_argument("--data", help="dataset directory or manifest")

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--spec", help="YAML or JSON generator settings")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a generator field")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("warmup", help="warm up the CBP branch on video labels")
    common(p)
    p.add_argument("--split", default="train")
    p.add_argument("--out", required=True, help="checkpoint file")
    p.set_defaults(func=cmd_warmup)

    p = sub.add_parser("train", help="train both branches for the configured baseline")
    common(p)
    p.add_argument("--split", default="train")
    p.add_argument("--warm", help="warm-up checkpoint to start from")
    p.add_argument("--force", action="store_true", help="ignore hash mismatches")
    p.add_argument("--out", help="run directory")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("infer", cmd_infer, "write per-video proposals"),
                                 ("eval", cmd_eval, "write an evaluation report")):
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.add_argument("--ckpt", required=True, help="run directory holding cbp.ckpt and vlp.ckpt")
        p.add_argument("--split", default="test")
        p.add_argument("--force", action="store_true", help="ignore hash mismatches")
        p.add_argument("--out", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="tabulate evaluation reports")
    p.add_argument("runs", nargs="+", metavar="[NAME=]REPORT")
    p.add_argument("--out", help="also write the table here")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except (UsageError, ParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (LoadError, FormatError, GenerationError, DimensionError, MetricError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, TrainingError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
