"""Command-line harness: ``cobra-bfa {generate,train,attack,evaluate,flip,report}``."""

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import replace

from . import pipeline
from .container import EncodedModel, atomic_write, load_model, save_model
from .errors import CobraError
from .fault_injector import FlipSet, apply_flips_destructive
from .pipeline import RunConfig

MODEL_NAME = "model.cobr"

log = logging.getLogger("cobra_bfa")


def build_config(args):
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    sens, red, model, train = cfg.sensitivity, cfg.reduction, cfg.model, cfg.train
    if getattr(args, "alpha", None) is not None:
        sens = replace(sens, alpha=args.alpha)
    if getattr(args, "rate", None) is not None:
        sens = replace(sens, rate_r=args.rate)
    if getattr(args, "threshold", None) is not None:
        sens = replace(sens, loss_threshold=args.threshold)
    if getattr(args, "epsilon", None) is not None:
        red = replace(red, epsilon=args.epsilon)
    if getattr(args, "nmax", None) is not None:
        red = replace(red, max_iterations=args.nmax)
    if getattr(args, "seed", None) is not None:
        if args.command in ("generate", "train"):
            model = replace(model, seed=args.seed)
        else:
            red = replace(red, rng_seed=args.seed)
    if getattr(args, "steps", None) is not None:
        train = replace(train, steps=args.steps)
    if getattr(args, "lr", None) is not None:
        train = replace(train, lr=args.lr)
    kw = dict(sensitivity=sens, reduction=red, model=model, train=train)
    if getattr(args, "format", None):
        kw["storage_format"] = args.format
    if getattr(args, "gradient_free", False):
        kw["gradient_free"] = True
    if getattr(args, "graybox_last", None) is not None:
        kw["graybox_last_k"] = args.graybox_last
    if getattr(args, "bit_pos", None) is not None:
        kw["attack_bit_override"] = args.bit_pos
    return replace(cfg, **kw)


def _load_in_format(path, fmt):
    model = load_model(path)
    if fmt and fmt != model.kind.value:
        model = EncodedModel.from_params(model.decoded(), fmt)
    return model


def cmd_generate(args):
    cfg = build_config(args)
    model = pipeline.generate(cfg)
    path = os.path.join(args.out, MODEL_NAME)
    save_model(model, path)
    atomic_write(os.path.join(args.out, "run_config.json"), cfg.to_json() + "\n")
    print(f"parameters {model.num_parameters}")
    print(f"bits {model.total_bits}")
    print(f"checksum {model.checksum():016x}")
    print(f"wrote {path}")


def cmd_train(args):
    cfg = build_config(args)
    model = load_model(args.model)
    trained, losses = pipeline.train_model(model, cfg)
    path = os.path.join(args.out, MODEL_NAME)
    save_model(trained, path)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss"])
    for i, loss in enumerate(losses):
        w.writerow([i, repr(float(loss))])
    atomic_write(os.path.join(args.out, "train_log.csv"), buf.getvalue())
    print(f"final training loss {losses[-1]:.6f} after {cfg.train.steps} steps")
    print(f"wrote {path}")


def cmd_attack(args):
    cfg = build_config(args)
    model = _load_in_format(args.model, args.format)
    report, _ = pipeline.run_attack(model, cfg, out_dir=args.out)
    post = report["post_attack"]
    print(f"flips {report['flip_count']} of {report['total_bits']} bits "
          f"(fraction {report['flipped_bit_fraction']:.3e})")
    print(f"held-out loss {report['baseline']['loss']} -> {post['loss']}, "
          f"accuracy {report['baseline']['accuracy']:.4f} -> {post['accuracy']:.4f}")
    print(f"wrote artifacts to {args.out}")


def cmd_evaluate(args):
    cfg = build_config(args)
    model = _load_in_format(args.model, args.format)
    flips = None
    if args.flips:
        with open(args.flips, encoding="utf-8") as fh:
            flips = FlipSet.from_json(fh.read())
    metrics = pipeline.evaluate(model, cfg.corpus, flips)
    text = json.dumps(metrics, indent=2)
    if args.out:
        atomic_write(os.path.join(args.out, "metrics.json"), text + "\n")
    print(text)


def cmd_flip(args):
    model = _load_in_format(args.model, args.format)
    with open(args.flips, encoding="utf-8") as fh:
        flips = FlipSet.from_json(fh.read())
    apply_flips_destructive(model, flips)
    path = os.path.join(args.out, pipeline.ATTACKED_NAME)
    save_model(model, path)
    print(f"applied {len(flips)} flips; checksum {model.checksum():016x}")
    print(f"wrote {path}")


def cmd_report(args):
    with open(args.report, encoding="utf-8") as fh:
        report = json.load(fh)
    for name, text in pipeline.report_to_csv(report).items():
        atomic_write(os.path.join(args.out, name), text)
        print(f"wrote {os.path.join(args.out, name)}")


def make_parser():
    ap = argparse.ArgumentParser(prog="cobra-bfa", description="Bit-flip attack toolkit for toy SSM language models")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, model=True):
        p.add_argument("--config", metavar="PATH", help="run configuration JSON")
        if model:
            p.add_argument("--model", metavar="PATH", required=True, help="model container")
        p.add_argument("--format", choices=("fp16", "int8", "int4"))
        p.add_argument("--seed", type=int)
        p.add_argument("--out", metavar="DIR", default=".")

    p = sub.add_parser("generate", help="create a seeded model container")
    common(p, model=False)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="full-batch training on the synthetic corpus")
    common(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="run the full attack pipeline")
    common(p)
    p.add_argument("--alpha", type=float)
    p.add_argument("--rate", type=float, help="top-k sampling rate in percent")
    p.add_argument("--threshold", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--nmax", type=int)
    p.add_argument("--gradient-free", action="store_true")
    p.add_argument("--graybox-last", type=int, metavar="INT")
    p.add_argument("--bit-pos", type=int, metavar="INT")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("evaluate", help="held-out loss / perplexity / accuracy")
    common(p)
    p.add_argument("--flips", metavar="PATH", help="optional flip set JSON to apply first")
    p.set_defaults(func=cmd_evaluate, out=None)

    p = sub.add_parser("flip", help="apply a flip set JSON to a container")
    common(p)
    p.add_argument("--flips", metavar="PATH", required=True)
    p.set_defaults(func=cmd_flip)

    p = sub.add_parser("report", help="re-render a saved attack report as CSV")
    p.add_argument("--report", metavar="PATH", required=True)
    p.add_argument("--out", metavar="DIR", default=".")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None):
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        args.func(args)
    except (CobraError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
