"""``embanet`` command line: analyze, gradcheck, train, infer, cam.

Exit codes: 0 success, 1 verification failure, 2 usage or spec error,
3 data error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_DATA = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _parse_shape(text: str) -> tuple[int, ...]:
    try:
        shape = tuple(int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"bad shape {text!r}; expected e.g. 1x3x224x224") from None
    if len(shape) != 4 or min(shape) < 1:
        raise UsageError(f"bad shape {text!r}; expected four positive dimensions")
    return shape


def _add_spec_args(p: argparse.ArgumentParser, required: bool = True) -> None:
    g = p.add_mutually_exclusive_group(required=required)
    g.add_argument("--preset", help="named network preset")
    g.add_argument("--spec", type=Path, help="NetworkSpec JSON file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-path spec override, repeatable (e.g. block.mbc.s=2)")


def _load_spec(args):
    from embanet.network import NetworkSpec, apply_overrides, preset

    if args.preset:
        spec = preset(args.preset)
    else:
        try:
            text = args.spec.read_text()
        except OSError as err:
            raise UsageError(f"cannot read spec: {err}") from err
        spec = NetworkSpec.from_json(text)
    return apply_overrides(spec, args.overrides) if args.overrides else spec


def _default_input(spec) -> str:
    return "1x3x32x32" if spec.stem.kind == "cifar" else "1x3x224x224"


# ---------------------------------------------------------------- analyze

def cmd_analyze(args) -> int:
    from embanet.complexity import count_complexity
    from embanet.network import build_network

    spec = _load_spec(args)
    shape = _parse_shape(args.input or _default_input(spec))
    model = build_network(spec, seed=args.seed)
    report = count_complexity(model, shape)
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    if args.json:
        print(json.dumps({"name": spec.name, "params": report.total_params, "macs": report.total_macs,
                          "dense_macs": report.total_dense_macs, "input": list(shape),
                          "output": list(report.output_shape)}))
    elif args.totals:
        print(f"{spec.name}: {report.summary()}")
    else:
        print(f"# {spec.name}")
        print(report.to_text())
    return EXIT_OK


# ---------------------------------------------------------------- gradcheck

def cmd_gradcheck(args) -> int:
    from embanet import gradcheck as gc

    if args.preset:
        checks = gc.checks_for_preset(args.preset)
    elif args.op:
        try:
            checks = gc.resolve(args.op)
        except KeyError as err:
            raise UsageError(err.args[0]) from None
    else:
        checks = {**gc.CHECKS, **gc.conv_checks()}
    failed = []

    def report(r):
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<28} max rel err {r.max_rel_err:.3e}  ({r.trials} trials)")
        if not r.passed:
            failed.append(r.name)

    gc.run_checks(checks, trials=args.trials, seed=args.seed, on_result=report)
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_VERIFY
    print(f"all {len(checks)} checks below {gc.TOLERANCE:g}")
    return EXIT_OK


# ---------------------------------------------------------------- train

def _source(args, classes: int):
    from embanet.data import Augment, CifarBinary, DatasetSource, SyntheticBlobs

    aug = Augment(pad_crop=4 if args.augment else 0, flip=args.augment)
    if args.data == "synthetic":
        return DatasetSource(SyntheticBlobs(classes=classes, side=args.side, samples=args.samples,
                                            seed=args.data_seed), aug)
    if not args.cifar:
        raise UsageError("--data cifar needs at least one --cifar FILE")
    return DatasetSource(CifarBinary(tuple(args.cifar), classes, tuple(args.cifar_test)), aug)


def _schedule(args):
    from embanet.train import ConstantLR, CosineLR, StepLR

    if args.schedule == "step":
        return StepLR(0.1 if args.lr is None else args.lr)
    if args.schedule == "cosine":
        return CosineLR(0.05 if args.lr is None else args.lr, max(args.epochs, 1))
    return ConstantLR(0.05 if args.lr is None else args.lr)


def cmd_train(args) -> int:
    from embanet.checkpoint import save_checkpoint
    from embanet.network import build_network
    from embanet.train import TrainConfig, train, write_history_csv

    spec = _load_spec(args)
    model = build_network(spec, seed=args.seed)
    source = _source(args, spec.classes)
    cfg = TrainConfig(epochs=args.epochs, batch=args.batch, seed=args.seed, weight_decay=args.weight_decay,
                      label_smoothing=args.label_smoothing)
    eval_data = source.load("test") if args.eval else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def log(m):
        ev = "" if m.eval_acc is None else f"  eval_acc {m.eval_acc:.4f}"
        print(f"epoch {m.epoch:3d}  lr {m.lr:.4g}  loss {m.train_loss:.5f}  acc {m.train_acc:.4f}{ev}", flush=True)

    history = train(model, source, _schedule(args), cfg, eval_data=eval_data, on_epoch=log)
    write_history_csv(history, out / "metrics.csv")
    save_checkpoint(model, out / "checkpoint", seed=args.seed)
    print(f"wrote {out / 'metrics.csv'} and {out / 'checkpoint'}")
    return EXIT_OK


# ---------------------------------------------------------------- infer / cam

def _model_for_inference(args):
    from embanet.checkpoint import load_checkpoint
    from embanet.network import build_network

    if args.checkpoint:
        return load_checkpoint(args.checkpoint)
    if not (args.preset or args.spec):
        raise UsageError("need --checkpoint, --preset or --spec")
    return build_network(_load_spec(args), seed=args.seed)


def _input_batch(args, model) -> np.ndarray:
    from embanet.autodiff import ShapeMismatch
    from embanet.data import DataFormat
    from embanet.tensor import load_tensor

    if args.input:
        try:
            x = load_tensor(args.input)
        except ValueError as err:
            raise DataFormat(f"{args.input}: {err}", 0) from err
    else:
        side = args.side or (32 if model.spec.stem.kind == "cifar" else 224)
        rng = np.random.default_rng(args.input_seed)
        x = rng.standard_normal((1, model.spec.in_channels, side, side)).astype(np.float32)
    if x.shape[1] != model.spec.in_channels:
        raise ShapeMismatch(f"input has {x.shape[1]} channels, model expects {model.spec.in_channels}")
    return x


def cmd_infer(args) -> int:
    from embanet.train import predict, topk

    model = _model_for_inference(args)
    x = _input_batch(args, model)
    scores = predict(model, x, batch=args.batch)
    k = min(args.topk, scores.shape[1])
    for i, row in enumerate(topk(scores, k)):
        print(f"sample {i}: " + "  ".join(f"{c}:{scores[i, c]:.6f}" for c in row))
    return EXIT_OK


def cmd_cam(args) -> int:
    from embanet.gradcam import gradcam, write_pgm
    from embanet.tensor import save_tensor
    from embanet.train import predict, topk

    model = _model_for_inference(args)
    x = _input_batch(args, model)[:1]
    target = args.target if args.target is not None else int(topk(predict(model, x), 1)[0, 0])
    heat = gradcam(model, x, target, args.layer)
    out = Path(args.out)
    write_pgm(out, heat)
    save_tensor(out.with_suffix(".bin"), heat[None, None].astype(np.float32))
    print(f"class {target} heatmap {heat.shape[0]}x{heat.shape[1]} -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="embanet", description="Multi-branch attention networks: analyze, gradcheck, train, infer, cam.",
                                     epilog="exit codes: 0 ok, 1 verification failure, 2 usage or spec error, 3 data error")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="per-layer parameter and MAC counts")
    _add_spec_args(p)
    p.add_argument("--input", help="input shape NxCxHxW (default 1x3x224x224, 1x3x32x32 for CIFAR stems)")
    p.add_argument("--csv", help="also write the per-layer table as CSV")
    p.add_argument("--totals", action="store_true", help="print totals only")
    p.add_argument("--json", action="store_true", help="print totals as JSON")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("gradcheck", help="finite-difference gradient certification")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--op", action="append", help="op name or alias (repeatable); default: all")
    g.add_argument("--preset", help="check the ops a preset is built from")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="train a network and write metrics + checkpoint")
    _add_spec_args(p)
    p.add_argument("--data", choices=["synthetic", "cifar"], default="synthetic")
    p.add_argument("--cifar", action="append", default=[], help="CIFAR binary train file (repeatable)")
    p.add_argument("--cifar-test", action="append", default=[], help="CIFAR binary test file (repeatable)")
    p.add_argument("--samples", type=int, default=512, help="synthetic sample count")
    p.add_argument("--side", type=int, default=16, help="synthetic image side")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--augment", action="store_true", help="pad-4 random crop + horizontal flip")
    p.add_argument("--eval", action="store_true", help="evaluate on the test split every epoch")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--schedule", choices=["step", "cosine", "constant"], default="constant")
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--label-smoothing", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="run")
    p.set_defaults(func=cmd_train)

    for name, fn, text in (("infer", cmd_infer, "top-k classes for an input tensor"),
                           ("cam", cmd_cam, "Grad-CAM heatmap as PGM")):
        p = sub.add_parser(name, help=text)
        _add_spec_args(p, required=False)
        p.add_argument("--checkpoint", help="checkpoint directory written by train")
        p.add_argument("--input", help="input tensor file (16-byte header + float32)")
        p.add_argument("--input-seed", type=int, default=0, help="seed for a random input when --input is absent")
        p.add_argument("--side", type=int, help="random input side")
        p.add_argument("--seed", type=int, default=0, help="model init seed (untrained models)")
        if name == "infer":
            p.add_argument("--topk", type=int, default=5)
            p.add_argument("--batch", type=int, default=16)
        else:
            p.add_argument("--target", type=int, help="class index (default: top-1)")
            p.add_argument("--layer", help="activation to explain (default: last stage)")
            p.add_argument("--out", default="cam.pgm")
        p.set_defaults(func=fn)
    return parser


def _limit_threads():
    threads = os.environ.get("EMBANET_THREADS")
    if not threads:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(threads))


def main(argv=None) -> int:
    from embanet.autodiff import ShapeMismatch
    from embanet.checkpoint import CheckpointError
    from embanet.data import DataFormat
    from embanet.gradcam import UnknownLayer
    from embanet.network import SpecValidation, UnknownPreset

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        limiter = _limit_threads()
    except ValueError:
        print("error: EMBANET_THREADS must be an integer", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (SpecValidation, UnknownPreset, UnknownLayer, UsageError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormat, CheckpointError, ShapeMismatch, FileNotFoundError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as err:
        # illegal widths/groups surfaced while building from a valid-looking spec
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
