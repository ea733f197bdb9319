"""``mixmask`` command line: mask gen, mix preview, train, eval knn, bench mix.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import difflib
import json
import logging
import os
import sys

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
COMMANDS = {"mask": ["gen"], "mix": ["preview"], "train": [], "eval": ["knn"], "bench": ["mix"]}


class UsageError(Exception):
    def __init__(self, message, parser=None):
        super().__init__(message)
        self.parser = parser


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message, self)


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _fraction(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"expected a value in [0, 1], got {text}")
    return v


def _widths(text) -> tuple:
    return tuple(int(w) for w in str(text).strip("()[] ").split(",") if w.strip())


def build_parser() -> Parser:
    p = Parser(prog="mixmask", description="MixMask masking, mixing, training and evaluation tools.")
    sub = p.add_subparsers(dest="command", metavar="{mask,mix,train,eval,bench}", parser_class=Parser)

    mask = sub.add_parser("mask", help="mask generation").add_subparsers(dest="action", parser_class=Parser)
    g = mask.add_parser("gen", help="write a grid mask as PNG plus a lambda sidecar")
    g.add_argument("--grid", type=int, required=True)
    g.add_argument("--ratio", type=_fraction, default=0.5, help="fraction of cells filled from the partner")
    g.add_argument("--pattern", choices=["discrete", "blocked"], default="blocked")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=None, help="pixel size of the PNG (default: one pixel per cell)")
    g.add_argument("--out", required=True)

    mix = sub.add_parser("mix", help="mixing previews").add_subparsers(dest="action", parser_class=Parser)
    m = mix.add_parser("preview", help="write mixture, switch and mask PNGs for input images")
    m.add_argument("--inputs", nargs="+", required=True)
    m.add_argument("--grid", type=int, default=2)
    m.add_argument("--ratio", type=_fraction, default=0.5)
    m.add_argument("--pattern", choices=["discrete", "blocked"], default="blocked")
    m.add_argument("--fill", choices=["image", "zero", "gaussian"], default="image")
    m.add_argument("--pairing", choices=["reverse", "random"], default="reverse")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out-dir", required=True)

    t = sub.add_parser("train", help="pretrain an encoder")
    t.add_argument("--config", default=None, help="flat key = value TOML file")
    t.add_argument("--out", required=True)
    from mixmask.trainer import TrainConfig

    for f in dataclasses.fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        kind = {bool: _bool, int: int, float: float}.get(type(f.default), str)
        if f.name == "widths":
            kind = _widths
        t.add_argument(flag, dest=f.name, type=kind, default=None, help=f"(default: {f.default})")

    ev = sub.add_parser("eval", help="evaluation").add_subparsers(dest="action", parser_class=Parser)
    k = ev.add_parser("knn", help="weighted k-NN accuracy on frozen embeddings")
    k.add_argument("--checkpoint", required=True)
    k.add_argument("--train-set", required=True, help="dataset spec, e.g. cifar10:PATH or synthetic:striped-classes")
    k.add_argument("--test-set", required=True)
    k.add_argument("--k", type=int, default=20)
    k.add_argument("--temperature", type=float, default=0.1)
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--out", default=".")

    bn = sub.add_parser("bench", help="benchmarks").add_subparsers(dest="action", parser_class=Parser)
    b = bn.add_parser("mix", help="mask generation + mixing throughput")
    b.add_argument("--batch-size", type=int, default=256)
    b.add_argument("--image-size", type=int, default=32)
    b.add_argument("--grid", type=int, default=2)
    b.add_argument("--pattern", choices=["discrete", "blocked"], default="blocked")
    b.add_argument("--fill", choices=["image", "zero", "gaussian"], default="image")
    b.add_argument("--iterations", type=int, default=50)
    b.add_argument("--workers", type=int, nargs="+", default=[1, 2])
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", default=".")
    p.leaves = {("mask", "gen"): g, ("mix", "preview"): m, ("train", None): t, ("eval", "knn"): k,
                ("bench", "mix"): b}
    return p


def _print_config(args, extra=None) -> None:
    cfg = {k: v for k, v in vars(args).items() if v is not None}
    cfg.update(extra or {})
    print("config: " + json.dumps(cfg, sort_keys=True, default=str))


def cmd_mask_gen(args) -> int:
    from mixmask.datastore import write_png
    from mixmask.maskgen import make_mask

    _print_config(args)
    mask = make_mask(args.pattern, args.grid, args.ratio, args.seed)
    size = args.size or args.grid
    _ensure_parent(args.out)
    write_png(mask.expand(size, size), args.out)
    sidecar = os.path.splitext(args.out)[0] + ".txt"
    with open(sidecar, "w") as f:
        f.write(f"lambda = {mask.lam!r}\nseed = {args.seed}\ngrid = {args.grid}\n"
                f"pattern = {args.pattern}\nratio = {args.ratio!r}\n")
    print(f"lambda = {mask.lam:.6f}  -> {args.out}, {sidecar}")
    return EXIT_OK


def cmd_mix_preview(args) -> int:
    import torch

    from mixmask.datastore import read_png, write_png
    from mixmask.maskgen import make_mask
    from mixmask.mixer import make_pairing, mix_batch, switch_batch

    _print_config(args)
    if len(args.inputs) < 2:
        raise UsageError("mix preview needs at least two --inputs")
    mean, std = (0.5,) * 3, (0.25,) * 3
    images = [read_png(p, mean, std) for p in args.inputs]
    if len({tuple(im.shape) for im in images}) != 1:
        raise ValueError("all input images must have the same size")
    x = torch.stack(images)
    h, w = x.shape[-2:]
    mask = make_mask(args.pattern, args.grid, args.ratio, args.seed)
    pixel = mask.expand(h, w)
    pairing = make_pairing(args.pairing, len(x), seed=args.seed)
    out = mix_batch(x, pixel, pairing, args.fill, noise_seed=args.seed)
    switch = switch_batch(out, x, pixel)
    os.makedirs(args.out_dir, exist_ok=True)
    write_png(pixel, os.path.join(args.out_dir, "mask.png"))
    for i in range(len(x)):
        write_png(out.mixtures[i], os.path.join(args.out_dir, f"mixture_{i}.png"), mean, std)
        write_png(switch[i], os.path.join(args.out_dir, f"switch_{i}.png"), mean, std)
    print(f"lambda = {out.lam:.6f}; wrote {2 * len(x) + 1} PNGs to {args.out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    from mixmask.trainer import TrainConfig, load_config, run

    values = TrainConfig().to_dict()
    if args.config:
        values.update(load_config(args.config))
    overrides = {f.name: getattr(args, f.name) for f in dataclasses.fields(TrainConfig)
                 if getattr(args, f.name) is not None}
    values.update(overrides)
    config = TrainConfig.from_dict(values)
    print("config: " + json.dumps(config.to_dict(), sort_keys=True))
    result = run(config, args.out)
    print(f"trained {result.steps} steps; checkpoint {result.checkpoint}; metrics {result.metrics}")
    return EXIT_OK


def cmd_eval_knn(args) -> int:
    from mixmask.datastore import load_dataset
    from mixmask.evaluate import evaluate_knn

    _print_config(args)
    train, test = load_dataset(args.train_set), load_dataset(args.test_set)
    acc, per_class = evaluate_knn(args.checkpoint, train, test, args.k, args.temperature)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "knn_per_class.csv")
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["class", "accuracy"])
        for c in sorted(per_class):
            w.writerow([c, repr(per_class[c])])
    print(f"knn accuracy (k={args.k}, t={args.temperature}): {acc:.4f}; per-class CSV {path}")
    return EXIT_OK


def cmd_bench_mix(args) -> int:
    from mixmask.bench import BenchConfig, bench_mix, write_report

    _print_config(args)
    cfg = BenchConfig(args.batch_size, args.image_size, args.grid, args.pattern, args.fill,
                      iterations=args.iterations, workers=tuple(args.workers), seed=args.seed)
    rows = bench_mix(cfg)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "bench_mix.csv")
    write_report(rows, path)
    for r in rows:
        print(f"workers={r['workers']} (effective {r['effective_workers']}): {r['images_per_sec']:.1f} images/s, {r['ns_per_pixel']:.2f} ns/pixel")
    if not rows:
        print("no iterations requested; empty report")
    print(f"report: {path}")
    return EXIT_OK


def _ensure_parent(path) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


HANDLERS = {("mask", "gen"): cmd_mask_gen, ("mix", "preview"): cmd_mix_preview, ("train", None): cmd_train,
            ("eval", "knn"): cmd_eval_knn, ("bench", "mix"): cmd_bench_mix}


def _suggest(argv) -> str:
    words = [a for a in argv if not a.startswith("-")]
    if not words:
        return ""
    cmd = words[0]
    if cmd not in COMMANDS:
        close = difflib.get_close_matches(cmd, list(COMMANDS), n=1)
        return f" Did you mean {close[0]!r}?" if close else ""
    if COMMANDS[cmd] and len(words) > 1 and words[1] not in COMMANDS[cmd]:
        close = difflib.get_close_matches(words[1], COMMANDS[cmd], n=1)
        return f" Did you mean '{cmd} {close[0]}'?" if close else ""
    return ""


def dispatch(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        args, extra = parser.parse_known_args(argv)
        action = getattr(args, "action", None)
        if extra:
            leaf = parser.leaves.get((args.command, action), parser)
            raise UsageError(f"unrecognized arguments: {' '.join(extra)}", leaf)
        handler = HANDLERS.get((args.command, action))
        if handler is None:
            sub = COMMANDS.get(args.command, [])
            raise UsageError(f"{args.command} needs a subcommand: {', '.join(sub)}")
        return handler(args)
    except UsageError as e:
        (e.parser or parser).print_help(sys.stderr)
        print(f"error: {e}{_suggest(argv)}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # runtime failures map to exit code 2
        logging.getLogger("mixmask").debug("command failed", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    logging.basicConfig(level=os.environ.get("MIXMASK_LOGLEVEL", "INFO"), format="%(levelname)s %(message)s")
    np.set_printoptions(precision=4)
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
