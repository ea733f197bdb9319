"""Desk-scale trend study: vanilla vs MixMask pretraining, scored by k-NN accuracy.

Usage: ``python -m mixmask.study --cifar10 DIR --out runs/trend`` where DIR holds
the CIFAR-10 binary batches (data_batch_1.bin, test_batch.bin). ``--synthetic``
runs the same protocol on generated data instead.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import time

import numpy as np
import torch

from mixmask.datastore import SyntheticSpec, gen_synthetic, read_cifar
from mixmask.evaluate import evaluate_knn
from mixmask.mixer import ImageBatch
from mixmask.trainer import TrainConfig, run

log = logging.getLogger(__name__)

CIFAR10_ENV = "MIXMASK_CIFAR10_DIR"
VARIANTS = {"vanilla": dict(mixmask=False), "mixmask": dict(mixmask=True)}


def find_cifar10(path: str | None = None) -> str | None:
    """Directory with data_batch_1.bin and test_batch.bin, from ``path`` or $MIXMASK_CIFAR10_DIR."""
    path = path or os.environ.get(CIFAR10_ENV)
    if not path:
        return None
    for root in (path, os.path.join(path, "cifar-10-batches-bin")):
        if all(os.path.exists(os.path.join(root, f)) for f in ("data_batch_1.bin", "test_batch.bin")):
            return root
    return None


def class_subset(batch: ImageBatch, per_class: int) -> ImageBatch:
    """First ``per_class`` images of every class, in file order."""
    labels = batch.labels.numpy()
    idx = []
    for c in np.unique(labels):
        hits = np.flatnonzero(labels == c)
        if len(hits) < per_class:
            raise ValueError(f"class {c} has only {len(hits)} images, {per_class} requested")
        idx.append(hits[:per_class])
    return batch.subset(torch.from_numpy(np.sort(np.concatenate(idx))))


def load_cifar10_split(root: str, per_class: int = 200) -> tuple[ImageBatch, ImageBatch]:
    train = class_subset(read_cifar(os.path.join(root, "data_batch_1.bin"), "cifar10"), per_class)
    test = read_cifar(os.path.join(root, "test_batch.bin"), "cifar10")
    return train, test


def synthetic_split(per_class: int = 200, classes: int = 10, seed: int = 0) -> tuple[ImageBatch, ImageBatch]:
    spec = SyntheticSpec("gaussian-clusters", classes=classes, per_class=per_class, seed=seed, spread=0.2)
    return gen_synthetic(spec), gen_synthetic(dataclasses.replace(spec, split="test"))


def trend_study(train: ImageBatch, test: ImageBatch, out_dir, seeds=(0, 1, 2), epochs: int = 100,
                base: TrainConfig | None = None, k: int = 20, temperature: float = 0.1) -> list[dict]:
    """Pretrain every (variant, seed) pair on ``train`` and score k-NN on ``test``."""
    base = base or TrainConfig()
    rows = []
    for seed in seeds:
        for name, overrides in VARIANTS.items():
            cfg = dataclasses.replace(base, seed=seed, epochs=epochs, **overrides)
            t0 = time.perf_counter()
            res = run(cfg, os.path.join(out_dir, f"{name}_seed{seed}"), dataset=train)
            acc, _ = evaluate_knn(res.state.online, train, test, k, temperature)
            rows.append({"variant": name, "seed": seed, "epochs": epochs, "knn_acc": acc,
                         "seconds": time.perf_counter() - t0})
            log.info("%s seed %d: k-NN %.4f", name, seed, acc)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "trend.csv"), "w", newline="") as f:
        w = csv.DictWriter(f, list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return rows


def summarize(rows: list[dict], num_classes: int) -> dict:
    """Mean accuracy per variant and the two trend checks (accuracies as fractions)."""
    mean = {v: float(np.mean([r["knn_acc"] for r in rows if r["variant"] == v])) for v in VARIANTS}
    chance = 1.0 / num_classes
    above = all(r["knn_acc"] > 2 * chance for r in rows)
    return {"mean": mean, "chance": chance, "all_above_2x_chance": above,
            "mixmask_not_worse": mean["mixmask"] >= mean["vanilla"] - 0.005,
            "total_seconds": float(sum(r["seconds"] for r in rows))}


def main(argv=None) -> None:
    p = argparse.ArgumentParser(prog="python -m mixmask.study")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--cifar10", help="directory with the CIFAR-10 binary batches")
    src.add_argument("--synthetic", action="store_true", help="10-class generated stand-in data")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    if args.synthetic:
        train, test = synthetic_split()
    else:
        root = find_cifar10(args.cifar10)
        if root is None:
            p.error(f"no CIFAR-10 binary batches under {args.cifar10}")
        train, test = load_cifar10_split(root)
    rows = trend_study(train, test, args.out, tuple(args.seeds), args.epochs)
    print(json.dumps(summarize(rows, int(train.labels.max()) + 1), indent=2))


if __name__ == "__main__":
    main()
