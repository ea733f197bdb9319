"""Throughput of mask generation + mixing, single- and multi-worker."""
from __future__ import annotations

import csv
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import torch

from mixmask.maskgen import make_mask
from mixmask.mixer import make_pairing, mix_batch
from mixmask.rng import stream

REPORT_FIELDS = ["workers", "effective_workers", "iterations", "batch_size", "images", "pixels", "seconds",
                 "images_per_sec", "ns_per_pixel"]


@dataclass
class BenchConfig:
    batch_size: int = 256
    image_size: int = 32
    grid: int = 2
    pattern: str = "blocked"
    fill: str = "image"
    ratio: float = 0.5
    iterations: int = 50
    workers: tuple[int, ...] = (1, 2)
    seed: int = 0


def _one_iteration(cfg: BenchConfig, images: torch.Tensor, pairing, i: int) -> torch.Tensor:
    rng = stream(cfg.seed, "bench", i)
    mask = make_mask(cfg.pattern, cfg.grid, cfg.ratio, rng)
    pixel = mask.expand(cfg.image_size, cfg.image_size)
    return mix_batch(images, pixel, pairing, cfg.fill, noise_seed=i).mixtures


def usable_cores() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def bench_mix(cfg: BenchConfig) -> list[dict]:
    """One report row per worker count; empty when ``iterations`` is 0.

    Threads beyond the usable core count only add GIL hand-offs, so the pool
    is capped there; the report keeps both the requested and effective counts.
    """
    if cfg.iterations <= 0:
        return []
    images = torch.from_numpy(
        stream(cfg.seed, "bench-data").standard_normal((cfg.batch_size, 3, cfg.image_size, cfg.image_size))
    ).float()
    pairing = make_pairing("reverse", cfg.batch_size)
    rows = []
    cores = usable_cores()
    for requested in cfg.workers:
        workers = max(1, min(requested, cores))
        t0 = time.perf_counter()
        if workers <= 1:
            for i in range(cfg.iterations):
                _one_iteration(cfg, images, pairing, i)
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                list(pool.map(lambda i: _one_iteration(cfg, images, pairing, i), range(cfg.iterations)))
        seconds = time.perf_counter() - t0
        n_images = cfg.iterations * cfg.batch_size
        pixels = n_images * cfg.image_size * cfg.image_size
        rows.append({"workers": requested, "effective_workers": workers, "iterations": cfg.iterations, "batch_size": cfg.batch_size,
                     "images": n_images, "pixels": pixels, "seconds": seconds,
                     "images_per_sec": n_images / seconds, "ns_per_pixel": seconds * 1e9 / pixels})
    return rows


def write_report(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, REPORT_FIELDS)
        w.writeheader()
        w.writerows(rows)
