"""Dataset ingestion (CIFAR binary, synthetic generators) and PNG output."""
from __future__ import annotations

import glob
import os
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image

from mixmask.mixer import ImageBatch
from mixmask.rng import stream

PIXELS = 3 * 32 * 32
# variant -> (label bytes per record, index of the label used, number of classes)
CIFAR_LAYOUT = {"cifar10": (1, 0, 10), "coarse": (2, 0, 20), "fine": (2, 1, 100)}
CIFAR10_MEAN, CIFAR10_STD = (0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)
CIFAR100_MEAN, CIFAR100_STD = (0.5071, 0.4865, 0.4409), (0.2673, 0.2564, 0.2762)


class DatasetError(ValueError):
    pass


def cifar_norm(variant: str) -> tuple[tuple[float, ...], tuple[float, ...]]:
    return (CIFAR10_MEAN, CIFAR10_STD) if variant == "cifar10" else (CIFAR100_MEAN, CIFAR100_STD)


def normalize(pixels01: torch.Tensor, mean, std) -> torch.Tensor:
    m = torch.tensor(mean, dtype=pixels01.dtype).view(1, -1, 1, 1)
    s = torch.tensor(std, dtype=pixels01.dtype).view(1, -1, 1, 1)
    return (pixels01 - m) / s


def denormalize(x: torch.Tensor, mean, std) -> torch.Tensor:
    m = torch.tensor(mean, dtype=x.dtype).view(1, -1, 1, 1)
    s = torch.tensor(std, dtype=x.dtype).view(1, -1, 1, 1)
    return x * s + m


def _layout(variant: str):
    if variant not in CIFAR_LAYOUT:
        raise DatasetError(f"unknown CIFAR variant {variant!r}; expected one of {sorted(CIFAR_LAYOUT)}")
    return CIFAR_LAYOUT[variant]


def read_cifar_raw(path, variant: str = "cifar10") -> tuple[np.ndarray, np.ndarray]:
    """uint8 pixels (N, 3, 32, 32) and int64 labels, read bit-exactly from one binary file."""
    label_bytes, label_index, classes = _layout(variant)
    record = label_bytes + PIXELS
    with open(path, "rb") as f:
        data = f.read()
    if len(data) == 0 or len(data) % record:
        raise DatasetError(f"{path}: length {len(data)} is not a positive multiple of the "
                           f"{record}-byte {variant} record (truncated or wrong variant)")
    recs = np.frombuffer(data, dtype=np.uint8).reshape(-1, record)
    labels = recs[:, label_index].astype(np.int64)
    bad = np.flatnonzero(labels >= classes)
    if bad.size:
        raise DatasetError(f"{path}: record {bad[0]} has label {labels[bad[0]]} >= {classes} classes")
    pixels = recs[:, label_bytes:].reshape(-1, 3, 32, 32)
    return pixels, labels


def read_cifar(path, variant: str = "cifar10", mean=None, std=None) -> ImageBatch:
    """Read a CIFAR binary file (or every ``*.bin`` batch in a directory)."""
    if mean is None or std is None:
        mean, std = cifar_norm(variant)
    files = [path]
    if os.path.isdir(path):
        files = sorted(glob.glob(os.path.join(path, "*.bin")))
        if not files:
            raise DatasetError(f"{path}: no .bin files found")
    parts = [read_cifar_raw(f, variant) for f in files]
    pixels = np.concatenate([p for p, _ in parts])
    labels = np.concatenate([lab for _, lab in parts])
    x = normalize(torch.from_numpy(pixels.astype(np.float32) / 255.0), mean, std)
    return ImageBatch(x, torch.from_numpy(labels), tuple(mean), tuple(std))


def write_cifar(path, pixels: np.ndarray, labels, variant: str = "cifar10", coarse_labels=None) -> None:
    label_bytes, label_index, classes = _layout(variant)
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(-1, PIXELS)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) != len(pixels) or (labels >= classes).any() or (labels < 0).any():
        raise DatasetError("labels must be one in-range class id per record")
    head = np.zeros((len(pixels), label_bytes), dtype=np.uint8)
    head[:, label_index] = labels
    if label_bytes == 2 and coarse_labels is not None:
        head[:, 1 - label_index] = np.asarray(coarse_labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(np.concatenate([head, pixels], axis=1).tobytes())


@dataclass(frozen=True)
class SyntheticSpec:
    kind: str = "striped-classes"
    classes: int = 2
    per_class: int = 10
    image_size: int = 32
    seed: int = 0
    noise: float = 0.05
    spread: float = 0.1
    split: str = "train"


def gen_synthetic(spec: SyntheticSpec) -> ImageBatch:
    """Seeded toy data in [0, 1] pixel space, normalized with mean 0.5 / std 0.25.

    ``striped-classes``: class c has vertical stripes of period c + 2 pixels with a
    random phase and channel tint per image. ``gaussian-clusters``: each image is
    its class's random low-resolution template plus a Gaussian offset of std
    ``spread`` on the same coarse grid, plus i.i.d. pixel noise.

    Class structure depends only on ``seed``; ``split`` picks an independent
    draw of instances, so e.g. a "test" split shares the classes of "train".
    """
    rng = stream(spec.seed, "synthetic", spec.kind, spec.split)
    class_rng = stream(spec.seed, "synthetic", spec.kind, "classes")
    n, size = spec.classes * spec.per_class, spec.image_size
    labels = np.repeat(np.arange(spec.classes), spec.per_class)
    if spec.kind == "striped-classes":
        cols = np.arange(size)
        period = (labels + 2).astype(np.float64)[:, None]
        phase = rng.uniform(0, 2 * np.pi, size=(n, 1))
        wave = 0.5 + 0.35 * np.cos(2 * np.pi * cols[None, :] / period + phase)
        tint = rng.uniform(0.6, 1.0, size=(n, 3, 1, 1))
        img = tint * wave[:, None, None, :] * np.ones((1, 1, size, 1))
    elif spec.kind == "gaussian-clusters":
        coarse = max(size // 8, 1)
        templates = class_rng.uniform(0.2, 0.8, size=(spec.classes, 3, coarse, coarse))
        low = templates[labels] + spec.spread * rng.standard_normal((n, 3, coarse, coarse))
        img = np.kron(low, np.ones((1, 1, size // coarse, size // coarse)))
    else:
        raise DatasetError(f"unknown synthetic kind {spec.kind!r}")
    img = np.clip(img + spec.noise * rng.standard_normal(img.shape), 0.0, 1.0)
    mean, std = (0.5,) * 3, (0.25,) * 3
    x = normalize(torch.from_numpy(img.astype(np.float32)), mean, std)
    return ImageBatch(x, torch.from_numpy(labels), mean, std)


def load_dataset(spec: str) -> ImageBatch:
    """Resolve a dataset spec string.

    ``cifar10:PATH``, ``cifar100:PATH`` (fine labels), ``cifar100-coarse:PATH`` or
    ``synthetic:KIND[,key=value...]`` with keys classes, per_class, size, seed, noise, spread, split.
    """
    kind, _, rest = spec.partition(":")
    if kind == "synthetic":
        name, *opts = rest.split(",")
        kw = dict(o.split("=", 1) for o in opts if o)
        keys = {"classes": int, "per_class": int, "size": int, "seed": int, "noise": float, "spread": float,
                "split": str}
        unknown = set(kw) - set(keys)
        if unknown:
            raise DatasetError(f"unknown synthetic option(s) {sorted(unknown)}")
        args = {("image_size" if k == "size" else k): keys[k](v) for k, v in kw.items()}
        return gen_synthetic(SyntheticSpec(kind=name or "striped-classes", **args))
    variants = {"cifar10": "cifar10", "cifar100": "fine", "cifar100-coarse": "coarse"}
    if kind in variants:
        if not os.path.exists(rest):
            raise DatasetError(f"{rest}: no such file or directory")
        return read_cifar(rest, variants[kind])
    raise DatasetError(f"cannot resolve dataset spec {spec!r}")


def to_uint8_image(x: torch.Tensor, mean, std) -> np.ndarray:
    """C x H x W normalized tensor -> H x W x 3 uint8 (denormalized, clamped, rounded)."""
    px = denormalize(x.detach().cpu().float()[None], mean, std)[0].clamp(0, 1)
    arr = torch.round(px * 255).to(torch.uint8).permute(1, 2, 0).numpy()
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    return arr


def write_png(obj, path, mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0)) -> None:
    """Masks (2-D, 0/1) become 8-bit gray 0/255; images (C x H x W) become 8-bit RGB."""
    if hasattr(obj, "cells") and not torch.is_tensor(obj):
        obj = obj.cells
    arr = obj.detach().cpu().numpy() if torch.is_tensor(obj) else np.asarray(obj)
    if arr.ndim == 2:
        img = Image.fromarray((arr > 0).astype(np.uint8) * 255)
    elif arr.ndim == 3:
        img = Image.fromarray(to_uint8_image(torch.as_tensor(arr), mean, std))
    else:
        raise ValueError(f"expected a 2-D mask or a C x H x W image, got shape {arr.shape}")
    img.save(path, format="PNG", optimize=False)


def read_png(path, mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0)) -> torch.Tensor:
    """PNG -> normalized 3 x H x W float tensor."""
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    x = torch.from_numpy(arr).permute(2, 0, 1)[None]
    return normalize(x, mean, std)[0]
