"""Mixture / switch batches and the Un-Mix global and local mixtures."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from mixmask.maskgen import GridMask, lambda_of
from mixmask.rng import as_generator

FILL_MODES = ("image", "zero", "gaussian")


@dataclass
class ImageBatch:
    data: torch.Tensor  # N x C x H x W, normalized
    labels: torch.Tensor | None = None
    mean: tuple[float, ...] = (0.0, 0.0, 0.0)
    std: tuple[float, ...] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[0] < 1:
            raise ValueError(f"expected an N x C x H x W batch with N >= 1, got {tuple(self.data.shape)}")
        if self.labels is not None and len(self.labels) != len(self.data):
            raise ValueError("labels must have one entry per image")

    def __len__(self):
        return self.data.shape[0]

    def subset(self, index) -> "ImageBatch":
        labels = None if self.labels is None else self.labels[index]
        return ImageBatch(self.data[index], labels, self.mean, self.std)


@dataclass
class Pairing:
    perm: np.ndarray
    kind: str = "reverse"
    seed: int | None = None

    def __post_init__(self):
        self.perm = np.asarray(self.perm, dtype=np.int64)
        n = len(self.perm)
        if n < 1 or not np.array_equal(np.sort(self.perm), np.arange(n)):
            raise ValueError("pairing must be a permutation of 0..N-1")

    def __len__(self):
        return len(self.perm)

    @property
    def is_reverse(self) -> bool:
        return bool(np.array_equal(self.perm, np.arange(len(self.perm))[::-1]))

    @property
    def is_involution(self) -> bool:
        return bool(np.array_equal(self.perm[self.perm], np.arange(len(self.perm))))


@dataclass
class MixOutput:
    mixtures: torch.Tensor
    pairing: Pairing
    lam: float
    fill_mode: str = "image"


@dataclass
class UnmixOutput:
    mixed: torch.Tensor
    lambda_unmix: float
    mode: str
    bbox: tuple[int, int, int, int] | None = None  # x1, y1, x2, y2 in pixels; x runs along width


def make_pairing(kind: str, n: int, seed: int | None = None) -> Pairing:
    if n < 1:
        raise ValueError(f"batch size must be >= 1, got {n}")
    if kind == "reverse":
        return Pairing(np.arange(n)[::-1].copy(), "reverse")
    if kind == "identity":
        return Pairing(np.arange(n), "identity")
    if kind == "random":
        rng = as_generator(seed)
        rev = np.arange(n)[::-1]
        perm = rng.permutation(n)
        # must differ from the reverse pairing used by Un-Mix
        while n > 2 and np.array_equal(perm, rev):
            perm = rng.permutation(n)
        return Pairing(perm, "random", seed if isinstance(seed, (int, np.integer)) else None)
    raise ValueError(f"unknown pairing kind {kind!r}")


def _as_tensor(batch) -> torch.Tensor:
    return batch.data if isinstance(batch, ImageBatch) else batch


def _bool_mask(pixel_mask, x: torch.Tensor) -> torch.Tensor:
    if isinstance(pixel_mask, GridMask):
        pixel_mask = pixel_mask.expand(x.shape[-2], x.shape[-1])
    m = torch.as_tensor(np.asarray(pixel_mask) if not torch.is_tensor(pixel_mask) else pixel_mask)
    if tuple(m.shape) != tuple(x.shape[-2:]):
        raise ValueError(f"mask shape {tuple(m.shape)} does not match image size {tuple(x.shape[-2:])}")
    return m.to(device=x.device).bool()


def _check_pairing(pairing: Pairing, x: torch.Tensor):
    if len(pairing) != x.shape[0]:
        raise ValueError(f"pairing has length {len(pairing)} but the batch has {x.shape[0]} images")


def mix_batch(batch, pixel_mask, pairing: Pairing, fill_mode: str = "image",
              noise_seed: int | None = None) -> MixOutput:
    """mix_i = m * I_i + (1 - m) * fill_i, with fill_i = I_perm(i), zeros or N(0, 1) noise."""
    x = _as_tensor(batch)
    m = _bool_mask(pixel_mask, x)
    _check_pairing(pairing, x)
    if fill_mode == "image":
        fill = x[torch.from_numpy(pairing.perm)]
    elif fill_mode == "zero":
        fill = torch.zeros_like(x)
    elif fill_mode == "gaussian":
        noise = np.random.default_rng(noise_seed).standard_normal(tuple(x.shape))
        fill = torch.from_numpy(noise).to(dtype=x.dtype, device=x.device)
    else:
        raise ValueError(f"unknown fill mode {fill_mode!r}; expected one of {FILL_MODES}")
    mixtures = torch.where(m, x, fill)
    return MixOutput(mixtures, pairing, lambda_of(m.cpu().numpy()), fill_mode)


def switch_batch(mix_out: MixOutput, batch, pixel_mask) -> torch.Tensor:
    """switch_i = m * I_perm(i) + (1 - m) * I_i, built explicitly for any pairing."""
    x = _as_tensor(batch)
    m = _bool_mask(pixel_mask, x)
    _check_pairing(mix_out.pairing, x)
    return torch.where(m, x[torch.from_numpy(mix_out.pairing.perm)], x)


def unmix_global(batch, rng=None, lam: float | None = None) -> UnmixOutput:
    """Mixup with the reversed batch, lam ~ Beta(1, 1) unless given."""
    x = _as_tensor(batch)
    if x.shape[0] < 2:
        raise ValueError("Un-Mix needs at least 2 images")
    if lam is None:
        lam = float(as_generator(rng).beta(1.0, 1.0))
    mixed = lam * x + (1 - lam) * torch.flip(x, (0,))
    return UnmixOutput(mixed, lam, "global")


def rand_bbox(height: int, width: int, lam: float, rng=None,
              center: tuple[int, int] | None = None) -> tuple[int, int, int, int]:
    """Box with side fractions sqrt(1 - lam) around a uniform center, clamped to the image."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam must lie in [0, 1], got {lam}")
    cut = math.sqrt(1.0 - lam)
    cut_h, cut_w = int(height * cut), int(width * cut)
    if center is None:
        gen = as_generator(rng)
        cy, cx = int(gen.integers(height)), int(gen.integers(width))
    else:
        cy, cx = center
    y1, y2 = np.clip(cy - cut_h // 2, 0, height), np.clip(cy + cut_h // 2, 0, height)
    x1, x2 = np.clip(cx - cut_w // 2, 0, width), np.clip(cx + cut_w // 2, 0, width)
    return int(x1), int(y1), int(x2), int(y2)


def unmix_local(batch, lam: float, rng=None, center: tuple[int, int] | None = None) -> UnmixOutput:
    """CutMix with the reversed batch; lambda is recomputed from the clamped box."""
    x = _as_tensor(batch)
    h, w = x.shape[-2:]
    x1, y1, x2, y2 = rand_bbox(h, w, lam, rng, center)
    mixed = x.clone()
    mixed[:, :, y1:y2, x1:x2] = torch.flip(x, (0,))[:, :, y1:y2, x1:x2]
    lam_um = 1.0 - (x2 - x1) * (y2 - y1) / (h * w)
    return UnmixOutput(mixed, lam_um, "local", (x1, y1, x2, y2))
