"""Contrastive objective: InfoNCE against a key queue, the lambda-weighted
MixMask terms and the Un-Mix terms, summed into one training loss."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np
import torch

from mixmask.rng import as_generator


class KeyQueue:
    """FIFO ring buffer of K unit-norm keys used as negatives."""

    def __init__(self, entries: torch.Tensor, cursor: int = 0, pushed: int = 0):
        if entries.ndim != 2:
            raise ValueError("queue entries must be K x d")
        self.entries = entries
        self.cursor = cursor
        self.pushed = pushed

    @classmethod
    def random(cls, capacity: int, dim: int, rng=None, dtype=torch.float32) -> "KeyQueue":
        """Unit-normalized Gaussian rows; overwritten by real keys during warmup."""
        z = torch.from_numpy(as_generator(rng).standard_normal((capacity, dim))).to(dtype)
        return cls(torch.nn.functional.normalize(z, dim=1))

    @property
    def capacity(self) -> int:
        return self.entries.shape[0]

    @property
    def occupancy(self) -> int:
        """Number of slots holding real keys rather than the random warmup rows."""
        return min(self.pushed, self.capacity)

    def push(self, keys: torch.Tensor) -> "KeyQueue":
        n, cap = keys.shape[0], self.capacity
        if n > cap:
            raise ValueError(f"cannot push {n} keys into a queue of capacity {cap}")
        if cap % n:
            raise ValueError(f"batch size {n} must divide queue capacity {cap}")
        if keys.shape[1] != self.entries.shape[1]:
            raise ValueError(f"key dim {keys.shape[1]} != queue dim {self.entries.shape[1]}")
        self.entries[self.cursor:self.cursor + n] = keys.detach().to(self.entries.dtype)
        self.cursor = (self.cursor + n) % cap
        self.pushed += n
        return self


def queue_push(queue: KeyQueue, keys: torch.Tensor) -> KeyQueue:
    return queue.push(keys)


def _queue_tensor(queue) -> torch.Tensor:
    return queue.entries if isinstance(queue, KeyQueue) else queue


def info_nce(q: torch.Tensor, k_pos: torch.Tensor, queue, tau: float,
             reduction: str = "mean") -> torch.Tensor:
    """-log softmax of the positive logit among [positive, queue negatives], batch mean."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    neg = _queue_tensor(queue)
    if q.shape != k_pos.shape:
        raise ValueError(f"query shape {tuple(q.shape)} != positive key shape {tuple(k_pos.shape)}")
    if q.shape[1] != neg.shape[1]:
        raise ValueError(f"embedding dim {q.shape[1]} != queue dim {neg.shape[1]}")
    l_pos = (q * k_pos).sum(dim=1, keepdim=True)
    l_neg = q @ neg.detach().T
    logits = torch.cat([l_pos, l_neg], dim=1) / tau
    logits = logits - logits.max(dim=1, keepdim=True).values.detach()
    losses = torch.logsumexp(logits, dim=1) - logits[:, 0]
    return losses.mean() if reduction == "mean" else losses


def mixmask_loss(z_mix: torch.Tensor, k: torch.Tensor, perm, queue, tau: float, lam: float):
    """Returns (l_up, l_down, lam * l_up + (1 - lam) * l_down).

    ``l_up`` pairs each mixture with the key of the image its mask keeps,
    ``l_down`` with the key of the partner that filled it.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    perm = torch.as_tensor(np.asarray(getattr(perm, "perm", perm)), dtype=torch.long)
    l_up = info_nce(z_mix, k, queue, tau)
    l_down = info_nce(z_mix, k[perm], queue, tau)
    return l_up, l_down, lam * l_up + (1 - lam) * l_down


@dataclass
class LossBreakdown:
    l_orig: object
    l_up: object = 0.0
    l_down: object = 0.0
    l_um: object = 0.0
    l_um_flip: object = 0.0
    lambda_mask: float = 1.0
    lambda_unmix: float = 1.0
    total: object = 0.0

    def floats(self) -> dict[str, float]:
        return {f.name: _scalar(getattr(self, f.name)) for f in fields(self)}


def _scalar(v) -> float:
    return float(v.detach()) if torch.is_tensor(v) else float(v)


_BRANCH_TERMS = {
    "mixmask": ("l_up", "l_down", "lambda_mask"),
    "unmix": ("l_um", "l_um_flip", "lambda_unmix"),
}


def total_loss(parts: dict, mixmask: bool = False, unmix: bool = False) -> LossBreakdown:
    """l_orig + lam_mask*l_up + (1-lam_mask)*l_down + lam_um*l_um + (1-lam_um)*l_um_flip.

    Terms of inactive branches are dropped; active branches must supply all of theirs.
    Values may be tensors, in which case ``total`` stays differentiable.
    """
    if "l_orig" not in parts:
        raise ValueError("missing l_orig")
    active = {"mixmask": mixmask, "unmix": unmix}
    terms = {"l_orig": parts["l_orig"]}
    for branch, names in _BRANCH_TERMS.items():
        if not active[branch]:
            continue
        missing = [n for n in names if n not in parts]
        if missing:
            raise ValueError(f"{branch} branch is active but {', '.join(missing)} not supplied")
        terms.update({n: parts[n] for n in names})
    for name, value in terms.items():
        v = _scalar(value)
        if not math.isfinite(v):
            raise FloatingPointError(f"{name} is not finite: {v}")
        if name.startswith("l_") and v < 0:
            raise ValueError(f"{name} must be nonnegative, got {v}")
        if name.startswith("lambda") and not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {v}")

    total = terms["l_orig"]
    if mixmask:
        lam = terms["lambda_mask"]
        total = total + lam * terms["l_up"] + (1 - lam) * terms["l_down"]
    if unmix:
        lam = terms["lambda_unmix"]
        total = total + lam * terms["l_um"] + (1 - lam) * terms["l_um_flip"]
    return LossBreakdown(total=total, **terms)
