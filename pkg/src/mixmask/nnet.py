"""Desk-scale conv encoder with projection head, EMA twin and checkpoints.

Checkpoint layout: a UTF-8 text manifest terminated by the line ``END``,
followed by the raw little-endian tensor bytes. Manifest lines::

    MIXMASK-CKPT 1
    meta <json: arch config, seed, step, extra>
    tensor <name> <dtype> <shape, comma separated> <byte offset> <byte length> <sha256>
    END
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

CKPT_MAGIC = "MIXMASK-CKPT"
CKPT_VERSION = 1
_DTYPES = {"float32": ("<f4", torch.float32), "float64": ("<f8", torch.float64), "int64": ("<i8", torch.int64)}


class CheckpointError(RuntimeError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 3
    image_size: int = 32
    widths: tuple[int, ...] = (32, 64, 128, 256)
    hidden_dim: int = 256
    embed_dim: int = 128
    norm: str = "batch"
    norm_groups: int = 1
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.norm not in _NORMS:
            raise ValueError(f"norm must be one of {sorted(_NORMS)}, got {self.norm!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


_ACTIVATIONS = {"relu": nn.ReLU, "silu": nn.SiLU, "gelu": nn.GELU}
_NORMS = {"batch": lambda groups, c: nn.BatchNorm2d(c), "group": lambda groups, c: nn.GroupNorm(min(groups, c), c)}


def l2_normalize(z: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Row-wise unit vectors; rows with norm < eps become the first basis vector."""
    norm = z.norm(dim=1, keepdim=True)
    small = norm < eps
    unit = z / torch.where(small, torch.ones_like(norm), norm)
    basis = torch.zeros_like(z)
    basis[:, 0] = 1.0
    return torch.where(small, basis, unit)


class Encoder(nn.Module):
    """Four stride-2 3x3 conv blocks, global average pool, 2-layer projection head."""

    def __init__(self, config: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.config = config
        act = _ACTIVATIONS[config.activation]
        chans = (config.in_channels, *config.widths)
        blocks = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            blocks += [nn.Conv2d(cin, cout, 3, stride=2, padding=1),
                       _NORMS[config.norm](config.norm_groups, cout), act()]
        self.backbone = nn.Sequential(*blocks, nn.AdaptiveAvgPool2d(1), nn.Flatten())
        self.head = nn.Sequential(nn.Linear(chans[-1], config.hidden_dim), act(),
                                  nn.Linear(config.hidden_dim, config.embed_dim))

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        c = self.config
        if x.ndim != 4 or x.shape[1] != c.in_channels or x.shape[-1] != c.image_size or x.shape[-2] != c.image_size:
            raise ValueError(f"expected N x {c.in_channels} x {c.image_size} x {c.image_size} input, "
                             f"got {tuple(x.shape)}")
        return l2_normalize(self.head(self.backbone(x)))


def build_encoder(config: EncoderConfig = EncoderConfig(), seed: int = 0,
                  dtype=torch.float32) -> Encoder:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = Encoder(config)
    return model.to(dtype)


def embed(model: nn.Module, batch, chunk: int = 1024) -> torch.Tensor:
    """Embeddings in eval mode without gradient tracking, evaluated in chunks.

    Eval mode makes batch norm use its running statistics, so every row depends
    on its own image only.
    """
    x = getattr(batch, "data", batch)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            return torch.cat([model(x[i:i + chunk]) for i in range(0, len(x), chunk)])
    finally:
        model.train(was_training)


def backward(model: nn.Module, batch, loss_fn) -> dict[str, torch.Tensor]:
    """Gradient of ``loss_fn(model, batch)`` w.r.t. every parameter (zeros where unused)."""
    model.zero_grad(set_to_none=True)
    loss = loss_fn(model, batch)
    if not torch.is_tensor(loss) or not torch.isfinite(loss).all():
        raise FloatingPointError(f"loss is not finite: {loss}")
    if loss.requires_grad:
        loss.backward()
    return {name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
            for name, p in model.named_parameters()}


@torch.no_grad()
def momentum_update(online: nn.Module, target: nn.Module, m: float) -> nn.Module:
    """target <- m * target + (1 - m) * online."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {m}")
    for p_o, p_t in zip(online.parameters(), target.parameters()):
        if p_o.shape != p_t.shape:
            raise ValueError("online and target parameter shapes differ")
        if m == 1.0:
            continue
        if m == 0.0:
            p_t.copy_(p_o)
        else:
            lo, hi = torch.minimum(p_t, p_o), torch.maximum(p_t, p_o)
            # clamp guards against rounding just past either endpoint
            p_t.lerp_(p_o, 1.0 - m).clamp_(min=lo, max=hi)
    for b_o, b_t in zip(online.buffers(), target.buffers()):
        b_t.copy_(b_o)
    return target


def make_target(online: nn.Module) -> nn.Module:
    target = copy.deepcopy(online)
    for p in target.parameters():
        p.requires_grad_(False)
    return target


def cosine_lr(base_lr: float, epoch: int, epochs: int) -> float:
    if epochs <= 0:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / epochs))


def make_optimizer(model: nn.Module, lr: float = 0.06, momentum: float = 0.9,
                   weight_decay: float = 5e-4) -> torch.optim.SGD:
    return torch.optim.SGD(model.parameters(), lr=lr, momentum=momentum, weight_decay=weight_decay)


# -- persistence -------------------------------------------------------------


def _dtype_name(t: torch.Tensor) -> str:
    for name, (_, dt) in _DTYPES.items():
        if t.dtype == dt:
            return name
    raise CheckpointError(f"unsupported tensor dtype {t.dtype}")


def save_tensors(path, tensors: dict[str, torch.Tensor], meta: dict) -> None:
    """Write ``tensors`` (float32/float64) and ``meta`` atomically to ``path``."""
    lines = [f"{CKPT_MAGIC} {CKPT_VERSION}", "meta " + json.dumps(meta, sort_keys=True)]
    blobs = []
    offset = 0
    for name, t in tensors.items():
        if any(ch.isspace() for ch in name):
            raise CheckpointError(f"tensor name {name!r} contains whitespace")
        dname = _dtype_name(t)
        raw = np.ascontiguousarray(t.detach().cpu().numpy(), dtype=_DTYPES[dname][0]).tobytes()
        shape = ",".join(str(s) for s in t.shape) or "-"
        lines.append(f"tensor {name} {dname} {shape} {offset} {len(raw)} {hashlib.sha256(raw).hexdigest()}")
        blobs.append(raw)
        offset += len(raw)
    lines.append("END")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode())
        for raw in blobs:
            f.write(raw)
    os.replace(tmp, path)


def load_tensors(path) -> tuple[dict[str, torch.Tensor], dict]:
    with open(path, "rb") as f:
        data = f.read()
    end = data.find(b"\nEND\n")
    if end < 0:
        raise CorruptCheckpointError(f"{path}: manifest terminator not found")
    try:
        header = data[:end].decode().split("\n")
    except UnicodeDecodeError as e:
        raise CorruptCheckpointError(f"{path}: unreadable manifest") from e
    body = memoryview(data)[end + len(b"\nEND\n"):]
    magic = header[0].split()
    if len(magic) != 2 or magic[0] != CKPT_MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint file")
    if magic[1] != str(CKPT_VERSION):
        raise CheckpointError(f"{path}: checkpoint version {magic[1]} but this build reads {CKPT_VERSION}")
    meta, tensors, expected_len = {}, {}, 0
    try:
        for line in header[1:]:
            kind, _, rest = line.partition(" ")
            if kind == "meta":
                meta = json.loads(rest)
                continue
            if kind != "tensor":
                raise CorruptCheckpointError(f"{path}: unexpected manifest line {line!r}")
            name, dname, shape, offset, length, digest = rest.split(" ")
            offset, length = int(offset), int(length)
            raw = bytes(body[offset:offset + length])
            if len(raw) != length or hashlib.sha256(raw).hexdigest() != digest:
                raise CorruptCheckpointError(f"{path}: checksum mismatch for tensor {name}")
            np_dtype, torch_dtype = _DTYPES[dname]
            dims = () if shape == "-" else tuple(int(s) for s in shape.split(","))
            arr = np.frombuffer(raw, dtype=np_dtype).reshape(dims)
            tensors[name] = torch.from_numpy(arr.copy()).to(torch_dtype)
            expected_len = max(expected_len, offset + length)
    except (ValueError, KeyError, json.JSONDecodeError) as e:
        raise CorruptCheckpointError(f"{path}: malformed manifest ({e})") from e
    if len(body) != expected_len:
        raise CorruptCheckpointError(f"{path}: payload is {len(body)} bytes, manifest expects {expected_len}")
    return tensors, meta


def save(model: Encoder, path, seed: int = 0, step: int = 0) -> None:
    meta = {"arch": model.config.to_dict(), "seed": seed, "step": step}
    save_tensors(path, dict(model.state_dict()), meta)


def load(path, config: EncoderConfig | None = None) -> tuple[Encoder, dict]:
    """Rebuild an encoder from ``path``; ``config`` (if given) must match the stored one."""
    tensors, meta = load_tensors(path)
    stored = EncoderConfig.from_dict(meta["arch"])
    check_arch(stored, config, path)
    dtype = next(iter(tensors.values())).dtype if tensors else torch.float32
    model = Encoder(stored).to(dtype)
    prefix = "online." if any(k.startswith("online.") for k in tensors) else ""
    state = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)} if prefix else tensors
    load_state(model, state, path)
    return model, meta


def check_arch(stored: EncoderConfig, expected: EncoderConfig | None, path="checkpoint") -> None:
    if expected is not None and stored != expected:
        raise CheckpointError(f"{path}: architecture mismatch, checkpoint has {stored.to_dict()} "
                              f"but {expected.to_dict()} was requested")


def load_state(model: nn.Module, state: dict[str, torch.Tensor], path="checkpoint") -> None:
    own = model.state_dict()
    if set(own) != set(state):
        raise CheckpointError(f"{path}: parameter names do not match the architecture")
    for name, t in state.items():
        if tuple(own[name].shape) != tuple(t.shape):
            raise CheckpointError(f"{path}: {name} has shape {tuple(t.shape)}, expected {tuple(own[name].shape)}")
    model.load_state_dict(state)
