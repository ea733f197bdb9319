"""MoCo-style pretraining with optional MixMask and Un-Mix branches."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from mixmask import nnet
from mixmask.datastore import denormalize, load_dataset, normalize, write_png
from mixmask.maskgen import GridMask, RatioPolicy, make_mask
from mixmask.mixer import Pairing, make_pairing, mix_batch, unmix_global, unmix_local
from mixmask.objective import KeyQueue, info_nce, mixmask_loss, total_loss
from mixmask.rng import derive_seed, stream

log = logging.getLogger(__name__)

DETERMINISTIC_ENV = "MIXMASK_DETERMINISTIC"


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 512
    seed: int = 0
    dataset: str = "synthetic:striped-classes,classes=10,per_class=200"
    image_size: int = 32
    mixmask: bool = True
    grid_n: int = 2
    mask_pattern: str = "blocked"
    ratio: str = "0.5"
    fill_mode: str = "image"
    unmix: bool = False
    unmix_global_prob: float = 0.5
    permutation_policy: str = "different"
    tau: float = 0.10
    queue_k: int = 4096
    momentum_m: float = 0.99
    lr: float = 0.06
    sgd_momentum: float = 0.9
    weight_decay: float = 5e-4
    widths: tuple = (32, 64, 128, 256)
    hidden_dim: int = 256
    embed_dim: int = 128
    activation: str = "relu"
    norm: str = "batch"
    crop_scale_min: float = 0.2
    flip_prob: float = 0.5
    jitter: float = 0.4
    workers: int = 1
    prefetch: int = 2
    deterministic: bool = False

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if (self.mixmask or self.unmix) and self.batch_size < 2:
            raise ValueError("mixing branches need batch_size >= 2")
        if not 0.0 <= self.unmix_global_prob <= 1.0:
            raise ValueError(f"unmix_global_prob must lie in [0, 1], got {self.unmix_global_prob}")
        if self.permutation_policy not in ("same", "different"):
            raise ValueError(f"permutation_policy must be 'same' or 'different', got {self.permutation_policy!r}")
        if self.mask_pattern not in ("blocked", "discrete"):
            raise ValueError(f"unknown mask_pattern {self.mask_pattern!r}")
        if self.fill_mode not in ("image", "zero", "gaussian"):
            raise ValueError(f"unknown fill_mode {self.fill_mode!r}")
        if self.image_size % self.grid_n:
            raise ValueError(f"grid_n={self.grid_n} must divide image_size={self.image_size}")
        if self.queue_k % self.batch_size:
            raise ValueError(f"batch_size={self.batch_size} must divide queue_k={self.queue_k}")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.activation not in ("relu", "silu", "gelu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        self.ratio_policy  # validates
        self.encoder_config  # validates norm

    @property
    def ratio_policy(self) -> RatioPolicy:
        return RatioPolicy.parse(self.ratio)

    @property
    def encoder_config(self) -> nnet.EncoderConfig:
        return nnet.EncoderConfig(image_size=self.image_size, widths=self.widths, hidden_dim=self.hidden_dim,
                                  embed_dim=self.embed_dim, activation=self.activation, norm=self.norm)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        return cls(**d)


def load_config(path) -> dict:
    """Flat ``key = value`` TOML file -> dict (values keep their TOML types)."""
    try:
        import tomllib
    except ModuleNotFoundError:  # python < 3.11
        import tomli as tomllib

    with open(path, "rb") as f:
        data = tomllib.load(f)
    nested = [k for k, v in data.items() if isinstance(v, dict)]
    if nested:
        raise ValueError(f"{path}: config must be flat, found tables {nested}")
    return data


def dump_config(config: TrainConfig) -> str:
    lines = []
    for k, v in config.to_dict().items():
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, (int, float)):
            v = repr(v)
        elif isinstance(v, list):
            v = "[" + ", ".join(repr(x) for x in v) + "]"
        else:
            v = json.dumps(v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def deterministic_mode(config: TrainConfig) -> bool:
    return config.deterministic or os.environ.get(DETERMINISTIC_ENV, "") == "1"


# -- augmentation --------------------------------------------------------------


@dataclass(frozen=True)
class AugmentParams:
    scale: tuple[float, float] = (0.2, 1.0)
    ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_prob: float = 0.5
    jitter: float = 0.4


def augment_batch(x: torch.Tensor, rng, mean, std, params: AugmentParams = AugmentParams()) -> torch.Tensor:
    """Random resized crop, horizontal flip, brightness/contrast jitter; one draw per image."""
    n = x.shape[0]
    area = rng.uniform(*params.scale, size=n)
    log_r = rng.uniform(math.log(params.ratio[0]), math.log(params.ratio[1]), size=n)
    w = np.minimum(np.sqrt(area * np.exp(log_r)), 1.0)
    h = np.minimum(np.sqrt(area / np.exp(log_r)), 1.0)
    cx = rng.uniform(-1.0, 1.0, size=n) * (1.0 - w)
    cy = rng.uniform(-1.0, 1.0, size=n) * (1.0 - h)
    flip = np.where(rng.random(n) < params.flip_prob, -1.0, 1.0)
    bright = rng.uniform(1 - params.jitter, 1 + params.jitter, size=n)
    contrast = rng.uniform(1 - params.jitter, 1 + params.jitter, size=n)

    theta = np.zeros((n, 2, 3))
    theta[:, 0, 0], theta[:, 0, 2] = w * flip, cx
    theta[:, 1, 1], theta[:, 1, 2] = h, cy
    theta = torch.from_numpy(theta).to(x.dtype)
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    out = F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=False)
    if params.jitter > 0:
        px = denormalize(out, mean, std)
        px = px * torch.from_numpy(bright).to(x.dtype).view(-1, 1, 1, 1)
        mu = px.mean(dim=(1, 2, 3), keepdim=True)
        px = (px - mu) * torch.from_numpy(contrast).to(x.dtype).view(-1, 1, 1, 1) + mu
        out = normalize(px.clamp(0.0, 1.0), mean, std)
    return out


def augment_view(image: torch.Tensor, rng, mean=(0.0,) * 3, std=(1.0,) * 3,
                 params: AugmentParams = AugmentParams()) -> torch.Tensor:
    return augment_batch(image[None], rng, mean, std, params)[0]


# -- one step --------------------------------------------------------------------


@dataclass
class StepInputs:
    """Everything random about one step, prepared ahead of the optimizer."""

    step: int
    x_q: torch.Tensor
    x_k: torch.Tensor
    mask: GridMask | None = None
    pairing: Pairing | None = None
    x_mix: torch.Tensor | None = None
    lambda_mask: float = 1.0
    x_unmix: torch.Tensor | None = None
    lambda_unmix: float = 1.0
    unmix_mode: str = ""


def _mask_for(config: TrainConfig, ratio: float, rng) -> GridMask:
    n = config.grid_n
    if config.mask_pattern == "blocked" and ratio <= 0.0:
        return GridMask(np.ones((n, n)))
    if config.mask_pattern == "blocked" and ratio >= 1.0:
        return GridMask(np.zeros((n, n)))
    return make_mask(config.mask_pattern, n, ratio, rng)


def prepare_step(config: TrainConfig, images: torch.Tensor, step: int, mean, std,
                 mask: GridMask | None = None) -> StepInputs:
    """Two augmented views plus the mixtures for the enabled branches.

    Draws come from streams keyed by ``(seed, step)``, so the result does not
    depend on which worker prepares it. ``mask`` overrides the generated mask.
    """
    seed, n = config.seed, images.shape[0]
    aug = AugmentParams((config.crop_scale_min, 1.0), flip_prob=config.flip_prob, jitter=config.jitter)
    inputs = StepInputs(step,
                        augment_batch(images, stream(seed, "view_q", step), mean, std, aug),
                        augment_batch(images, stream(seed, "view_k", step), mean, std, aug))
    if config.unmix:
        rng = stream(seed, "unmix", step)
        lam = float(rng.beta(1.0, 1.0))
        if rng.random() < config.unmix_global_prob:
            um = unmix_global(inputs.x_q, lam=lam)
        else:
            um = unmix_local(inputs.x_q, lam, rng)
        inputs.x_unmix, inputs.lambda_unmix, inputs.unmix_mode = um.mixed, um.lambda_unmix, um.mode
    if config.mixmask:
        rng = stream(seed, "mixmask", step)
        if mask is None:
            mask = _mask_for(config, config.ratio_policy.sample(rng), rng)
        if config.unmix and config.permutation_policy == "different":
            pairing = make_pairing("random", n, seed=derive_seed(rng))
        else:
            pairing = make_pairing("reverse", n)
        pixel = mask.expand(images.shape[-2], images.shape[-1])
        mixed = mix_batch(inputs.x_q, pixel, pairing, config.fill_mode, noise_seed=derive_seed(rng))
        inputs.mask, inputs.pairing, inputs.x_mix, inputs.lambda_mask = mask, pairing, mixed.mixtures, mixed.lam
    return inputs


@dataclass
class TrainState:
    online: nnet.Encoder
    target: torch.nn.Module
    optimizer: torch.optim.Optimizer
    queue: KeyQueue
    step: int = 0
    epoch: int = 0


def init_state(config: TrainConfig, dtype=torch.float32) -> TrainState:
    online = nnet.build_encoder(config.encoder_config, seed=config.seed, dtype=dtype)
    queue = KeyQueue.random(config.queue_k, config.embed_dim, stream(config.seed, "queue"), dtype=dtype)
    opt = nnet.make_optimizer(online, config.lr, config.sgd_momentum, config.weight_decay)
    return TrainState(online, nnet.make_target(online), opt, queue)


METRIC_FIELDS = ["step", "epoch", "l_orig", "l_up", "l_down", "l_um", "l_um_flip", "lambda_mask",
                 "lambda_unmix", "total", "lr", "ms_per_batch", "mixmask", "unmix", "unmix_mode",
                 "mask_pairing", "mask_perm_is_reverse", "mask_perm_digest", "unmix_perm_digest",
                 "queue_occupancy"]


def perm_digest(perm) -> str:
    return hashlib.sha1(np.asarray(perm, dtype=np.int64).tobytes()).hexdigest()[:12]


def compute_losses(config: TrainConfig, state: TrainState, inputs: StepInputs):
    """Loss breakdown for one step (differentiable ``total``) and the clean keys."""
    with torch.no_grad():
        k = state.target(inputs.x_k)
    views = [inputs.x_q]
    if config.mixmask:
        views.append(inputs.x_mix)
    if config.unmix:
        views.append(inputs.x_unmix)
    # one forward pass per view: with batch norm each view keeps its own statistics
    z = [state.online(v) for v in views]
    parts = {"l_orig": info_nce(z[0], k, state.queue, config.tau)}
    if config.mixmask:
        l_up, l_down, _ = mixmask_loss(z[1], k, inputs.pairing, state.queue, config.tau, inputs.lambda_mask)
        parts.update(l_up=l_up, l_down=l_down, lambda_mask=inputs.lambda_mask)
    if config.unmix:
        z_um = z[-1]
        parts.update(l_um=info_nce(z_um, k, state.queue, config.tau),
                     l_um_flip=info_nce(z_um, torch.flip(k, (0,)), state.queue, config.tau),
                     lambda_unmix=inputs.lambda_unmix)
    return total_loss(parts, mixmask=config.mixmask, unmix=config.unmix), k


def train_step(config: TrainConfig, state: TrainState, inputs: StepInputs) -> dict:
    t0 = time.perf_counter()
    state.online.train()
    breakdown, k = compute_losses(config, state, inputs)
    state.optimizer.zero_grad(set_to_none=True)
    breakdown.total.backward()
    state.optimizer.step()
    nnet.momentum_update(state.online, state.target, config.momentum_m)
    state.queue.push(k)
    n = inputs.x_q.shape[0]
    row = {"step": state.step, "epoch": state.epoch, **breakdown.floats(),
           "lr": state.optimizer.param_groups[0]["lr"],
           "ms_per_batch": (time.perf_counter() - t0) * 1e3,
           "mixmask": int(config.mixmask), "unmix": int(config.unmix), "unmix_mode": inputs.unmix_mode,
           "mask_pairing": inputs.pairing.kind if inputs.pairing is not None else "",
           "mask_perm_is_reverse": int(inputs.pairing.is_reverse) if inputs.pairing is not None else "",
           "mask_perm_digest": perm_digest(inputs.pairing.perm) if inputs.pairing is not None else "",
           "unmix_perm_digest": perm_digest(np.arange(n)[::-1]) if config.unmix else "",
           "queue_occupancy": state.queue.occupancy}
    state.step += 1
    return row


# -- persistence -----------------------------------------------------------------


def save_state(path, config: TrainConfig, state: TrainState) -> None:
    tensors = {f"online.{k}": v for k, v in state.online.state_dict().items()}
    tensors.update({f"target.{k}": v for k, v in state.target.state_dict().items()})
    for name, p in state.online.named_parameters():
        buf = state.optimizer.state.get(p, {}).get("momentum_buffer")
        if buf is not None:
            tensors[f"optim.{name}"] = buf
    tensors["queue.entries"] = state.queue.entries
    meta = {"arch": state.online.config.to_dict(), "seed": config.seed, "step": state.step,
            "epoch": state.epoch, "queue_cursor": state.queue.cursor, "queue_pushed": state.queue.pushed,
            "config": config.to_dict()}
    nnet.save_tensors(path, tensors, meta)


def load_state(path, config: TrainConfig) -> TrainState:
    tensors, meta = nnet.load_tensors(path)
    nnet.check_arch(nnet.EncoderConfig.from_dict(meta["arch"]), config.encoder_config, path)
    state = init_state(config, dtype=tensors["queue.entries"].dtype)

    def pick(prefix):
        return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}

    nnet.load_state(state.online, pick("online."), path)
    nnet.load_state(state.target, pick("target."), path)
    bufs = pick("optim.")
    for name, p in state.online.named_parameters():
        if name in bufs:
            state.optimizer.state[p]["momentum_buffer"] = bufs[name].clone()
    state.queue = KeyQueue(tensors["queue.entries"].clone(), meta["queue_cursor"], meta["queue_pushed"])
    state.step, state.epoch = meta["step"], meta["epoch"]
    return state


# -- data pipeline ---------------------------------------------------------------


def prefetch(fn, count: int, workers: int = 1, depth: int = 2):
    """Yield ``fn(0) .. fn(count - 1)`` in order, with at most ``depth`` items in flight."""
    if workers <= 1:
        for i in range(count):
            yield fn(i)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending = deque()
        for i in range(count):
            pending.append(pool.submit(fn, i))
            if len(pending) > depth:
                yield pending.popleft().result()
        while pending:
            yield pending.popleft().result()


# -- full run ----------------------------------------------------------------------


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def _truncate_metrics(path, keep_below_step: int) -> None:
    if not os.path.exists(path):
        return
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        return
    kept = [rows[0]] + [r for r in rows[1:] if r and int(r[0]) < keep_below_step]
    with open(path, "w", newline="") as f:
        csv.writer(f).writerows(kept)


@dataclass
class RunResult:
    out_dir: str
    checkpoint: str
    metrics: str
    steps: int
    completed: bool
    state: TrainState = field(repr=False, default=None)


def run(config: TrainConfig, out_dir, stop_after_epochs: int | None = None, dataset=None) -> RunResult:
    """Train for ``config.epochs`` epochs, resuming from ``out_dir/checkpoints/last.ckpt`` if present.

    ``stop_after_epochs`` ends the call early (as an interruption would) once that
    many epochs have completed in this call; a later call resumes.
    """
    deterministic = deterministic_mode(config)
    if not deterministic:
        return _run(config, out_dir, stop_after_epochs, dataset, workers=config.workers)
    prev = torch.are_deterministic_algorithms_enabled(), torch.get_num_threads()
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)
    try:
        return _run(config, out_dir, stop_after_epochs, dataset, workers=1, deterministic=True)
    finally:
        torch.use_deterministic_algorithms(prev[0])
        torch.set_num_threads(prev[1])


def _run(config, out_dir, stop_after_epochs, dataset, workers, deterministic=False) -> RunResult:

    data = dataset if dataset is not None else load_dataset(config.dataset)
    if data.data.shape[-1] != config.image_size or data.data.shape[-2] != config.image_size:
        raise ValueError(f"dataset images are {tuple(data.data.shape[-2:])}, config expects {config.image_size}")
    n = len(data)
    steps_per_epoch = n // config.batch_size
    if steps_per_epoch == 0 and config.epochs > 0:
        raise ValueError(f"dataset has {n} images, fewer than one batch of {config.batch_size}")

    ckpt_dir = os.path.join(out_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    os.makedirs(os.path.join(out_dir, "previews"), exist_ok=True)
    with open(os.path.join(out_dir, "config.toml"), "w") as f:
        f.write(dump_config(config))
    metrics_path = os.path.join(out_dir, "metrics.csv")
    timing_path = os.path.join(out_dir, "timing.csv")
    last = os.path.join(ckpt_dir, "last.ckpt")

    if os.path.exists(last):
        state = load_state(last, config)
        log.info("resuming from %s at step %d (epoch %d)", last, state.step, state.epoch)
    else:
        state = init_state(config)
        for p in (metrics_path, timing_path):
            if os.path.exists(p):
                os.remove(p)
        if state.epoch == 0:
            save_state(os.path.join(ckpt_dir, "epoch_0000.ckpt"), config, state)
            save_state(last, config, state)
    _truncate_metrics(metrics_path, state.step)
    _truncate_metrics(timing_path, state.step)

    new_file = not os.path.exists(metrics_path)
    with open(metrics_path, "a", newline="") as mf, open(timing_path, "a", newline="") as tf:
        writer = csv.DictWriter(mf, METRIC_FIELDS)
        timing = csv.writer(tf)
        if new_file:
            writer.writeheader()
            timing.writerow(["step", "ms_per_batch"])
        done_here = 0
        while state.epoch < config.epochs:
            if stop_after_epochs is not None and done_here >= stop_after_epochs:
                return RunResult(out_dir, last, metrics_path, state.step, False, state)
            epoch = state.epoch
            lr = nnet.cosine_lr(config.lr, epoch, config.epochs)
            for g in state.optimizer.param_groups:
                g["lr"] = lr
            order = torch.from_numpy(stream(config.seed, "epoch", epoch).permutation(n))
            first_step = epoch * steps_per_epoch

            def prep(i):
                idx = order[i * config.batch_size:(i + 1) * config.batch_size]
                return prepare_step(config, data.data[idx], first_step + i, data.mean, data.std)

            for inputs in prefetch(prep, steps_per_epoch, workers, config.prefetch):
                if inputs.step == 0:
                    write_previews(os.path.join(out_dir, "previews"), inputs, data.mean, data.std)
                try:
                    row = train_step(config, state, inputs)
                except FloatingPointError as e:
                    _dump_diagnostic(out_dir, config, state, inputs, e)
                    raise TrainingError(f"non-finite loss at step {state.step}: {e}") from e
                timing.writerow([row["step"], f"{row['ms_per_batch']:.3f}"])
                if deterministic:
                    row["ms_per_batch"] = ""  # wall-clock would break byte-identical reruns
                writer.writerow({k: _fmt(v) for k, v in row.items()})
            mf.flush()
            tf.flush()
            state.epoch += 1
            save_state(os.path.join(ckpt_dir, f"epoch_{state.epoch:04d}.ckpt"), config, state)
            save_state(last, config, state)
            done_here += 1
            log.info("epoch %d/%d done, step %d, last total %.4f", state.epoch, config.epochs, state.step,
                     row["total"])
    return RunResult(out_dir, last, metrics_path, state.step, True, state)


def write_previews(out_dir, inputs: StepInputs, mean, std, count: int = 4) -> None:
    """PNGs of the first ``count`` query views and the mixtures built from them."""
    size = inputs.x_q.shape[-1]
    for i in range(min(count, inputs.x_q.shape[0])):
        write_png(inputs.x_q[i], os.path.join(out_dir, f"view_{i}.png"), mean, std)
        if inputs.x_mix is not None:
            write_png(inputs.x_mix[i], os.path.join(out_dir, f"mixture_{i}.png"), mean, std)
        if inputs.x_unmix is not None:
            write_png(inputs.x_unmix[i], os.path.join(out_dir, f"unmix_{i}.png"), mean, std)
    if inputs.mask is not None:
        write_png(inputs.mask.expand(size, size), os.path.join(out_dir, "mask.png"))


def _dump_diagnostic(out_dir, config, state, inputs, err) -> None:
    info = {"error": str(err), "step": state.step, "epoch": state.epoch,
            "lambda_mask": inputs.lambda_mask, "lambda_unmix": inputs.lambda_unmix,
            "unmix_mode": inputs.unmix_mode,
            "input_finite": bool(torch.isfinite(inputs.x_q).all() and torch.isfinite(inputs.x_k).all()),
            "param_finite": {n: bool(torch.isfinite(p).all()) for n, p in state.online.named_parameters()},
            "config": config.to_dict()}
    with open(os.path.join(out_dir, "diagnostic.json"), "w") as f:
        json.dump(info, f, indent=2)
